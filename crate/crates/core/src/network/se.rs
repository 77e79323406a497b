//! Squeeze-and-excitation channel attention.
//!
//! `s = sigmoid(W2 · relu(W1 · avgpool(x) + b1) + b2)`, output `x * s`
//! per channel. `W1` maps `C -> C / r`, `W2` maps `C / r -> C`.

use ndarray::Array4;
use rand::Rng;

use super::layers::{slice, slice_mut};
use super::param::Param;

#[derive(Debug, Clone)]
struct SeCache {
    x: Array4<f32>,
    pooled: Vec<f32>,
    hidden: Vec<f32>,
    gate: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct SeBlock {
    pub channels: usize,
    pub reduced: usize,
    /// `(reduced, channels)`
    pub fc1_weight: Param,
    pub fc1_bias: Param,
    /// `(channels, reduced)`
    pub fc2_weight: Param,
    pub fc2_bias: Param,
    cache: Option<SeCache>,
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

impl SeBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, reduction: usize, rng: &mut R) -> Self {
        assert!(
            reduction > 0 && channels.is_multiple_of(reduction) && channels / reduction > 0,
            "reduction {reduction} must divide {channels} channels"
        );
        let reduced = channels / reduction;
        Self {
            channels,
            reduced,
            fc1_weight: Param::kaiming(format!("{name}.fc1.weight"), &[reduced, channels], channels, rng),
            fc1_bias: Param::zeros(format!("{name}.fc1.bias"), &[reduced]),
            fc2_weight: Param::kaiming(format!("{name}.fc2.weight"), &[channels, reduced], reduced, rng),
            fc2_bias: Param::zeros(format!("{name}.fc2.bias"), &[channels]),
            cache: None,
        }
    }

    /// Pooled descriptor, hidden activations and gate for one sample.
    fn excite(&self, plane_sums: &[f32], hw: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let pooled: Vec<f32> = plane_sums.iter().map(|&s| s / hw as f32).collect();
        let hidden: Vec<f32> = (0..self.reduced)
            .map(|j| {
                let row = &self.fc1_weight.value[j * self.channels..(j + 1) * self.channels];
                let a = self.fc1_bias.value[j] + row.iter().zip(&pooled).map(|(w, z)| w * z).sum::<f32>();
                a.max(0.0)
            })
            .collect();
        let gate: Vec<f32> = (0..self.channels)
            .map(|c| {
                let row = &self.fc2_weight.value[c * self.reduced..(c + 1) * self.reduced];
                sigmoid(self.fc2_bias.value[c] + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f32>())
            })
            .collect();
        (pooled, hidden, gate)
    }

    fn run(&self, x: &Array4<f32>) -> (Array4<f32>, Vec<(Vec<f32>, Vec<f32>, Vec<f32>)>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "squeeze-excitation channels");
        let hw = h * w;
        let mut y = x.clone();
        let mut per_sample = Vec::with_capacity(n);
        for sample in slice_mut(&mut y).chunks_exact_mut(c * hw) {
            let sums: Vec<f32> = sample.chunks_exact(hw).map(|p| p.iter().sum()).collect();
            let (pooled, hidden, gate) = self.excite(&sums, hw);
            for (plane, &g) in sample.chunks_exact_mut(hw).zip(&gate) {
                plane.iter_mut().for_each(|v| *v *= g);
            }
            per_sample.push((pooled, hidden, gate));
        }
        (y, per_sample)
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        self.run(x).0
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let (y, stats) = self.run(x);
        let mut pooled = Vec::new();
        let mut hidden = Vec::new();
        let mut gate = Vec::new();
        for (p, h, g) in stats {
            pooled.extend(p);
            hidden.extend(h);
            gate.extend(g);
        }
        self.cache = Some(SeCache {
            x: x.clone(),
            pooled,
            hidden,
            gate,
        });
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let SeCache { x, pooled, hidden, gate } = self.cache.take().expect("forward_train precedes backward");
        let (n, c, h, w) = x.dim();
        let (hw, r) = (h * w, self.reduced);
        let mut dx = dy.clone();
        let (xs, dys) = (slice(&x), slice(dy));
        let dxs = slice_mut(&mut dx);
        for i in 0..n {
            let (z, hid, g) = (&pooled[i * c..(i + 1) * c], &hidden[i * r..(i + 1) * r], &gate[i * c..(i + 1) * c]);
            let base = i * c * hw;
            // d(gate pre-activation)
            let da2: Vec<f32> = (0..c)
                .map(|ch| {
                    let xp = &xs[base + ch * hw..base + (ch + 1) * hw];
                    let dp = &dys[base + ch * hw..base + (ch + 1) * hw];
                    let ds: f32 = xp.iter().zip(dp).map(|(a, b)| a * b).sum();
                    ds * g[ch] * (1.0 - g[ch])
                })
                .collect();
            let mut dhid = vec![0.0f32; r];
            for ch in 0..c {
                self.fc2_bias.grad[ch] += da2[ch];
                for j in 0..r {
                    self.fc2_weight.grad[ch * r + j] += da2[ch] * hid[j];
                    dhid[j] += self.fc2_weight.value[ch * r + j] * da2[ch];
                }
            }
            let mut dz = vec![0.0f32; c];
            for j in 0..r {
                let da1 = if hid[j] > 0.0 { dhid[j] } else { 0.0 };
                self.fc1_bias.grad[j] += da1;
                for ch in 0..c {
                    self.fc1_weight.grad[j * c + ch] += da1 * z[ch];
                    dz[ch] += self.fc1_weight.value[j * c + ch] * da1;
                }
            }
            for ch in 0..c {
                let spread = dz[ch] / hw as f32;
                for v in &mut dxs[base + ch * hw..base + (ch + 1) * hw] {
                    *v = *v * g[ch] + spread;
                }
            }
        }
        dx
    }

    pub(crate) fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.extend([&self.fc1_weight, &self.fc1_bias, &self.fc2_weight, &self.fc2_bias]);
    }

    pub(crate) fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.extend([
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]);
    }
}
