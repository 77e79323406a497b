//! Layers with hand-written backward passes. Every layer works on
//! contiguous `(N, C, H, W)` arrays; `forward` is the inference path and
//! `forward_train` additionally records what `backward` needs.

use ndarray::{concatenate, s, Array4, Axis};
use rand::Rng;

use super::param::{gemm, Param};

pub(crate) fn slice(a: &Array4<f32>) -> &[f32] {
    a.as_slice().expect("feature maps are contiguous")
}

pub(crate) fn slice_mut(a: &mut Array4<f32>) -> &mut [f32] {
    a.as_slice_mut().expect("feature maps are contiguous")
}

/// Unfolds one `(C, H, W)` image into `(C*9, H*W)` patch columns for a
/// 3x3 kernel with zero padding 1.
fn im2col3(x: &[f32], c: usize, h: usize, w: usize, cols: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates patch columns back into an image.
fn col2im3(cols: &[f32], c: usize, h: usize, w: usize, x: &mut [f32]) {
    let hw = h * w;
    x[..c * hw].fill(0.0);
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution with a square 1x1 or 3x3 kernel and "same" padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Array4<f32>>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels are supported");
        let fan_in = in_ch * kernel * kernel;
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: Param::kaiming(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], fan_in, rng),
            bias: bias.then(|| Param::zeros(format!("{name}.bias"), &[out_ch])),
            input: None,
        }
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let hw = h * w;
        let mut y = Array4::<f32>::zeros((n, self.out_ch, h, w));
        let mut cols = if self.kernel == 3 { vec![0.0; self.patch_len() * hw] } else { Vec::new() };
        let xs = slice(x);
        let ys = slice_mut(&mut y);
        for i in 0..n {
            let xi = &xs[i * c * hw..(i + 1) * c * hw];
            let yi = &mut ys[i * self.out_ch * hw..(i + 1) * self.out_ch * hw];
            let b: &[f32] = if self.kernel == 3 {
                im2col3(xi, c, h, w, &mut cols);
                &cols
            } else {
                xi
            };
            gemm(self.out_ch, self.patch_len(), hw, &self.weight.value, false, b, false, yi, false);
            if let Some(bias) = &self.bias {
                for (plane, &bv) in yi.chunks_exact_mut(hw).zip(&bias.value) {
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        y
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> Array4<f32> {
        self.input = Some(x.clone());
        self.forward(x)
    }

    pub(crate) fn cached_input(&self) -> &Array4<f32> {
        self.input.as_ref().expect("forward_train precedes backward")
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let x = self.input.take().expect("forward_train precedes backward");
        let (n, c, h, w) = x.dim();
        assert_eq!(dy.dim(), (n, self.out_ch, h, w), "conv output gradient shape");
        let hw = h * w;
        let k = self.patch_len();
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let mut cols = if self.kernel == 3 { vec![0.0; k * hw] } else { Vec::new() };
        let mut dcols = vec![0.0; if self.kernel == 3 { k * hw } else { 0 }];
        let (xs, dys) = (slice(&x), slice(dy));
        let dxs = slice_mut(&mut dx);
        for i in 0..n {
            let xi = &xs[i * c * hw..(i + 1) * c * hw];
            let dyi = &dys[i * self.out_ch * hw..(i + 1) * self.out_ch * hw];
            let dxi = &mut dxs[i * c * hw..(i + 1) * c * hw];
            let patches: &[f32] = if self.kernel == 3 {
                im2col3(xi, c, h, w, &mut cols);
                &cols
            } else {
                xi
            };
            gemm(self.out_ch, hw, k, dyi, false, patches, true, &mut self.weight.grad, true);
            if self.kernel == 3 {
                gemm(k, self.out_ch, hw, &self.weight.value, true, dyi, false, &mut dcols, false);
                col2im3(&dcols, c, h, w, dxi);
            } else {
                gemm(k, self.out_ch, hw, &self.weight.value, true, dyi, false, dxi, false);
            }
            if let Some(bias) = &mut self.bias {
                for (g, plane) in bias.grad.iter_mut().zip(dyi.chunks_exact(hw)) {
                    *g += plane.iter().sum::<f32>();
                }
            }
        }
        dx
    }

    pub(crate) fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.weight);
        out.extend(self.bias.as_ref());
    }

    pub(crate) fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        out.extend(self.bias.as_mut());
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Array4<f32>,
    inv_std: Vec<f32>,
}

/// Per-channel batch normalization. Training normalizes with batch
/// statistics and updates running estimates; inference uses the estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(name: &str, ch: usize) -> Self {
        Self {
            gamma: Param::trainable(format!("{name}.weight"), &[ch], vec![1.0; ch]),
            beta: Param::zeros(format!("{name}.bias"), &[ch]),
            running_mean: Param::buffer(format!("{name}.running_mean"), &[ch], vec![0.0; ch]),
            running_var: Param::buffer(format!("{name}.running_var"), &[ch], vec![1.0; ch]),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (_, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch-norm channels");
        let hw = h * w;
        let mut y = x.clone();
        for (idx, plane) in slice_mut(&mut y).chunks_exact_mut(hw).enumerate() {
            let ch = idx % c;
            let scale = self.gamma.value[ch] / (self.running_var.value[ch] + self.eps).sqrt();
            let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
            plane.iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        y
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch-norm channels");
        let hw = h * w;
        let count = (n * hw) as f64;
        let xs = slice(x);
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for (idx, plane) in xs.chunks_exact(hw).enumerate() {
            mean[idx % c] += plane.iter().map(|&v| f64::from(v)).sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (idx, plane) in xs.chunks_exact(hw).enumerate() {
            let m = mean[idx % c];
            var[idx % c] += plane.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= count);

        let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / (v + f64::from(self.eps)).sqrt()) as f32).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for (idx, (xp, yp)) in slice_mut(&mut xhat)
            .chunks_exact_mut(hw)
            .zip(slice_mut(&mut y).chunks_exact_mut(hw))
            .enumerate()
        {
            let ch = idx % c;
            let (m, is) = (mean[ch] as f32, inv_std[ch]);
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for (xv, yv) in xp.iter_mut().zip(yp.iter_mut()) {
                *xv = (*xv - m) * is;
                *yv = *xv * g + b;
            }
        }

        let mom = f64::from(self.momentum);
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ch in 0..c {
            let rm = &mut self.running_mean.value[ch];
            *rm = ((1.0 - mom) * f64::from(*rm) + mom * mean[ch]) as f32;
            let rv = &mut self.running_var.value[ch];
            *rv = ((1.0 - mom) * f64::from(*rv) + mom * var[ch] * unbias) as f32;
        }
        self.cache = Some(BnCache { xhat, inv_std });
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let BnCache { xhat, inv_std } = self.cache.take().expect("forward_train precedes backward");
        let (n, c, h, w) = xhat.dim();
        assert_eq!(dy.dim(), xhat.dim(), "batch-norm output gradient shape");
        let hw = h * w;
        let count = (n * hw) as f32;
        let (xs, dys) = (slice(&xhat), slice(dy));
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for (idx, (xp, dp)) in xs.chunks_exact(hw).zip(dys.chunks_exact(hw)).enumerate() {
            let ch = idx % c;
            dgamma[ch] += xp.iter().zip(dp).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum::<f64>();
            dbeta[ch] += dp.iter().map(|&v| f64::from(v)).sum::<f64>();
        }
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        for (idx, ((xp, dp), out)) in xs
            .chunks_exact(hw)
            .zip(dys.chunks_exact(hw))
            .zip(slice_mut(&mut dx).chunks_exact_mut(hw))
            .enumerate()
        {
            let ch = idx % c;
            let k = self.gamma.value[ch] * inv_std[ch] / count;
            let (dg, db) = (dgamma[ch] as f32, dbeta[ch] as f32);
            for ((o, &xv), &dv) in out.iter_mut().zip(xp).zip(dp) {
                *o = k * (count * dv - db - xv * dg);
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] += dgamma[ch] as f32;
            self.beta.grad[ch] += dbeta[ch] as f32;
        }
        dx
    }

    pub(crate) fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.extend([&self.gamma, &self.beta, &self.running_mean, &self.running_var]);
    }

    pub(crate) fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.extend([
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]);
    }
}

fn relu_inplace(x: &mut Array4<f32>) {
    slice_mut(x).iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the ReLU output was not positive.
fn relu_backward(dy: &mut Array4<f32>, out: &Array4<f32>) {
    for (d, &o) in slice_mut(dy).iter_mut().zip(slice(out)) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Two rounds of [3x3 conv, padding 1 -> batch norm -> ReLU].
#[derive(Debug, Clone)]
pub struct DoubleConv {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    out: Option<Array4<f32>>,
}

impl DoubleConv {
    pub fn new<R: Rng + ?Sized>(name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, 3, false, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), out_ch),
            conv2: Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, 3, false, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), out_ch),
            out: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_ch
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let mut h = self.bn1.forward(&self.conv1.forward(x));
        relu_inplace(&mut h);
        let mut y = self.bn2.forward(&self.conv2.forward(&h));
        relu_inplace(&mut y);
        y
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let a = self.conv1.forward_train(x);
        let mut h = self.bn1.forward_train(&a);
        relu_inplace(&mut h);
        let b = self.conv2.forward_train(&h);
        let mut y = self.bn2.forward_train(&b);
        relu_inplace(&mut y);
        self.out = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let out = self.out.take().expect("forward_train precedes backward");
        let mut d = dy.clone();
        relu_backward(&mut d, &out);
        let d = self.bn2.backward(&d);
        let h = self.conv2.cached_input().clone();
        let mut d = self.conv2.backward(&d);
        relu_backward(&mut d, &h);
        let d = self.bn1.backward(&d);
        self.conv1.backward(&d)
    }

    pub(crate) fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.conv1.params(out);
        self.bn1.params(out);
        self.conv2.params(out);
        self.bn2.params(out);
    }

    pub(crate) fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.conv1.params_mut(out);
        self.bn1.params_mut(out);
        self.conv2.params_mut(out);
        self.bn2.params_mut(out);
    }
}

/// 2x2 max pooling, stride 2. Ties go to the first element in row-major order.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    argmax: Option<(Vec<u8>, (usize, usize, usize, usize))>,
}

impl MaxPool2 {
    fn pool(x: &Array4<f32>, mut argmax: Option<&mut Vec<u8>>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array4::<f32>::zeros((n, c, oh, ow));
        let xs = slice(x);
        let ys = slice_mut(&mut y);
        for plane in 0..n * c {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * w + 2 * ox;
                    let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                    let mut best = 0;
                    for (j, &v) in cand.iter().enumerate().skip(1) {
                        if v > cand[best] {
                            best = j;
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    ys[o] = cand[best];
                    if let Some(am) = argmax.as_deref_mut() {
                        am[o] = best as u8;
                    }
                }
            }
        }
        y
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        Self::pool(x, None)
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let mut am = vec![0u8; n * c * (h / 2) * (w / 2)];
        let y = Self::pool(x, Some(&mut am));
        self.argmax = Some((am, (n, c, h, w)));
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let (am, (n, c, h, w)) = self.argmax.take().expect("forward_train precedes backward");
        let (oh, ow) = (h / 2, w / 2);
        assert_eq!(dy.dim(), (n, c, oh, ow), "max-pool output gradient shape");
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let dxs = slice_mut(&mut dx);
        for (o, (&g, &j)) in slice(dy).iter().zip(&am).enumerate() {
            let plane = o / (oh * ow);
            let (oy, ox) = ((o % (oh * ow)) / ow, o % ow);
            let (dy_, dx_) = (usize::from(j) / 2, usize::from(j) % 2);
            dxs[plane * h * w + (2 * oy + dy_) * w + 2 * ox + dx_] = g;
        }
        dx
    }
}

/// Transposed convolution with kernel 2, stride 2 (exact 2x upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2 {
    pub in_ch: usize,
    pub out_ch: usize,
    /// Layout `(in_ch, out_ch, 2, 2)`.
    pub weight: Param,
    pub bias: Param,
    input: Option<Array4<f32>>,
}

impl ConvTranspose2x2 {
    pub fn new<R: Rng + ?Sized>(name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        // Each output pixel sums exactly one tap from every input channel.
        Self {
            in_ch,
            out_ch,
            weight: Param::kaiming(format!("{name}.weight"), &[in_ch, out_ch, 2, 2], in_ch, rng),
            bias: Param::zeros(format!("{name}.bias"), &[out_ch]),
            input: None,
        }
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "transposed-conv input channels");
        let hw = h * w;
        let taps = self.out_ch * 4;
        let (oh, ow) = (2 * h, 2 * w);
        let mut t = vec![0.0f32; taps * hw];
        let mut y = Array4::<f32>::zeros((n, self.out_ch, oh, ow));
        let xs = slice(x);
        let ys = slice_mut(&mut y);
        for i in 0..n {
            gemm(taps, c, hw, &self.weight.value, true, &xs[i * c * hw..(i + 1) * c * hw], false, &mut t, false);
            let yi = &mut ys[i * self.out_ch * oh * ow..(i + 1) * self.out_ch * oh * ow];
            for co in 0..self.out_ch {
                let b = self.bias.value[co];
                let plane = &mut yi[co * oh * ow..(co + 1) * oh * ow];
                for tap in 0..4 {
                    let (a, bb) = (tap / 2, tap % 2);
                    let row = &t[(co * 4 + tap) * hw..][..hw];
                    for yy in 0..h {
                        let dst = &mut plane[(2 * yy + a) * ow..][..ow];
                        for xx in 0..w {
                            dst[2 * xx + bb] = row[yy * w + xx] + b;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn forward_train(&mut self, x: &Array4<f32>) -> Array4<f32> {
        self.input = Some(x.clone());
        self.forward(x)
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let x = self.input.take().expect("forward_train precedes backward");
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let taps = self.out_ch * 4;
        let (oh, ow) = (2 * h, 2 * w);
        assert_eq!(dy.dim(), (n, self.out_ch, oh, ow), "transposed-conv output gradient shape");
        let mut dt = vec![0.0f32; taps * hw];
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let (xs, dys) = (slice(&x), slice(dy));
        let dxs = slice_mut(&mut dx);
        for i in 0..n {
            let dyi = &dys[i * self.out_ch * oh * ow..(i + 1) * self.out_ch * oh * ow];
            for co in 0..self.out_ch {
                let plane = &dyi[co * oh * ow..(co + 1) * oh * ow];
                self.bias.grad[co] += plane.iter().sum::<f32>();
                for tap in 0..4 {
                    let (a, bb) = (tap / 2, tap % 2);
                    let row = &mut dt[(co * 4 + tap) * hw..][..hw];
                    for yy in 0..h {
                        let src = &plane[(2 * yy + a) * ow..][..ow];
                        for xx in 0..w {
                            row[yy * w + xx] = src[2 * xx + bb];
                        }
                    }
                }
            }
            let xi = &xs[i * c * hw..(i + 1) * c * hw];
            gemm(c, hw, taps, xi, false, &dt, true, &mut self.weight.grad, true);
            gemm(c, taps, hw, &self.weight.value, false, &dt, false, &mut dxs[i * c * hw..(i + 1) * c * hw], false);
        }
        dx
    }

    pub(crate) fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.extend([&self.weight, &self.bias]);
    }

    pub(crate) fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.extend([&mut self.weight, &mut self.bias]);
    }
}

/// Channel concatenation `[skip, up]`.
pub fn concat_channels(skip: &Array4<f32>, up: &Array4<f32>) -> Array4<f32> {
    concatenate(Axis(1), &[skip.view(), up.view()])
        .expect("skip and upsampled maps share N, H, W")
        .as_standard_layout()
        .into_owned()
}

/// Splits a concatenated gradient back into `(skip, up)` parts.
pub fn split_channels(d: &Array4<f32>, skip_ch: usize) -> (Array4<f32>, Array4<f32>) {
    (
        d.slice(s![.., ..skip_ch, .., ..]).as_standard_layout().into_owned(),
        d.slice(s![.., skip_ch.., .., ..]).as_standard_layout().into_owned(),
    )
}
