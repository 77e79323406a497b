//! Inverse-frequency class weights and the weighted cross-entropy loss.

use std::fmt;
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::TrainError;

pub const WEIGHT_MIN: f64 = 0.05;
pub const WEIGHT_MAX: f64 = 50.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    Uniform,
    #[default]
    InverseFrequency,
}

impl WeightMode {
    pub fn name(self) -> &'static str {
        match self {
            WeightMode::Uniform => "uniform",
            WeightMode::InverseFrequency => "inverse-frequency",
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(WeightMode::Uniform),
            "inverse-frequency" => Ok(WeightMode::InverseFrequency),
            other => Err(format!("unknown weight mode {other:?} (expected uniform or inverse-frequency)")),
        }
    }
}

/// One positive weight per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0; num_classes])
    }

    /// Takes weights as given; they must be finite and positive.
    pub fn new(weights: Vec<f64>) -> Option<Self> {
        weights.iter().all(|w| w.is_finite() && *w > 0.0).then_some(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `w_c = N / (K * N_c)` clipped to `[WEIGHT_MIN, WEIGHT_MAX]`; absent
/// classes get `WEIGHT_MAX`. The histogram must exclude ignored pixels.
pub fn compute_class_weights(histogram: &[u64], mode: WeightMode) -> Result<ClassWeights, TrainError> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(TrainError::EmptyHistogram);
    }
    let k = histogram.len() as f64;
    let weights = match mode {
        WeightMode::Uniform => vec![1.0; histogram.len()],
        WeightMode::InverseFrequency => histogram
            .iter()
            .map(|&n| {
                if n == 0 {
                    WEIGHT_MAX
                } else {
                    (total as f64 / (k * n as f64)).clamp(WEIGHT_MIN, WEIGHT_MAX)
                }
            })
            .collect(),
    };
    Ok(ClassWeights(weights))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    /// `d loss / d logits`, laid out like the logits.
    pub grad: Vec<T>,
    /// `sum_i w_{y_i}` over scored pixels.
    pub weight_sum: T,
    /// Every pixel carried the ignore label; the loss is then 0.
    pub all_ignored: bool,
}

/// Weighted mean cross-entropy over `(B, C, H, W)` logits and `(B, H, W)`
/// targets: `sum_i w_{y_i} * -log softmax(z_i)[y_i] / sum_i w_{y_i}`.
/// Pixels labelled `ignore_label` contribute to neither sum.
pub fn weighted_cross_entropy<T: Float>(
    logits: &[T],
    shape: (usize, usize, usize, usize),
    targets: &[u8],
    weights: &[T],
    ignore_label: u8,
) -> LossOutput<T> {
    let (b, c, h, w) = shape;
    let hw = h * w;
    assert_eq!(logits.len(), b * c * hw, "logit buffer matches shape");
    assert_eq!(targets.len(), b * hw, "target buffer matches shape");
    assert_eq!(weights.len(), c, "one weight per class");
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    let mut weight_sum = T::zero();
    let mut probs = vec![T::zero(); c];
    for n in 0..b {
        let zs = &logits[n * c * hw..(n + 1) * c * hw];
        let gs = &mut grad[n * c * hw..(n + 1) * c * hw];
        for p in 0..hw {
            let y = targets[n * hw + p];
            if y == ignore_label {
                continue;
            }
            let y = usize::from(y);
            assert!(y < c, "target class {y} outside 0..{c}");
            let max = (0..c).map(|k| zs[k * hw + p]).fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (k, pk) in probs.iter_mut().enumerate() {
                *pk = (zs[k * hw + p] - max).exp();
                denom = denom + *pk;
            }
            let wy = weights[y];
            total = total - wy * (zs[y * hw + p] - max - denom.ln());
            weight_sum = weight_sum + wy;
            for (k, &pk) in probs.iter().enumerate() {
                let onehot = if k == y { T::one() } else { T::zero() };
                gs[k * hw + p] = wy * (pk / denom - onehot);
            }
        }
    }
    if weight_sum == T::zero() {
        return LossOutput {
            loss: T::zero(),
            grad,
            weight_sum,
            all_ignored: true,
        };
    }
    for g in &mut grad {
        *g = *g / weight_sum;
    }
    LossOutput {
        loss: total / weight_sum,
        grad,
        weight_sum,
        all_ignored: false,
    }
}
