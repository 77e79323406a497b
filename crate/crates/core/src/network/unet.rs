use ndarray::Array4;

use super::layers::{concat_channels, split_channels, Conv2d, ConvTranspose2x2, DoubleConv, MaxPool2};
use super::param::Param;
use super::se::SeBlock;
use super::{NetworkConfig, NetworkError};
use crate::seed::rng_for;

#[derive(Debug, Clone)]
struct EncoderStage {
    conv: DoubleConv,
    se: Option<SeBlock>,
    pool: MaxPool2,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: ConvTranspose2x2,
    conv: DoubleConv,
}

/// Dual-input U-Net: the pre and post RGB rasters arrive stacked as one
/// multi-channel input, and the network emits unnormalized per-pixel class
/// scores at input resolution.
#[derive(Debug, Clone)]
pub struct UNet {
    config: NetworkConfig,
    encoders: Vec<EncoderStage>,
    bottleneck: DoubleConv,
    decoders: Vec<DecoderStage>,
    head: Conv2d,
}

impl UNet {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut rng = rng_for(seed, "init");
        let mut encoders = Vec::with_capacity(config.features.len());
        let mut ch = config.in_channels;
        for (i, &f) in config.features.iter().enumerate() {
            encoders.push(EncoderStage {
                conv: DoubleConv::new(&format!("enc{i}"), ch, f, &mut rng),
                se: config
                    .use_se
                    .then(|| SeBlock::new(&format!("enc{i}.se"), f, config.se_reduction, &mut rng)),
                pool: MaxPool2::default(),
            });
            ch = f;
        }
        let bottleneck = DoubleConv::new("bottleneck", ch, config.bottleneck_channels, &mut rng);
        ch = config.bottleneck_channels;
        let mut decoders = Vec::with_capacity(config.features.len());
        for (i, &f) in config.features.iter().enumerate().rev() {
            decoders.push(DecoderStage {
                up: ConvTranspose2x2::new(&format!("dec{i}.up"), ch, f, &mut rng),
                conv: DoubleConv::new(&format!("dec{i}"), 2 * f, f, &mut rng),
            });
            ch = f;
        }
        let head = Conv2d::new("head", ch, config.num_classes, 1, true, &mut rng);
        Ok(Self {
            config,
            encoders,
            bottleneck,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<(), NetworkError> {
        let (_, c, h, w) = x.dim();
        if c != self.config.in_channels {
            return Err(NetworkError::ChannelMismatch {
                expected: self.config.in_channels,
                found: c,
            });
        }
        let multiple = self.config.spatial_multiple();
        if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
            return Err(NetworkError::BadSpatialSize {
                height: h,
                width: w,
                multiple,
            });
        }
        Ok(())
    }

    /// Inference pass (batch norm uses running statistics).
    pub fn forward(&self, x: &Array4<f32>) -> Result<Array4<f32>, NetworkError> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut h = x.clone();
        for stage in &self.encoders {
            let mut a = stage.conv.forward(&h);
            if let Some(se) = &stage.se {
                a = se.forward(&a);
            }
            h = stage.pool.forward(&a);
            skips.push(a);
        }
        h = self.bottleneck.forward(&h);
        for (stage, skip) in self.decoders.iter().zip(skips.iter().rev()) {
            let u = stage.up.forward(&h);
            h = stage.conv.forward(&concat_channels(skip, &u));
        }
        Ok(self.head.forward(&h))
    }

    /// Training pass: batch statistics, running-stat updates, and caches
    /// for [`UNet::backward`].
    pub fn forward_train(&mut self, x: &Array4<f32>) -> Result<Array4<f32>, NetworkError> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut h = x.clone();
        for stage in &mut self.encoders {
            let mut a = stage.conv.forward_train(&h);
            if let Some(se) = &mut stage.se {
                a = se.forward_train(&a);
            }
            h = stage.pool.forward_train(&a);
            skips.push(a);
        }
        h = self.bottleneck.forward_train(&h);
        for (stage, skip) in self.decoders.iter_mut().zip(skips.iter().rev()) {
            let u = stage.up.forward_train(&h);
            h = stage.conv.forward_train(&concat_channels(skip, &u));
        }
        Ok(self.head.forward_train(&h))
    }

    /// Back-propagates `d loss / d logits` from the last `forward_train`,
    /// accumulating parameter gradients. Returns `d loss / d input`.
    pub fn backward(&mut self, dlogits: &Array4<f32>) -> Array4<f32> {
        let mut d = self.head.backward(dlogits);
        let mut dskips = Vec::with_capacity(self.decoders.len());
        for (stage, &f) in self.decoders.iter_mut().rev().zip(&self.config.features) {
            let dc = stage.conv.backward(&d);
            let (dskip, du) = split_channels(&dc, f);
            d = stage.up.backward(&du);
            dskips.push(dskip);
        }
        d = self.bottleneck.backward(&d);
        for (stage, dskip) in self.encoders.iter_mut().rev().zip(dskips.into_iter().rev()) {
            let mut da = stage.pool.backward(&d);
            da += &dskip;
            if let Some(se) = &mut stage.se {
                da = se.backward(&da);
            }
            d = stage.conv.backward(&da);
        }
        d
    }

    /// All named tensors (parameters and batch-norm statistics) in a fixed order.
    pub fn tensors(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for s in &self.encoders {
            s.conv.params(&mut out);
            if let Some(se) = &s.se {
                se.params(&mut out);
            }
        }
        self.bottleneck.params(&mut out);
        for s in &self.decoders {
            s.up.params(&mut out);
            s.conv.params(&mut out);
        }
        self.head.params(&mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for s in &mut self.encoders {
            s.conv.params_mut(&mut out);
            if let Some(se) = &mut s.se {
                se.params_mut(&mut out);
            }
        }
        self.bottleneck.params_mut(&mut out);
        for s in &mut self.decoders {
            s.up.params_mut(&mut out);
            s.conv.params_mut(&mut out);
        }
        self.head.params_mut(&mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().filter(|p| p.trainable).map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.tensors_mut() {
            p.zero_grad();
        }
    }
}
