//! Network building blocks: conv / batch-norm layers, pre-activation
//! residual blocks, and a small configurable residual backbone that serves
//! as the image encoder, the radar BEV backbone and the post-fusion BEV
//! encoder (with different configs).
//!
//! Every layer exposes `named_tensors` (all persistent state, for
//! checkpoints) and `parameters` (trainable tensors only, for the
//! optimizer). Initialization is deterministic given the caller's RNG.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{batchnorm2d, conv2d, BnMode};
use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Named persistent tensors of a module: `(name, tensor, trainable)`.
pub type NamedTensors<S> = Vec<(String, Tensor<S>, bool)>;

fn he_normal<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("he std is finite");
    (0..n)
        .map(|_| S::from_f64_lossy(dist.sample(rng)))
        .collect()
}

/// 2D convolution layer (square kernel, symmetric zero padding).
pub struct Conv2d<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = Tensor::leaf(
            &[out_channels, in_channels, kernel, kernel],
            he_normal(rng, fan_in, out_channels * fan_in),
        )?;
        let bias = if with_bias {
            Some(Tensor::leaf(&[out_channels], vec![S::zero(); out_channels])?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Layer with explicitly provided weights (identity-init fusion, tests).
    pub fn from_parts(weight: Tensor<S>, bias: Option<Tensor<S>>, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn named_tensors(&self, prefix: &str) -> NamedTensors<S> {
        let mut out = vec![(format!("{prefix}.weight"), self.weight.clone(), true)];
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone(), true));
        }
        out
    }
}

/// Batch normalization layer holding learnable affine parameters and
/// non-learnable running statistics.
pub struct BatchNorm2d<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub momentum: S,
    pub eps: S,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: Tensor::leaf(&[channels], vec![S::one(); channels])?,
            beta: Tensor::leaf(&[channels], vec![S::zero(); channels])?,
            running_mean: Tensor::from_vec(&[channels], vec![S::zero(); channels])?,
            running_var: Tensor::from_vec(&[channels], vec![S::one(); channels])?,
            momentum: S::from_f64_lossy(0.1),
            eps: S::from_f64_lossy(1e-5),
        })
    }

    pub fn forward(&self, x: &Tensor<S>, mode: BnMode) -> Result<Tensor<S>> {
        batchnorm2d(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.momentum,
            self.eps,
            mode,
        )
    }

    pub fn named_tensors(&self, prefix: &str) -> NamedTensors<S> {
        vec![
            (format!("{prefix}.gamma"), self.gamma.clone(), true),
            (format!("{prefix}.beta"), self.beta.clone(), true),
            (
                format!("{prefix}.running_mean"),
                self.running_mean.clone(),
                false,
            ),
            (
                format!("{prefix}.running_var"),
                self.running_var.clone(),
                false,
            ),
        ]
    }
}

/// Pre-activation residual block: `y = shortcut(x) + conv2(relu(bn2(conv1(relu(bn1(x))))))`.
/// When the block changes resolution or channel count, the shortcut is a
/// strided 1x1 projection; otherwise it is the identity.
pub struct ResidualBlock<S: Scalar> {
    bn1: BatchNorm2d<S>,
    conv1: Conv2d<S>,
    bn2: BatchNorm2d<S>,
    conv2: Conv2d<S>,
    shortcut: Option<Conv2d<S>>,
}

impl<S: Scalar> ResidualBlock<S> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let shortcut = if stride != 1 || in_channels != out_channels {
            Some(Conv2d::new(in_channels, out_channels, 1, stride, 0, false, rng)?)
        } else {
            None
        };
        Ok(ResidualBlock {
            bn1: BatchNorm2d::new(in_channels)?,
            conv1: Conv2d::new(in_channels, out_channels, 3, stride, 1, false, rng)?,
            bn2: BatchNorm2d::new(out_channels)?,
            conv2: Conv2d::new(out_channels, out_channels, 3, 1, 1, false, rng)?,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor<S>, mode: BnMode) -> Result<Tensor<S>> {
        let h = self.bn1.forward(x, mode)?.relu()?;
        let h = self.conv1.forward(&h)?;
        let h = self.bn2.forward(&h, mode)?.relu()?;
        let h = self.conv2.forward(&h)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(x)?,
            None => x.clone(),
        };
        skip.add(&h)
    }

    pub fn named_tensors(&self, prefix: &str) -> NamedTensors<S> {
        let mut out = self.bn1.named_tensors(&format!("{prefix}.bn1"));
        out.extend(self.conv1.named_tensors(&format!("{prefix}.conv1")));
        out.extend(self.bn2.named_tensors(&format!("{prefix}.bn2")));
        out.extend(self.conv2.named_tensors(&format!("{prefix}.conv2")));
        if let Some(s) = &self.shortcut {
            out.extend(s.named_tensors(&format!("{prefix}.shortcut")));
        }
        out
    }
}

/// One stage of the backbone: `blocks` residual blocks; a downsampling stage
/// halves the spatial extent with its first block and doubles the channels.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub downsample: bool,
}

/// Configuration for [`ResNetBackbone`].
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Channel count after the stem; doubles at each downsampling stage.
    pub base_channels: usize,
    pub stages: Vec<StageSpec>,
    /// Optional 1x1 projection (+BN+ReLU) to a fixed channel count.
    pub out_channels: Option<usize>,
}

impl BackboneConfig {
    /// Total spatial reduction factor (product of stage strides).
    pub fn reduction(&self) -> usize {
        self.stages
            .iter()
            .map(|s| if s.downsample { 2 } else { 1 })
            .product()
    }

    /// Channel count produced by the final stage (before the projection).
    pub fn stage_out_channels(&self) -> usize {
        let doublings = self.stages.iter().filter(|s| s.downsample).count();
        self.base_channels << doublings
    }

    /// Channel count of the backbone's output.
    pub fn final_channels(&self) -> usize {
        self.out_channels.unwrap_or_else(|| self.stage_out_channels())
    }
}

/// Small configurable residual backbone (stem + residual stages + optional
/// 1x1 projection head). Conv layer count: `1 + 2 * total_blocks + head`.
pub struct ResNetBackbone<S: Scalar> {
    pub config: BackboneConfig,
    stem: Conv2d<S>,
    blocks: Vec<ResidualBlock<S>>,
    head: Option<(Conv2d<S>, BatchNorm2d<S>)>,
}

impl<S: Scalar> ResNetBackbone<S> {
    pub fn new(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.stages.is_empty() || config.stages.iter().any(|s| s.blocks == 0) {
            return Err(TensorError::Invalid {
                op: "backbone",
                detail: "every stage needs at least one block".into(),
            });
        }
        let stem = Conv2d::new(config.in_channels, config.base_channels, 3, 1, 1, false, rng)?;
        let mut blocks = Vec::new();
        let mut channels = config.base_channels;
        for stage in &config.stages {
            for b in 0..stage.blocks {
                let first = b == 0;
                let (in_c, out_c, stride) = if first && stage.downsample {
                    (channels, channels * 2, 2)
                } else if first {
                    (channels, channels, 1)
                } else {
                    (channels, channels, 1)
                };
                blocks.push(ResidualBlock::new(in_c, out_c, stride, rng)?);
                channels = out_c;
            }
        }
        let head = match config.out_channels {
            Some(out_c) => Some((
                Conv2d::new(channels, out_c, 1, 1, 0, false, rng)?,
                BatchNorm2d::new(out_c)?,
            )),
            None => None,
        };
        Ok(ResNetBackbone {
            config,
            stem,
            blocks,
            head,
        })
    }

    pub fn forward(&self, x: &Tensor<S>, mode: BnMode) -> Result<Tensor<S>> {
        let mut h = self.stem.forward(x)?;
        for block in &self.blocks {
            h = block.forward(&h, mode)?;
        }
        if let Some((proj, bn)) = &self.head {
            h = bn.forward(&proj.forward(&h)?, mode)?.relu()?;
        }
        Ok(h)
    }

    pub fn named_tensors(&self, prefix: &str) -> NamedTensors<S> {
        let mut out = self.stem.named_tensors(&format!("{prefix}.stem"));
        for (i, block) in self.blocks.iter().enumerate() {
            out.extend(block.named_tensors(&format!("{prefix}.block{i}")));
        }
        if let Some((proj, bn)) = &self.head {
            out.extend(proj.named_tensors(&format!("{prefix}.head")));
            out.extend(bn.named_tensors(&format!("{prefix}.head_bn")));
        }
        out
    }

    /// Conv layers in this backbone (stem + 2 per block + optional head);
    /// projection shortcuts are not counted.
    pub fn conv_layer_count(&self) -> usize {
        1 + 2 * self.blocks.len() + usize::from(self.head.is_some())
    }
}

/// Deterministic uniform init in `[-bound, bound]`, for heads that want
/// small non-He starting weights.
pub fn uniform_init<S: Scalar>(rng: &mut ChaCha8Rng, bound: f64, n: usize) -> Vec<S> {
    (0..n)
        .map(|_| S::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn residual_block_keeps_shape_without_downsample() {
        let mut r = rng();
        let block = ResidualBlock::<f32>::new(8, 8, 1, &mut r).unwrap();
        let x = Tensor::from_vec(&[1, 8, 6, 6], vec![0.1; 8 * 36]).unwrap();
        let y = block.forward(&x, BnMode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 8, 6, 6]);
    }

    #[test]
    fn backbone_reduction_and_channels() {
        let cfg = BackboneConfig {
            in_channels: 32,
            base_channels: 32,
            stages: vec![
                StageSpec { blocks: 3, downsample: false },
                StageSpec { blocks: 2, downsample: true },
                StageSpec { blocks: 2, downsample: true },
            ],
            out_channels: Some(128),
        };
        assert_eq!(cfg.reduction(), 4);
        assert_eq!(cfg.stage_out_channels(), 128);
        let mut r = rng();
        let net = ResNetBackbone::<f32>::new(cfg, &mut r).unwrap();
        // 16 conv layers: stem + 7 blocks x 2 convs + 1x1 head
        assert_eq!(net.conv_layer_count(), 16);
        let x = Tensor::from_vec(&[1, 32, 16, 16], vec![0.01; 32 * 256]).unwrap();
        let y = net.forward(&x, BnMode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 128, 4, 4]);
    }

    #[test]
    fn init_is_deterministic_for_equal_seeds() {
        let mut r1 = rng();
        let mut r2 = rng();
        let a = Conv2d::<f32>::new(4, 4, 3, 1, 1, true, &mut r1).unwrap();
        let b = Conv2d::<f32>::new(4, 4, 3, 1, 1, true, &mut r2).unwrap();
        assert_eq!(a.weight.values(), b.weight.values());
    }
}
