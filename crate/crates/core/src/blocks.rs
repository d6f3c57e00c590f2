//! The four architectural parts of the network: the shallow feature
//! extraction block (two 3x3 convs), the adaptive attention block
//! (MBConv+SE, then block attention and grid attention each with a pre-norm
//! and a feed-forward), the hierarchical feature fusion block, and the
//! pixel-shuffle reconstruction block.

use std::sync::Mutex;

use crate::attention::{adaptive_block_attention, adaptive_grid_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::geometry::AttentionMode;
use crate::tensor::ops::{batch_norm_eval, batch_norm_train, conv2d, depthwise_conv2d};
use crate::tensor::{Element, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
/// Channel expansion inside MBConv and the attention feed-forwards.
pub const EXPANSION: usize = 4;

/// Whether a forward pass uses batch statistics (and updates the running
/// ones) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Inference,
}

#[derive(Debug)]
pub struct ConvParams<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Element> ConvParams<E> {
    fn apply(&self, x: &Tensor<E>, stride: usize, pad: usize) -> Result<Tensor<E>> {
        conv2d(x, &self.weight, Some(&self.bias), stride, pad)
    }
}

#[derive(Debug)]
pub struct LayerNormParams<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

impl<E: Element> LayerNormParams<E> {
    fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.layer_norm(&self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

/// Batch norm with running statistics behind a mutex: training-mode forward
/// updates them in place, inference reads them. Exclusive access during
/// training is the caller's contract.
#[derive(Debug)]
pub struct BatchNormParams<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Mutex<Vec<E>>,
    pub running_var: Mutex<Vec<E>>,
}

impl<E: Element> BatchNormParams<E> {
    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }

    fn apply(&self, x: &Tensor<E>, mode: ForwardMode) -> Result<Tensor<E>> {
        match mode {
            ForwardMode::Train => {
                let (y, mean, var) = batch_norm_train(x, &self.gamma, &self.beta, BATCH_NORM_EPS)?;
                let count = x.numel() / self.channels();
                // running variance uses the unbiased estimate when defined
                let unbias = if count > 1 {
                    E::from_f64(count as f64 / (count as f64 - 1.0))
                } else {
                    E::one()
                };
                let momentum = E::from_f64(BATCH_NORM_MOMENTUM);
                let keep = E::one() - momentum;
                let mut rm = self.running_mean.lock().expect("bn lock");
                let mut rv = self.running_var.lock().expect("bn lock");
                for (r, &m) in rm.iter_mut().zip(&mean) {
                    *r = keep * *r + momentum * m;
                }
                for (r, &v) in rv.iter_mut().zip(&var) {
                    *r = keep * *r + momentum * v * unbias;
                }
                Ok(y)
            }
            ForwardMode::Inference => {
                let rm = self.running_mean.lock().expect("bn lock");
                let rv = self.running_var.lock().expect("bn lock");
                batch_norm_eval(x, &self.gamma, &self.beta, &rm, &rv, BATCH_NORM_EPS)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// SFEB
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct SfebParams<E: Element> {
    pub conv0: ConvParams<E>,
    pub conv1: ConvParams<E>,
}

/// Two 3x3 convs. Returns both feature maps: the first feeds the fusion
/// block's residual, the second feeds the attention stack.
pub fn sfeb_forward<E: Element>(
    x: &Tensor<E>,
    params: &SfebParams<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    if x.rank() != 4 || x.shape()[1] != 3 {
        return Err(Error::shape(
            "sfeb_forward",
            format!("expected [N,3,H,W], got {:?}", x.shape()),
        ));
    }
    let f_minus1 = params.conv0.apply(x, 1, 1)?;
    let f0 = params.conv1.apply(&f_minus1, 1, 1)?;
    Ok((f_minus1, f0))
}

// ---------------------------------------------------------------------------
// MBConv + SE
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct MbconvParams<E: Element> {
    pub bn: BatchNormParams<E>,
    /// 1x1, W -> 4W
    pub expand: ConvParams<E>,
    /// depthwise 3x3 on 4W channels
    pub dw: ConvParams<E>,
    /// 1x1, 4W -> W (squeeze)
    pub se_reduce: ConvParams<E>,
    /// 1x1, W -> 4W (excite)
    pub se_expand: ConvParams<E>,
    /// 1x1, 4W -> W
    pub project: ConvParams<E>,
}

/// Inverted-bottleneck conv with channel gating, residual around the whole
/// branch: x + project(SE(gelu(dw(gelu(expand(bn(x))))))).
pub fn mbconv_se_forward<E: Element>(
    x: &Tensor<E>,
    params: &MbconvParams<E>,
    mode: ForwardMode,
) -> Result<Tensor<E>> {
    let y = params.bn.apply(x, mode)?;
    let y = params.expand.apply(&y, 1, 0)?.gelu()?;
    let y = depthwise_conv2d(&y, &params.dw.weight, Some(&params.dw.bias), 1, 1)?.gelu()?;
    // squeeze-and-excitation: pooled stats -> reduce -> relu -> expand -> sigmoid gate
    let pooled = y.global_avg_pool()?;
    let gate = params.se_reduce.apply(&pooled, 1, 0)?.relu()?;
    let gate = params.se_expand.apply(&gate, 1, 0)?.sigmoid()?;
    let y = y.scale_channels(&gate)?;
    let y = params.project.apply(&y, 1, 0)?;
    x.add(&y)
}

// ---------------------------------------------------------------------------
// Attention sub-blocks and the full AMTB
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct AttnBlockParams<E: Element> {
    pub norm: LayerNormParams<E>,
    pub attn: AttentionParams<E>,
}

#[derive(Debug)]
pub struct FfnParams<E: Element> {
    pub norm: LayerNormParams<E>,
    /// 1x1, W -> 4W
    pub fc1: ConvParams<E>,
    /// 1x1, 4W -> W
    pub fc2: ConvParams<E>,
}

impl<E: Element> FfnParams<E> {
    fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = self.norm.apply(x)?;
        let y = self.fc1.apply(&y, 1, 0)?.gelu()?;
        let y = self.fc2.apply(&y, 1, 0)?;
        x.add(&y)
    }
}

#[derive(Debug)]
pub struct AmtbParams<E: Element> {
    pub mbconv: MbconvParams<E>,
    pub block_attn: AttnBlockParams<E>,
    pub block_ffn: FfnParams<E>,
    pub grid_attn: AttnBlockParams<E>,
    pub grid_ffn: FfnParams<E>,
}

/// One adaptive attention block: MBConv+SE, pre-norm block attention with
/// residual and feed-forward, then pre-norm grid attention with residual and
/// feed-forward. Shape-preserving.
pub fn amtb_forward<E: Element>(
    x: &Tensor<E>,
    params: &AmtbParams<E>,
    attn_mode: AttentionMode,
    mask_padding: bool,
    mode: ForwardMode,
) -> Result<Tensor<E>> {
    let y = mbconv_se_forward(x, &params.mbconv, mode)?;

    let normed = params.block_attn.norm.apply(&y)?;
    let attended = adaptive_block_attention(&normed, &params.block_attn.attn, attn_mode, mask_padding)?;
    let y = y.add(&attended)?;
    let y = params.block_ffn.apply(&y)?;

    let normed = params.grid_attn.norm.apply(&y)?;
    let attended = adaptive_grid_attention(&normed, &params.grid_attn.attn, attn_mode, mask_padding)?;
    let y = y.add(&attended)?;
    params.grid_ffn.apply(&y)
}

// ---------------------------------------------------------------------------
// HFFB
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct HffbParams<E: Element> {
    /// 1x1, S*W -> W
    pub fuse1: ConvParams<E>,
    /// 3x3, W -> W
    pub fuse3: ConvParams<E>,
}

/// Fuse the last feature map of each stage:
/// H = Conv3(Conv1(Concat(stage outputs))) + F_-1.
pub fn hffb_forward<E: Element>(
    f_minus1: &Tensor<E>,
    stage_outputs: &[Tensor<E>],
    params: &HffbParams<E>,
) -> Result<Tensor<E>> {
    if stage_outputs.is_empty() {
        return Err(Error::invalid("hffb_forward", "no stage outputs"));
    }
    for s in stage_outputs {
        if s.shape() != f_minus1.shape() {
            return Err(Error::shape(
                "hffb_forward",
                format!("stage output {:?} vs {:?}", s.shape(), f_minus1.shape()),
            ));
        }
    }
    let refs: Vec<&Tensor<E>> = stage_outputs.iter().collect();
    let cat = Tensor::concat_channels(&refs)?;
    let fused = params.fuse1.apply(&cat, 1, 0)?;
    let fused = params.fuse3.apply(&fused, 1, 1)?;
    fused.add(f_minus1)
}

// ---------------------------------------------------------------------------
// Reconstruction block
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct RbParams<E: Element> {
    /// Per upsampling stage: conv W -> W*s^2 feeding pixel_shuffle(s).
    pub stages: Vec<ConvParams<E>>,
    pub stage_scales: Vec<usize>,
    /// Final 3x3, W -> 3
    pub final_conv: ConvParams<E>,
}

/// Upsampling stage factors for a scale: x2 and x3 use a single shuffle,
/// x4 and x8 cascade x2 stages.
pub fn rb_stage_scales(scale: usize) -> Result<Vec<usize>> {
    match scale {
        2 => Ok(vec![2]),
        3 => Ok(vec![3]),
        4 => Ok(vec![2, 2]),
        8 => Ok(vec![2, 2, 2]),
        other => Err(Error::invalid("rb_forward", format!("unsupported scale {other}"))),
    }
}

/// Pixel-shuffle reconstruction: per stage conv W -> W*s^2 then shuffle,
/// final conv to 3 channels.
pub fn rb_forward<E: Element>(h: &Tensor<E>, params: &RbParams<E>) -> Result<Tensor<E>> {
    let mut y = h.clone();
    for (conv, &s) in params.stages.iter().zip(&params.stage_scales) {
        y = conv.apply(&y, 1, 1)?;
        y = y.pixel_shuffle(s)?;
    }
    params.final_conv.apply(&y, 1, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn conv(rng: &mut Rng, co: usize, ci: usize, k: usize) -> ConvParams<f64> {
        let w: Vec<f64> = (0..co * ci * k * k).map(|_| rng.uniform(-0.3, 0.3)).collect();
        ConvParams {
            weight: Tensor::from_vec(w, &[co, ci, k, k]).unwrap(),
            bias: Tensor::zeros(&[co]).unwrap(),
        }
    }

    fn zero_conv(co: usize, ci: usize, k: usize) -> ConvParams<f64> {
        ConvParams {
            weight: Tensor::zeros(&[co, ci, k, k]).unwrap(),
            bias: Tensor::zeros(&[co]).unwrap(),
        }
    }

    fn bn(c: usize) -> BatchNormParams<f64> {
        BatchNormParams {
            gamma: Tensor::full(&[c], 1.0).unwrap(),
            beta: Tensor::zeros(&[c]).unwrap(),
            running_mean: Mutex::new(vec![0.0; c]),
            running_var: Mutex::new(vec![1.0; c]),
        }
    }

    fn mbconv(rng: &mut Rng, w: usize) -> MbconvParams<f64> {
        let e = w * EXPANSION;
        MbconvParams {
            bn: bn(w),
            expand: conv(rng, e, w, 1),
            dw: ConvParams {
                weight: Tensor::from_vec(
                    (0..e * 9).map(|_| rng.uniform(-0.3, 0.3)).collect(),
                    &[e, 1, 3, 3],
                )
                .unwrap(),
                bias: Tensor::zeros(&[e]).unwrap(),
            },
            se_reduce: conv(rng, w, e, 1),
            se_expand: conv(rng, e, w, 1),
            project: conv(rng, w, e, 1),
        }
    }

    fn ln(c: usize) -> LayerNormParams<f64> {
        LayerNormParams {
            gamma: Tensor::full(&[c], 1.0).unwrap(),
            beta: Tensor::zeros(&[c]).unwrap(),
        }
    }

    fn attn(rng: &mut Rng, w: usize, heads: usize) -> AttentionParams<f64> {
        let mut mk = |shape: &[usize]| {
            let numel: usize = shape.iter().product();
            Tensor::from_vec((0..numel).map(|_| rng.uniform(-0.3, 0.3)).collect(), shape).unwrap()
        };
        AttentionParams {
            heads,
            qkv_weight: mk(&[w, 3 * w]),
            qkv_bias: mk(&[3 * w]),
            out_weight: mk(&[w, w]),
            out_bias: mk(&[w]),
            rpe: None,
        }
    }

    fn amtb(rng: &mut Rng, w: usize, heads: usize) -> AmtbParams<f64> {
        AmtbParams {
            mbconv: mbconv(rng, w),
            block_attn: AttnBlockParams { norm: ln(w), attn: attn(rng, w, heads) },
            block_ffn: FfnParams { norm: ln(w), fc1: conv(rng, w * EXPANSION, w, 1), fc2: conv(rng, w, w * EXPANSION, 1) },
            grid_attn: AttnBlockParams { norm: ln(w), attn: attn(rng, w, heads) },
            grid_ffn: FfnParams { norm: ln(w), fc1: conv(rng, w * EXPANSION, w, 1), fc2: conv(rng, w, w * EXPANSION, 1) },
        }
    }

    fn rand_input(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let numel: usize = shape.iter().product();
        Tensor::from_vec((0..numel).map(|_| rng.uniform(0.0, 1.0)).collect(), shape).unwrap()
    }

    #[test]
    fn sfeb_shapes_and_composition() {
        let mut rng = Rng::new(1);
        let w = 6;
        let params = SfebParams { conv0: conv(&mut rng, w, 3, 3), conv1: conv(&mut rng, w, w, 3) };
        let x = rand_input(&mut rng, &[1, 3, 24, 24]);
        let (f_m1, f0) = sfeb_forward(&x, &params).unwrap();
        assert_eq!(f_m1.shape(), &[1, w, 24, 24]);
        assert_eq!(f0.shape(), &[1, w, 24, 24]);

        // equivalence with two direct conv2d calls, bit-exact
        let direct1 = conv2d(&x, &params.conv0.weight, Some(&params.conv0.bias), 1, 1).unwrap();
        let direct2 = conv2d(&direct1, &params.conv1.weight, Some(&params.conv1.bias), 1, 1).unwrap();
        assert_eq!(f_m1.data(), direct1.data());
        assert_eq!(f0.data(), direct2.data());
    }

    #[test]
    fn sfeb_zero_weights_zero_bias_gives_zero() {
        let w = 4;
        let params = SfebParams { conv0: zero_conv(w, 3, 3), conv1: zero_conv(w, w, 3) };
        let x = Tensor::full(&[1, 3, 5, 5], 0.7).unwrap();
        let (f_m1, f0) = sfeb_forward(&x, &params).unwrap();
        assert!(f_m1.data().iter().all(|&v| v == 0.0));
        assert!(f0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sfeb_rejects_wrong_channel_count() {
        let mut rng = Rng::new(2);
        let params = SfebParams { conv0: conv(&mut rng, 4, 3, 3), conv1: conv(&mut rng, 4, 4, 3) };
        let x = Tensor::<f64>::zeros(&[1, 4, 5, 5]).unwrap();
        assert!(sfeb_forward(&x, &params).is_err());
    }

    #[test]
    fn mbconv_zero_branch_is_identity() {
        let mut rng = Rng::new(3);
        let w = 4;
        let mut p = mbconv(&mut rng, w);
        p.project = zero_conv(w, w * EXPANSION, 1);
        let x = rand_input(&mut rng, &[2, w, 3, 3]);
        let y = mbconv_se_forward(&x, &p, ForwardMode::Inference).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn mbconv_shape_preserved() {
        let mut rng = Rng::new(4);
        let w = 4;
        let p = mbconv(&mut rng, w);
        let x = rand_input(&mut rng, &[1, w, 7, 7]);
        let y = mbconv_se_forward(&x, &p, ForwardMode::Train).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn se_gate_of_half_halves_branch_activations() {
        // 1x1 spatial case with hand-set weights: choose SE convs so the
        // sigmoid input is 0 (gate 0.5) and check project sees halved values.
        let w = 1;
        let e = w * EXPANSION;
        let p = MbconvParams {
            bn: bn(w),
            // expand replicates the (normalized) input into 4 channels with bias 1
            expand: ConvParams {
                weight: Tensor::full(&[e, w, 1, 1], 0.0).unwrap(),
                bias: Tensor::full(&[e], 1.0).unwrap(),
            },
            // depthwise identity on 1x1 spatial: 3x3 kernel with center 1, pad 1
            dw: ConvParams {
                weight: Tensor::from_vec(
                    (0..e * 9).map(|i| if i % 9 == 4 { 1.0 } else { 0.0 }).collect(),
                    &[e, 1, 3, 3],
                )
                .unwrap(),
                bias: Tensor::zeros(&[e]).unwrap(),
            },
            // SE produces sigmoid(0) = 0.5 for every channel
            se_reduce: zero_conv(w, e, 1),
            se_expand: zero_conv(e, w, 1),
            // project sums the gated channels
            project: ConvParams {
                weight: Tensor::full(&[w, e, 1, 1], 1.0).unwrap(),
                bias: Tensor::zeros(&[w]).unwrap(),
            },
        };
        let x = Tensor::from_vec(vec![0.0], &[1, 1, 1, 1]).unwrap();
        let y = mbconv_se_forward(&x, &p, ForwardMode::Inference).unwrap();
        // branch: bn(0)=0 -> expand -> 1 per channel -> gelu(1) -> dw identity
        // -> gelu(gelu(1)) -> gate 0.5 -> project sums 4 channels
        let g1 = 0.5 * 1.0 * (1.0 + (0.7978845608028654f64 * (1.0 + 0.044715)).tanh());
        let g2 = 0.5 * g1 * (1.0 + (0.7978845608028654f64 * (g1 + 0.044715 * g1.powi(3))).tanh());
        let expect = 4.0 * 0.5 * g2;
        assert!((y.data()[0] - expect).abs() < 1e-12, "{} vs {expect}", y.data()[0]);
    }

    #[test]
    fn amtb_identity_when_all_branches_zero() {
        let mut rng = Rng::new(5);
        let w = 4;
        let mut p = amtb(&mut rng, w, 2);
        p.mbconv.project = zero_conv(w, w * EXPANSION, 1);
        p.block_attn.attn.out_weight = Tensor::zeros(&[w, w]).unwrap();
        p.block_attn.attn.out_bias = Tensor::zeros(&[w]).unwrap();
        p.block_ffn.fc2 = zero_conv(w, w * EXPANSION, 1);
        p.grid_attn.attn.out_weight = Tensor::zeros(&[w, w]).unwrap();
        p.grid_attn.attn.out_bias = Tensor::zeros(&[w]).unwrap();
        p.grid_ffn.fc2 = zero_conv(w, w * EXPANSION, 1);
        let x = rand_input(&mut rng, &[1, w, 5, 5]);
        let y = amtb_forward(&x, &p, AttentionMode::AdaptiveExact, false, ForwardMode::Inference).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn amtb_shape_preserved_non_square() {
        let mut rng = Rng::new(6);
        let w = 4;
        let p = amtb(&mut rng, w, 2);
        let x = rand_input(&mut rng, &[1, w, 9, 13]);
        for mode in [AttentionMode::AdaptiveExact, AttentionMode::AdaptiveApprox, AttentionMode::Fixed(4)] {
            let y = amtb_forward(&x, &p, mode, false, ForwardMode::Inference).unwrap();
            assert_eq!(y.shape(), x.shape());
        }
    }

    #[test]
    fn hffb_zero_convs_return_residual() {
        let w = 4;
        let s = 2;
        let p = HffbParams { fuse1: zero_conv(w, s * w, 1), fuse3: zero_conv(w, w, 3) };
        let mut rng = Rng::new(7);
        let f_m1 = rand_input(&mut rng, &[1, w, 4, 4]);
        let stages: Vec<Tensor<f64>> = (0..s).map(|_| rand_input(&mut rng, &[1, w, 4, 4])).collect();
        let h = hffb_forward(&f_m1, &stages, &p).unwrap();
        assert_eq!(h.data(), f_m1.data());
    }

    #[test]
    fn hffb_matches_direct_composition() {
        let mut rng = Rng::new(8);
        let w = 3;
        let s = 4;
        let p = HffbParams { fuse1: conv(&mut rng, w, s * w, 1), fuse3: conv(&mut rng, w, w, 3) };
        let f_m1 = rand_input(&mut rng, &[1, w, 5, 5]);
        let stages: Vec<Tensor<f64>> = (0..s).map(|_| rand_input(&mut rng, &[1, w, 5, 5])).collect();
        let h = hffb_forward(&f_m1, &stages, &p).unwrap();

        let refs: Vec<&Tensor<f64>> = stages.iter().collect();
        let cat = Tensor::concat_channels(&refs).unwrap();
        assert_eq!(cat.shape()[1], s * w);
        let direct = conv2d(&cat, &p.fuse1.weight, Some(&p.fuse1.bias), 1, 0).unwrap();
        let direct = conv2d(&direct, &p.fuse3.weight, Some(&p.fuse3.bias), 1, 1).unwrap();
        let direct = direct.add(&f_m1).unwrap();
        assert_eq!(h.data(), direct.data());
    }

    #[test]
    fn hffb_rejects_wrong_stage_count_shape() {
        let w = 3;
        let p = HffbParams { fuse1: zero_conv(w, 2 * w, 1), fuse3: zero_conv(w, w, 3) };
        let f_m1 = Tensor::<f64>::zeros(&[1, w, 4, 4]).unwrap();
        let bad = Tensor::<f64>::zeros(&[1, w, 5, 4]).unwrap();
        assert!(hffb_forward(&f_m1, &[bad], &p).is_err());
        assert!(hffb_forward(&f_m1, &[], &p).is_err());
    }

    fn rb(rng: &mut Rng, w: usize, scale: usize) -> RbParams<f64> {
        let scales = rb_stage_scales(scale).unwrap();
        RbParams {
            stages: scales.iter().map(|&s| conv(rng, w * s * s, w, 3)).collect(),
            stage_scales: scales,
            final_conv: conv(rng, 3, w, 3),
        }
    }

    #[test]
    fn rb_output_extent_is_scale_times_input() {
        let mut rng = Rng::new(9);
        let w = 4;
        for scale in [2usize, 3, 4, 8] {
            let p = rb(&mut rng, w, scale);
            let h = rand_input(&mut rng, &[1, w, 3, 5]);
            let y = rb_forward(&h, &p).unwrap();
            assert_eq!(y.shape(), &[1, 3, 3 * scale, 5 * scale]);
        }
        assert!(rb_stage_scales(5).is_err());
    }

    #[test]
    fn rb_x2_on_1x1_lands_channels_at_shuffle_positions() {
        // With a 1x1 spatial input the pre-shuffle conv output is the center
        // tap of each 3x3 kernel; channel c*4 + i*2 + j lands at (i, j).
        let w = 2;
        let mut stage_w = vec![0.0; (w * 4) * w * 9];
        for co in 0..w * 4 {
            // center tap on input channel 0
            stage_w[(co * w) * 9 + 4] = (co + 1) as f64;
        }
        let p = RbParams {
            stages: vec![ConvParams {
                weight: Tensor::from_vec(stage_w, &[w * 4, w, 3, 3]).unwrap(),
                bias: Tensor::zeros(&[w * 4]).unwrap(),
            }],
            stage_scales: vec![2],
            final_conv: ConvParams {
                // pick out channel 0 of the shuffled map
                weight: Tensor::from_vec(
                    (0..3 * w * 9).map(|i| if i == 4 { 1.0 } else { 0.0 }).collect(),
                    &[3, w, 3, 3],
                )
                .unwrap(),
                bias: Tensor::zeros(&[3]).unwrap(),
            },
        };
        let h = Tensor::from_vec(vec![1.0, 0.0], &[1, w, 1, 1]).unwrap();
        let y = rb_forward(&h, &p).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2, 2]);
        // channel 0 of the shuffle input holds convs 1..4 of input channel 0
        assert_eq!(&y.data()[0..4], &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rb_zero_final_conv_gives_zero_image() {
        let mut rng = Rng::new(10);
        let w = 3;
        let mut p = rb(&mut rng, w, 2);
        p.final_conv = zero_conv(3, w, 3);
        let h = rand_input(&mut rng, &[1, w, 4, 4]);
        let y = rb_forward(&h, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
