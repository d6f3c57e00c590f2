//! Toy-scale training: MAE loss, uniform image-then-patch sampling, dihedral
//! augmentation, milestone step-decay learning rate, and Adam.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blocks::ForwardMode;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelState};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

fn d_batch() -> usize {
    32
}
fn d_lr0() -> f64 {
    2e-4
}
fn d_milestones() -> Vec<u64> {
    vec![250_000, 400_000, 450_000, 475_000, 500_000]
}
fn d_decay() -> f64 {
    2.0
}
fn d_patch() -> usize {
    64
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_log_every() -> u64 {
    1
}

/// Training hyperparameters. Defaults follow the published x2 schedule;
/// `total_iters` has no default so toy runs must choose their own length.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_lr0")]
    pub lr0: f64,
    #[serde(default = "d_milestones")]
    pub milestones: Vec<u64>,
    #[serde(default = "d_decay")]
    pub decay: f64,
    pub total_iters: u64,
    /// LR patch extent; the HR patch is scale times larger.
    #[serde(default = "d_patch")]
    pub patch_lr: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Emit a loss-trace row every this many iterations.
    #[serde(default = "d_log_every")]
    pub log_every: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_lr == 0 || self.batch == 0 {
            return Err(Error::invalid("train_config", "batch and patch_lr must be >= 1"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("train_config", "milestones must be strictly increasing"));
        }
        if self.decay <= 0.0 || self.lr0 <= 0.0 {
            return Err(Error::invalid("train_config", "lr0 and decay must be positive"));
        }
        Ok(())
    }

    /// Fine-tune schedule for scales other than x2: learning rate, training
    /// iterations and decay milestones halved (integer halving rounds down).
    pub fn halved_for_finetune(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0 / 2.0,
            total_iters: self.total_iters / 2,
            milestones: self.milestones.iter().map(|&m| m / 2).collect(),
            ..self.clone()
        }
    }
}

/// One LR/HR training pair, both as [3,h,w] float tensors in [0,1].
#[derive(Clone, Debug)]
pub struct SrImagePair {
    pub name: String,
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
}

/// In-memory dataset of aligned LR/HR pairs at one scale factor.
#[derive(Clone, Debug)]
pub struct SrDataset {
    pub scale: usize,
    pub pairs: Vec<SrImagePair>,
}

impl SrDataset {
    /// Build from a directory of HR PNGs: each image is cropped to
    /// scale-divisible extents and bicubic-downscaled (antialiased) to LR.
    pub fn from_hr_dir(dir: &std::path::Path, scale: usize) -> Result<SrDataset> {
        let mut names: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .map(|e| e.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
            })
            .collect();
        names.sort();
        let mut pairs = Vec::new();
        for path in names {
            let img = crate::image_io::read_png(&path)?;
            let pair = hr_to_pair(&img, scale, path.file_name().unwrap().to_string_lossy().as_ref())?;
            pairs.push(pair);
        }
        if pairs.is_empty() {
            return Err(Error::Training(format!("no PNG images in {}", dir.display())));
        }
        Ok(SrDataset { scale, pairs })
    }
}

/// Crop an HR image to scale-divisible extents and derive the LR side.
pub fn hr_to_pair(img: &crate::eval::ImageBuffer, scale: usize, name: &str) -> Result<SrImagePair> {
    let (h, w) = (img.height - img.height % scale, img.width - img.width % scale);
    if h == 0 || w == 0 {
        return Err(Error::Training(format!("{name}: smaller than one scale unit")));
    }
    let hr_full = img.to_float_chw();
    let hr = crop_chw(&hr_full, h, w)?;
    let lr = crate::eval::bicubic_resize(&hr, h / scale, w / scale, true)?;
    Ok(SrImagePair { name: name.to_string(), lr, hr })
}

fn crop_chw(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if out_h > h || out_w > w {
        return Err(Error::shape("crop_chw", format!("{out_h}x{out_w} from {h}x{w}")));
    }
    let src = t.data();
    let mut data = vec![0f32; c * out_h * out_w];
    for ci in 0..c {
        for y in 0..out_h {
            let s = (ci * h + y) * w;
            let d = (ci * out_h + y) * out_w;
            data[d..d + out_w].copy_from_slice(&src[s..s + out_w]);
        }
    }
    Tensor::from_vec(data, &[c, out_h, out_w])
}

/// Mean over all elements of |target - prediction|, as a scalar tensor.
/// With equally sized images this equals the batch mean of per-image L1
/// means. Subgradient at exact ties is 0.
pub fn mae_loss<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mae_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    target.sub(pred)?.abs_val()?.mean_all()
}

/// One sampled LR/HR patch pair with its provenance.
#[derive(Clone, Debug)]
pub struct PatchPair {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
    pub image_index: usize,
    pub top: usize,
    pub left: usize,
}

/// Sample uniformly: first an image, then a top-left position over all valid
/// placements. The HR crop is the exact scale-aligned footprint of the LR crop.
pub fn sample_patch_pair(dataset: &SrDataset, patch_lr: usize, rng: &mut Rng) -> Result<PatchPair> {
    let image_index = rng.below(dataset.pairs.len());
    let pair = &dataset.pairs[image_index];
    let (lh, lw) = (pair.lr.shape()[1], pair.lr.shape()[2]);
    if lh < patch_lr || lw < patch_lr {
        return Err(Error::Training(format!(
            "{}: LR {lh}x{lw} smaller than patch {patch_lr}",
            pair.name
        )));
    }
    let top = rng.below(lh - patch_lr + 1);
    let left = rng.below(lw - patch_lr + 1);
    let r = dataset.scale;
    let lr = crop_window(&pair.lr, top, left, patch_lr, patch_lr)?;
    let hr = crop_window(&pair.hr, top * r, left * r, patch_lr * r, patch_lr * r)?;
    Ok(PatchPair { lr, hr, image_index, top, left })
}

fn crop_window(t: &Tensor<f32>, top: usize, left: usize, ph: usize, pw: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if top + ph > h || left + pw > w {
        return Err(Error::shape("crop_window", "window out of range".to_string()));
    }
    let src = t.data();
    let mut data = vec![0f32; c * ph * pw];
    for ci in 0..c {
        for y in 0..ph {
            let s = (ci * h + top + y) * w + left;
            let d = (ci * ph + y) * pw;
            data[d..d + pw].copy_from_slice(&src[s..s + pw]);
        }
    }
    Tensor::from_vec(data, &[c, ph, pw])
}

// ---------------------------------------------------------------------------
// Dihedral transforms (rotation/flip augmentation, self-ensemble)
// ---------------------------------------------------------------------------

/// Codes 0..8: low two bits rotate clockwise by quarter turns, bit 2 flips
/// vertically first. rot90 maps pixel (i,j) of an h x w image to (j, h-1-i).
pub fn dihedral_transform<E: Element>(x: &Tensor<E>, code: u8) -> Result<Tensor<E>> {
    if code > 7 {
        return Err(Error::invalid("dihedral_transform", format!("code {code} out of 0..8")));
    }
    let rank = x.rank();
    if rank < 2 {
        return Err(Error::shape("dihedral_transform", "need at least 2 axes"));
    }
    let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
    let planes = x.numel() / (h * w);
    let rot = code & 3;
    let flip = code & 4 != 0;
    let (oh, ow) = if rot % 2 == 1 { (w, h) } else { (h, w) };

    let src = x.data();
    let mut data = vec![E::zero(); x.numel()];
    for p in 0..planes {
        let sb = p * h * w;
        let db = p * oh * ow;
        for i in 0..h {
            for j in 0..w {
                // vertical flip first, then clockwise quarter turns
                let (mut y, mut xx, mut ch, mut cw) = (i, j, h, w);
                if flip {
                    y = ch - 1 - y;
                }
                for _ in 0..rot {
                    let (ny, nx) = (xx, ch - 1 - y);
                    y = ny;
                    xx = nx;
                    std::mem::swap(&mut ch, &mut cw);
                }
                data[db + y * ow + xx] = src[sb + i * w + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[rank - 2] = oh;
    shape[rank - 1] = ow;
    Tensor::from_vec(data, &shape)
}

/// Code whose transform undoes `code`. Reflections are involutions; pure
/// rotations invert to the complementary turn count.
pub fn dihedral_inverse(code: u8) -> u8 {
    let rot = code & 3;
    if code & 4 != 0 {
        code
    } else {
        (4 - rot) & 3
    }
}

/// Apply one dihedral code to both patches of a pair.
pub fn augment(pair: &PatchPair, code: u8) -> Result<PatchPair> {
    Ok(PatchPair {
        lr: dihedral_transform(&pair.lr, code)?,
        hr: dihedral_transform(&pair.hr, code)?,
        ..pair.clone()
    })
}

// ---------------------------------------------------------------------------
// Schedule and optimizer
// ---------------------------------------------------------------------------

/// Step decay: lr0 / decay^(number of milestones at or before `iter`).
pub fn lr_schedule(iter: u64, cfg: &TrainConfig) -> f64 {
    let passed = cfg.milestones.iter().filter(|&&m| m <= iter).count() as i32;
    cfg.lr0 / cfg.decay.powi(passed)
}

/// First/second moment buffers, keyed by parameter name.
#[derive(Debug, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One Adam update with bias correction, reading each parameter's
/// accumulated gradient. Parameters without a gradient are left unchanged.
pub fn adam_step<E: Element>(
    state: &mut ModelState<E>,
    adam: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("adam_step", "step count starts at 1"));
    }
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    state.visit_params_mut(&mut |name, p| {
        let Some(grad) = p.grad() else { return };
        let n = grad.len();
        let m = adam.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = adam.v.entry(name).or_insert_with(|| vec![0.0; n]);
        let mut data: Vec<E> = p.data().to_vec();
        for i in 0..n {
            let g = grad[i].to_f64();
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = data[i] - E::from_f64(lr * m_hat / (v_hat.sqrt() + eps));
        }
        *p = Tensor::param(data, p.shape()).expect("same shape");
    });
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One loss-trace row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    pub iter: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Render a trace as the loss CSV: `iteration,loss,lr`.
pub fn trace_to_csv(trace: &[TracePoint]) -> String {
    let mut s = String::from("iteration,loss,lr\n");
    for p in trace {
        s.push_str(&format!("{},{},{}\n", p.iter, p.loss, p.lr));
    }
    s
}

fn stack_batch(patches: &[PatchPair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let n = patches.len();
    let (lc, lh, lw) = {
        let s = patches[0].lr.shape();
        (s[0], s[1], s[2])
    };
    let (hc, hh, hw) = {
        let s = patches[0].hr.shape();
        (s[0], s[1], s[2])
    };
    let mut lr = Vec::with_capacity(n * lc * lh * lw);
    let mut hr = Vec::with_capacity(n * hc * hh * hw);
    for p in patches {
        lr.extend_from_slice(p.lr.data());
        hr.extend_from_slice(p.hr.data());
    }
    Ok((
        Tensor::from_vec(lr, &[n, lc, lh, lw])?,
        Tensor::from_vec(hr, &[n, hc, hh, hw])?,
    ))
}

/// Minimize the MAE loss over sampled, augmented patch batches. Returns the
/// loss trace; the model state is updated in place. A non-finite loss aborts
/// with a diagnostic.
pub fn train(
    state: &mut ModelState<f32>,
    config: &ModelConfig,
    dataset: &SrDataset,
    cfg: &TrainConfig,
) -> Result<Vec<TracePoint>> {
    cfg.validate()?;
    if dataset.scale != config.scale {
        return Err(Error::Training(format!(
            "dataset scale {} != model scale {}",
            dataset.scale, config.scale
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut adam = AdamState::default();
    let mut trace = Vec::new();
    for iter in 0..cfg.total_iters {
        let lr_now = lr_schedule(iter, cfg);
        let mut patches = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let p = sample_patch_pair(dataset, cfg.patch_lr, &mut rng)?;
            let code = rng.below(8) as u8;
            patches.push(augment(&p, code)?);
        }
        let (x, y) = stack_batch(&patches)?;
        let pred = forward(state, config, &x, ForwardMode::Train)?;
        let loss = mae_loss(&pred, &y)?;
        let loss_val = loss.item()?.to_f64();
        if !loss_val.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {loss_val} at iteration {iter}"
            )));
        }
        state.zero_grads();
        loss.backward().map_err(|e| Error::Training(format!("iteration {iter}: {e}")))?;
        adam_step(state, &mut adam, lr_now, cfg.beta1, cfg.beta2, cfg.eps, iter + 1)?;
        if iter % cfg.log_every == 0 {
            trace.push(TracePoint { iter, loss: loss_val, lr: lr_now });
        }
    }
    Ok(trace)
}
