//! Evaluation protocol: antialiased bicubic degradation, Y-channel
//! conversion, PSNR/SSIM, self-ensemble inference, and dataset reports.

use std::path::Path;

use serde::Serialize;

use crate::blocks::ForwardMode;
use crate::error::{Error, Result};
use crate::geometry::AttentionMode;
use crate::model::{forward, ModelConfig, ModelState};
use crate::tensor::{no_grad, Tensor};
use crate::train::{dihedral_inverse, dihedral_transform};

/// PSNR reported for identical images (zero MSE).
pub const PSNR_CAP_DB: f64 = 100.0;

// ---------------------------------------------------------------------------
// Image buffers
// ---------------------------------------------------------------------------

/// 8-bit RGB image. The float view divides by 255; quantization back rounds
/// ties to even, so quantize(clamp(.)) is idempotent.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// RGB interleaved, row-major.
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn from_rgb8(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "buffer holds {} bytes for {width}x{height}x3",
                data.len()
            )));
        }
        Ok(ImageBuffer { width, height, data })
    }

    /// Float view [3,H,W] in [0,1] (exactly value/255).
    pub fn to_float_chw(&self) -> Tensor<f32> {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let px = (y * w + x) * 3;
                for c in 0..3 {
                    out[(c * h + y) * w + x] = self.data[px + c] as f32 / 255.0;
                }
            }
        }
        Tensor::from_vec(out, &[3, h, w]).expect("buffer shape")
    }

    /// Clamp to [0,1] and quantize a [3,H,W] (or [1,3,H,W]) float image.
    pub fn from_float_chw(t: &Tensor<f32>) -> Result<Self> {
        let t = match t.rank() {
            4 if t.shape()[0] == 1 => t.reshape(&t.shape()[1..])?,
            3 => t.clone(),
            _ => {
                return Err(Error::shape(
                    "from_float_chw",
                    format!("expected [3,H,W] or [1,3,H,W], got {:?}", t.shape()),
                ))
            }
        };
        if t.shape()[0] != 3 {
            return Err(Error::shape("from_float_chw", format!("expected 3 channels, got {:?}", t.shape())));
        }
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let src = t.data();
        let mut data = vec![0u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = src[(c * h + y) * w + x].clamp(0.0, 1.0);
                    data[(y * w + x) * 3 + c] = (v * 255.0).round_ties_even() as u8;
                }
            }
        }
        Ok(ImageBuffer { width: w, height: h, data })
    }

    /// Y channel (BT.601 studio swing) of the float view.
    pub fn y_plane(&self) -> Plane {
        let mut data = vec![0f32; self.width * self.height];
        for (o, px) in data.iter_mut().zip(self.data.chunks_exact(3)) {
            *o = rgb_to_y(
                px[0] as f64 / 255.0,
                px[1] as f64 / 255.0,
                px[2] as f64 / 255.0,
            ) as f32;
        }
        Plane { width: self.width, height: self.height, data }
    }
}

/// Single-channel float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// BT.601 studio-swing luma from RGB in [0,1]:
/// Y = 16/255 + (65.481 R + 128.553 G + 24.966 B) / 255.
pub fn rgb_to_y(r: f64, g: f64, b: f64) -> f64 {
    16.0 / 255.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0
}

/// Y plane of a [3,H,W] float image.
pub fn rgb_to_y_plane(t: &Tensor<f32>) -> Result<Plane> {
    if t.rank() != 3 || t.shape()[0] != 3 {
        return Err(Error::shape("rgb_to_y", format!("expected [3,H,W], got {:?}", t.shape())));
    }
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let src = t.data();
    let plane = h * w;
    let mut data = vec![0f32; plane];
    for i in 0..plane {
        data[i] = rgb_to_y(src[i] as f64, src[plane + i] as f64, src[2 * plane + i] as f64) as f32;
    }
    Ok(Plane { width: w, height: h, data })
}

// ---------------------------------------------------------------------------
// Bicubic resampling
// ---------------------------------------------------------------------------

/// Cubic convolution kernel with a = -0.5.
fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * (x * x * x - 5.0 * x * x + 8.0 * x - 4.0)
    } else {
        0.0
    }
}

/// Per-output-sample contributor indices and normalized weights for one axis.
/// When downscaling with antialias the kernel is stretched by the inverse
/// scale, matching the convention benchmark LR sets were generated with.
fn contributions(in_len: usize, out_len: usize, antialias: bool) -> Vec<(Vec<usize>, Vec<f64>)> {
    let scale = out_len as f64 / in_len as f64;
    let (kscale, width) = if antialias && scale < 1.0 {
        (scale, 4.0 / scale)
    } else {
        (1.0, 4.0)
    };
    let p = width.ceil() as isize + 2;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let u = (i as f64 + 0.5) / scale - 0.5;
        let left = (u - width / 2.0).floor() as isize + 1;
        let mut idx = Vec::with_capacity(p as usize);
        let mut wts = Vec::with_capacity(p as usize);
        let mut total = 0.0;
        for j in left..left + p {
            let w = kscale * cubic(kscale * (u - j as f64));
            if w == 0.0 {
                continue;
            }
            // edge replication
            let jj = j.clamp(0, in_len as isize - 1) as usize;
            idx.push(jj);
            wts.push(w);
            total += w;
        }
        for w in &mut wts {
            *w /= total;
        }
        out.push((idx, wts));
    }
    out
}

/// Resize one plane with the cubic kernel, separably (rows then columns).
pub fn bicubic_resize_plane(
    src: &[f32],
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
    antialias: bool,
) -> Vec<f32> {
    let cw = contributions(w, out_w, antialias);
    let ch = contributions(h, out_h, antialias);
    // horizontal pass
    let mut mid = vec![0f64; h * out_w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (x, (idx, wts)) in cw.iter().enumerate() {
            let mut acc = 0.0;
            for (&j, &wt) in idx.iter().zip(wts) {
                acc += row[j] as f64 * wt;
            }
            mid[y * out_w + x] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0f32; out_h * out_w];
    for (y, (idx, wts)) in ch.iter().enumerate() {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (&j, &wt) in idx.iter().zip(wts) {
                acc += mid[j * out_w + x] * wt;
            }
            out[y * out_w + x] = acc as f32;
        }
    }
    out
}

/// Resize [C,H,W] or [N,C,H,W] per channel.
pub fn bicubic_resize(t: &Tensor<f32>, out_h: usize, out_w: usize, antialias: bool) -> Result<Tensor<f32>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bicubic_resize", "output extents must be positive"));
    }
    let (lead, h, w) = match t.rank() {
        3 => (t.shape()[0], t.shape()[1], t.shape()[2]),
        4 => (t.shape()[0] * t.shape()[1], t.shape()[2], t.shape()[3]),
        _ => {
            return Err(Error::shape(
                "bicubic_resize",
                format!("expected [C,H,W] or [N,C,H,W], got {:?}", t.shape()),
            ))
        }
    };
    let src = t.data();
    let mut data = vec![0f32; lead * out_h * out_w];
    for p in 0..lead {
        let plane = bicubic_resize_plane(&src[p * h * w..(p + 1) * h * w], (h, w), (out_h, out_w), antialias);
        data[p * out_h * out_w..(p + 1) * out_h * out_w].copy_from_slice(&plane);
    }
    let mut shape = t.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Tensor::from_vec(data, &shape)
}

// ---------------------------------------------------------------------------
// PSNR and SSIM
// ---------------------------------------------------------------------------

/// Peak signal-to-noise ratio in dB over the border-cropped overlap.
/// Identical images report the documented cap.
pub fn psnr(a: &Plane, b: &Plane, border: usize, peak: f64) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape("psnr", format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    if a.width <= 2 * border || a.height <= 2 * border {
        return Err(Error::invalid(
            "psnr",
            format!("{}x{} too small for border {border}", a.width, a.height),
        ));
    }
    let mut se = 0.0f64;
    let mut count = 0usize;
    for y in border..a.height - border {
        for x in border..a.width - border {
            let d = a.data[y * a.width + x] as f64 - b.data[y * b.width + x] as f64;
            se += d * d;
            count += 1;
        }
    }
    let mse = se / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0f64; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Single-scale SSIM with the standard 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1.0, averaged over valid positions.
pub fn ssim(a: &Plane, b: &Plane) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape("ssim", format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("{}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", a.width, a.height),
        ));
    }
    let win = gaussian_window();
    let l = 1.0f64;
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let (w, h) = (a.width, a.height);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my) = (0.0f64, 0.0f64);
            let (mut sxx, mut syy, mut sxy) = (0.0f64, 0.0f64, 0.0f64);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wt = win[dy * SSIM_WINDOW + dx];
                    let va = a.data[(y0 + dy) * w + x0 + dx] as f64;
                    let vb = b.data[(y0 + dy) * w + x0 + dx] as f64;
                    mx += wt * va;
                    my += wt * vb;
                    sxx += wt * va * va;
                    syy += wt * vb * vb;
                    sxy += wt * va * vb;
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            let val = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += val;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Models under evaluation
// ---------------------------------------------------------------------------

/// Anything that maps an LR batch [N,3,h,w] to an HR batch [N,3,h*r,w*r].
pub trait SrModel {
    fn scale(&self) -> usize;
    fn upscale(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// The network under a given configuration (possibly with an attention-mode
/// override for the ablation harness).
pub struct NetworkModel<'a> {
    pub state: &'a ModelState<f32>,
    pub config: ModelConfig,
}

impl<'a> NetworkModel<'a> {
    pub fn new(state: &'a ModelState<f32>, config: ModelConfig) -> Self {
        NetworkModel { state, config }
    }

    pub fn with_attention_mode(mut self, mode: AttentionMode) -> Self {
        self.config.attention_mode = mode;
        self
    }
}

impl SrModel for NetworkModel<'_> {
    fn scale(&self) -> usize {
        self.config.scale
    }

    fn upscale(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        no_grad(|| forward(self.state, &self.config, x, ForwardMode::Inference))
    }
}

/// Plain bicubic upscaling as a model stand-in (dihedral-equivariant, useful
/// as an evaluation baseline and for exercising the ensemble path).
pub struct BicubicUpscaler {
    pub scale: usize,
}

impl SrModel for BicubicUpscaler {
    fn scale(&self) -> usize {
        self.scale
    }

    fn upscale(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        bicubic_resize(x, h * self.scale, w * self.scale, false)
    }
}

/// Average the model over the 8 dihedral transforms of the input, undoing
/// each transform on the corresponding output.
pub fn self_ensemble<M: SrModel + ?Sized>(model: &M, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut acc: Option<Vec<f64>> = None;
    let mut shape: Vec<usize> = Vec::new();
    for code in 0u8..8 {
        let xt = dihedral_transform(x, code)?;
        let yt = model.upscale(&xt)?;
        let y = dihedral_transform(&yt, dihedral_inverse(code))?;
        match &mut acc {
            None => {
                shape = y.shape().to_vec();
                acc = Some(y.data().iter().map(|&v| v as f64).collect());
            }
            Some(a) => {
                if y.shape() != shape {
                    return Err(Error::shape(
                        "self_ensemble",
                        format!("{:?} vs {:?}", y.shape(), shape),
                    ));
                }
                for (s, &v) in a.iter_mut().zip(y.data()) {
                    *s += v as f64;
                }
            }
        }
    }
    let acc = acc.expect("eight terms");
    Tensor::from_vec(acc.into_iter().map(|v| (v / 8.0) as f32).collect(), &shape)
}

/// Self-ensemble over the network (the "+" variant of the model).
pub fn self_ensemble_forward(
    state: &ModelState<f32>,
    config: &ModelConfig,
    x: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    self_ensemble(&NetworkModel::new(state, *config), x)
}

// ---------------------------------------------------------------------------
// Dataset evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct EvalSettings {
    pub scale: usize,
    /// Border pixels stripped from each side before PSNR (SSIM uses the full
    /// Y plane).
    pub border: usize,
    pub self_ensemble: bool,
    pub attention_mode: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ImageEval {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub settings: EvalSettings,
    pub per_image: Vec<ImageEval>,
    pub aggregate_psnr_db: f64,
    pub aggregate_ssim: f64,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Plain-text table: per-image rows then the average row.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "scale x{}  border {}  self-ensemble {}  attention {}\n",
            self.settings.scale, self.settings.border, self.settings.self_ensemble, self.settings.attention_mode
        ));
        s.push_str(&format!("{:<32} {:>10} {:>10}\n", "image", "PSNR", "SSIM"));
        for row in &self.per_image {
            s.push_str(&format!("{:<32} {:>10.4} {:>10.6}\n", row.name, row.psnr_db, row.ssim));
        }
        s.push_str(&format!(
            "{:<32} {:>10.4} {:>10.6}\n",
            "average", self.aggregate_psnr_db, self.aggregate_ssim
        ));
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s
    }
}

/// Evaluate a model over a directory of HR PNGs: each image is cropped to
/// scale-divisible extents, bicubic-downscaled to LR, upscaled by the model,
/// quantized, and compared on the Y channel. Unreadable or too-small files
/// are skipped with a warning recorded in the report.
pub fn evaluate_dataset<M: SrModel + ?Sized>(
    model: &M,
    hr_dir: &Path,
    border: usize,
    ensemble: bool,
    attention_mode_label: &str,
) -> Result<EvalReport> {
    let scale = model.scale();
    let mut entries: Vec<std::path::PathBuf> = std::fs::read_dir(hr_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e.eq_ignore_ascii_case("png")).unwrap_or(false))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Image(format!("no PNG images in {}", hr_dir.display())));
    }

    let mut per_image = Vec::new();
    let mut warnings = Vec::new();
    for path in entries {
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        match evaluate_one(model, &path, scale, border, ensemble) {
            Ok((p, s)) => per_image.push(ImageEval { name, psnr_db: p, ssim: s }),
            Err(e) => {
                eprintln!("warning: skipping {name}: {e}");
                warnings.push(format!("{name}: {e}"));
            }
        }
    }
    if per_image.is_empty() {
        return Err(Error::Image("every image failed evaluation".into()));
    }
    let n = per_image.len() as f64;
    let aggregate_psnr_db = per_image.iter().map(|r| r.psnr_db).sum::<f64>() / n;
    let aggregate_ssim = per_image.iter().map(|r| r.ssim).sum::<f64>() / n;
    Ok(EvalReport {
        settings: EvalSettings {
            scale,
            border,
            self_ensemble: ensemble,
            attention_mode: attention_mode_label.to_string(),
        },
        per_image,
        aggregate_psnr_db,
        aggregate_ssim,
        warnings,
    })
}

fn evaluate_one<M: SrModel + ?Sized>(
    model: &M,
    path: &Path,
    scale: usize,
    border: usize,
    ensemble: bool,
) -> Result<(f64, f64)> {
    let hr_img = crate::image_io::read_png(path)?;
    let pair = crate::train::hr_to_pair(&hr_img, scale, &path.to_string_lossy())?;
    let (lh, lw) = (pair.lr.shape()[1], pair.lr.shape()[2]);
    let x = pair.lr.reshape(&[1, 3, lh, lw])?;
    let y = if ensemble {
        self_ensemble(model, &x)?
    } else {
        model.upscale(&x)?
    };
    let sr = ImageBuffer::from_float_chw(&y)?;
    let hr = ImageBuffer::from_float_chw(&pair.hr)?;
    let y_sr = sr.y_plane();
    let y_hr = hr.y_plane();
    let p = psnr(&y_sr, &y_hr, border, 1.0)?;
    let s = ssim(&y_sr, &y_hr)?;
    Ok((p, s))
}
