//! Partition geometry for adaptive multi-axis attention.
//!
//! Attention over a feature map runs in two passes: block attention inside
//! non-overlapping windows, and grid attention over dilated token sets that
//! take one pixel per window position. The adaptive scheme sizes both
//! footages at ceil(sqrt(H)) x ceil(sqrt(W)) over a zero-padded canvas, which
//! balances the two passes and makes every window and every grid cell share
//! exactly one pixel. This module holds all index math: footage selection,
//! padding, the two partitions and their exact inverses, and the closed-form
//! query-key pair count used by the complexity benchmark.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::gather_map;
use crate::tensor::{Element, Tensor};

/// Footage selection strategy for one attention pass pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Pad to ceil(sqrt(H))^2 x ceil(sqrt(W))^2; window and grid footages are
    /// both ceil(sqrt(H)) x ceil(sqrt(W)).
    AdaptiveExact,
    /// Pad to ceil(sqrt(H)) * ceil(H / ceil(sqrt(H))) per axis; the grid
    /// footage is the window count per axis.
    AdaptiveApprox,
    /// Fixed P x P windows and grid, padding to the next multiple of P.
    Fixed(usize),
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttentionMode::AdaptiveExact => write!(f, "exact"),
            AttentionMode::AdaptiveApprox => write!(f, "approx"),
            AttentionMode::Fixed(p) => write!(f, "fixed:{p}"),
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact" | "adaptive" => Ok(AttentionMode::AdaptiveExact),
            "approx" => Ok(AttentionMode::AdaptiveApprox),
            other => {
                if let Some(p) = other.strip_prefix("fixed:") {
                    let p: usize = p
                        .parse()
                        .map_err(|_| format!("bad fixed footage in {other:?}"))?;
                    if p == 0 {
                        return Err("fixed footage must be >= 1".into());
                    }
                    Ok(AttentionMode::Fixed(p))
                } else {
                    Err(format!(
                        "unknown attention mode {other:?} (expected exact|approx|fixed:P)"
                    ))
                }
            }
        }
    }
}

impl Serialize for AttentionMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for AttentionMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Complete geometry of one block-attention + grid-attention pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    pub orig_h: usize,
    pub orig_w: usize,
    pub mode: AttentionMode,
    pub pad_h: usize,
    pub pad_w: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_win_h: usize,
    pub n_win_w: usize,
}

impl PartitionPlan {
    pub fn n_windows(&self) -> usize {
        self.n_win_h * self.n_win_w
    }

    pub fn tokens_per_window(&self) -> usize {
        self.win_h * self.win_w
    }

    /// Grid cells per axis: the dilation of the grid sampling.
    pub fn n_cell_h(&self) -> usize {
        self.pad_h / self.grid_h
    }

    pub fn n_cell_w(&self) -> usize {
        self.pad_w / self.grid_w
    }

    pub fn n_cells(&self) -> usize {
        self.n_cell_h() * self.n_cell_w()
    }

    pub fn tokens_per_cell(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Smallest s with s * s >= n.
pub fn ceil_sqrt(n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let mut s = (n as f64).sqrt() as usize;
    while s * s < n {
        s += 1;
    }
    while s > 1 && (s - 1) * (s - 1) >= n {
        s -= 1;
    }
    s
}

fn div_ceil(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Compute the padded canvas, window footage and grid footage for a feature
/// map of the given spatial extents.
pub fn adaptive_footage(h: usize, w: usize, mode: AttentionMode) -> Result<PartitionPlan> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(
            "adaptive_footage",
            format!("extents must be positive, got {h}x{w}"),
        ));
    }
    let plan = match mode {
        AttentionMode::AdaptiveExact => {
            let (sh, sw) = (ceil_sqrt(h), ceil_sqrt(w));
            PartitionPlan {
                orig_h: h,
                orig_w: w,
                mode,
                pad_h: sh * sh,
                pad_w: sw * sw,
                win_h: sh,
                win_w: sw,
                grid_h: sh,
                grid_w: sw,
                n_win_h: sh,
                n_win_w: sw,
            }
        }
        AttentionMode::AdaptiveApprox => {
            let (sh, sw) = (ceil_sqrt(h), ceil_sqrt(w));
            let (nh, nw) = (div_ceil(h, sh), div_ceil(w, sw));
            PartitionPlan {
                orig_h: h,
                orig_w: w,
                mode,
                pad_h: sh * nh,
                pad_w: sw * nw,
                win_h: sh,
                win_w: sw,
                grid_h: nh,
                grid_w: nw,
                n_win_h: nh,
                n_win_w: nw,
            }
        }
        AttentionMode::Fixed(p) => {
            if p == 0 {
                return Err(Error::invalid("adaptive_footage", "fixed footage must be >= 1"));
            }
            let (nh, nw) = (div_ceil(h, p), div_ceil(w, p));
            PartitionPlan {
                orig_h: h,
                orig_w: w,
                mode,
                pad_h: p * nh,
                pad_w: p * nw,
                win_h: p,
                win_w: p,
                grid_h: p,
                grid_w: p,
                n_win_h: nh,
                n_win_w: nw,
            }
        }
    };
    debug_assert_eq!(plan.pad_h, plan.win_h * plan.n_win_h);
    debug_assert_eq!(plan.pad_w, plan.win_w * plan.n_win_w);
    debug_assert_eq!(plan.pad_h % plan.grid_h, 0);
    debug_assert_eq!(plan.pad_w % plan.grid_w, 0);
    Ok(plan)
}

fn check_padded<E: Element>(op: &'static str, x: &Tensor<E>, plan: &PartitionPlan) -> Result<(usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::shape(op, format!("expected rank 4, got {:?}", x.shape())));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if x.shape()[2] != plan.pad_h || x.shape()[3] != plan.pad_w {
        return Err(Error::shape(
            op,
            format!(
                "expected padded extents {}x{}, got {}x{}",
                plan.pad_h, plan.pad_w, x.shape()[2], x.shape()[3]
            ),
        ));
    }
    Ok((n, c))
}

/// Zero-pad x [N,C,H,W] to the plan's canvas, content at the top-left.
pub fn pad_for_plan<E: Element>(x: &Tensor<E>, plan: &PartitionPlan) -> Result<Tensor<E>> {
    if x.rank() != 4 {
        return Err(Error::shape("pad_for_plan", format!("expected rank 4, got {:?}", x.shape())));
    }
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    if h != plan.orig_h || w != plan.orig_w {
        return Err(Error::shape(
            "pad_for_plan",
            format!("plan is for {}x{}, input is {h}x{w}", plan.orig_h, plan.orig_w),
        ));
    }
    let (ph, pw) = (plan.pad_h, plan.pad_w);
    let mut map = vec![-1i64; n * c * ph * pw];
    for ni in 0..n {
        for ci in 0..c {
            let src_base = (ni * c + ci) * h * w;
            let dst_base = (ni * c + ci) * ph * pw;
            for y in 0..h {
                for xix in 0..w {
                    map[dst_base + y * pw + xix] = (src_base + y * w + xix) as i64;
                }
            }
        }
    }
    gather_map(x, vec![n, c, ph, pw], Arc::new(map), "pad_for_plan")
}

/// Inverse of the padding: top-left crop back to the original extents.
pub fn crop_to_original<E: Element>(x: &Tensor<E>, plan: &PartitionPlan) -> Result<Tensor<E>> {
    let (n, c) = check_padded("crop_to_original", x, plan)?;
    let (h, w) = (plan.orig_h, plan.orig_w);
    let (ph, pw) = (plan.pad_h, plan.pad_w);
    let mut map = vec![0i64; n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            let src_base = (ni * c + ci) * ph * pw;
            let dst_base = (ni * c + ci) * h * w;
            for y in 0..h {
                for xix in 0..w {
                    map[dst_base + y * w + xix] = (src_base + y * pw + xix) as i64;
                }
            }
        }
    }
    gather_map(x, vec![n, c, h, w], Arc::new(map), "crop_to_original")
}

/// Split the padded canvas into non-overlapping windows:
/// [N,C,pad_h,pad_w] -> [N * n_windows, win_h * win_w, C].
/// Windows and tokens are both ordered row-major; window (u,v) token (a,b)
/// reads pixel (u * win_h + a, v * win_w + b).
pub fn window_partition<E: Element>(x: &Tensor<E>, plan: &PartitionPlan) -> Result<Tensor<E>> {
    let (n, c) = check_padded("window_partition", x, plan)?;
    let (ph, pw) = (plan.pad_h, plan.pad_w);
    let (wh, ww) = (plan.win_h, plan.win_w);
    let (nwh, nww) = (plan.n_win_h, plan.n_win_w);
    let t = wh * ww;
    let n_win = nwh * nww;
    let mut map = vec![0i64; n * n_win * t * c];
    for ni in 0..n {
        for u in 0..nwh {
            for v in 0..nww {
                let bp = (ni * n_win + u * nww + v) * t * c;
                for a in 0..wh {
                    for b in 0..ww {
                        let (y, xx) = (u * wh + a, v * ww + b);
                        let tok = a * ww + b;
                        for ci in 0..c {
                            map[bp + tok * c + ci] = (((ni * c + ci) * ph + y) * pw + xx) as i64;
                        }
                    }
                }
            }
        }
    }
    gather_map(x, vec![n * n_win, t, c], Arc::new(map), "window_partition")
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse<E: Element>(tokens: &Tensor<E>, plan: &PartitionPlan) -> Result<Tensor<E>> {
    let n_win = plan.n_windows();
    let t = plan.tokens_per_window();
    if tokens.rank() != 3 || tokens.shape()[1] != t || !tokens.shape()[0].is_multiple_of(n_win) {
        return Err(Error::shape(
            "window_reverse",
            format!("tokens {:?} do not match plan ({} windows of {} tokens)", tokens.shape(), n_win, t),
        ));
    }
    let n = tokens.shape()[0] / n_win;
    let c = tokens.shape()[2];
    let (ph, pw) = (plan.pad_h, plan.pad_w);
    let (wh, ww) = (plan.win_h, plan.win_w);
    let nww = plan.n_win_w;
    let mut map = vec![0i64; n * c * ph * pw];
    for ni in 0..n {
        for y in 0..ph {
            for xx in 0..pw {
                let (u, a) = (y / wh, y % wh);
                let (v, b) = (xx / ww, xx % ww);
                let bp = (ni * n_win + u * nww + v) * t * c;
                let tok = a * ww + b;
                for ci in 0..c {
                    map[((ni * c + ci) * ph + y) * pw + xx] = (bp + tok * c + ci) as i64;
                }
            }
        }
    }
    gather_map(tokens, vec![n, c, ph, pw], Arc::new(map), "window_reverse")
}

/// Dilated grid partition: [N,C,pad_h,pad_w] -> [N * n_cells, grid_h * grid_w, C].
/// Cell (u,v) member (a,b) reads pixel (a * n_cell_h + u, b * n_cell_w + v),
/// so each cell takes exactly one pixel from every window position.
pub fn grid_partition<E: Element>(x: &Tensor<E>, plan: &PartitionPlan) -> Result<Tensor<E>> {
    let (n, c) = check_padded("grid_partition", x, plan)?;
    if !plan.pad_h.is_multiple_of(plan.grid_h) || !plan.pad_w.is_multiple_of(plan.grid_w) {
        return Err(Error::invalid(
            "grid_partition",
            format!(
                "grid {}x{} does not divide padded canvas {}x{}",
                plan.grid_h, plan.grid_w, plan.pad_h, plan.pad_w
            ),
        ));
    }
    let (ph, pw) = (plan.pad_h, plan.pad_w);
    let (gh, gw) = (plan.grid_h, plan.grid_w);
    let (dh, dw) = (plan.n_cell_h(), plan.n_cell_w());
    let g = gh * gw;
    let n_cell = dh * dw;
    let mut map = vec![0i64; n * n_cell * g * c];
    for ni in 0..n {
        for u in 0..dh {
            for v in 0..dw {
                let bp = (ni * n_cell + u * dw + v) * g * c;
                for a in 0..gh {
                    for b in 0..gw {
                        let (y, xx) = (a * dh + u, b * dw + v);
                        let tok = a * gw + b;
                        for ci in 0..c {
                            map[bp + tok * c + ci] = (((ni * c + ci) * ph + y) * pw + xx) as i64;
                        }
                    }
                }
            }
        }
    }
    gather_map(x, vec![n * n_cell, g, c], Arc::new(map), "grid_partition")
}

/// Exact inverse of [`grid_partition`].
pub fn grid_reverse<E: Element>(tokens: &Tensor<E>, plan: &PartitionPlan) -> Result<Tensor<E>> {
    let n_cell = plan.n_cells();
    let g = plan.tokens_per_cell();
    if tokens.rank() != 3 || tokens.shape()[1] != g || !tokens.shape()[0].is_multiple_of(n_cell) {
        return Err(Error::shape(
            "grid_reverse",
            format!("tokens {:?} do not match plan ({} cells of {} tokens)", tokens.shape(), n_cell, g),
        ));
    }
    let n = tokens.shape()[0] / n_cell;
    let c = tokens.shape()[2];
    let (ph, pw) = (plan.pad_h, plan.pad_w);
    let (gw, dh, dw) = (plan.grid_w, plan.n_cell_h(), plan.n_cell_w());
    let mut map = vec![0i64; n * c * ph * pw];
    for ni in 0..n {
        for y in 0..ph {
            for xx in 0..pw {
                let (a, u) = (y / dh, y % dh);
                let (b, v) = (xx / dw, xx % dw);
                let bp = (ni * n_cell + u * dw + v) * g * c;
                let tok = a * gw + b;
                for ci in 0..c {
                    map[((ni * c + ci) * ph + y) * pw + xx] = (bp + tok * c + ci) as i64;
                }
            }
        }
    }
    gather_map(tokens, vec![n, c, ph, pw], Arc::new(map), "grid_reverse")
}

/// Per-token padding flags for block attention, indexed [window][token]:
/// true where the token reads a zero-padded pixel.
pub fn window_padding_mask(plan: &PartitionPlan) -> Vec<bool> {
    let mut mask = vec![false; plan.n_windows() * plan.tokens_per_window()];
    let (wh, ww, nww) = (plan.win_h, plan.win_w, plan.n_win_w);
    for u in 0..plan.n_win_h {
        for v in 0..nww {
            let base = (u * nww + v) * wh * ww;
            for a in 0..wh {
                for b in 0..ww {
                    let (y, x) = (u * wh + a, v * ww + b);
                    mask[base + a * ww + b] = y >= plan.orig_h || x >= plan.orig_w;
                }
            }
        }
    }
    mask
}

/// Per-token padding flags for grid attention, indexed [cell][token].
pub fn grid_padding_mask(plan: &PartitionPlan) -> Vec<bool> {
    let (gh, gw) = (plan.grid_h, plan.grid_w);
    let (dh, dw) = (plan.n_cell_h(), plan.n_cell_w());
    let mut mask = vec![false; plan.n_cells() * gh * gw];
    for u in 0..dh {
        for v in 0..dw {
            let base = (u * dw + v) * gh * gw;
            for a in 0..gh {
                for b in 0..gw {
                    let (y, x) = (a * dh + u, b * dw + v);
                    mask[base + a * gw + b] = y >= plan.orig_h || x >= plan.orig_w;
                }
            }
        }
    }
    mask
}

/// Number of query-key pairs for one block-attention pass plus one
/// grid-attention pass under this plan.
pub fn attention_cost(plan: &PartitionPlan) -> u64 {
    let t = plan.tokens_per_window() as u64;
    let g = plan.tokens_per_cell() as u64;
    plan.n_windows() as u64 * t * t + plan.n_cells() as u64 * g * g
}

/// Query-key pairs for full global attention over the same map (one window
/// covering everything, for both passes). The quadratic baseline.
pub fn global_attention_cost(h: usize, w: usize) -> u64 {
    let t = (h * w) as u64;
    2 * t * t
}

/// Least-squares slope of log(cost) against log(H*W).
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_sqrt_values() {
        assert_eq!(ceil_sqrt(1), 1);
        assert_eq!(ceil_sqrt(2), 2);
        assert_eq!(ceil_sqrt(4), 2);
        assert_eq!(ceil_sqrt(50), 8);
        assert_eq!(ceil_sqrt(64), 8);
        assert_eq!(ceil_sqrt(65), 9);
    }

    #[test]
    fn footage_perfect_square() {
        let p = adaptive_footage(64, 64, AttentionMode::AdaptiveExact).unwrap();
        assert_eq!((p.win_h, p.win_w), (8, 8));
        assert_eq!((p.pad_h, p.pad_w), (64, 64));
        assert_eq!((p.n_win_h, p.n_win_w), (8, 8));
        assert_eq!((p.grid_h, p.grid_w), (8, 8));
    }

    #[test]
    fn footage_50_exact_and_approx() {
        let p = adaptive_footage(50, 50, AttentionMode::AdaptiveExact).unwrap();
        assert_eq!((p.win_h, p.pad_h), (8, 64));
        let p = adaptive_footage(50, 50, AttentionMode::AdaptiveApprox).unwrap();
        assert_eq!((p.win_h, p.pad_h, p.grid_h), (8, 56, 7));
    }

    #[test]
    fn footage_degenerate_and_errors() {
        for mode in [AttentionMode::AdaptiveExact, AttentionMode::AdaptiveApprox, AttentionMode::Fixed(1)] {
            let p = adaptive_footage(1, 1, mode).unwrap();
            assert_eq!((p.win_h, p.win_w), (1, 1));
            assert_eq!((p.pad_h, p.pad_w), (1, 1));
        }
        // fixed footage larger than the input still pads up to one window
        let p = adaptive_footage(1, 1, AttentionMode::Fixed(3)).unwrap();
        assert_eq!((p.pad_h, p.n_win_h), (3, 1));
        assert!(adaptive_footage(0, 4, AttentionMode::AdaptiveExact).is_err());
        assert!(adaptive_footage(4, 4, AttentionMode::Fixed(0)).is_err());
    }

    #[test]
    fn fixed_mode_pads_to_multiple() {
        let p = adaptive_footage(50, 30, AttentionMode::Fixed(8)).unwrap();
        assert_eq!((p.pad_h, p.pad_w), (56, 32));
        assert_eq!((p.win_h, p.grid_h), (8, 8));
        assert_eq!((p.n_win_h, p.n_win_w), (7, 4));
    }

    fn ramp(n: usize, c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_vec((0..n * c * h * w).map(|i| i as f32 * 0.5 - 3.0).collect(), &[n, c, h, w]).unwrap()
    }

    #[test]
    fn pad_places_content_top_left_and_preserves_sum() {
        let x = ramp(1, 1, 3, 3);
        let plan = adaptive_footage(3, 3, AttentionMode::Fixed(4)).unwrap();
        let p = pad_for_plan(&x, &plan).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 4]);
        let d = p.data();
        for y in 0..4 {
            for xx in 0..4 {
                if y < 3 && xx < 3 {
                    assert_eq!(d[y * 4 + xx], x.data()[y * 3 + xx]);
                } else {
                    assert_eq!(d[y * 4 + xx], 0.0);
                }
            }
        }
        let sum_in: f32 = x.data().iter().sum();
        let sum_out: f32 = d.iter().sum();
        assert_eq!(sum_in, sum_out);
    }

    #[test]
    fn pad_of_conforming_input_is_identity() {
        let x = ramp(2, 3, 4, 4);
        let plan = adaptive_footage(4, 4, AttentionMode::Fixed(2)).unwrap();
        assert_eq!((plan.pad_h, plan.pad_w), (4, 4));
        let p = pad_for_plan(&x, &plan).unwrap();
        assert_eq!(p.data(), x.data());
        let c = crop_to_original(&p, &plan).unwrap();
        assert_eq!(c.data(), x.data());
    }

    #[test]
    fn window_partition_enumerated_2x2_on_4x4() {
        // 4x4 canvas, 2x2 windows: window 0 holds pixels (0,0),(0,1),(1,0),(1,1)
        let x = Tensor::from_vec((0..16).map(|i| i as f32).collect(), &[1, 1, 4, 4]).unwrap();
        let plan = adaptive_footage(4, 4, AttentionMode::Fixed(2)).unwrap();
        let t = window_partition(&x, &plan).unwrap();
        assert_eq!(t.shape(), &[4, 4, 1]);
        assert_eq!(&t.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        // window 1 is the top-right 2x2
        assert_eq!(&t.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn grid_partition_enumerated_2x2_on_4x4() {
        // grid 2x2 on 4x4: cell (0,0) holds pixels (0,0),(0,2),(2,0),(2,2)
        let x = Tensor::from_vec((0..16).map(|i| i as f32).collect(), &[1, 1, 4, 4]).unwrap();
        let plan = adaptive_footage(4, 4, AttentionMode::Fixed(2)).unwrap();
        let t = grid_partition(&x, &plan).unwrap();
        assert_eq!(t.shape(), &[4, 4, 1]);
        assert_eq!(&t.data()[0..4], &[0.0, 2.0, 8.0, 10.0]);
        // cell (0,1) is shifted one column right
        assert_eq!(&t.data()[4..8], &[1.0, 3.0, 9.0, 11.0]);
    }

    #[test]
    fn single_window_is_a_reshape_of_values() {
        let x = ramp(1, 2, 3, 3);
        let plan = adaptive_footage(3, 3, AttentionMode::Fixed(3)).unwrap();
        let t = window_partition(&x, &plan).unwrap();
        assert_eq!(t.shape(), &[1, 9, 2]);
        let mut got = t.data().to_vec();
        let mut want = x.data().to_vec();
        got.sort_by(f32::total_cmp);
        want.sort_by(f32::total_cmp);
        assert_eq!(got, want);

        // grid covering the full canvas yields the same token multiset
        let g = grid_partition(&x, &plan).unwrap();
        let mut gg = g.data().to_vec();
        gg.sort_by(f32::total_cmp);
        assert_eq!(gg, want);
    }

    #[test]
    fn round_trips_are_bit_exact() {
        let mut rng = crate::rng::Rng::new(5);
        for &(h, w) in &[(5, 7), (1, 1), (3, 8), (16, 16), (11, 2)] {
            let x = Tensor::from_vec(
                (0..2 * 3 * h * w).map(|_| rng.uniform(-4.0, 4.0) as f32).collect(),
                &[2, 3, h, w],
            )
            .unwrap();
            for mode in [AttentionMode::AdaptiveExact, AttentionMode::AdaptiveApprox, AttentionMode::Fixed(3)] {
                let plan = adaptive_footage(h, w, mode).unwrap();
                let padded = pad_for_plan(&x, &plan).unwrap();
                let wt = window_partition(&padded, &plan).unwrap();
                let back = window_reverse(&wt, &plan).unwrap();
                assert_eq!(back.data(), padded.data(), "window path {mode} {h}x{w}");
                let gt = grid_partition(&padded, &plan).unwrap();
                let back = grid_reverse(&gt, &plan).unwrap();
                assert_eq!(back.data(), padded.data(), "grid path {mode} {h}x{w}");
                let cropped = crop_to_original(&back, &plan).unwrap();
                assert_eq!(cropped.data(), x.data());
            }
        }
    }

    #[test]
    fn zero_tensor_round_trip_stays_zero() {
        let plan = adaptive_footage(5, 5, AttentionMode::AdaptiveExact).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 1, 5, 5]).unwrap();
        let p = pad_for_plan(&x, &plan).unwrap();
        let t = window_partition(&p, &plan).unwrap();
        let r = window_reverse(&t, &plan).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partitions_cover_each_pixel_once() {
        for &(h, w) in &[(6, 10), (9, 9), (5, 3)] {
            for mode in [AttentionMode::AdaptiveExact, AttentionMode::AdaptiveApprox, AttentionMode::Fixed(4)] {
                let plan = adaptive_footage(h, w, mode).unwrap();
                let px = plan.pad_h * plan.pad_w;
                let x = Tensor::from_vec((0..px).map(|i| i as f32).collect(), &[1, 1, plan.pad_h, plan.pad_w]).unwrap();
                for tokens in [window_partition(&x, &plan).unwrap(), grid_partition(&x, &plan).unwrap()] {
                    let mut seen = vec![false; px];
                    for &v in tokens.data() {
                        let idx = v as usize;
                        assert!(!seen[idx], "pixel {idx} appears twice");
                        seen[idx] = true;
                    }
                    assert!(seen.iter().all(|&s| s), "not all pixels covered");
                }
            }
        }
    }

    #[test]
    fn exact_mode_cross_coverage() {
        // every grid cell contains exactly one pixel of every window
        for &(h, w) in &[(50, 50), (7, 13), (16, 5)] {
            let plan = adaptive_footage(h, w, AttentionMode::AdaptiveExact).unwrap();
            assert_eq!(plan.tokens_per_window(), plan.tokens_per_cell(), "balanced footage");
            let win_of = |y: usize, x: usize| (y / plan.win_h) * plan.n_win_w + x / plan.win_w;
            let mut counts =
                vec![0usize; plan.n_cells() * plan.n_windows()];
            let (dh, dw) = (plan.n_cell_h(), plan.n_cell_w());
            for u in 0..dh {
                for v in 0..dw {
                    let cell = u * dw + v;
                    for a in 0..plan.grid_h {
                        for b in 0..plan.grid_w {
                            let (y, x) = (a * dh + u, b * dw + v);
                            counts[cell * plan.n_windows() + win_of(y, x)] += 1;
                        }
                    }
                }
            }
            assert!(counts.iter().all(|&c| c == 1), "{h}x{w}: cross-coverage violated");
        }
    }

    #[test]
    fn attention_cost_examples() {
        let p = adaptive_footage(64, 64, AttentionMode::AdaptiveExact).unwrap();
        assert_eq!(attention_cost(&p), 524_288);
        let p = adaptive_footage(1, 1, AttentionMode::AdaptiveExact).unwrap();
        assert_eq!(attention_cost(&p), 2);
        let fixed = adaptive_footage(64, 64, AttentionMode::Fixed(8)).unwrap();
        assert_eq!(attention_cost(&fixed), 524_288);
        // divergence appears away from n = P^4
        let ada = adaptive_footage(256, 256, AttentionMode::AdaptiveExact).unwrap();
        let fix = adaptive_footage(256, 256, AttentionMode::Fixed(8)).unwrap();
        assert_eq!(attention_cost(&ada), 2 * 16u64.pow(6));
        assert_ne!(attention_cost(&ada), attention_cost(&fix));
    }

    #[test]
    fn cost_slopes() {
        let sizes = [16usize, 32, 64, 128, 256];
        let ada: Vec<(f64, f64)> = sizes
            .iter()
            .map(|&n| {
                let p = adaptive_footage(n, n, AttentionMode::AdaptiveExact).unwrap();
                ((n * n) as f64, attention_cost(&p) as f64)
            })
            .collect();
        let slope = log_log_slope(&ada);
        assert!((1.35..=1.65).contains(&slope), "adaptive slope {slope}");
        let glob: Vec<(f64, f64)> = sizes
            .iter()
            .map(|&n| ((n * n) as f64, global_attention_cost(n, n) as f64))
            .collect();
        let gslope = log_log_slope(&glob);
        assert!((1.9..=2.1).contains(&gslope), "global slope {gslope}");
    }

    #[test]
    fn padding_masks_flag_exactly_the_pad_region() {
        let plan = adaptive_footage(3, 3, AttentionMode::Fixed(2)).unwrap();
        let wm = window_padding_mask(&plan);
        let padded: usize = wm.iter().filter(|&&b| b).count();
        assert_eq!(padded, plan.pad_h * plan.pad_w - 9);
        let gm = grid_padding_mask(&plan);
        let padded: usize = gm.iter().filter(|&&b| b).count();
        assert_eq!(padded, plan.pad_h * plan.pad_w - 9);
    }

    #[test]
    fn mode_string_round_trip() {
        for mode in [AttentionMode::AdaptiveExact, AttentionMode::AdaptiveApprox, AttentionMode::Fixed(8)] {
            let s = mode.to_string();
            let back: AttentionMode = s.parse().unwrap();
            assert_eq!(mode, back);
        }
        assert!("fixed:0".parse::<AttentionMode>().is_err());
        assert!("bogus".parse::<AttentionMode>().is_err());
    }
}
