//! Multi-head self-attention over token sets, composed with the partition
//! geometry into adaptive block attention and adaptive grid attention.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{
    adaptive_footage, crop_to_original, grid_padding_mask, grid_partition, grid_reverse,
    pad_for_plan, window_padding_mask, window_partition, window_reverse, AttentionMode,
    PartitionPlan,
};
use crate::tensor::ops::{batched_matmul, gather_map, resample_bilinear};
use crate::tensor::{Element, Tensor};

/// Additive logit mask value for padded key tokens. Large but finite so a
/// fully padded window degrades to a uniform softmax instead of NaN.
const MASK_OFF: f64 = -1e9;

/// Relative-position bias table plus the footage it was built for. At other
/// footages the table is bilinearly resampled (training always runs at the
/// base footage, so the common path is an identity).
#[derive(Debug)]
pub struct RpeTable<E: Element> {
    /// [heads, (2*base_h - 1) * (2*base_w - 1)]
    pub table: Tensor<E>,
    pub base_h: usize,
    pub base_w: usize,
}

/// Projection weights for one multi-head self-attention pass.
#[derive(Debug)]
pub struct AttentionParams<E: Element> {
    pub heads: usize,
    /// Fused Q,K,V projection [C, 3C] (+ bias [3C]); equivalent to three
    /// separate [C, C] projections laid side by side.
    pub qkv_weight: Tensor<E>,
    pub qkv_bias: Tensor<E>,
    pub out_weight: Tensor<E>,
    pub out_bias: Tensor<E>,
    pub rpe: Option<RpeTable<E>>,
}

impl<E: Element> AttentionParams<E> {
    pub fn width(&self) -> usize {
        self.qkv_weight.shape()[0]
    }
}

/// Expand a relative-position table [heads, (2*win_h-1)*(2*win_w-1)] into a
/// per-head bias matrix [heads, T, T] with T = win_h*win_w:
/// bias(h, i, j) = table[h, offset(pos_i - pos_j)].
pub fn relative_position_bias<E: Element>(
    win_h: usize,
    win_w: usize,
    table: &Tensor<E>,
    heads: usize,
) -> Result<Tensor<E>> {
    let offsets = (2 * win_h - 1) * (2 * win_w - 1);
    if table.rank() != 2 || table.shape() != [heads, offsets] {
        return Err(Error::shape(
            "relative_position_bias",
            format!("table must be [{heads},{offsets}], got {:?}", table.shape()),
        ));
    }
    let t = win_h * win_w;
    let mut map = vec![0i64; heads * t * t];
    for h in 0..heads {
        for i in 0..t {
            let (iy, ix) = (i / win_w, i % win_w);
            for j in 0..t {
                let (jy, jx) = (j / win_w, j % win_w);
                let dy = iy as isize - jy as isize + (win_h as isize - 1);
                let dx = ix as isize - jx as isize + (win_w as isize - 1);
                let off = dy as usize * (2 * win_w - 1) + dx as usize;
                map[(h * t + i) * t + j] = (h * offsets + off) as i64;
            }
        }
    }
    gather_map(table, vec![heads, t, t], Arc::new(map), "relative_position_bias")
}

/// Bias matrix for an arbitrary footage, resampling the stored table when the
/// footage differs from the base (identity when it matches).
pub fn rpe_bias_for_footage<E: Element>(
    rpe: &RpeTable<E>,
    heads: usize,
    win_h: usize,
    win_w: usize,
) -> Result<Tensor<E>> {
    if win_h == rpe.base_h && win_w == rpe.base_w {
        return relative_position_bias(win_h, win_w, &rpe.table, heads);
    }
    let (bh, bw) = (2 * rpe.base_h - 1, 2 * rpe.base_w - 1);
    let grid = rpe.table.reshape(&[heads, bh, bw])?;
    let resized = resample_bilinear(&grid, 2 * win_h - 1, 2 * win_w - 1)?;
    let flat = resized.reshape(&[heads, (2 * win_h - 1) * (2 * win_w - 1)])?;
    relative_position_bias(win_h, win_w, &flat, heads)
}

/// Linear layer over the last dim of a token batch [B,T,C] -> [B,T,Cout].
fn linear<E: Element>(x: &Tensor<E>, weight: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c_out = weight.shape()[1];
    let flat = x.reshape(&[b * t, c])?;
    let y = batched_matmul(&flat, weight)?.add_bias(bias)?;
    y.reshape(&[b, t, c_out])
}

/// [B,T,C] -> [B*heads, T, C/heads]
fn split_heads<E: Element>(x: &Tensor<E>, heads: usize) -> Result<Tensor<E>> {
    let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = c / heads;
    x.reshape(&[b, t, heads, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * heads, t, d])
}

/// Inverse of [`split_heads`].
fn merge_heads<E: Element>(x: &Tensor<E>, heads: usize) -> Result<Tensor<E>> {
    let (bh, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let b = bh / heads;
    x.reshape(&[b, heads, t, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, t, heads * d])
}

/// Tile a per-head bias [heads, T, T] across a token batch: [B*heads, T, T].
fn tile_rpe<E: Element>(bias: &Tensor<E>, batch: usize) -> Result<Tensor<E>> {
    let (heads, t, _) = (bias.shape()[0], bias.shape()[1], bias.shape()[2]);
    let per = heads * t * t;
    let mut map = vec![0i64; batch * per];
    for b in 0..batch {
        for i in 0..per {
            map[b * per + i] = i as i64;
        }
    }
    gather_map(bias, vec![batch * heads, t, t], Arc::new(map), "tile_rpe")
}

/// Additive key mask [B*heads, T, T] built from per-token padding flags,
/// laid out as [window/cell][token] and shared across the N images of the
/// batch. None when nothing is padded.
fn padding_mask_tensor<E: Element>(
    flags: &[bool],
    n: usize,
    groups: usize,
    t: usize,
    heads: usize,
) -> Option<Tensor<E>> {
    if flags.iter().all(|&f| !f) {
        return None;
    }
    let off = E::from_f64(MASK_OFF);
    let mut data = vec![E::zero(); n * groups * heads * t * t];
    for ni in 0..n {
        for g in 0..groups {
            let fl = &flags[g * t..(g + 1) * t];
            for h in 0..heads {
                let base = (((ni * groups + g) * heads + h) * t) * t;
                for i in 0..t {
                    for (j, &padded) in fl.iter().enumerate() {
                        if padded {
                            data[base + i * t + j] = off;
                        }
                    }
                }
            }
        }
    }
    Some(Tensor::from_vec(data, &[n * groups * heads, t, t]).expect("mask tensor"))
}

/// Scaled dot-product multi-head self-attention over a token batch [B,T,C]:
/// per head, softmax(Q K^T / sqrt(head_dim) + rpe + mask) V, heads merged,
/// then output-projected.
pub fn multihead_self_attention<E: Element>(
    tokens: &Tensor<E>,
    params: &AttentionParams<E>,
    rpe_bias: Option<&Tensor<E>>,
    additive_mask: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    if tokens.rank() != 3 {
        return Err(Error::shape(
            "multihead_self_attention",
            format!("tokens must be [B,T,C], got {:?}", tokens.shape()),
        ));
    }
    let (b, t, c) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    let heads = params.heads;
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid(
            "multihead_self_attention",
            format!("width {c} not divisible by heads {heads}"),
        ));
    }
    if params.qkv_weight.shape() != [c, 3 * c] {
        return Err(Error::shape(
            "multihead_self_attention",
            format!("qkv weight must be [{c},{}], got {:?}", 3 * c, params.qkv_weight.shape()),
        ));
    }
    let d = c / heads;

    let qkv = linear(tokens, &params.qkv_weight, &params.qkv_bias)?;
    let q = split_heads(&qkv.slice_lastdim(0, c)?, heads)?;
    let k = split_heads(&qkv.slice_lastdim(c, c)?, heads)?;
    let v = split_heads(&qkv.slice_lastdim(2 * c, c)?, heads)?;

    let mut scores = batched_matmul(&q, &k.transpose_last2()?)?.scale(1.0 / (d as f64).sqrt())?;
    if let Some(bias) = rpe_bias {
        if bias.shape() != [heads, t, t] {
            return Err(Error::shape(
                "multihead_self_attention",
                format!("rpe bias must be [{heads},{t},{t}], got {:?}", bias.shape()),
            ));
        }
        scores = scores.add(&tile_rpe(bias, b)?)?;
    }
    if let Some(mask) = additive_mask {
        scores = scores.add(mask)?;
    }
    let attn = scores.softmax_lastdim()?;
    let ctx = batched_matmul(&attn, &v)?;
    let merged = merge_heads(&ctx, heads)?;
    linear(&merged, &params.out_weight, &params.out_bias)
}

fn attention_over_partition<E: Element>(
    x: &Tensor<E>,
    params: &AttentionParams<E>,
    mode: AttentionMode,
    mask_padding: bool,
    grid: bool,
) -> Result<Tensor<E>> {
    if x.rank() != 4 {
        return Err(Error::shape(
            "adaptive_attention",
            format!("expected [N,C,H,W], got {:?}", x.shape()),
        ));
    }
    let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let plan = adaptive_footage(h, w, mode)?;
    let padded = pad_for_plan(x, &plan)?;
    let (tokens, fh, fw, groups) = if grid {
        (
            grid_partition(&padded, &plan)?,
            plan.grid_h,
            plan.grid_w,
            plan.n_cells(),
        )
    } else {
        (
            window_partition(&padded, &plan)?,
            plan.win_h,
            plan.win_w,
            plan.n_windows(),
        )
    };
    let t = fh * fw;
    let rpe_bias = match &params.rpe {
        Some(rpe) => Some(rpe_bias_for_footage(rpe, params.heads, fh, fw)?),
        None => None,
    };
    let mask = if mask_padding {
        let flags = if grid { grid_padding_mask(&plan) } else { window_padding_mask(&plan) };
        padding_mask_tensor::<E>(&flags, n, groups, t, params.heads)
    } else {
        None
    };
    let out = multihead_self_attention(&tokens, params, rpe_bias.as_ref(), mask.as_ref())?;
    let canvas = if grid {
        grid_reverse(&out, &plan)?
    } else {
        window_reverse(&out, &plan)?
    };
    crop_to_original(&canvas, &plan)
}

/// Block attention: self-attention inside each non-overlapping window of the
/// padded canvas. Output shape equals input shape.
pub fn adaptive_block_attention<E: Element>(
    x: &Tensor<E>,
    params: &AttentionParams<E>,
    mode: AttentionMode,
    mask_padding: bool,
) -> Result<Tensor<E>> {
    attention_over_partition(x, params, mode, mask_padding, false)
}

/// Grid attention: self-attention over each dilated grid cell of the padded
/// canvas. Output shape equals input shape.
pub fn adaptive_grid_attention<E: Element>(
    x: &Tensor<E>,
    params: &AttentionParams<E>,
    mode: AttentionMode,
    mask_padding: bool,
) -> Result<Tensor<E>> {
    attention_over_partition(x, params, mode, mask_padding, true)
}

/// Plan used by both attention passes for an input of the given extents.
pub fn plan_for_input(h: usize, w: usize, mode: AttentionMode) -> Result<PartitionPlan> {
    adaptive_footage(h, w, mode)
}
