//! Forward operations and their backward rules.
//!
//! Every op validates shapes, computes the forward value, checks the result
//! for non-finite values where the arithmetic could produce them, and records
//! a backward closure on the output. Index-remapping ops (padding, windowing,
//! slicing, permutation) share one gather primitive whose backward is a
//! scatter-add, which keeps all of them exact bijections where the map is one.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{strides, BackwardArgs, Element, Tensor};

fn ensure_finite<E: Element>(op: &'static str, data: &[E]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Below this many scalar multiply-adds an op runs sequentially; the rayon
/// dispatch overhead dominates tiny workloads.
const PAR_THRESHOLD: usize = 1 << 16;

fn same_shape<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Channel axis for the layouts this crate uses: NCHW (rank 4), token
/// batches [B, T, C] (rank 3), matrices [B, C] (rank 2), vectors (rank 1).
fn channel_axis(rank: usize) -> usize {
    match rank {
        4 => 1,
        3 => 2,
        2 => 1,
        _ => 0,
    }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

impl<E: Element> Tensor<E> {
    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("add", self, rhs)?;
        let data: Vec<E> = self.data().iter().zip(rhs.data()).map(|(&a, &b)| a + b).collect();
        ensure_finite("add", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            Box::new(|args: &BackwardArgs<'_, E>| {
                vec![Some(args.grad.to_vec()), Some(args.grad.to_vec())]
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("sub", self, rhs)?;
        let data: Vec<E> = self.data().iter().zip(rhs.data()).map(|(&a, &b)| a - b).collect();
        ensure_finite("sub", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            Box::new(|args: &BackwardArgs<'_, E>| {
                vec![
                    Some(args.grad.to_vec()),
                    Some(args.grad.iter().map(|&g| -g).collect()),
                ]
            }),
        ))
    }

    /// Hadamard product.
    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape("mul", self, rhs)?;
        let data: Vec<E> = self.data().iter().zip(rhs.data()).map(|(&a, &b)| a * b).collect();
        ensure_finite("mul", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            Box::new(|args: &BackwardArgs<'_, E>| {
                let a = args.parents[0].data();
                let b = args.parents[1].data();
                let da = args.needs(0).then(|| {
                    args.grad.iter().zip(b).map(|(&g, &bv)| g * bv).collect()
                });
                let db = args.needs(1).then(|| {
                    args.grad.iter().zip(a).map(|(&g, &av)| g * av).collect()
                });
                vec![da, db]
            }),
        ))
    }

    /// Multiply by a scalar constant.
    pub fn scale(&self, factor: f64) -> Result<Tensor<E>> {
        let c = E::from_f64(factor);
        let data: Vec<E> = self.data().iter().map(|&a| a * c).collect();
        ensure_finite("scale", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                vec![Some(args.grad.iter().map(|&g| g * c).collect())]
            }),
        ))
    }

    pub fn relu(&self) -> Result<Tensor<E>> {
        let zero = E::zero();
        let data: Vec<E> = self.data().iter().map(|&a| if a > zero { a } else { zero }).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<'_, E>| {
                let x = args.parents[0].data();
                vec![Some(
                    args.grad
                        .iter()
                        .zip(x)
                        .map(|(&g, &xv)| if xv > E::zero() { g } else { E::zero() })
                        .collect(),
                )]
            }),
        ))
    }

    pub fn sigmoid(&self) -> Result<Tensor<E>> {
        let one = E::one();
        let data: Vec<E> = self.data().iter().map(|&a| one / (one + (-a).exp())).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<'_, E>| {
                vec![Some(
                    args.grad
                        .iter()
                        .zip(args.output_data)
                        .map(|(&g, &s)| g * s * (E::one() - s))
                        .collect(),
                )]
            }),
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor<E>> {
        let half = E::from_f64(0.5);
        let one = E::one();
        let c = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k = E::from_f64(0.044715);
        let data: Vec<E> = self
            .data()
            .iter()
            .map(|&x| half * x * (one + (c * (x + k * x * x * x)).tanh()))
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                let three = E::from_f64(3.0);
                vec![Some(
                    args.grad
                        .iter()
                        .zip(args.parents[0].data())
                        .map(|(&g, &x)| {
                            let inner = c * (x + k * x * x * x);
                            let t = inner.tanh();
                            let sech2 = E::one() - t * t;
                            let d_inner = c * (E::one() + three * k * x * x);
                            g * (half * (E::one() + t) + half * x * sech2 * d_inner)
                        })
                        .collect(),
                )]
            }),
        ))
    }

    /// |x| with subgradient 0 at exactly 0.
    pub fn abs_val(&self) -> Result<Tensor<E>> {
        let data: Vec<E> = self.data().iter().map(|&a| a.abs()).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<'_, E>| {
                let zero = E::zero();
                vec![Some(
                    args.grad
                        .iter()
                        .zip(args.parents[0].data())
                        .map(|(&g, &x)| {
                            if x > zero {
                                g
                            } else if x < zero {
                                -g
                            } else {
                                zero
                            }
                        })
                        .collect(),
                )]
            }),
        ))
    }

    /// Scalar sum of all elements, shape [1].
    pub fn sum_all(&self) -> Result<Tensor<E>> {
        let mut acc = E::zero();
        for &v in self.data() {
            acc = acc + v;
        }
        ensure_finite("sum_all", &[acc])?;
        let n = self.numel();
        let _ = n;
        Ok(Tensor::from_op(
            vec![acc],
            vec![1],
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<'_, E>| {
                let g = args.grad[0];
                vec![Some(vec![g; args.parents[0].numel()])]
            }),
        ))
    }

    /// Scalar mean of all elements, shape [1].
    pub fn mean_all(&self) -> Result<Tensor<E>> {
        let n = E::from_f64(self.numel() as f64);
        let mut acc = E::zero();
        for &v in self.data() {
            acc = acc + v;
        }
        let mean = acc / n;
        ensure_finite("mean_all", &[mean])?;
        Ok(Tensor::from_op(
            vec![mean],
            vec![1],
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                let g = args.grad[0] / n;
                vec![Some(vec![g; args.parents[0].numel()])]
            }),
        ))
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_lastdim(&self) -> Result<Tensor<E>> {
        let last = *self.shape().last().unwrap();
        let rows = self.numel() / last;
        let x = self.data();
        let mut data = vec![E::zero(); self.numel()];
        for r in 0..rows {
            let row = &x[r * last..(r + 1) * last];
            let mut max = row[0];
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let out = &mut data[r * last..(r + 1) * last];
            let mut sum = E::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum = sum + e;
            }
            for o in out.iter_mut() {
                *o = *o / sum;
            }
        }
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                let s = args.output_data;
                let mut dx = vec![E::zero(); s.len()];
                for r in 0..rows {
                    let sr = &s[r * last..(r + 1) * last];
                    let gr = &args.grad[r * last..(r + 1) * last];
                    let mut dot = E::zero();
                    for (&g, &sv) in gr.iter().zip(sr) {
                        dot = dot + g * sv;
                    }
                    for ((d, &g), &sv) in dx[r * last..(r + 1) * last].iter_mut().zip(gr).zip(sr) {
                        *d = sv * (g - dot);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Layer normalization over the channel axis of the layout (NCHW: axis 1,
    /// token batches [B,T,C]: axis 2), one mean/variance per location.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        let axis = channel_axis(self.rank());
        let c_len = self.shape()[axis];
        if gamma.shape() != [c_len] || beta.shape() != [c_len] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma/beta must be [{c_len}], got {:?}/{:?}", gamma.shape(), beta.shape()),
            ));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let eps_e = E::from_f64(eps);
        let x = self.data();
        let ga = gamma.data();
        let be = beta.data();
        let inv_c = E::one() / E::from_f64(c_len as f64);

        let mut data = vec![E::zero(); self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * c_len + c) * inner + i;
                let mut mean = E::zero();
                for c in 0..c_len {
                    mean = mean + x[at(c)];
                }
                mean = mean * inv_c;
                let mut var = E::zero();
                for c in 0..c_len {
                    let d = x[at(c)] - mean;
                    var = var + d * d;
                }
                var = var * inv_c;
                let inv = E::one() / (var + eps_e).sqrt();
                for c in 0..c_len {
                    let xhat = (x[at(c)] - mean) * inv;
                    data[at(c)] = ga[c] * xhat + be[c];
                }
            }
        }
        ensure_finite("layer_norm", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                let x = args.parents[0].data();
                let ga = args.parents[1].data();
                let g = args.grad;
                let c_f = E::from_f64(c_len as f64);
                let mut dx = vec![E::zero(); x.len()];
                let mut dgamma = vec![E::zero(); c_len];
                let mut dbeta = vec![E::zero(); c_len];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |c: usize| (o * c_len + c) * inner + i;
                        let mut mean = E::zero();
                        for c in 0..c_len {
                            mean = mean + x[at(c)];
                        }
                        mean = mean * inv_c;
                        let mut var = E::zero();
                        for c in 0..c_len {
                            let d = x[at(c)] - mean;
                            var = var + d * d;
                        }
                        var = var * inv_c;
                        let inv = E::one() / (var + eps_e).sqrt();

                        let mut sum_dxhat = E::zero();
                        let mut sum_dxhat_xhat = E::zero();
                        for c in 0..c_len {
                            let xhat = (x[at(c)] - mean) * inv;
                            let gv = g[at(c)];
                            dgamma[c] = dgamma[c] + gv * xhat;
                            dbeta[c] = dbeta[c] + gv;
                            let dxhat = gv * ga[c];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        }
                        for c in 0..c_len {
                            let xhat = (x[at(c)] - mean) * inv;
                            let dxhat = g[at(c)] * ga[c];
                            dx[at(c)] = inv / c_f * (c_f * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }

    /// Rearranges r*r channel groups into an r-times larger spatial grid:
    /// out(n, c, h*r+i, w*r+j) = in(n, c*r^2 + i*r + j, h, w).
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<E>> {
        if self.rank() != 4 {
            return Err(Error::shape("pixel_shuffle", format!("expected rank 4, got {:?}", self.shape())));
        }
        let [n, c_in, h, w] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        if r == 0 || c_in % (r * r) != 0 {
            return Err(Error::invalid(
                "pixel_shuffle",
                format!("channel count {c_in} not divisible by r^2 = {}", r * r),
            ));
        }
        let c_out = c_in / (r * r);
        let (oh, ow) = (h * r, w * r);
        let x = self.data();
        let mut data = vec![E::zero(); n * c_out * oh * ow];
        for ni in 0..n {
            for c in 0..c_out {
                for hy in 0..h {
                    for i in 0..r {
                        for wx in 0..w {
                            for j in 0..r {
                                let src = ((ni * c_in + c * r * r + i * r + j) * h + hy) * w + wx;
                                let dst = ((ni * c_out + c) * oh + hy * r + i) * ow + wx * r + j;
                                data[dst] = x[src];
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![n, c_out, oh, ow],
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                let g = args.grad;
                let mut dx = vec![E::zero(); n * c_in * h * w];
                for ni in 0..n {
                    for c in 0..c_out {
                        for hy in 0..h {
                            for i in 0..r {
                                for wx in 0..w {
                                    for j in 0..r {
                                        let src = ((ni * c_in + c * r * r + i * r + j) * h + hy) * w + wx;
                                        let dst = ((ni * c_out + c) * oh + hy * r + i) * ow + wx * r + j;
                                        dx[src] = g[dst];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Per-channel spatial mean: [N,C,H,W] -> [N,C,1,1].
    pub fn global_avg_pool(&self) -> Result<Tensor<E>> {
        if self.rank() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected rank 4, got {:?}", self.shape())));
        }
        let [n, c, h, w] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        let plane = h * w;
        let inv = E::one() / E::from_f64(plane as f64);
        let x = self.data();
        let mut data = vec![E::zero(); n * c];
        for (i, out) in data.iter_mut().enumerate() {
            let base = i * plane;
            let mut acc = E::zero();
            for &v in &x[base..base + plane] {
                acc = acc + v;
            }
            *out = acc * inv;
        }
        ensure_finite("global_avg_pool", &data)?;
        Ok(Tensor::from_op(
            data,
            vec![n, c, 1, 1],
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                let mut dx = vec![E::zero(); n * c * plane];
                for i in 0..n * c {
                    let g = args.grad[i] * inv;
                    for d in &mut dx[i * plane..(i + 1) * plane] {
                        *d = g;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Broadcast a [C]-shaped bias over the last dimension.
    pub fn add_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let last = *self.shape().last().unwrap();
        if bias.shape() != [last] {
            return Err(Error::shape(
                "add_bias",
                format!("bias must be [{last}], got {:?}", bias.shape()),
            ));
        }
        let b = bias.data();
        let data: Vec<E> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % last])
            .collect();
        ensure_finite("add_bias", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                let dx = args.needs(0).then(|| args.grad.to_vec());
                let db = args.needs(1).then(|| {
                    let mut db = vec![E::zero(); last];
                    for (i, &g) in args.grad.iter().enumerate() {
                        db[i % last] = db[i % last] + g;
                    }
                    db
                });
                vec![dx, db]
            }),
        ))
    }

    /// Gate each channel: x [N,C,H,W] * gate [N,C,1,1] broadcast over space.
    pub fn scale_channels(&self, gate: &Tensor<E>) -> Result<Tensor<E>> {
        if self.rank() != 4 || gate.rank() != 4 {
            return Err(Error::shape("scale_channels", "rank 4 required"));
        }
        let [n, c, h, w] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        if gate.shape() != [n, c, 1, 1] {
            return Err(Error::shape(
                "scale_channels",
                format!("gate must be [{n},{c},1,1], got {:?}", gate.shape()),
            ));
        }
        let plane = h * w;
        let x = self.data();
        let gt = gate.data();
        let mut data = vec![E::zero(); x.len()];
        for i in 0..n * c {
            let gv = gt[i];
            for (o, &v) in data[i * plane..(i + 1) * plane].iter_mut().zip(&x[i * plane..(i + 1) * plane]) {
                *o = v * gv;
            }
        }
        ensure_finite("scale_channels", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), gate.clone()],
            Box::new(move |args: &BackwardArgs<'_, E>| {
                let x = args.parents[0].data();
                let gt = args.parents[1].data();
                let g = args.grad;
                let dx = args.needs(0).then(|| {
                    let mut dx = vec![E::zero(); x.len()];
                    for i in 0..n * c {
                        let gv = gt[i];
                        for (d, &gg) in dx[i * plane..(i + 1) * plane].iter_mut().zip(&g[i * plane..(i + 1) * plane]) {
                            *d = gg * gv;
                        }
                    }
                    dx
                });
                let dgate = args.needs(1).then(|| {
                    let mut dgt = vec![E::zero(); n * c];
                    for i in 0..n * c {
                        let mut acc = E::zero();
                        for (xv, gg) in x[i * plane..(i + 1) * plane].iter().zip(&g[i * plane..(i + 1) * plane]) {
                            acc = acc + *xv * *gg;
                        }
                        dgt[i] = acc;
                    }
                    dgt
                });
                vec![dx, dgate]
            }),
        ))
    }

    /// Same data under a new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.is_empty() || shape.len() > 4 {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Ok(self.view_as(
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<'_, E>| vec![Some(args.grad.to_vec())]),
        ))
    }

    /// Reorder axes. `perm` must be a permutation of 0..rank.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<E>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("bad permutation {perm:?} for rank {rank}")));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_strides = strides(&in_shape);
        let out_strides = strides(&out_shape);
        let numel = self.numel();
        let mut map = vec![0i64; numel];
        for (out_idx, m) in map.iter_mut().enumerate() {
            let mut rem = out_idx;
            let mut src = 0usize;
            for (d, &os) in out_strides.iter().enumerate() {
                let coord = rem / os;
                rem %= os;
                src += coord * in_strides[perm[d]];
            }
            *m = src as i64;
        }
        gather_map(self, out_shape, Arc::new(map), "permute")
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor<E>> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::shape("transpose_last2", format!("rank {rank} < 2")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Slice `[start, start+len)` of the last dimension.
    pub fn slice_lastdim(&self, start: usize, len: usize) -> Result<Tensor<E>> {
        let last = *self.shape().last().unwrap();
        if start + len > last || len == 0 {
            return Err(Error::invalid(
                "slice_lastdim",
                format!("slice {start}..{} of extent {last}", start + len),
            ));
        }
        let rows = self.numel() / last;
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = len;
        let mut map = vec![0i64; rows * len];
        for r in 0..rows {
            for c in 0..len {
                map[r * len + c] = (r * last + start + c) as i64;
            }
        }
        gather_map(self, out_shape, Arc::new(map), "slice_lastdim")
    }

    /// Concatenate along the channel axis (axis 1 of NCHW).
    pub fn concat_channels(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_channels", "no inputs"));
        }
        let first = parts[0];
        if first.rank() != 4 {
            return Err(Error::shape("concat_channels", "rank 4 required"));
        }
        let [n, _, h, w] = [first.shape()[0], first.shape()[1], first.shape()[2], first.shape()[3]];
        let mut c_total = 0usize;
        for p in parts {
            if p.rank() != 4 || p.shape()[0] != n || p.shape()[2] != h || p.shape()[3] != w {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} incompatible with {:?}", p.shape(), first.shape()),
                ));
            }
            c_total += p.shape()[1];
        }
        let plane = h * w;
        let mut data = vec![E::zero(); n * c_total * plane];
        for ni in 0..n {
            let mut c_off = 0usize;
            for p in parts {
                let pc = p.shape()[1];
                let src = &p.data()[ni * pc * plane..(ni + 1) * pc * plane];
                let dst_base = (ni * c_total + c_off) * plane;
                data[dst_base..dst_base + pc * plane].copy_from_slice(src);
                c_off += pc;
            }
        }
        let channels: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        let parents: Vec<Tensor<E>> = parts.iter().map(|&p| p.clone()).collect();
        Ok(Tensor::from_op(
            data,
            vec![n, c_total, h, w],
            parents,
            Box::new(move |args: &BackwardArgs<'_, E>| {
                let mut out = Vec::with_capacity(channels.len());
                let mut c_off = 0usize;
                for (pi, &pc) in channels.iter().enumerate() {
                    if !args.needs(pi) {
                        c_off += pc;
                        out.push(None);
                        continue;
                    }
                    let mut dp = vec![E::zero(); n * pc * plane];
                    for ni in 0..n {
                        let src_base = (ni * c_total + c_off) * plane;
                        dp[ni * pc * plane..(ni + 1) * pc * plane]
                            .copy_from_slice(&args.grad[src_base..src_base + pc * plane]);
                    }
                    c_off += pc;
                    out.push(Some(dp));
                }
                out
            }),
        ))
    }
}

// ---------------------------------------------------------------------------
// Gather primitive
// ---------------------------------------------------------------------------

/// out[i] = x[map[i]] for map[i] >= 0, else 0. Backward scatter-adds, so a
/// bijective map round-trips bit-exactly and a tiling map sums gradients.
pub(crate) fn gather_map<E: Element>(
    x: &Tensor<E>,
    out_shape: Vec<usize>,
    map: Arc<Vec<i64>>,
    op: &'static str,
) -> Result<Tensor<E>> {
    let numel: usize = out_shape.iter().product();
    if map.len() != numel {
        return Err(Error::invalid(op, format!("map has {} entries for {numel} outputs", map.len())));
    }
    let src = x.data();
    let in_len = src.len();
    let mut data = vec![E::zero(); numel];
    for (o, &m) in data.iter_mut().zip(map.iter()) {
        if m >= 0 {
            let mi = m as usize;
            if mi >= in_len {
                return Err(Error::invalid(op, format!("map entry {mi} out of range {in_len}")));
            }
            *o = src[mi];
        }
    }
    let bmap = Arc::clone(&map);
    Ok(Tensor::from_op(
        data,
        out_shape,
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, E>| {
            let mut dx = vec![E::zero(); in_len];
            for (&g, &m) in args.grad.iter().zip(bmap.iter()) {
                if m >= 0 {
                    dx[m as usize] = dx[m as usize] + g;
                }
            }
            vec![Some(dx)]
        }),
    ))
}

// ---------------------------------------------------------------------------
// Matrix multiplication
// ---------------------------------------------------------------------------

fn matmul_kernel<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Batched matrix product: a [..., m, k] x b [..., k, n] -> [..., m, n].
/// Leading dimensions must match exactly.
pub fn batched_matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let ar = a.rank();
    let br = b.rank();
    if ar < 2 || br < 2 || ar != br {
        return Err(Error::shape(
            "batched_matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (k2, n) = (b.shape()[br - 2], b.shape()[br - 1]);
    let lead_a = &a.shape()[..ar - 2];
    let lead_b = &b.shape()[..br - 2];
    if k != k2 || lead_a != lead_b {
        return Err(Error::shape(
            "batched_matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let batch: usize = lead_a.iter().product();
    let mut data = vec![E::zero(); batch * m * n];
    {
        let ad = a.data();
        let bd = b.data();
        let work = batch * m * k * n;
        if batch > 1 && work >= PAR_THRESHOLD {
            data.par_chunks_mut(m * n).enumerate().for_each(|(bi, chunk)| {
                matmul_kernel(&ad[bi * m * k..(bi + 1) * m * k], &bd[bi * k * n..(bi + 1) * k * n], chunk, m, k, n);
            });
        } else if batch > 1 {
            data.chunks_mut(m * n).enumerate().for_each(|(bi, chunk)| {
                matmul_kernel(&ad[bi * m * k..(bi + 1) * m * k], &bd[bi * k * n..(bi + 1) * k * n], chunk, m, k, n);
            });
        } else if m >= 32 && work >= PAR_THRESHOLD {
            // Single matrix: split rows across threads.
            data.par_chunks_mut(8 * n).enumerate().for_each(|(ri, chunk)| {
                let row0 = ri * 8;
                let rows = chunk.len() / n;
                matmul_kernel(&ad[row0 * k..(row0 + rows) * k], bd, chunk, rows, k, n);
            });
        } else {
            matmul_kernel(ad, bd, &mut data, m, k, n);
        }
    }
    ensure_finite("batched_matmul", &data)?;
    let mut out_shape = lead_a.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Ok(Tensor::from_op(
        data,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(move |args: &BackwardArgs<'_, E>| {
            let ad = args.parents[0].data();
            let bd = args.parents[1].data();
            let g = args.grad;
            // dA = g . B^T
            let work = batch * m * k * n;
            let da = args.needs(0).then(|| {
                let mut da = vec![E::zero(); batch * m * k];
                let fill = |bi: usize, chunk: &mut [E]| {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let bb = &bd[bi * k * n..(bi + 1) * k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = E::zero();
                            let grow = &gb[i * n..(i + 1) * n];
                            let brow = &bb[kk * n..(kk + 1) * n];
                            for (&gv, &bv) in grow.iter().zip(brow) {
                                acc = acc + gv * bv;
                            }
                            chunk[i * k + kk] = acc;
                        }
                    }
                };
                if work >= PAR_THRESHOLD {
                    da.par_chunks_mut(m * k).enumerate().for_each(|(i, p)| fill(i, p));
                } else {
                    da.chunks_mut(m * k).enumerate().for_each(|(i, p)| fill(i, p));
                }
                da
            });
            // dB = A^T . g
            let db = args.needs(1).then(|| {
                let mut db = vec![E::zero(); batch * k * n];
                let fill = |bi: usize, chunk: &mut [E]| {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let ab = &ad[bi * m * k..(bi + 1) * m * k];
                    for i in 0..m {
                        let grow = &gb[i * n..(i + 1) * n];
                        let arow = &ab[i * k..(i + 1) * k];
                        for (kk, &av) in arow.iter().enumerate() {
                            let drow = &mut chunk[kk * n..(kk + 1) * n];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d = *d + av * gv;
                            }
                        }
                    }
                };
                if work >= PAR_THRESHOLD {
                    db.par_chunks_mut(k * n).enumerate().for_each(|(i, p)| fill(i, p));
                } else {
                    db.chunks_mut(k * n).enumerate().for_each(|(i, p)| fill(i, p));
                }
                db
            });
            vec![da, db]
        }),
    ))
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn conv_geometry<E: Element>(
    op: &'static str,
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
    depthwise: bool,
) -> Result<ConvGeom> {
    if input.rank() != 4 || weight.rank() != 4 {
        return Err(Error::shape(op, format!("input {:?}, weight {:?}", input.shape(), weight.shape())));
    }
    let [n, c_in, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    let [c_out, wc, kh, kw] = [weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]];
    if depthwise {
        if c_out != c_in || wc != 1 {
            return Err(Error::shape(op, format!("depthwise weight must be [{c_in},1,kh,kw], got {:?}", weight.shape())));
        }
    } else if wc != c_in {
        return Err(Error::shape(op, format!("weight in-channels {wc} != input channels {c_in}")));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(op, format!("kernel extents must be odd, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be >= 1"));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape(op, format!("bias must be [{c_out}], got {:?}", b.shape())));
        }
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::invalid(op, format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad)));
    }
    if !(h + 2 * pad - kh).is_multiple_of(stride) || !(w + 2 * pad - kw).is_multiple_of(stride) {
        return Err(Error::invalid(op, "non-integral output extent"));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvGeom { n, c_in, h, w, c_out, kh, kw, oh, ow, stride, pad })
}

/// 2D cross-correlation with zero padding:
/// input [N,Cin,H,W] * weight [Cout,Cin,kh,kw] (+ bias [Cout]) -> [N,Cout,H',W'].
pub fn conv2d<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let geo = conv_geometry("conv2d", input, weight, bias, stride, pad, false)?;
    let ConvGeom { n, c_in, h, w, c_out, kh, kw, oh, ow, .. } = geo;
    let x = input.data();
    let wt = weight.data();
    let bs: Option<&[E]> = bias.map(|b| b.data());

    let work = n * c_out * oh * ow * c_in * kh * kw;
    let mut data = vec![E::zero(); n * c_out * oh * ow];
    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        // pointwise path: per (n, co) plane, out = bias + sum_ci w[co,ci] * in[ci]
        let plane = h * w;
        let fill = |plane_idx: usize, out_plane: &mut [E]| {
            let ni = plane_idx / c_out;
            let co = plane_idx % c_out;
            if let Some(b) = bs {
                out_plane.fill(b[co]);
            }
            for ci in 0..c_in {
                let wv = wt[co * c_in + ci];
                let row = &x[(ni * c_in + ci) * plane..(ni * c_in + ci + 1) * plane];
                for (o, &v) in out_plane.iter_mut().zip(row) {
                    *o = *o + wv * v;
                }
            }
        };
        run_planes(&mut data, oh * ow, work, fill);
    } else {
        let fill = |plane_idx: usize, out_plane: &mut [E]| {
            let ni = plane_idx / c_out;
            let co = plane_idx % c_out;
            let b0 = bs.map_or(E::zero(), |b| b[co]);
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                let ky_lo = (-iy0).max(0) as usize;
                let ky_hi = kh.min((h as isize - iy0).max(0) as usize);
                for ox in 0..ow {
                    let ix0 = (ox * stride) as isize - pad as isize;
                    let kx_lo = (-ix0).max(0) as usize;
                    let kx_hi = kw.min((w as isize - ix0).max(0) as usize);
                    let mut acc = b0;
                    for ci in 0..c_in {
                        let in_base = (ni * c_in + ci) * h * w;
                        let w_base = (co * c_in + ci) * kh * kw;
                        for ky in ky_lo..ky_hi {
                            let iy = (iy0 + ky as isize) as usize;
                            let row_start = in_base + iy * w + (ix0 + kx_lo as isize) as usize;
                            let row = &x[row_start..row_start + (kx_hi - kx_lo)];
                            let wrow = &wt[w_base + ky * kw + kx_lo..w_base + ky * kw + kx_hi];
                            for (&v, &wv) in row.iter().zip(wrow) {
                                acc = acc + v * wv;
                            }
                        }
                    }
                    out_plane[oy * ow + ox] = acc;
                }
            }
        };
        run_planes(&mut data, oh * ow, work, fill);
    }
    ensure_finite("conv2d", &data)?;

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        data,
        vec![n, c_out, oh, ow],
        parents,
        Box::new(move |args: &BackwardArgs<'_, E>| {
            let x = args.parents[0].data();
            let wt = args.parents[1].data();
            let g = args.grad;
            let (stride, pad) = (geo.stride, geo.pad);
            let work = n * c_out * oh * ow * c_in * kh * kw;

            let dinput = args.needs(0).then(|| {
                let mut dx = vec![E::zero(); n * c_in * h * w];
                if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
                    let plane = h * w;
                    let fill = |plane_idx: usize, dplane: &mut [E]| {
                        let ni = plane_idx / c_in;
                        let ci = plane_idx % c_in;
                        for co in 0..c_out {
                            let wv = wt[co * c_in + ci];
                            let grow = &g[(ni * c_out + co) * plane..(ni * c_out + co + 1) * plane];
                            for (d, &gv) in dplane.iter_mut().zip(grow) {
                                *d = *d + wv * gv;
                            }
                        }
                    };
                    run_planes(&mut dx, plane, work, fill);
                } else if stride == 1 {
                    // gather form: dx[iy,ix] = sum_{co,ky,kx} g[iy+p-ky, ix+p-kx] * w[ky,kx]
                    let fill = |plane_idx: usize, dplane: &mut [E]| {
                        let ni = plane_idx / c_in;
                        let ci = plane_idx % c_in;
                        for co in 0..c_out {
                            let g_base = (ni * c_out + co) * oh * ow;
                            let w_base = (co * c_in + ci) * kh * kw;
                            for iy in 0..h {
                                for ky in 0..kh {
                                    let oy = iy as isize + pad as isize - ky as isize;
                                    if oy < 0 || oy >= oh as isize {
                                        continue;
                                    }
                                    let grow_base = g_base + oy as usize * ow;
                                    let wrow = &wt[w_base + ky * kw..w_base + (ky + 1) * kw];
                                    let drow_base = iy * w;
                                    for (kx, &wv) in wrow.iter().enumerate() {
                                        // ox = ix + pad - kx must lie in [0, ow)
                                        let ix_lo = (kx as isize - pad as isize).max(0) as usize;
                                        let ix_hi = w.min((ow as isize + kx as isize - pad as isize).max(0) as usize);
                                        if ix_lo >= ix_hi {
                                            continue;
                                        }
                                        let off = (ix_lo + pad - kx) + grow_base;
                                        let grow = &g[off..off + (ix_hi - ix_lo)];
                                        let drow = &mut dplane[drow_base + ix_lo..drow_base + ix_hi];
                                        for (d, &gv) in drow.iter_mut().zip(grow) {
                                            *d = *d + gv * wv;
                                        }
                                    }
                                }
                            }
                        }
                    };
                    run_planes(&mut dx, h * w, work, fill);
                } else {
                    let fill = |plane_idx: usize, dplane: &mut [E]| {
                        let ni = plane_idx / c_in;
                        let ci = plane_idx % c_in;
                        for co in 0..c_out {
                            let g_base = (ni * c_out + co) * oh * ow;
                            let w_base = (co * c_in + ci) * kh * kw;
                            for oy in 0..oh {
                                let iy0 = (oy * stride) as isize - pad as isize;
                                for ox in 0..ow {
                                    let gv = g[g_base + oy * ow + ox];
                                    let ix0 = (ox * stride) as isize - pad as isize;
                                    for ky in 0..kh {
                                        let iy = iy0 + ky as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = ix0 + kx as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let di = iy as usize * w + ix as usize;
                                            dplane[di] = dplane[di] + gv * wt[w_base + ky * kw + kx];
                                        }
                                    }
                                }
                            }
                        }
                    };
                    run_planes(&mut dx, h * w, work, fill);
                }
                dx
            });

            let dweight = args.needs(1).then(|| {
                let mut dw = vec![E::zero(); c_out * c_in * kh * kw];
                if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
                    let plane = h * w;
                    let fill = |co: usize, dwc: &mut [E]| {
                        for ni in 0..n {
                            let grow = &g[(ni * c_out + co) * plane..(ni * c_out + co + 1) * plane];
                            for (ci, dv) in dwc.iter_mut().enumerate() {
                                let row = &x[(ni * c_in + ci) * plane..(ni * c_in + ci + 1) * plane];
                                let mut acc = E::zero();
                                for (&gv, &v) in grow.iter().zip(row) {
                                    acc = acc + gv * v;
                                }
                                *dv = *dv + acc;
                            }
                        }
                    };
                    run_planes(&mut dw, c_in, work, fill);
                } else {
                    let fill = |co: usize, dwc: &mut [E]| {
                        for ni in 0..n {
                            let g_base = (ni * c_out + co) * oh * ow;
                            for ci in 0..c_in {
                                let in_base = (ni * c_in + ci) * h * w;
                                for ky in 0..kh {
                                    for oy in 0..oh {
                                        let iy = (oy * stride) as isize + ky as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let grow = &g[g_base + oy * ow..g_base + (oy + 1) * ow];
                                        let irow = &x[in_base + iy as usize * w..in_base + (iy as usize + 1) * w];
                                        for kx in 0..kw {
                                            // ix = ox*stride + kx - pad must lie in [0, w)
                                            let mut acc = E::zero();
                                            if stride == 1 {
                                                let ox_lo = (pad as isize - kx as isize).max(0) as usize;
                                                let ox_hi = ow.min((w as isize + pad as isize - kx as isize).max(0) as usize);
                                                if ox_lo >= ox_hi {
                                                    continue;
                                                }
                                                let ioff = ox_lo + kx - pad;
                                                for (&gv, &v) in grow[ox_lo..ox_hi].iter().zip(&irow[ioff..ioff + (ox_hi - ox_lo)]) {
                                                    acc = acc + gv * v;
                                                }
                                            } else {
                                                for (ox, &gv) in grow.iter().enumerate() {
                                                    let ix = (ox * stride) as isize + kx as isize - pad as isize;
                                                    if ix < 0 || ix >= w as isize {
                                                        continue;
                                                    }
                                                    acc = acc + gv * irow[ix as usize];
                                                }
                                            }
                                            let di = (ci * kh + ky) * kw + kx;
                                            dwc[di] = dwc[di] + acc;
                                        }
                                    }
                                }
                            }
                        }
                    };
                    run_planes(&mut dw, c_in * kh * kw, work, fill);
                }
                dw
            });

            let mut grads = vec![dinput, dweight];
            if has_bias {
                let dbias = args.needs(2).then(|| {
                    let mut db = vec![E::zero(); c_out];
                    for ni in 0..n {
                        for (co, dbv) in db.iter_mut().enumerate() {
                            let g_base = (ni * c_out + co) * oh * ow;
                            let mut acc = E::zero();
                            for &gv in &g[g_base..g_base + oh * ow] {
                                acc = acc + gv;
                            }
                            *dbv = *dbv + acc;
                        }
                    }
                    db
                });
                grads.push(dbias);
            }
            grads
        }),
    ))
}

/// Run a per-chunk fill over disjoint output planes, in parallel when the
/// total work is large enough to amortize the dispatch.
fn run_planes<E: Element>(
    data: &mut [E],
    chunk: usize,
    work: usize,
    fill: impl Fn(usize, &mut [E]) + Sync,
) {
    if work >= PAR_THRESHOLD {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, p)| fill(i, p));
    } else {
        data.chunks_mut(chunk).enumerate().for_each(|(i, p)| fill(i, p));
    }
}

/// Depthwise 2D convolution: input [N,C,H,W] * weight [C,1,kh,kw] -> [N,C,H',W'].
pub fn depthwise_conv2d<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let geo = conv_geometry("depthwise_conv2d", input, weight, bias, stride, pad, true)?;
    let ConvGeom { n, c_in: c, h, w, kh, kw, oh, ow, .. } = geo;
    let x = input.data();
    let wt = weight.data();
    let bs: Option<&[E]> = bias.map(|b| b.data());

    let work = n * c * oh * ow * kh * kw;
    let mut data = vec![E::zero(); n * c * oh * ow];
    let fill_plane = |plane_idx: usize, out_plane: &mut [E]| {
        let ni = plane_idx / c;
        let ci = plane_idx % c;
        let b0 = bs.map_or(E::zero(), |b| b[ci]);
        let in_base = (ni * c + ci) * h * w;
        let w_base = ci * kh * kw;
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            let ky_lo = (-iy0).max(0) as usize;
            let ky_hi = kh.min((h as isize - iy0).max(0) as usize);
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let kx_lo = (-ix0).max(0) as usize;
                let kx_hi = kw.min((w as isize - ix0).max(0) as usize);
                let mut acc = b0;
                for ky in ky_lo..ky_hi {
                    let iy = (iy0 + ky as isize) as usize;
                    let row_start = in_base + iy * w + (ix0 + kx_lo as isize) as usize;
                    let row = &x[row_start..row_start + (kx_hi - kx_lo)];
                    let wrow = &wt[w_base + ky * kw + kx_lo..w_base + ky * kw + kx_hi];
                    for (&v, &wv) in row.iter().zip(wrow) {
                        acc = acc + v * wv;
                    }
                }
                out_plane[oy * ow + ox] = acc;
            }
        }
    };
    run_planes(&mut data, oh * ow, work, fill_plane);
    ensure_finite("depthwise_conv2d", &data)?;

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        data,
        vec![n, c, oh, ow],
        parents,
        Box::new(move |args: &BackwardArgs<'_, E>| {
            let x = args.parents[0].data();
            let wt = args.parents[1].data();
            let g = args.grad;
            let (stride, pad) = (geo.stride, geo.pad);
            let work = n * c * oh * ow * kh * kw;

            let dinput = args.needs(0).then(|| {
                let mut dx = vec![E::zero(); n * c * h * w];
                let fill = |plane_idx: usize, dplane: &mut [E]| {
                    let ni = plane_idx / c;
                    let ci = plane_idx % c;
                    let g_base = (ni * c + ci) * oh * ow;
                    let w_base = ci * kh * kw;
                    for oy in 0..oh {
                        let iy0 = (oy * stride) as isize - pad as isize;
                        for ox in 0..ow {
                            let gv = g[g_base + oy * ow + ox];
                            let ix0 = (ox * stride) as isize - pad as isize;
                            for ky in 0..kh {
                                let iy = iy0 + ky as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = ix0 + kx as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let di = iy as usize * w + ix as usize;
                                    dplane[di] = dplane[di] + gv * wt[w_base + ky * kw + kx];
                                }
                            }
                        }
                    }
                };
                run_planes(&mut dx, h * w, work, fill);
                dx
            });

            let dweight = args.needs(1).then(|| {
                let mut dw = vec![E::zero(); c * kh * kw];
                let fill = |ci: usize, dwc: &mut [E]| {
                    for ni in 0..n {
                        let g_base = (ni * c + ci) * oh * ow;
                        let in_base = (ni * c + ci) * h * w;
                        for oy in 0..oh {
                            let iy0 = (oy * stride) as isize - pad as isize;
                            for ox in 0..ow {
                                let gv = g[g_base + oy * ow + ox];
                                let ix0 = (ox * stride) as isize - pad as isize;
                                for ky in 0..kh {
                                    let iy = iy0 + ky as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = ix0 + kx as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        dwc[ky * kw + kx] =
                                            dwc[ky * kw + kx] + gv * x[in_base + iy as usize * w + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                };
                run_planes(&mut dw, kh * kw, work, fill);
                dw
            });

            let mut grads = vec![dinput, dweight];
            if has_bias {
                let dbias = args.needs(2).then(|| {
                    let mut db = vec![E::zero(); c];
                    for ni in 0..n {
                        for (ci, dbv) in db.iter_mut().enumerate() {
                            let g_base = (ni * c + ci) * oh * ow;
                            let mut acc = E::zero();
                            for &gv in &g[g_base..g_base + oh * ow] {
                                acc = acc + gv;
                            }
                            *dbv = *dbv + acc;
                        }
                    }
                    db
                });
                grads.push(dbias);
            }
            grads
        }),
    ))
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Training-mode batch norm over (N,H,W) per channel. Returns the normalized
/// output plus the batch mean and biased batch variance so the caller can
/// update running statistics.
pub fn batch_norm_train<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<(Tensor<E>, Vec<E>, Vec<E>)> {
    if x.rank() != 4 {
        return Err(Error::shape("batch_norm", format!("expected rank 4, got {:?}", x.shape())));
    }
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batch_norm", format!("gamma/beta must be [{c}]")));
    }
    let m = n * h * w;
    let inv_m = E::one() / E::from_f64(m as f64);
    let eps_e = E::from_f64(eps);
    let xd = x.data();
    let plane = h * w;

    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    for ci in 0..c {
        let mut acc = E::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for &v in &xd[base..base + plane] {
                acc = acc + v;
            }
        }
        mean[ci] = acc * inv_m;
        let mu = mean[ci];
        let mut vacc = E::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for &v in &xd[base..base + plane] {
                let d = v - mu;
                vacc = vacc + d * d;
            }
        }
        var[ci] = vacc * inv_m;
    }

    let ga = gamma.data();
    let be = beta.data();
    let mut data = vec![E::zero(); xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let inv = E::one() / (var[ci] + eps_e).sqrt();
            let (gv, bv, mu) = (ga[ci], be[ci], mean[ci]);
            for (o, &v) in data[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
                *o = gv * (v - mu) * inv + bv;
            }
        }
    }
    ensure_finite("batch_norm", &data)?;

    let mean_c = mean.clone();
    let var_c = var.clone();
    let out = Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |args: &BackwardArgs<'_, E>| {
            let xd = args.parents[0].data();
            let ga = args.parents[1].data();
            let g = args.grad;
            let m_f = E::from_f64(m as f64);
            let mut dx = vec![E::zero(); xd.len()];
            let mut dgamma = vec![E::zero(); c];
            let mut dbeta = vec![E::zero(); c];
            for ci in 0..c {
                let mu = mean_c[ci];
                let inv = E::one() / (var_c[ci] + eps_e).sqrt();
                let mut sum_g = E::zero();
                let mut sum_g_xhat = E::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for (idx, &gv) in g[base..base + plane].iter().enumerate() {
                        let xhat = (xd[base + idx] - mu) * inv;
                        sum_g = sum_g + gv;
                        sum_g_xhat = sum_g_xhat + gv * xhat;
                    }
                }
                dgamma[ci] = sum_g_xhat;
                dbeta[ci] = sum_g;
                let gch = ga[ci];
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for idx in 0..plane {
                        let xhat = (xd[base + idx] - mu) * inv;
                        let gv = g[base + idx];
                        dx[base + idx] =
                            gch * inv / m_f * (m_f * gv - sum_g - xhat * sum_g_xhat);
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }),
    );
    Ok((out, mean, var))
}

/// Inference-mode batch norm using running statistics.
pub fn batch_norm_eval<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &[E],
    running_var: &[E],
    eps: f64,
) -> Result<Tensor<E>> {
    if x.rank() != 4 {
        return Err(Error::shape("batch_norm", format!("expected rank 4, got {:?}", x.shape())));
    }
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    if gamma.shape() != [c] || beta.shape() != [c] || running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape("batch_norm", format!("per-channel params must be [{c}]")));
    }
    let eps_e = E::from_f64(eps);
    let plane = h * w;
    let xd = x.data();
    let ga = gamma.data();
    let be = beta.data();
    let inv: Vec<E> = running_var.iter().map(|&v| E::one() / (v + eps_e).sqrt()).collect();
    let mut data = vec![E::zero(); xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (gv, bv, mu, iv) = (ga[ci], be[ci], running_mean[ci], inv[ci]);
            for (o, &v) in data[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
                *o = gv * (v - mu) * iv + bv;
            }
        }
    }
    ensure_finite("batch_norm", &data)?;
    let rm: Vec<E> = running_mean.to_vec();
    Ok(Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |args: &BackwardArgs<'_, E>| {
            let xd = args.parents[0].data();
            let ga = args.parents[1].data();
            let g = args.grad;
            let mut dx = vec![E::zero(); xd.len()];
            let mut dgamma = vec![E::zero(); c];
            let mut dbeta = vec![E::zero(); c];
            for ci in 0..c {
                let iv = inv[ci];
                let mu = rm[ci];
                let gch = ga[ci];
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for idx in 0..plane {
                        let gv = g[base + idx];
                        dx[base + idx] = gv * gch * iv;
                        dgamma[ci] = dgamma[ci] + gv * (xd[base + idx] - mu) * iv;
                        dbeta[ci] = dbeta[ci] + gv;
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }),
    ))
}

// ---------------------------------------------------------------------------
// Bilinear table resampling (relative-position tables at off-base footages)
// ---------------------------------------------------------------------------

/// Resample x [G, H1, W1] to [G, H2, W2] with bilinear interpolation
/// (align-corners). Differentiable with respect to the table.
pub fn resample_bilinear<E: Element>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    if x.rank() != 3 {
        return Err(Error::shape("resample_bilinear", format!("expected rank 3, got {:?}", x.shape())));
    }
    let [g, h1, w1] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resample_bilinear", "zero output extent"));
    }
    // (src_lo, src_hi, weight_hi) per output coordinate
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                if n_out == 1 || n_in == 1 {
                    return (0, 0, 0.0);
                }
                let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ay = axis(h1, out_h);
    let ax = axis(w1, out_w);
    let xd = x.data();
    let mut data = vec![E::zero(); g * out_h * out_w];
    for gi in 0..g {
        let base_in = gi * h1 * w1;
        for (yi, &(ylo, yhi, wy)) in ay.iter().enumerate() {
            for (xi, &(xlo, xhi, wx)) in ax.iter().enumerate() {
                let v00 = xd[base_in + ylo * w1 + xlo].to_f64();
                let v01 = xd[base_in + ylo * w1 + xhi].to_f64();
                let v10 = xd[base_in + yhi * w1 + xlo].to_f64();
                let v11 = xd[base_in + yhi * w1 + xhi].to_f64();
                let v = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
                data[(gi * out_h + yi) * out_w + xi] = E::from_f64(v);
            }
        }
    }
    let (ay_b, ax_b) = (ay.clone(), ax.clone());
    Ok(Tensor::from_op(
        data,
        vec![g, out_h, out_w],
        vec![x.clone()],
        Box::new(move |args: &BackwardArgs<'_, E>| {
            let mut dx = vec![E::zero(); g * h1 * w1];
            for gi in 0..g {
                let base_in = gi * h1 * w1;
                for (yi, &(ylo, yhi, wy)) in ay_b.iter().enumerate() {
                    for (xi, &(xlo, xhi, wx)) in ax_b.iter().enumerate() {
                        let gv = args.grad[(gi * out_h + yi) * out_w + xi].to_f64();
                        dx[base_in + ylo * w1 + xlo] =
                            dx[base_in + ylo * w1 + xlo] + E::from_f64(gv * (1.0 - wy) * (1.0 - wx));
                        dx[base_in + ylo * w1 + xhi] =
                            dx[base_in + ylo * w1 + xhi] + E::from_f64(gv * (1.0 - wy) * wx);
                        dx[base_in + yhi * w1 + xlo] =
                            dx[base_in + yhi * w1 + xlo] + E::from_f64(gv * wy * (1.0 - wx));
                        dx[base_in + yhi * w1 + xhi] =
                            dx[base_in + yhi * w1 + xhi] + E::from_f64(gv * wy * wx);
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}
