//! Layers over a flat parameter slice. Each layer stores the offsets of its
//! parameters; `forward` returns whatever the matching `backward` needs and
//! `backward` accumulates into a gradient slice laid out like the parameters.

use serde::{Deserialize, Serialize};

use super::{matmul, Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    /// Test mode: turns every nonlinearity into the identity.
    Identity,
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl Activation {
    pub fn forward<T: Real>(self, x: &[T]) -> Vec<T> {
        match self {
            Activation::Silu => x.iter().map(|&v| v * sigmoid(v)).collect(),
            Activation::Identity => x.to_vec(),
        }
    }

    pub fn backward<T: Real>(self, x: &[T], dy: &[T]) -> Vec<T> {
        match self {
            Activation::Silu => x
                .iter()
                .zip(dy)
                .map(|(&v, &d)| {
                    let s = sigmoid(v);
                    d * s * (T::one() + v * (T::one() - s))
                })
                .collect(),
            Activation::Identity => dy.to_vec(),
        }
    }

    pub fn forward_t<T: Real>(self, x: &Tensor<T>) -> Tensor<T> {
        Tensor::from_vec(x.c, x.h, x.w, self.forward(&x.data))
    }

    pub fn backward_t<T: Real>(self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        Tensor::from_vec(x.c, x.h, x.w, self.backward(&x.data, &dy.data))
    }
}

/// Square-kernel 2D convolution with zero padding `k / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Conv2d {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.k / 2;
        (
            (h + 2 * pad - self.k) / self.stride + 1,
            (w + 2 * pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn im2col<T: Real>(&self, x: &Tensor<T>, ho: usize, wo: usize) -> Vec<T> {
        let (k, s, pad) = (self.k, self.stride, self.k / 2);
        let n = ho * wo;
        let mut col = vec![T::zero(); self.cin * k * k * n];
        for ci in 0..x.c {
            let src = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            // ix = ox + kx - pad
                            let lo = pad.saturating_sub(kx);
                            let hi = (x.w + pad - kx).min(wo);
                            if lo < hi {
                                let off = lo + kx - pad;
                                drow[lo..hi].copy_from_slice(&srow[off..off + hi - lo]);
                            }
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - pad as isize;
                                if ix >= 0 && (ix as usize) < x.w {
                                    *d = srow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Real>(&self, col: &[T], h: usize, w: usize, ho: usize, wo: usize) -> Tensor<T> {
        let (k, s, pad) = (self.k, self.stride, self.k / 2);
        let n = ho * wo;
        let mut dx = Tensor::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let dst = &mut dx.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let srow = &src[oy * wo..(oy + 1) * wo];
                        for (ox, &v) in srow.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(x.c, self.cin);
        let (ho, wo) = self.out_dims(x.h, x.w);
        let n = ho * wo;
        let kk = self.cin * self.k * self.k;
        let mut y = Tensor::zeros(self.cout, ho, wo);
        let w = &p[self.weight..self.weight + self.weight_len()];
        if self.is_pointwise() {
            matmul(self.cout, kk, n, w, false, &x.data, false, &mut y.data, false);
        } else {
            let col = self.im2col(x, ho, wo);
            matmul(self.cout, kk, n, w, false, &col, false, &mut y.data, false);
        }
        for co in 0..self.cout {
            let b = p[self.bias + co];
            for v in &mut y.data[co * n..(co + 1) * n] {
                *v += b;
            }
        }
        y
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    pub fn backward<T: Real>(
        &self,
        p: &[T],
        x: &Tensor<T>,
        dy: &Tensor<T>,
        g: &mut [T],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let (ho, wo) = (dy.h, dy.w);
        let n = ho * wo;
        let kk = self.cin * self.k * self.k;
        let wl = self.weight_len();
        let owned;
        let col: &[T] = if self.is_pointwise() {
            &x.data
        } else {
            owned = self.im2col(x, ho, wo);
            &owned
        };
        matmul(
            self.cout,
            n,
            kk,
            &dy.data,
            false,
            col,
            true,
            &mut g[self.weight..self.weight + wl],
            true,
        );
        for co in 0..self.cout {
            let s: T = dy.data[co * n..(co + 1) * n].iter().copied().sum();
            g[self.bias + co] += s;
        }
        if !need_dx {
            return None;
        }
        let w = &p[self.weight..self.weight + wl];
        let mut dcol = vec![T::zero(); kk * n];
        matmul(kk, self.cout, n, w, true, &dy.data, false, &mut dcol, false);
        if self.is_pointwise() {
            Some(Tensor::from_vec(self.cin, x.h, x.w, dcol))
        } else {
            Some(self.col2im(&dcol, x.h, x.w, ho, wo))
        }
    }
}

/// Largest divisor of `channels` not exceeding 8.
pub fn group_count(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub c: usize,
    pub groups: usize,
    pub gamma: usize,
    pub beta: usize,
}

pub struct GroupNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

pub const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, GroupNormCache<T>) {
        let plane = x.plane();
        let cg = self.c / self.groups;
        let n = (cg * plane) as f64;
        let mut xhat = Tensor::zeros(x.c, x.h, x.w);
        let mut y = Tensor::zeros(x.c, x.h, x.w);
        let mut inv_std = Vec::with_capacity(self.groups);
        for gi in 0..self.groups {
            let range = gi * cg * plane..(gi + 1) * cg * plane;
            let xs = &x.data[range.clone()];
            let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
            let inv = T::of(1.0 / (var + NORM_EPS).sqrt());
            let mean = T::of(mean);
            inv_std.push(inv);
            for (i, (xh, &v)) in xhat.data[range].iter_mut().zip(xs).enumerate() {
                *xh = (v - mean) * inv;
                let c = gi * cg + i / plane;
                y.data[gi * cg * plane + i] = *xh * p[self.gamma + c] + p[self.beta + c];
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        p: &[T],
        cache: &GroupNormCache<T>,
        dy: &Tensor<T>,
        g: &mut [T],
    ) -> Tensor<T> {
        let plane = dy.plane();
        let cg = self.c / self.groups;
        let n = T::of((cg * plane) as f64);
        let xhat = &cache.xhat;
        let mut dx = Tensor::zeros(dy.c, dy.h, dy.w);
        for c in 0..self.c {
            let (mut dg, mut db) = (T::zero(), T::zero());
            for (&d, &xh) in dy.channel(c).iter().zip(xhat.channel(c)) {
                dg += d * xh;
                db += d;
            }
            g[self.gamma + c] += dg;
            g[self.beta + c] += db;
        }
        for gi in 0..self.groups {
            let (mut sum_d, mut sum_dx) = (T::zero(), T::zero());
            for c in gi * cg..(gi + 1) * cg {
                let gamma = p[self.gamma + c];
                for (&d, &xh) in dy.channel(c).iter().zip(xhat.channel(c)) {
                    let dxh = d * gamma;
                    sum_d += dxh;
                    sum_dx += dxh * xh;
                }
            }
            let inv = cache.inv_std[gi];
            for c in gi * cg..(gi + 1) * cg {
                let gamma = p[self.gamma + c];
                let off = c * plane;
                for i in 0..plane {
                    let dxh = dy.data[off + i] * gamma;
                    dx.data[off + i] = inv / n * (n * dxh - sum_d - xhat.data[off + i] * sum_dx);
                }
            }
        }
        dx
    }
}

/// Dense layer on vectors: `y = W x + b`, `W` is `out x inp`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn forward<T: Real>(&self, p: &[T], x: &[T]) -> Vec<T> {
        let mut y = p[self.bias..self.bias + self.out].to_vec();
        matmul(self.out, self.inp, 1, &p[self.weight..], false, x, false, &mut y, true);
        y
    }

    pub fn backward<T: Real>(&self, p: &[T], x: &[T], dy: &[T], g: &mut [T]) -> Vec<T> {
        for o in 0..self.out {
            g[self.bias + o] += dy[o];
            let row = &mut g[self.weight + o * self.inp..self.weight + (o + 1) * self.inp];
            for (gw, &xi) in row.iter_mut().zip(x) {
                *gw += dy[o] * xi;
            }
        }
        let mut dx = vec![T::zero(); self.inp];
        matmul(self.inp, self.out, 1, &p[self.weight..], true, dy, false, &mut dx, false);
        dx
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub c: usize,
    pub norm: Option<GroupNorm>,
    pub qkv: Conv2d,
    pub proj: Conv2d,
}

pub struct AttentionCache<T> {
    norm: Option<GroupNormCache<T>>,
    xn: Tensor<T>,
    qkv: Tensor<T>,
    attn: Vec<T>,
    mixed: Tensor<T>,
}

impl Attention {
    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, AttentionCache<T>) {
        let (c, n) = (self.c, x.plane());
        let (xn, norm) = match &self.norm {
            Some(gn) => {
                let (y, cache) = gn.forward(p, x);
                (y, Some(cache))
            }
            None => (x.clone(), None),
        };
        let qkv = self.qkv.forward(p, &xn);
        let q = &qkv.data[..c * n];
        let k = &qkv.data[c * n..2 * c * n];
        let v = &qkv.data[2 * c * n..];
        let scale = T::of(1.0 / (c as f64).sqrt());
        // scores[i][j] = sum_c q[c][i] k[c][j]
        let mut attn = vec![T::zero(); n * n];
        matmul(n, c, n, q, true, k, false, &mut attn, false);
        for row in attn.chunks_mut(n) {
            let mut mx = T::neg_infinity();
            for s in row.iter_mut() {
                *s *= scale;
                mx = mx.max(*s);
            }
            let mut total = T::zero();
            for s in row.iter_mut() {
                *s = (*s - mx).exp();
                total += *s;
            }
            for s in row.iter_mut() {
                *s /= total;
            }
        }
        // mixed[c][i] = sum_j v[c][j] attn[i][j]
        let mut mixed = Tensor::zeros(c, x.h, x.w);
        matmul(c, n, n, v, false, &attn, true, &mut mixed.data, false);
        let mut y = self.proj.forward(p, &mixed);
        y.add_assign(x);
        (
            y,
            AttentionCache {
                norm,
                xn,
                qkv,
                attn,
                mixed,
            },
        )
    }

    pub fn backward<T: Real>(
        &self,
        p: &[T],
        cache: &AttentionCache<T>,
        dy: &Tensor<T>,
        g: &mut [T],
    ) -> Tensor<T> {
        let (c, n) = (self.c, dy.plane());
        let dmixed = self
            .proj
            .backward(p, &cache.mixed, dy, g, true)
            .expect("requested dx");
        let q = &cache.qkv.data[..c * n];
        let k = &cache.qkv.data[c * n..2 * c * n];
        let v = &cache.qkv.data[2 * c * n..];
        let a = &cache.attn;
        let mut dqkv = Tensor::zeros(3 * c, dy.h, dy.w);
        {
            let (dq, rest) = dqkv.data.split_at_mut(c * n);
            let (dk, dv) = rest.split_at_mut(c * n);
            // dv = dmixed . attn
            matmul(c, n, n, &dmixed.data, false, a, false, dv, false);
            // dattn[i][j] = sum_c dmixed[c][i] v[c][j]
            let mut ds = vec![T::zero(); n * n];
            matmul(n, c, n, &dmixed.data, true, v, false, &mut ds, false);
            let scale = T::of(1.0 / (c as f64).sqrt());
            for (drow, arow) in ds.chunks_mut(n).zip(a.chunks(n)) {
                let dot: T = drow.iter().zip(arow).map(|(&d, &p)| d * p).sum();
                for (d, &p) in drow.iter_mut().zip(arow) {
                    *d = p * (*d - dot) * scale;
                }
            }
            // dq[c][i] = sum_j ds[i][j] k[c][j]; dk[c][j] = sum_i ds[i][j] q[c][i]
            matmul(c, n, n, k, false, &ds, true, dq, false);
            matmul(c, n, n, q, false, &ds, false, dk, false);
        }
        let dxn = self
            .qkv
            .backward(p, &cache.xn, &dqkv, g, true)
            .expect("requested dx");
        let mut dx = match (&self.norm, &cache.norm) {
            (Some(gn), Some(nc)) => gn.backward(p, nc, &dxn, g),
            _ => dxn,
        };
        dx.add_assign(dy);
        dx
    }
}
