//! Raw loops behind the tape operations.
//!
//! All reductions accumulate in ascending index order so that a tensor
//! padded with trailing zero channels reproduces the unpadded sums exactly.

use super::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `da[m×k] += dc[m×n] · b[k×n]ᵀ`.
pub(crate) fn matmul_grad_a<T: Scalar>(dc: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&g, &bv) in dcrow.iter().zip(brow) {
                acc += g * bv;
            }
            da[i * k + p] += acc;
        }
    }
}

/// `db[k×n] += a[m×k]ᵀ · dc[m×n]`.
pub(crate) fn matmul_grad_b<T: Scalar>(a: &[T], dc: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (o, &g) in dbrow.iter_mut().zip(dcrow) {
                *o += av * g;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Output positions `o` along one axis whose input tap `o·stride + kk - pad` is in range.
    #[inline]
    fn valid_range(&self, kk: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        // o*stride + kk >= pad  and  o*stride + kk - pad < extent
        let lo = if kk >= self.pad { 0 } else { (self.pad - kk).div_ceil(self.stride) };
        let hi_excl = if extent + self.pad > kk {
            ((extent + self.pad - kk - 1) / self.stride + 1).min(out_extent)
        } else {
            0
        };
        (lo, hi_excl.max(lo))
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], wt: &[T], bias: Option<&[T]>, out: &mut [T], g: &ConvGeom) {
    let hw_out = g.h_out * g.w_out;
    let kk = g.k * g.k;
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let o = &mut out[(b * g.c_out + co) * hw_out..(b * g.c_out + co + 1) * hw_out];
            if let Some(bias) = bias {
                o.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..g.c_in {
                let xin = &x[(b * g.c_in + ci) * g.h * g.w..(b * g.c_in + ci + 1) * g.h * g.w];
                let wk = &wt[(co * g.c_in + ci) * kk..(co * g.c_in + ci + 1) * kk];
                for ky in 0..g.k {
                    let (oy0, oy1) = g.valid_range(ky, g.h, g.h_out);
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        let (ox0, ox1) = g.valid_range(kx, g.w, g.w_out);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                            let orow = &mut o[oy * g.w_out..(oy + 1) * g.w_out];
                            for ox in ox0..ox1 {
                                orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    g: &ConvGeom,
) {
    let hw_out = g.h_out * g.w_out;
    let kk = g.k * g.k;
    if let Some(db) = db {
        for b in 0..g.batch {
            for co in 0..g.c_out {
                let s: T = dy[(b * g.c_out + co) * hw_out..(b * g.c_out + co + 1) * hw_out].iter().copied().sum();
                db[co] += s;
            }
        }
    }
    let mut dx = dx;
    let mut dw = dw;
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let gy = &dy[(b * g.c_out + co) * hw_out..(b * g.c_out + co + 1) * hw_out];
            for ci in 0..g.c_in {
                let xoff = (b * g.c_in + ci) * g.h * g.w;
                let woff = (co * g.c_in + ci) * kk;
                for ky in 0..g.k {
                    let (oy0, oy1) = g.valid_range(ky, g.h, g.h_out);
                    for kx in 0..g.k {
                        let (ox0, ox1) = g.valid_range(kx, g.w, g.w_out);
                        let wv = wt[woff + ky * g.k + kx];
                        let mut wacc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - g.pad;
                                let gv = gy[oy * g.w_out + ox];
                                wacc += gv * x[xoff + iy * g.w + ix];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xoff + iy * g.w + ix] += gv * wv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[woff + ky * g.k + kx] += wacc;
                        }
                    }
                }
            }
        }
    }
}

/// Normalizes each row of `x` (row length `c`) over its first `width(row)` slots.
///
/// Statistics use raw sums over every slot divided by the active width, so
/// zero-filled trailing slots do not change them. Slots at or past the
/// active width are written as zero.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    c: usize,
    eps: T,
    width: impl Fn(usize) -> usize,
    out: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
) {
    let rows = x.len() / c;
    for r in 0..rows {
        let w = width(r);
        let xr = &x[r * c..(r + 1) * c];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for &v in xr {
            s1 += v;
            s2 += v * v;
        }
        let inv_w = T::one() / T::lit(w as f64);
        let mu = s1 * inv_w;
        let var = (s2 * inv_w - mu * mu).max(T::zero());
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let or = &mut out[r * c..(r + 1) * c];
        let hr = &mut xhat[r * c..(r + 1) * c];
        for j in 0..c {
            let h = (xr[j] - mu) * rs;
            hr[j] = h;
            or[j] = if j < w { h * gamma[j] + beta[j] } else { T::zero() };
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    gamma: &[T],
    xhat: &[T],
    rstd: &[T],
    c: usize,
    width: impl Fn(usize) -> usize,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let rows = dy.len() / c;
    let mut dx = dx;
    let mut dgamma = dgamma;
    let mut dbeta = dbeta;
    for r in 0..rows {
        let w = width(r);
        let gr = &dy[r * c..(r + 1) * c];
        let hr = &xhat[r * c..(r + 1) * c];
        if let Some(dg) = dgamma.as_deref_mut() {
            for j in 0..w {
                dg[j] += gr[j] * hr[j];
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for j in 0..w {
                db[j] += gr[j];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let inv_w = T::one() / T::lit(w as f64);
            let mut mean_g = T::zero();
            let mut mean_gh = T::zero();
            for j in 0..w {
                let gj = gr[j] * gamma[j];
                mean_g += gj;
                mean_gh += gj * hr[j];
            }
            mean_g *= inv_w;
            mean_gh *= inv_w;
            let rs = rstd[r];
            let dxr = &mut dx[r * c..(r + 1) * c];
            for j in 0..c {
                let gj = if j < w { gr[j] * gamma[j] } else { T::zero() };
                dxr[j] += rs * (gj - mean_g - hr[j] * mean_gh);
            }
        }
    }
}

pub(crate) const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub(crate) const GELU_CUBIC: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}
