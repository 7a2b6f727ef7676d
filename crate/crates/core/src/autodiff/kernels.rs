//! Slice-level forward and backward routines used by the tape.
//!
//! Layouts: feature maps are `C×H×W`, convolution weights `O×C×k×k`,
//! dense weights `O×I`, block-diagonal weights `B×O×I`.

use crate::tensor::Scalar;

/// `c = a[m×k] · b[k×n]` (overwrites `c`).
pub fn matmul<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    S::gemm(
        m,
        k,
        n,
        S::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        S::zero(),
        c,
        n as isize,
        1,
    );
}

/// `c += aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub fn matmul_at_b_acc<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    S::gemm(
        m,
        k,
        n,
        S::one(),
        a,
        1,
        m as isize,
        b,
        n as isize,
        1,
        S::one(),
        c,
        n as isize,
        1,
    );
}

/// `c += a · bᵀ` where `a` is `m×k` and `b` is stored `n×k`.
pub fn matmul_a_bt_acc<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    S::gemm(
        m,
        k,
        n,
        S::one(),
        a,
        k as isize,
        1,
        b,
        1,
        k as isize,
        S::one(),
        c,
        n as isize,
        1,
    );
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// True when the convolution is a plain channel-mixing matmul.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

pub fn im2col<S: Scalar>(g: &ConvGeom, x: &[S]) -> Vec<S> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut cols = vec![S::zero(); g.col_rows() * oh * ow];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds column gradients back onto the input map.
pub fn col2im_acc<S: Scalar>(g: &ConvGeom, cols: &[S], dx: &mut [S]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn upsample2x<S: Scalar>(c: usize, h: usize, w: usize, x: &[S]) -> Vec<S> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![S::zero(); c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let src = &x[(ch * h + oy / 2) * w..(ch * h + oy / 2 + 1) * w];
            let dst = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<S: Scalar>(c: usize, h: usize, w: usize, dy: &[S], dx: &mut [S]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        for oy in 0..oh {
            let src = &dy[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            let dst = &mut dx[(ch * h + oy / 2) * w..(ch * h + oy / 2 + 1) * w];
            for (ox, &g) in src.iter().enumerate() {
                dst[ox / 2] += g;
            }
        }
    }
}

/// Normalizes each of `c` rows of length `n`; returns `(y, inv_std)`.
pub fn instance_norm<S: Scalar>(c: usize, n: usize, x: &[S], eps: S) -> (Vec<S>, Vec<S>) {
    let inv_n = S::one() / S::from_f64(n as f64);
    let mut y = vec![S::zero(); c * n];
    let mut inv_std = vec![S::zero(); c];
    for ch in 0..c {
        let row = &x[ch * n..(ch + 1) * n];
        let mean = row.iter().copied().sum::<S>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
        let is = S::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        for (o, &v) in y[ch * n..(ch + 1) * n].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (y, inv_std)
}

pub fn instance_norm_backward<S: Scalar>(
    c: usize,
    n: usize,
    y: &[S],
    inv_std: &[S],
    dy: &[S],
    dx: &mut [S],
) {
    let inv_n = S::one() / S::from_f64(n as f64);
    for ch in 0..c {
        let yr = &y[ch * n..(ch + 1) * n];
        let gr = &dy[ch * n..(ch + 1) * n];
        let mean_g = gr.iter().copied().sum::<S>() * inv_n;
        let mean_gy = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<S>() * inv_n;
        for ((d, &g), &v) in dx[ch * n..(ch + 1) * n].iter_mut().zip(gr).zip(yr) {
            *d += inv_std[ch] * (g - mean_g - v * mean_gy);
        }
    }
}

/// Divides each spatial vector by its L2 norm over channels plus `eps`;
/// returns `(y, norms)`.
pub fn channel_unit_norm<S: Scalar>(c: usize, n: usize, x: &[S], eps: S) -> (Vec<S>, Vec<S>) {
    let mut norms = vec![S::zero(); n];
    for ch in 0..c {
        for (acc, &v) in norms.iter_mut().zip(&x[ch * n..(ch + 1) * n]) {
            *acc += v * v;
        }
    }
    for v in norms.iter_mut() {
        *v = v.sqrt();
    }
    let mut y = vec![S::zero(); c * n];
    for ch in 0..c {
        for ((o, &v), &nm) in y[ch * n..(ch + 1) * n]
            .iter_mut()
            .zip(&x[ch * n..(ch + 1) * n])
            .zip(&norms)
        {
            *o = v / (nm + eps);
        }
    }
    (y, norms)
}

pub fn channel_unit_norm_backward<S: Scalar>(
    c: usize,
    n: usize,
    x: &[S],
    norms: &[S],
    eps: S,
    dy: &[S],
    dx: &mut [S],
) {
    // dx_j = g_j/(n+eps) - x_j/(n (n+eps)^2) * sum_c g_c x_c
    let mut dot = vec![S::zero(); n];
    for ch in 0..c {
        for ((acc, &g), &v) in dot
            .iter_mut()
            .zip(&dy[ch * n..(ch + 1) * n])
            .zip(&x[ch * n..(ch + 1) * n])
        {
            *acc += g * v;
        }
    }
    let coef: Vec<(S, S)> = norms
        .iter()
        .zip(&dot)
        .map(|(&nm, &d)| {
            let denom = nm + eps;
            let radial = if nm > S::zero() {
                d / (nm * denom * denom)
            } else {
                S::zero()
            };
            (S::one() / denom, radial)
        })
        .collect();
    for ch in 0..c {
        for (((o, &g), &v), &(a, r)) in dx[ch * n..(ch + 1) * n]
            .iter_mut()
            .zip(&dy[ch * n..(ch + 1) * n])
            .zip(&x[ch * n..(ch + 1) * n])
            .zip(&coef)
        {
            *o += g * a - v * r;
        }
    }
}
