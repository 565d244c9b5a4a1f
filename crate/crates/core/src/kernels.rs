//! Raw forward/backward kernels on flat `[C, H, W]` buffers.
//!
//! Everything here is shape-trusting; the graph layer validates shapes before
//! calling in.

pub(crate) const NORM_EPS: f64 = 1e-5;

#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the full strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let p = ho * wo;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let p = ho * wo;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Dense convolution, weights `[c_out, c_in, k, k]`.
pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let p = g.h_out() * g.w_out();
    let kk = g.c_in * g.k * g.k;
    let mut out = vec![0.0; g.c_out * p];
    if let Some(b) = b {
        for (co, chunk) in out.chunks_mut(p).enumerate() {
            chunk.fill(b[co]);
        }
    }
    if g.is_pointwise() {
        gemm(g.c_out, kk, p, w, false, x, false, 1.0, &mut out);
    } else {
        let mut cols = vec![0.0; kk * p];
        im2col(x, g, &mut cols);
        gemm(g.c_out, kk, p, w, false, &cols, false, 1.0, &mut out);
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let p = g.h_out() * g.w_out();
    let kk = g.c_in * g.k * g.k;
    let db: Vec<f64> = dy.chunks(p).map(|c| c.iter().sum()).collect();

    let cols_owned;
    let cols: &[f64] = if g.is_pointwise() {
        x
    } else if need_dw {
        let mut c = vec![0.0; kk * p];
        im2col(x, g, &mut c);
        cols_owned = c;
        &cols_owned
    } else {
        &[]
    };

    let dw = need_dw.then(|| {
        let mut dw = vec![0.0; g.c_out * kk];
        gemm(g.c_out, p, kk, dy, false, cols, true, 0.0, &mut dw);
        dw
    });

    let dx = need_dx.then(|| {
        if g.is_pointwise() {
            let mut dx = vec![0.0; g.c_in * g.h * g.w];
            gemm(kk, g.c_out, p, w, true, dy, false, 0.0, &mut dx);
            dx
        } else {
            let mut dcols = vec![0.0; kk * p];
            gemm(kk, g.c_out, p, w, true, dy, false, 0.0, &mut dcols);
            let mut dx = vec![0.0; g.c_in * g.h * g.w];
            col2im(&dcols, g, &mut dx);
            dx
        }
    });
    (dx, dw, db)
}

/// Depthwise convolution, weights `[c, 1, k, k]`, `c_in == c_out`.
pub(crate) fn depthwise_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.h_out(), g.w_out());
    let kk = g.k * g.k;
    let mut out = vec![0.0; g.c_in * ho * wo];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let ker = &w[c * kk..(c + 1) * kk];
        let bias = b.map_or(0.0, |b| b[c]);
        let dst = &mut out[c * ho * wo..(c + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias;
                for ki in 0..g.k {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.k {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            acc += ker[ki * g.k + kj] * plane[iy as usize * g.w + ix as usize];
                        }
                    }
                }
                dst[oy * wo + ox] = acc;
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let kk = g.k * g.k;
    let mut dw = vec![0.0; g.c_in * kk];
    let mut dx = need_dx.then(|| vec![0.0; g.c_in * g.h * g.w]);
    let db: Vec<f64> = dy.chunks(ho * wo).map(|c| c.iter().sum()).collect();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let ker = &w[c * kk..(c + 1) * kk];
        let dker = &mut dw[c * kk..(c + 1) * kk];
        let grad = &dy[c * ho * wo..(c + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let d = grad[oy * wo + ox];
                if d == 0.0 {
                    continue;
                }
                for ki in 0..g.k {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.k {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let idx = iy as usize * g.w + ix as usize;
                        dker[ki * g.k + kj] += d * plane[idx];
                        if let Some(dx) = dx.as_mut() {
                            dx[c * g.h * g.w + idx] += d * ker[ki * g.k + kj];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Per-axis source taps for half-pixel bilinear resampling.
#[derive(Clone, Debug)]
pub(crate) struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Taps {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for o in 0..dst {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (pos.floor() as usize).min(src - 1);
            lo.push(l);
            hi.push((l + 1).min(src - 1));
            frac.push(if l + 1 < src { pos - l as f64 } else { 0.0 });
        }
        Self { lo, hi, frac }
    }
}

pub(crate) fn resize_forward(x: &[f64], c: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let ty = Taps::new(h, oh);
    let tx = Taps::new(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn resize_backward(dy: &[f64], c: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let ty = Taps::new(h, oh);
    let tx = Taps::new(w, ow);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let d = g[oy * ow + ox];
                dst[y0 * w + x0] += d * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += d * (1.0 - fy) * fx;
                dst[y1 * w + x0] += d * fy * (1.0 - fx);
                dst[y1 * w + x1] += d * fy * fx;
            }
        }
    }
    dx
}

/// Per-channel standardization over the spatial extent followed by an affine
/// map. Returns `(output, normalized, inv_std)`.
pub(crate) fn norm_forward(
    x: &[f64],
    c: usize,
    n: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; c * n];
    let mut xhat = vec![0.0; c * n];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let src = &x[ch * n..(ch + 1) * n];
        let mean = src.iter().sum::<f64>() / n as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[ch] = is;
        for i in 0..n {
            let z = (src[i] - mean) * is;
            xhat[ch * n + i] = z;
            out[ch * n + i] = gamma[ch] * z + beta[ch];
        }
    }
    (out, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    c: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; c * n];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let nf = n as f64;
    for ch in 0..c {
        let g = &dy[ch * n..(ch + 1) * n];
        let z = &xhat[ch * n..(ch + 1) * n];
        let mut sum_d = 0.0;
        let mut sum_dz = 0.0;
        for i in 0..n {
            dgamma[ch] += g[i] * z[i];
            dbeta[ch] += g[i];
            let dxh = g[i] * gamma[ch];
            sum_d += dxh;
            sum_dz += dxh * z[i];
        }
        let k = inv_std[ch] / nf;
        for i in 0..n {
            let dxh = g[i] * gamma[ch];
            dx[ch * n + i] = k * (nf * dxh - sum_d - z[i] * sum_dz);
        }
    }
    (dx, dgamma, dbeta)
}
