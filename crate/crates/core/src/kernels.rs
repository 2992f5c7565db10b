//! Numeric kernels behind the graph primitives.
//!
//! Batch items are processed independently (possibly in parallel); anything
//! summed across the batch is reduced afterwards in index order, so results do
//! not depend on the thread count.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// `C = A·B + beta·C` with `A: [m, k]`, `B: [k, n]`; `a_t`/`b_t` mean the
/// operand is stored transposed (`[k, m]` / `[n, k]`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to the extent implied by
    // (m, k, n) and the strides, and `c` does not alias `a` or `b`.
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shape(format!("conv2d of {x:?} with kernel {w:?}")));
        }
        if x[1] != w[1] {
            return Err(Error::shape(format!(
                "conv2d input has {} channels, kernel expects {}",
                x[1], w[1]
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride 0"));
        }
        let out = |len: usize, k: usize| -> Result<usize> {
            let padded = len + 2 * pad;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::shape(format!(
                    "conv2d output size ({len} + 2*{pad} - {k}) / {stride} + 1 is not integral"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(ConvGeom {
            batch: x[0],
            in_ch: x[1],
            in_h: x[2],
            in_w: x[3],
            out_ch: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            out_h: out(x[2], w[2])?,
            out_w: out(x[3], w[3])?,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }

    fn k(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_item(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    /// Input coordinate feeding output position `o` at kernel offset `k`.
    #[inline]
    fn src(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.p();
        for c in 0..self.in_ch {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * p..][..p];
                    for oy in 0..self.out_h {
                        let dst = &mut row[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.src(oy, i, self.in_h) {
                            None => dst.fill(0.0),
                            Some(y) => {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = match self.src(ox, j, self.in_w) {
                                        Some(xx) => plane[y * self.in_w + xx],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.p();
        for c in 0..self.in_ch {
            let plane = &mut dx[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((c * self.kh + i) * self.kw + j) * p..][..p];
                    for oy in 0..self.out_h {
                        let Some(y) = self.src(oy, i, self.in_h) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(xx) = self.src(ox, j, self.in_w) {
                                plane[y * self.in_w + xx] += row[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let out_item = g.out_ch * p;
    let mut out = vec![0.0; g.batch * out_item];
    par::for_each_chunk_mut(&mut out, out_item, |b, dst| {
        let mut cols = vec![0.0; k * p];
        g.im2col(&x[b * g.in_item()..(b + 1) * g.in_item()], &mut cols);
        let beta = match bias {
            Some(bias) => {
                for (o, row) in dst.chunks_mut(p).enumerate() {
                    row.fill(bias[o]);
                }
                1.0
            }
            None => 0.0,
        };
        gemm(g.out_ch, k, p, w, false, &cols, false, dst, beta);
    });
    out
}

/// Returns `(dx, dw)`, each only when requested.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (k, p) = (g.k(), g.p());
    let out_item = g.out_ch * p;
    let per_item = par::map_range(g.batch, |b| {
        let dy_b = &dy[b * out_item..(b + 1) * out_item];
        let dw_b = want_w.then(|| {
            let mut cols = vec![0.0; k * p];
            g.im2col(&x[b * g.in_item()..(b + 1) * g.in_item()], &mut cols);
            let mut dw = vec![0.0; g.out_ch * k];
            gemm(g.out_ch, p, k, dy_b, false, &cols, true, &mut dw, 0.0);
            dw
        });
        let dx_b = want_x.then(|| {
            let mut dcols = vec![0.0; k * p];
            gemm(k, g.out_ch, p, w, true, dy_b, false, &mut dcols, 0.0);
            let mut dx = vec![0.0; g.in_item()];
            g.col2im(&dcols, &mut dx);
            dx
        });
        (dx_b, dw_b)
    });
    let mut dx = want_x.then(|| Vec::with_capacity(g.batch * g.in_item()));
    let mut dw = want_w.then(|| vec![0.0; g.out_ch * k]);
    for (dx_b, dw_b) in per_item {
        if let (Some(acc), Some(d)) = (dx.as_mut(), dx_b) {
            acc.extend_from_slice(&d);
        }
        if let (Some(acc), Some(d)) = (dw.as_mut(), dw_b) {
            for (a, v) in acc.iter_mut().zip(&d) {
                *a += v;
            }
        }
    }
    (dx, dw)
}

/// Max pooling over `[B, C, H, W]`. Returns the output, its shape and, for
/// every output element, the flat input index of the winning element (first
/// in row-major window order on ties).
pub fn maxpool_forward(
    x: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Vec<f64>, Vec<usize>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("maxpool expects rank 4, got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::shape(format!(
            "pool window {window} (stride {stride}) over {h}x{w}"
        )));
    }
    if !(h - window).is_multiple_of(stride) || !(w - window).is_multiple_of(stride) {
        return Err(Error::shape(format!(
            "pool window {window} stride {stride} does not tile {h}x{w}"
        )));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let data = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for i in 0..window {
                    for j in 0..window {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((out, vec![b, c, oh, ow], argmax))
}

/// Per-channel mean and biased variance over `(B, H, W)`.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let n = (b * hw) as f64;
    let data = x.data();
    let mut mean = vec![0.0; c];
    for bi in 0..b {
        for (ci, m) in mean.iter_mut().enumerate() {
            *m += data[(bi * c + ci) * hw..][..hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            var[ci] += data[(bi * c + ci) * hw..][..hw]
                .iter()
                .map(|v| (v - mean[ci]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Returns `(output, xhat)`.
pub fn batchnorm_forward(
    x: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for (i, plane) in x.data().chunks(hw).enumerate() {
        let ci = i % c;
        for &v in plane {
            let h = (v - mean[ci]) * inv_std[ci];
            xhat.push(h);
            out.push(gamma[ci] * h + beta[ci]);
        }
    }
    (out, xhat)
}

pub struct BatchNormGrads {
    pub dx: Vec<f64>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

pub fn batchnorm_backward(
    shape: &[usize],
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    batch_stats: bool,
) -> BatchNormGrads {
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let n = (b * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (i, (gp, hp)) in dy.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
        let ci = i % c;
        for (g, h) in gp.iter().zip(hp) {
            dgamma[ci] += g * h;
            dbeta[ci] += g;
        }
    }
    let mut dx = Vec::with_capacity(dy.len());
    for (i, (gp, hp)) in dy.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
        let ci = i % c;
        let scale = gamma[ci] * inv_std[ci];
        if batch_stats {
            // dx = γ/σ · (dy − mean(dy) − x̂ · mean(dy · x̂))
            let (mean_dy, mean_dyh) = (dbeta[ci] / n, dgamma[ci] / n);
            dx.extend(
                gp.iter()
                    .zip(hp)
                    .map(|(g, h)| scale * (g - mean_dy - h * mean_dyh)),
            );
        } else {
            dx.extend(gp.iter().map(|g| scale * g));
        }
    }
    BatchNormGrads { dx, dgamma, dbeta }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1., 2., 3., 4.];
        let b = [5., 6., 7., 8.];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19., 22., 43., 50.]);
        // Aᵀ·B with A stored as given
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26., 30., 38., 44.]);
        // A·Bᵀ
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17., 23., 39., 53.]);
        // beta = 1 accumulates
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 1.0);
        assert_eq!(c, [34., 46., 78., 106.]);
    }

    #[test]
    fn conv_geometry_errors() {
        assert!(ConvGeom::new(&[1, 2, 5, 5], &[3, 3, 3, 3], 1, 1).is_err());
        assert!(ConvGeom::new(&[1, 2, 4, 4], &[3, 2, 3, 3], 2, 0).is_err());
        let g = ConvGeom::new(&[1, 2, 5, 5], &[3, 2, 3, 3], 2, 0).unwrap();
        assert_eq!(g.out_shape(), [1, 3, 2, 2]);
    }
}
