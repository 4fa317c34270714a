use super::Tensor;
use crate::error::{Error, Result};

/// `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`, each optionally
/// stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
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
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are asserted above and the strides address
    // exactly those ranges.
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

pub(crate) fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, len, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax along `axis`.
///
/// `-inf` entries map to exactly zero. A slice that is `-inf` everywhere
/// yields the uniform distribution. NaN is rejected.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape().len() {
        return Err(Error::invalid(
            "softmax",
            format!("axis {axis} out of range for {:?}", x.shape()),
        ));
    }
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN input to softmax".into()));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                let u = 1.0 / len as f64;
                (0..len).for_each(|j| out[idx(j)] = u);
                continue;
            }
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            (0..len).for_each(|j| out[idx(j)] /= total);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Source indices and weights for one output coordinate along one axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisTaps {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

/// Half-pixel-centre (align-corners = false) taps for resampling an axis of
/// length `input` to `output`.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<AxisTaps> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            AxisTaps {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

/// Bilinear resampling of an `h×w×C` grid to `out_h×out_w×C`.
pub fn interpolate_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = grid_dims("interpolate_bilinear", x)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("interpolate_bilinear", "zero target size"));
    }
    let rows = bilinear_taps(h, out_h);
    let cols = bilinear_taps(w, out_w);
    let src = x.data();
    let mut out = vec![0.0; out_h * out_w * c];
    // lerp form keeps constant regions exactly constant
    for (oy, ty) in rows.iter().enumerate() {
        for (ox, tx) in cols.iter().enumerate() {
            let dst = &mut out[(oy * out_w + ox) * c..][..c];
            let at = |y: usize, xx: usize, ch: usize| src[(y * w + xx) * c + ch];
            for (ch, d) in dst.iter_mut().enumerate() {
                let top = at(ty.lo, tx.lo, ch) + (at(ty.lo, tx.hi, ch) - at(ty.lo, tx.lo, ch)) * tx.w_hi;
                let bot = at(ty.hi, tx.lo, ch) + (at(ty.hi, tx.hi, ch) - at(ty.hi, tx.lo, ch)) * tx.w_hi;
                *d = top + (bot - top) * ty.w_hi;
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

pub(crate) fn grid_dims(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] if h >= 1 && w >= 1 => Ok((h, w, c)),
        _ => Err(Error::invalid(op, format!("expected H×W×C grid, got {:?}", x.shape()))),
    }
}
