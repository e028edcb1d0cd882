//! Raw numeric kernels shared by the tape ops and by tape-free inference paths.

/// Strided read-only view of a 2-D block of `f64`.
#[derive(Clone, Copy, Debug)]
pub struct MatView<'s> {
    pub data: &'s [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'s> MatView<'s> {
    /// Row-major `rows × cols` view.
    pub fn new(data: &'s [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        MatView {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn maybe_t(self, transpose: bool) -> Self {
        if transpose {
            self.t()
        } else {
            self
        }
    }
}

/// `c = a · b + beta · c`, with `c` row-major `a.rows × b.cols`.
pub fn gemm(a: MatView<'_>, b: MatView<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c[..m * n].iter_mut() {
            *x *= beta;
        }
        return;
    }
    // SAFETY: the views were built from slices long enough for their
    // declared shape and strides, and `c` holds m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximation GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm with affine parameters.
pub fn layer_norm(x: &[f64], cols: usize, gamma: &[f64], beta: &[f64], out: &mut [f64]) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let (mean, rstd) = row_stats(xr);
        for c in 0..cols {
            or[c] = (xr[c] - mean) * rstd * gamma[c] + beta[c];
        }
    }
}

#[inline]
pub fn row_stats(xr: &[f64]) -> (f64, f64) {
    let n = xr.len() as f64;
    let mean = xr.iter().sum::<f64>() / n;
    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

/// Accumulates layer-norm gradients into `dx`, `dgamma`, `dbeta` (any may be skipped).
pub fn layer_norm_backward(
    x: &[f64],
    cols: usize,
    gamma: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dgamma: Option<&mut [f64]>,
    mut dbeta: Option<&mut [f64]>,
) {
    let n = cols as f64;
    let mut xhat = vec![0.0; cols];
    let mut dxhat = vec![0.0; cols];
    for (r, (xr, dyr)) in x.chunks_exact(cols).zip(dy.chunks_exact(cols)).enumerate() {
        let (mean, rstd) = row_stats(xr);
        for c in 0..cols {
            xhat[c] = (xr[c] - mean) * rstd;
            dxhat[c] = dyr[c] * gamma[c];
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            for c in 0..cols {
                dg[c] += dyr[c] * xhat[c];
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for c in 0..cols {
                db[c] += dyr[c];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let m1 = dxhat.iter().sum::<f64>() / n;
            let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
            let dxr = &mut dx[r * cols..(r + 1) * cols];
            for c in 0..cols {
                dxr[c] += rstd * (dxhat[c] - m1 - xhat[c] * m2);
            }
        }
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax value of entry `idx` in `row`.
pub fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[idx] - lse
}

/// Which key rows each query row may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttnPattern {
    /// Queries and keys share rows; row `i` attends to `seg_start[i]..=i`.
    Causal { seg_start: Vec<usize> },
    /// Query row `b` attends to key rows `0..prefix` and then to key row `prefix + b`.
    PrefixSelf { prefix: usize },
}

impl AttnPattern {
    /// Causal pattern for sequences laid out back to back with the given lengths.
    pub fn causal_segments(lengths: &[usize]) -> Self {
        let mut seg_start = Vec::with_capacity(lengths.iter().sum());
        let mut start = 0;
        for &len in lengths {
            seg_start.extend(std::iter::repeat_n(start, len));
            start += len;
        }
        AttnPattern::Causal { seg_start }
    }

    /// Two half-open key ranges for query `i`; the second may be empty.
    #[inline]
    pub fn key_ranges(&self, i: usize) -> [(usize, usize); 2] {
        match self {
            AttnPattern::Causal { seg_start } => [(seg_start[i], i + 1), (0, 0)],
            AttnPattern::PrefixSelf { prefix } => [(0, *prefix), (prefix + i, prefix + i + 1)],
        }
    }

    pub fn n_keys(&self, i: usize) -> usize {
        self.key_ranges(i).iter().map(|(a, b)| b - a).sum()
    }

    pub fn n_queries(&self) -> Option<usize> {
        match self {
            AttnPattern::Causal { seg_start } => Some(seg_start.len()),
            AttnPattern::PrefixSelf { .. } => None,
        }
    }

    /// Number of key rows the pattern requires for `nq` queries.
    pub fn required_keys(&self, nq: usize) -> usize {
        match self {
            AttnPattern::Causal { seg_start } => seg_start.len(),
            AttnPattern::PrefixSelf { prefix } => prefix + nq,
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Multi-head scaled dot-product attention. Returns the output and the
/// flattened attention probabilities (query-major, then head, then key).
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    d: usize,
    heads: usize,
    pattern: &AttnPattern,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * d];
    let total: usize = (0..nq).map(|i| pattern.n_keys(i) * heads).sum();
    let mut probs = Vec::with_capacity(total);
    let mut scores = Vec::new();
    let mut keys = Vec::new();
    for i in 0..nq {
        keys.clear();
        for (a, b) in pattern.key_ranges(i) {
            keys.extend(a..b);
        }
        for h in 0..heads {
            let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
            scores.clear();
            scores.extend(keys.iter().map(|&j| scale * dot(qi, &k[j * d + h * dh..j * d + (h + 1) * dh])));
            softmax_in_place(&mut scores);
            let oi = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for (&j, &p) in keys.iter().zip(scores.iter()) {
                let vj = &v[j * d + h * dh..j * d + (h + 1) * dh];
                for c in 0..dh {
                    oi[c] += p * vj[c];
                }
            }
            probs.extend_from_slice(&scores);
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`]; accumulates into whichever outputs are present.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    nq: usize,
    d: usize,
    heads: usize,
    pattern: &AttnPattern,
    mut dq: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut keys = Vec::new();
    let mut ds = Vec::new();
    let mut off = 0;
    for i in 0..nq {
        keys.clear();
        for (a, b) in pattern.key_ranges(i) {
            keys.extend(a..b);
        }
        let nk = keys.len();
        for h in 0..heads {
            let p = &probs[off..off + nk];
            off += nk;
            let lo = h * dh;
            let doi = &dout[i * d + lo..i * d + lo + dh];
            ds.clear();
            ds.extend(keys.iter().map(|&j| dot(doi, &v[j * d + lo..j * d + lo + dh])));
            let weighted: f64 = p.iter().zip(&ds).map(|(a, b)| a * b).sum();
            for (s, &pj) in ds.iter_mut().zip(p) {
                *s = pj * (*s - weighted) * scale;
            }
            if let Some(dq) = dq.as_deref_mut() {
                let dqi = &mut dq[i * d + lo..i * d + lo + dh];
                for (&j, &s) in keys.iter().zip(&ds) {
                    let kj = &k[j * d + lo..j * d + lo + dh];
                    for c in 0..dh {
                        dqi[c] += s * kj[c];
                    }
                }
            }
            if let Some(dk) = dk.as_deref_mut() {
                let qi = &q[i * d + lo..i * d + lo + dh];
                for (&j, &s) in keys.iter().zip(&ds) {
                    let dkj = &mut dk[j * d + lo..j * d + lo + dh];
                    for c in 0..dh {
                        dkj[c] += s * qi[c];
                    }
                }
            }
            if let Some(dv) = dv.as_deref_mut() {
                for (&j, &pj) in keys.iter().zip(p) {
                    let dvj = &mut dv[j * d + lo..j * d + lo + dh];
                    for c in 0..dh {
                        dvj[c] += pj * doi[c];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_matches_scalar_formula_at_one() {
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        let u: f64 = (2.0 / std::f64::consts::PI).sqrt() * 1.044715;
        let expected = 0.5 * (1.0 + u.tanh());
        assert!((gelu(1.0) - expected).abs() < 1e-15);
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -1.0, -0.2, 0.0, 0.5, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2,3],[4,5,6]], b = a^T -> a a^T = [[14,32],[32,77]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = [0.0; 4];
        gemm(MatView::new(&a, 2, 3), MatView::new(&a, 2, 3).t(), &mut c, 0.0);
        assert_eq!(c, [14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn prefix_self_pattern_keys() {
        let p = AttnPattern::PrefixSelf { prefix: 3 };
        assert_eq!(p.key_ranges(2), [(0, 3), (5, 6)]);
        assert_eq!(p.n_keys(0), 4);
        let c = AttnPattern::causal_segments(&[2, 3]);
        assert_eq!(c.key_ranges(1), [(0, 2), (0, 0)]);
        assert_eq!(c.key_ranges(4), [(2, 5), (0, 0)]);
    }
}
