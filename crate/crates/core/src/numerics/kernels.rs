//! Pure numeric kernels on slices and tensors.
//!
//! The graph operations in [`super::graph`] call into these for their forward
//! values; the tensor-level wrappers here are the eager API.

use super::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Variance stabilizer used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-8;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `c[m×n] = a[m×k] · b[k×n]`, all row-major.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, (k, 1), b, (n, 1), m, k, n)
}

/// `c[k×n] = aᵀ · b` for `a[m×k]`, `b[m×n]`.
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, (1, k), b, (n, 1), k, m, n)
}

/// `c[m×k] = a · bᵀ` for `a[m×n]`, `b[k×n]`.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    gemm(a, (n, 1), b, (1, n), m, n, k)
}

/// `[rows×inner] · [inner×cols]` with explicit (row, column) strides.
fn gemm(
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    rows: usize,
    inner: usize,
    cols: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; rows * cols];
    gemm_strided((rows, inner, cols), 1.0, a, sa, b, sb, 0.0, &mut c, (cols, 1));
    c
}

fn span(rows: usize, cols: usize, s: (usize, usize)) -> usize {
    (rows - 1) * s.0 + (cols - 1) * s.1 + 1
}

/// `c ← alpha · a · b + beta · c` for strided views: `a` is
/// `[m×k]`, `b` is `[k×n]`, `c` is `[m×n]`, each given by its first element
/// and (row, column) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    (m, k, n): (usize, usize, usize),
    alpha: f64,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    beta: f64,
    c: &mut [f64],
    sc: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * sc.0 + j * sc.1] *= beta;
            }
        }
        return;
    }
    assert!(a.len() >= span(m, k, sa) && b.len() >= span(k, n, sb) && c.len() >= span(m, n, sc));
    // SAFETY: the assertion above bounds every element addressed through the
    // strides, and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

/// Inner product with four interleaved partial sums (fixed order, so results
/// are reproducible).
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

// 0.5·(1 + tanh(u)) equals the logistic function at 2u, which needs one
// `exp` instead of `tanh`.
fn gelu_gate(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp())
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * gelu_gate(x)
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let s = gelu_gate(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Normalizes each `d`-wide row; returns `(xhat, rstd)`.
pub(crate) fn normalize_rows(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = s;
        for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
    }
    (xhat, rstd)
}

fn check_finite(t: &Tensor, op: &str) -> Result<()> {
    if t.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("{op}: NaN in input")));
    }
    Ok(())
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::matrix(m, n, mm(a.data(), b.data(), m, k, n))
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_finite(x, "softmax")?;
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Index {
            index: axis,
            extent: shape.len(),
        });
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[base + j * inner];
            }
            softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                data[base + j * inner] = *b;
            }
        }
    }
    Ok(out)
}

/// `Σ p (log p − log q)` with `0·log 0 = 0`.
pub fn kl_divergence(p: &Tensor, log_q: &Tensor) -> Result<f64> {
    if p.shape() != log_q.shape() {
        return Err(Error::shape("kl_divergence", p.shape(), log_q.shape()));
    }
    if p.data().iter().any(|&v| v < 0.0 || v.is_nan()) {
        return Err(Error::Contract("kl_divergence: p has negative entries".into()));
    }
    let total: f64 = p.data().iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "kl_divergence: p sums to {total}, expected 1"
        )));
    }
    Ok(kl_terms(p.data(), log_q.data()))
}

pub(crate) fn kl_terms(p: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(log_q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &lq)| pi * (pi.max(LOG_FLOOR).ln() - lq))
        .sum()
}

/// `−log softmax(logits)[target]` for a single logit vector.
pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<f64> {
    check_finite(logits, "cross_entropy")?;
    if target >= logits.len() {
        return Err(Error::Index {
            index: target,
            extent: logits.len(),
        });
    }
    Ok(log_sum_exp(logits.data()) - logits.data()[target])
}

/// Per-row layer normalization over the last axis followed by `gain`/`bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if d < 2 {
        return Err(Error::Contract("layer_norm needs a width of at least 2".into()));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let (mut xhat, _) = normalize_rows(x.data(), d);
    for row in xhat.chunks_mut(d) {
        for ((v, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    Tensor::new(x.shape().to_vec(), xhat)
}

pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Cosine of the angle between two flat vectors.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity", &[u.len()], &[v.len()]));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn matmul_identity_and_basis() {
        let i2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap(), m);
        let e = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&i2, &e).unwrap(), e);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.at(i, p) * b.at(p, j);
                }
                assert!((c.at(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::vector(vec![2f64.ln(), 0.0]).unwrap(), 0).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);
        let nan = Tensor::vector(vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax(&nan, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn kl_cases() {
        let half = Tensor::vector(vec![0.5, 0.5]).unwrap();
        let log_half = Tensor::vector(vec![0.5f64.ln(); 2]).unwrap();
        assert_eq!(kl_divergence(&half, &log_half).unwrap(), 0.0);
        let one = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let v = kl_divergence(&one, &log_half).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let bad = Tensor::vector(vec![0.7, 0.7]).unwrap();
        assert!(matches!(
            kl_divergence(&bad, &log_half),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn kl_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw_p: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..1.0)).collect();
        let raw_q: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..1.0)).collect();
        let sp: f64 = raw_p.iter().sum();
        let sq: f64 = raw_q.iter().sum();
        let p: Vec<f64> = raw_p.iter().map(|v| v / sp).collect();
        let q: Vec<f64> = raw_q.iter().map(|v| v / sq).collect();
        let mut expected = 0.0;
        for i in 0..5 {
            expected += p[i] * (p[i] / q[i]).ln();
        }
        let log_q = Tensor::vector(q.iter().map(|v| v.ln()).collect()).unwrap();
        let got = kl_divergence(&Tensor::vector(p).unwrap(), &log_q).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::vector(vec![0.3; 4]).unwrap();
        assert!((cross_entropy(&uniform, 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        let sure = Tensor::vector(vec![10.0, -10.0]).unwrap();
        assert!(cross_entropy(&sure, 0).unwrap() < 1e-8);
        assert!(matches!(
            cross_entropy(&sure, 2),
            Err(Error::Index { index: 2, extent: 2 })
        ));
    }

    #[test]
    fn cross_entropy_matches_log_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = random(&mut rng, &[6]);
        let z: f64 = logits.data().iter().map(|v| v.exp()).sum();
        for t in 0..6 {
            let oracle = -(logits.data()[t].exp() / z).ln();
            assert!((cross_entropy(&logits, t).unwrap() - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let zeros = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let c = Tensor::vector(vec![3.0; 4]).unwrap();
        let g4 = Tensor::vector(vec![1.0; 4]).unwrap();
        let b4 = Tensor::vector(vec![0.0; 4]).unwrap();
        assert!(layer_norm(&c, &g4, &b4).unwrap().data().iter().all(|&v| v == 0.0));
        let x = Tensor::vector(vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &ones, &zeros).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-7 && (y.data()[1] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[10, 16]);
        let g = Tensor::vector(vec![1.0; 16]).unwrap();
        let b = Tensor::vector(vec![0.0; 16]).unwrap();
        let y = layer_norm(&x, &g, &b).unwrap();
        for r in 0..10 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_cases() {
        let u = [1.0, 2.0, 3.0];
        let neg = [-1.0, -2.0, -3.0];
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&u, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            xs in proptest::collection::vec(-50.0f64..50.0, 2..12),
            shift in -100.0f64..100.0,
        ) {
            let x = Tensor::vector(xs.clone()).unwrap();
            let s = softmax(&x, 0).unwrap();
            proptest::prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let shifted = Tensor::vector(xs.iter().map(|v| v + shift).collect()).unwrap();
            let s2 = softmax(&shifted, 0).unwrap();
            for (a, b) in s.data().iter().zip(s2.data()) {
                proptest::prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn kl_is_non_negative_and_zero_on_self(
            raw in proptest::collection::vec(0.0f64..1.0, 2..10),
            other in proptest::collection::vec(0.01f64..1.0, 10),
        ) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-3;
            let p: Vec<f64> = raw.iter().map(|v| (v + 1e-3 / raw.len() as f64) / total).collect();
            let pt = Tensor::vector(p.clone()).unwrap();
            let log_p = Tensor::vector(p.iter().map(|v| v.ln()).collect()).unwrap();
            proptest::prop_assert!(kl_divergence(&pt, &log_p).unwrap().abs() < 1e-12);
            let q = &other[..p.len()];
            let zq: f64 = q.iter().sum();
            let log_q = Tensor::vector(q.iter().map(|v| (v / zq).ln()).collect()).unwrap();
            proptest::prop_assert!(kl_divergence(&pt, &log_q).unwrap() >= -1e-12);
        }
    }
}
