//! Forward and backward passes for the dense primitives used by the fusion block.
//!
//! Every op comes as a pair: the forward returns its output (plus whatever cache the
//! backward needs) and the backward maps an upstream gradient to input gradients.

use super::tensor::{dot, Real, Tensor};
use crate::error::{Error, Result};

// Raw kernels on row-major slices. All accumulate into `out`.

/// `out[m x n] += a[m x k] * b[k x n]`
pub(crate) fn gemm_nn<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], out: &mut [F]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m x n] += a[m x k] * b[n x k]^T`
pub(crate) fn gemm_nt<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k x n] += a[m x k]^T * b[m x n]`
pub(crate) fn gemm_tn<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], out: &mut [F]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn matrix_dims<F: Real>(t: &Tensor<F>, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Dimension(format!(
            "{what} must be a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = matrix_dims(a, "lhs")?;
    let (k2, n) = matrix_dims(b, "rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents {k} and {k2} differ"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nn(m, k, n, a.data(), b.data(), out.data_mut());
    Ok(out)
}

/// Returns `(dL/da, dL/db)` for `c = a * b`.
pub fn matmul_backward<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (m, k) = matrix_dims(a, "lhs")?;
    let (_, n) = matrix_dims(b, "rhs")?;
    if grad_out.shape() != [m, n] {
        return Err(Error::Dimension(format!(
            "upstream gradient {:?} does not match output [{m}, {n}]",
            grad_out.shape()
        )));
    }
    let mut ga = Tensor::zeros(&[m, k]);
    gemm_nt(m, n, k, grad_out.data(), b.data(), ga.data_mut());
    let mut gb = Tensor::zeros(&[k, n]);
    gemm_tn(m, k, n, a.data(), grad_out.data(), gb.data_mut());
    Ok((ga, gb))
}

pub fn l2_normalize<F: Real>(v: &Tensor<F>) -> Result<Tensor<F>> {
    let n = v.norm();
    if !(n > F::zero()) || !n.is_finite() {
        return Err(Error::DegenerateInput(format!(
            "cannot normalize a vector with norm {n}"
        )));
    }
    Ok(v.map(|x| x / n))
}

/// Backward of `y = v / ||v||`: `(g - y (y . g)) / ||v||`.
pub fn l2_normalize_backward<F: Real>(
    v: &Tensor<F>,
    y: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> Tensor<F> {
    let n = v.norm();
    let yg = dot(y.data(), grad_out.data());
    let data = grad_out
        .data()
        .iter()
        .zip(y.data())
        .map(|(&g, &yy)| (g - yy * yg) / n)
        .collect();
    Tensor::new(v.shape().to_vec(), data).expect("same shape as input")
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<F> {
    xhat: Tensor<F>,
    inv_std: Vec<F>,
}

pub fn layer_norm<F: Real>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: F,
) -> Result<(Tensor<F>, LayerNormCache<F>)> {
    let (rows, d) = matrix_dims(x, "layer_norm input")?;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Dimension(format!(
            "layer_norm affine params must have length {d}"
        )));
    }
    if !(eps > F::zero()) {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let df = F::lit(d as f64);
    let mut xhat = Tensor::zeros(&[rows, d]);
    let mut out = Tensor::zeros(&[rows, d]);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
        let is = F::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for j in 0..d {
            xh[j] = (row[j] - mean) * is;
        }
        let o = out.row_mut(r);
        for j in 0..d {
            o[j] = xh[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<F: Real>(
    cache: &LayerNormCache<F>,
    gamma: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let rows = cache.xhat.rows();
    let d = cache.xhat.cols();
    let df = F::lit(d as f64);
    let mut gx = Tensor::zeros(&[rows, d]);
    let mut ggamma = Tensor::zeros(&[d]);
    let mut gbeta = Tensor::zeros(&[d]);
    let mut gxhat = vec![F::zero(); d];
    for r in 0..rows {
        let gy = grad_out.row(r);
        let xh = cache.xhat.row(r);
        let mut sum_g = F::zero();
        let mut sum_gx = F::zero();
        for j in 0..d {
            gxhat[j] = gy[j] * gamma.data()[j];
            sum_g += gxhat[j];
            sum_gx += gxhat[j] * xh[j];
            ggamma.data_mut()[j] += gy[j] * xh[j];
            gbeta.data_mut()[j] += gy[j];
        }
        let is = cache.inv_std[r];
        let out = gx.row_mut(r);
        for j in 0..d {
            out[j] = is / df * (df * gxhat[j] - sum_g - xh[j] * sum_gx);
        }
    }
    (gx, ggamma, gbeta)
}

pub fn softmax_rows<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (rows, _) = matrix_dims(x, "softmax input")?;
    let mut out = x.clone();
    for r in 0..rows {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Backward given the softmax output `y`: `y * (g - sum(g * y))` per row.
pub fn softmax_rows_backward<F: Real>(y: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let mut gx = Tensor::zeros_like(y);
    for r in 0..y.rows() {
        softmax_row_backward(y.row(r), grad_out.row(r), gx.row_mut(r));
    }
    gx
}

pub(crate) fn softmax_row_backward<F: Real>(y: &[F], g: &[F], out: &mut [F]) {
    let s = dot(y, g);
    for ((o, &yy), &gg) in out.iter_mut().zip(y).zip(g) {
        *o = yy * (gg - s);
    }
}

const GELU_C: f64 = 0.044_715;

/// Tanh-approximate GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let k = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = F::lit(0.5);
    half * x * (F::one() + (k * (x + F::lit(GELU_C) * x * x * x)).tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let k = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = F::lit(0.5);
    let u = k * (x + F::lit(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = k * (F::one() + F::lit(3.0 * GELU_C) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

/// Adds `bias` to every row of `x`.
pub fn add_row_bias<F: Real>(x: &mut Tensor<F>, bias: &Tensor<F>) -> Result<()> {
    if x.cols() != bias.len() {
        return Err(Error::Dimension(format!(
            "bias of length {} for rows of width {}",
            bias.len(),
            x.cols()
        )));
    }
    for r in 0..x.rows() {
        for (v, &b) in x.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(())
}

/// Column sums, the backward of [`add_row_bias`] with respect to the bias.
pub fn sum_rows<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let mut out = Tensor::zeros(&[x.cols()]);
    for r in 0..x.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    // Fixed random weights turn a tensor-valued op into a scalar objective.
    fn weights(shape: &[usize], seed: u64) -> Tensor<f64> {
        random(shape, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef))
    }

    #[test]
    fn matmul_identity_and_zero() {
        let i = Tensor::<f32>::identity(2);
        let m = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(matmul(&i, &m).unwrap(), m);
        let a = Tensor::<f32>::matrix(1, 2, vec![1., 0.]).unwrap();
        let b = Tensor::<f32>::matrix(2, 1, vec![0., 5.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let w = weights(&[3, 2], 1);
        let err_a = finite_difference_check(
            |x: &Tensor<f64>| {
                let c = matmul(x, &b).unwrap();
                let (ga, _) = matmul_backward(x, &b, &w).unwrap();
                (c.dot(&w).unwrap(), ga)
            },
            &a,
            1e-5,
        );
        let err_b = finite_difference_check(
            |x: &Tensor<f64>| {
                let c = matmul(&a, x).unwrap();
                let (_, gb) = matmul_backward(&a, x, &w).unwrap();
                (c.dot(&w).unwrap(), gb)
            },
            &b,
            1e-5,
        );
        assert!(err_a < 1e-4 && err_b < 1e-4, "{err_a} {err_b}");
    }

    #[test]
    fn normalize_examples() {
        let v = Tensor::<f64>::vector(vec![3.0, 4.0]);
        assert_eq!(l2_normalize(&v).unwrap().data(), &[0.6, 0.8]);
        let u = Tensor::<f64>::vector(vec![0.6, 0.8]);
        let uu = l2_normalize(&u).unwrap();
        assert!((uu.data()[0] - 0.6).abs() < 1e-15);
        assert!(matches!(
            l2_normalize(&Tensor::<f64>::zeros(&[3])),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn normalize_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random(&[8], &mut rng);
        let w = weights(&[8], 2);
        let err = finite_difference_check(
            |x: &Tensor<f64>| {
                let y = l2_normalize(x).unwrap();
                (y.dot(&w).unwrap(), l2_normalize_backward(x, &y, &w))
            },
            &v,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::<f64>::matrix(1, 3, vec![2.0, 2.0, 2.0]).unwrap();
        let g = Tensor::vector(vec![1.0; 3]);
        let b = Tensor::zeros(&[3]);
        let (y, _) = layer_norm(&x, &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::<f64>::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        let g = Tensor::vector(vec![1.0; 2]);
        let b = Tensor::zeros(&[2]);
        let (y, _) = layer_norm(&x, &g, &b, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);

        assert!(layer_norm(&x, &g, &b, 0.0).is_err());
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[4, 6], &mut rng);
        let gamma = random(&[6], &mut rng);
        let beta = random(&[6], &mut rng);
        let w = weights(&[4, 6], 3);
        let err = finite_difference_check(
            |x: &Tensor<f64>| {
                let (y, cache) = layer_norm(x, &gamma, &beta, 1e-5).unwrap();
                let (gx, _, _) = layer_norm_backward(&cache, &gamma, &w);
                (y.dot(&w).unwrap(), gx)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-4, "x: {err}");
        let err = finite_difference_check(
            |g: &Tensor<f64>| {
                let (y, cache) = layer_norm(&x, g, &beta, 1e-5).unwrap();
                let (_, gg, _) = layer_norm_backward(&cache, g, &w);
                (y.dot(&w).unwrap(), gg)
            },
            &gamma,
            1e-5,
        );
        assert!(err < 1e-4, "gamma: {err}");
        let err = finite_difference_check(
            |b: &Tensor<f64>| {
                let (y, cache) = layer_norm(&x, &gamma, b, 1e-5).unwrap();
                let (_, _, gb) = layer_norm_backward(&cache, &gamma, &w);
                (y.dot(&w).unwrap(), gb)
            },
            &beta,
            1e-5,
        );
        assert!(err < 1e-4, "beta: {err}");
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::<f64>::matrix(1, 4, vec![0.3; 4]).unwrap();
        let y = softmax_rows(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let x = Tensor::<f32>::matrix(1, 2, vec![0.0, 1000.0]).unwrap();
        let y = softmax_rows(&x).unwrap();
        assert!(y.is_finite());
        assert!(y.data()[0] < 1e-30 && (y.data()[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn softmax_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 5], &mut rng);
        let w = weights(&[3, 5], 4);
        let err = finite_difference_check(
            |x: &Tensor<f64>| {
                let y = softmax_rows(x).unwrap();
                (y.dot(&w).unwrap(), softmax_rows_backward(&y, &w))
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.2, 1.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
