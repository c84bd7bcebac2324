//! Parameter initialization: Glorot uniform draws and orthogonalized
//! recurrent weights. Draws and the QR factorization run in f64 and are cast
//! to the target precision afterwards, so f32 and f64 runs start from the
//! same numbers.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Uniform draw in [-L, L] with L = sqrt(6 / (fan_in + fan_out)), shaped
/// `[fan_in x fan_out]`.
pub fn glorot_uniform<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<T> {
    assert!(fan_in >= 1 && fan_out >= 1);
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::from_f64(rng.uniform(-limit, limit)))
        .collect();
    Tensor::from_vec(&[fan_in, fan_out], data).expect("sized by construction")
}

/// Glorot bound for tests and documentation.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Orthogonalize a square matrix: Q from the Householder QR of `w`, with
/// column signs fixed so diag(R) > 0. Q satisfies QᵀQ = I to within 1e-6.
pub fn orthogonalize<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    if w.shape().len() != 2 || w.rows() != w.cols() {
        return Err(Error::Shape(format!(
            "orthogonalize wants a square matrix, got {:?}",
            w.shape()
        )));
    }
    let n = w.rows();
    // Work in f64 column-major for the factorization.
    let mut r: Vec<f64> = (0..n * n)
        .map(|idx| w.at(idx % n, idx / n).to_f64())
        .collect();
    let mut q: Vec<f64> = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0; // identity, column-major
    }
    for k in 0..n {
        // Householder vector for column k below the diagonal.
        let mut alpha = 0.0;
        for i in k..n {
            alpha += r[k * n + i] * r[k * n + i];
        }
        let alpha = alpha.sqrt();
        if alpha == 0.0 {
            continue;
        }
        let rkk = r[k * n + k];
        let alpha = if rkk > 0.0 { -alpha } else { alpha };
        let mut v = vec![0.0; n];
        for i in k..n {
            v[i] = r[k * n + i];
        }
        v[k] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // Apply H = I - 2 v vᵀ / (vᵀv) to R (from the left) and accumulate
        // into Q (as Q := Q H, so Q ends up holding the product of
        // reflections).
        for j in k..n {
            let mut proj = 0.0;
            for i in k..n {
                proj += v[i] * r[j * n + i];
            }
            let scale = 2.0 * proj / vnorm2;
            for i in k..n {
                r[j * n + i] -= scale * v[i];
            }
        }
        for j in 0..n {
            let mut proj = 0.0;
            for i in k..n {
                proj += v[i] * q[j * n + i];
            }
            let scale = 2.0 * proj / vnorm2;
            for i in k..n {
                q[j * n + i] -= scale * v[i];
            }
        }
    }
    // Q currently holds the transpose of the orthogonal factor accumulated
    // column-major; flip column signs where diag(R) < 0.
    let mut out = Tensor::<T>::zeros(&[n, n]);
    for j in 0..n {
        let sign = if r[j * n + j] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            *out.at_mut(i, j) = T::from_f64(sign * q[i * n + j]);
        }
    }
    Ok(out)
}

/// Glorot draw followed by orthogonalization, for recurrent weights.
pub fn orthogonal_init<T: Scalar>(n: usize, rng: &mut Rng) -> Tensor<T> {
    let base: Tensor<f64> = glorot_uniform(n, n, rng);
    let q = orthogonalize::<f64>(&base).expect("square by construction");
    q.map(|x| T::from_f64(x))
}
