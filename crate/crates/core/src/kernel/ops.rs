//! Dense kernels: matrix product, softmax, activations, dropout, and the
//! linear-layer forward/backward pair the sequence model is assembled from.
//!
//! Weight convention: a linear map from `d_in` to `d_out` is stored as
//! `Tensor[d_in x d_out]`, applied as `out[o] = sum_i in[i] * w[i,o] + b[o]`.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;

/// Standard matrix product of `a[m x k]` and `b[k x n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::Shape("matmul wants rank-2 tensors".into()));
    }
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {}x{} * {}x{}",
            m, k, k2, n
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (l, &alk) in arow.iter().enumerate() {
            let brow = b.row(l);
            for j in 0..n {
                orow[j] += alk * brow[j];
            }
        }
    }
    Ok(out)
}

/// In-place softmax with max-subtraction for stability. Output entries are
/// positive and sum to 1.
pub fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    if xs.is_empty() {
        return;
    }
    let mut max = xs[0];
    for &x in xs.iter() {
        max = max.maximum(x);
    }
    let mut sum = T::ZERO;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x = *x / sum;
    }
}

pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    softmax_in_place(out.as_mut_slice());
    out
}

/// Backward of `p = softmax(e)` given `dp`: `de_j = p_j * (dp_j - sum_k dp_k p_k)`.
pub fn softmax_backward<T: Scalar>(p: &[T], dp: &[T], de: &mut [T]) {
    let mut inner = T::ZERO;
    for i in 0..p.len() {
        inner += dp[i] * p[i];
    }
    for i in 0..p.len() {
        de[i] = p[i] * (dp[i] - inner);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.maximum(T::ZERO),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    pub fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::ZERO {
                    T::ONE
                } else {
                    T::ZERO
                }
            }
            Activation::Sigmoid => y * (T::ONE - y),
            Activation::Tanh => T::ONE - y * y,
        }
    }

    pub fn parse(s: &str) -> Option<Activation> {
        match s {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }
}

pub fn tanh_t<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

pub fn sigmoid_t<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid)
}

pub fn relu_t<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.maximum(T::ZERO))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout. In train mode each entry is zeroed with probability
/// `p_drop` and survivors are scaled by `1/(1-p_drop)`, so eval mode is the
/// identity. Returns the output together with the per-entry multiplier mask
/// needed by the backward pass.
pub fn dropout<T: Scalar>(
    x: &[T],
    p_drop: f64,
    mode: Mode,
    rng: &mut Rng,
) -> (Vec<T>, Option<Vec<T>>) {
    debug_assert!((0.0..1.0).contains(&p_drop));
    if mode == Mode::Eval || p_drop == 0.0 {
        return (x.to_vec(), None);
    }
    let keep_scale = T::from_f64(1.0 / (1.0 - p_drop));
    let mut out = Vec::with_capacity(x.len());
    let mut mask = Vec::with_capacity(x.len());
    for &v in x {
        if rng.next_f64() < p_drop {
            out.push(T::ZERO);
            mask.push(T::ZERO);
        } else {
            out.push(v * keep_scale);
            mask.push(keep_scale);
        }
    }
    (out, Some(mask))
}

/// `out[o] += sum_i in[i] * w[i,o]` for `w: [d_in x d_out]`.
#[inline]
pub fn affine_forward<T: Scalar>(input: &[T], w: &Tensor<T>, bias: Option<&[T]>, out: &mut [T]) {
    debug_assert_eq!(w.rows(), input.len());
    debug_assert_eq!(w.cols(), out.len());
    if let Some(b) = bias {
        out.copy_from_slice(b);
    } else {
        out.fill(T::ZERO);
    }
    for (i, &xi) in input.iter().enumerate() {
        if xi == T::ZERO {
            continue;
        }
        let wrow = w.row(i);
        for o in 0..out.len() {
            out[o] += xi * wrow[o];
        }
    }
}

/// Accumulates `dw[i,o] += in[i] * dout[o]`, `db[o] += dout[o]`, and
/// `din[i] += sum_o w[i,o] * dout[o]`.
#[inline]
pub fn affine_backward<T: Scalar>(
    input: &[T],
    w: &Tensor<T>,
    dout: &[T],
    dw: &mut Tensor<T>,
    db: Option<&mut [T]>,
    din: Option<&mut [T]>,
) {
    debug_assert_eq!(w.rows(), input.len());
    debug_assert_eq!(w.cols(), dout.len());
    for (i, &xi) in input.iter().enumerate() {
        let dwrow = dw.row_mut(i);
        for (o, &d) in dout.iter().enumerate() {
            dwrow[o] += xi * d;
        }
    }
    if let Some(db) = db {
        for (o, &d) in dout.iter().enumerate() {
            db[o] += d;
        }
    }
    if let Some(din) = din {
        for (i, slot) in din.iter_mut().enumerate() {
            let wrow = w.row(i);
            let mut acc = T::ZERO;
            for (o, &d) in dout.iter().enumerate() {
                acc += wrow[o] * d;
            }
            *slot += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a = t2(2, 2, &[3.0, -1.0, 2.5, 7.0]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_example() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 1, &[1.0, 1.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 2, &[0.0; 4]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_transpose_property() {
        // (AB)^T == B^T A^T within 1e-12 on random matrices.
        let mut rng = Rng::from_seed(13);
        for _ in 0..20 {
            let (m, k, n) = (3, 4, 2);
            let a = Tensor::from_vec(
                &[m, k],
                (0..m * k).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            )
            .unwrap();
            let b = Tensor::from_vec(
                &[k, n],
                (0..k * n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            )
            .unwrap();
            let ab = matmul(&a, &b).unwrap();
            let transpose = |t: &Tensor<f64>| {
                let mut out = Tensor::zeros(&[t.cols(), t.rows()]);
                for i in 0..t.rows() {
                    for j in 0..t.cols() {
                        *out.at_mut(j, i) = t.at(i, j);
                    }
                }
                out
            };
            let lhs = transpose(&ab);
            let rhs = matmul(&transpose(&b), &transpose(&a)).unwrap();
            for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let p = softmax(&Tensor::from_vec(&[2], vec![0.0f64, 0.0]).unwrap());
        assert_eq!(p.as_slice(), &[0.5, 0.5]);

        let q = softmax(&Tensor::from_vec(&[4], vec![7.5f64; 4]).unwrap());
        for &v in q.as_slice() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_large_magnitudes() {
        let p = softmax(&Tensor::from_vec(&[2], vec![1000.0f64, 1001.0]).unwrap());
        assert!(p.all_finite());
        assert!((p.as_slice()[0] - 0.2689414213699951).abs() < 1e-9);
        assert!((p.as_slice()[1] - 0.7310585786300049).abs() < 1e-9);
    }

    #[test]
    fn softmax_simplex_property() {
        let mut rng = Rng::from_seed(21);
        for _ in 0..200 {
            let n = 1 + rng.below(8);
            let x: Vec<f64> = (0..n).map(|_| rng.uniform(-50.0, 50.0)).collect();
            let p = softmax(&Tensor::from_vec(&[n], x).unwrap());
            let sum: f64 = p.as_slice().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(p.as_slice().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn activation_fixed_points() {
        assert_eq!(Activation::Tanh.apply(0.0f64), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
    }

    #[test]
    fn tanh_bounded() {
        let mut rng = Rng::from_seed(2);
        for _ in 0..1000 {
            let y: f64 = Activation::Tanh.apply(rng.uniform(-30.0, 30.0));
            assert!((-1.0..=1.0).contains(&y));
        }
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        let h = 1e-5;
        let mut rng = Rng::from_seed(77);
        for act in [Activation::Relu, Activation::Sigmoid, Activation::Tanh] {
            for _ in 0..200 {
                let x: f64 = rng.uniform(-3.0, 3.0);
                if act == Activation::Relu && x.abs() < 10.0 * h {
                    continue; // kink
                }
                let analytic = act.derivative_from_output(act.apply(x));
                let numeric = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!(
                    (analytic - numeric).abs() < 1e-6,
                    "{:?} at {x}: {analytic} vs {numeric}",
                    act
                );
            }
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let x = vec![1.0f64, -2.0, 3.0];
        let mut rng = Rng::from_seed(1);
        let (y, mask) = dropout(&x, 0.0, Mode::Train, &mut rng);
        assert_eq!(y, x);
        assert!(mask.is_none());
        let (y, mask) = dropout(&x, 0.9, Mode::Eval, &mut rng);
        assert_eq!(y, x);
        assert!(mask.is_none());
    }

    #[test]
    fn dropout_preserves_mean() {
        let x = vec![1.0f64; 1_000_000];
        let mut rng = Rng::from_seed(4);
        let (y, _) = dropout(&x, 0.5, Mode::Train, &mut rng);
        let mean: f64 = y.iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        // L = ||W x||^2 / 2 with dL/dW = (Wx) x^T checked against central
        // differences.
        let mut rng = Rng::from_seed(5);
        let (d_in, d_out) = (4, 3);
        let w = Tensor::from_vec(
            &[d_in, d_out],
            (0..d_in * d_out).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let x: Vec<f64> = (0..d_in).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let loss = |w: &Tensor<f64>| {
            let mut y = vec![0.0; d_out];
            affine_forward(&x, w, None, &mut y);
            0.5 * dot(&y, &y)
        };

        let mut y = vec![0.0; d_out];
        affine_forward(&x, &w, None, &mut y);
        let mut dw = Tensor::zeros(&[d_in, d_out]);
        let mut din = vec![0.0; d_in];
        affine_backward(&x, &w, &y, &mut dw, None, Some(&mut din));

        let h = 1e-5;
        let mut wp = w.clone();
        for i in 0..d_in * d_out {
            let orig = wp.as_slice()[i];
            wp.as_mut_slice()[i] = orig + h;
            let up = loss(&wp);
            wp.as_mut_slice()[i] = orig - h;
            let down = loss(&wp);
            wp.as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = dw.as_slice()[i];
            assert!(
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8) < 1e-6
            );
        }
        // dL/dx = W^T (Wx); hand-check this too.
        for i in 0..d_in {
            let mut acc = 0.0;
            for o in 0..d_out {
                acc += w.at(i, o) * y[o];
            }
            assert!((din[i] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_of_sum_is_ones() {
        // L = sum(x): dL/dx = 1 everywhere, via the affine helpers with a
        // fixed all-ones weight vector.
        let x = vec![0.3f64, -1.2, 2.0];
        let w = Tensor::from_vec(&[3, 1], vec![1.0; 3]).unwrap();
        let mut y = vec![0.0];
        affine_forward(&x, &w, None, &mut y);
        assert!((y[0] - (0.3 - 1.2 + 2.0)).abs() < 1e-12);
        let mut dw = Tensor::zeros(&[3, 1]);
        let mut dx = vec![0.0; 3];
        affine_backward(&x, &w, &[1.0], &mut dw, None, Some(&mut dx));
        assert_eq!(dx, vec![1.0, 1.0, 1.0]);
    }
}
