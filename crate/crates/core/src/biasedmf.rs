//! Biased matrix factorization: the static-preference baseline and the
//! pretraining source for the sequence model's static embeddings.

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::kernel::{glorot_uniform, ParamSlot};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{dot, Tensor};

/// Global bias, per-user and per-item biases, and the factor matrices.
#[derive(Debug, Clone)]
pub struct MfParams<T> {
    pub user_factors: ParamSlot<T>, // [m x d_user]
    pub item_factors: ParamSlot<T>, // [n x d_user]
    pub user_bias: ParamSlot<T>,    // [m]
    pub item_bias: ParamSlot<T>,    // [n]
    pub global_bias: ParamSlot<T>,  // [1]
}

impl<T: Scalar> MfParams<T> {
    pub fn init(m: usize, n: usize, d_user: usize, global_mean: f64, rng: &Rng) -> MfParams<T> {
        let init = rng.stream("mf_init");
        // Small uniform factors; Glorot's fan-based bound keeps early
        // predictions near the global mean.
        let user_factors = glorot_uniform(m, d_user, &mut init.stream("user_factors"));
        let item_factors = glorot_uniform(n, d_user, &mut init.stream("item_factors"));
        MfParams {
            user_factors: ParamSlot::new("mf.user_factors", user_factors),
            item_factors: ParamSlot::new("mf.item_factors", item_factors),
            user_bias: ParamSlot::new("mf.user_bias", Tensor::zeros(&[m])),
            item_bias: ParamSlot::new("mf.item_bias", Tensor::zeros(&[n])),
            global_bias: ParamSlot::new("mf.global_bias", Tensor::scalar(T::from_f64(global_mean))),
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_factors.value.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_factors.value.rows()
    }

    pub fn d_user(&self) -> usize {
        self.user_factors.value.cols()
    }

    pub fn slots(&self) -> Vec<&ParamSlot<T>> {
        vec![
            &self.user_factors,
            &self.item_factors,
            &self.user_bias,
            &self.item_bias,
            &self.global_bias,
        ]
    }

    pub fn slots_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        vec![
            &mut self.user_factors,
            &mut self.item_factors,
            &mut self.user_bias,
            &mut self.item_bias,
            &mut self.global_bias,
        ]
    }

    /// b_g + b_i + b_j + u_i* . v_j
    pub fn predict_static(&self, user: usize, item: usize) -> T {
        self.global_bias.value.as_slice()[0]
            + self.user_bias.value.as_slice()[user]
            + self.item_bias.value.as_slice()[item]
            + dot(
                self.user_factors.value.row(user),
                self.item_factors.value.row(item),
            )
    }
}

#[derive(Debug, Clone)]
pub struct MfConfig {
    pub d_user: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every_epochs: usize,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        MfConfig {
            d_user: 50,
            lr: 0.002,
            lr_decay: 0.9,
            decay_every_epochs: 5,
            l2: 0.01,
            epochs: 30,
            batch_size: 256,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            seed: 42,
        }
    }
}

#[derive(Debug)]
pub struct MfOutcome<T> {
    pub params: MfParams<T>,
    /// Mean squared-error train loss per epoch (regularizer excluded so the
    /// value is comparable across l2 settings).
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch Adam on sum((r - r_hat)^2) + l2 (||U||^2 + ||V||^2). Biases are
/// unregularized; the global bias starts at the train-set mean rating.
pub fn train_mf<T: Scalar>(train: &Corpus, cfg: &MfConfig) -> Result<MfOutcome<T>> {
    if train.is_empty() {
        return Err(Error::Data("empty train split".into()));
    }
    let mean = train.interactions.iter().map(|it| it.rating).sum::<f64>() / train.len() as f64;
    let root = Rng::from_seed(cfg.seed);
    let mut params: MfParams<T> = MfParams::init(
        train.num_users(),
        train.num_items(),
        cfg.d_user,
        mean,
        &root,
    );
    let shuffle_root = root.stream("mf_shuffle");
    let l2 = T::from_f64(cfg.l2);
    let two = T::from_f64(2.0);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * cfg.lr_decay.powi((epoch / cfg.decay_every_epochs) as i32);
        shuffle_root.substream(epoch as u64).shuffle(&mut order);
        let mut epoch_sse = 0.0f64;
        for (batch_id, chunk) in order.chunks(cfg.batch_size).enumerate() {
            for slot in params.slots_mut() {
                slot.zero_grad();
            }
            let mut batch_sse = T::ZERO;
            for &idx in chunk {
                let it = &train.interactions[idx];
                let pred = params.predict_static(it.user, it.item);
                let residual = pred - T::from_f64(it.rating);
                batch_sse += residual * residual;
                let d = two * residual;
                params.global_bias.grad.as_mut_slice()[0] += d;
                params.user_bias.grad.as_mut_slice()[it.user] += d;
                params.item_bias.grad.as_mut_slice()[it.item] += d;
                let u = params.user_factors.value.row(it.user).to_vec();
                let v = params.item_factors.value.row(it.item).to_vec();
                let gu = params.user_factors.grad.row_mut(it.user);
                for k in 0..cfg.d_user {
                    gu[k] += d * v[k];
                }
                let gv = params.item_factors.grad.row_mut(it.item);
                for k in 0..cfg.d_user {
                    gv[k] += d * u[k];
                }
            }
            if !batch_sse.is_finite() {
                return Err(Error::Diverged { batch: batch_id });
            }
            epoch_sse += batch_sse.to_f64();
            // l2 penalty on the factor matrices only.
            for slot in [&mut params.user_factors, &mut params.item_factors] {
                let values = slot.value.as_slice().to_vec();
                for (g, v) in slot.grad.as_mut_slice().iter_mut().zip(values) {
                    *g += two * l2 * v;
                }
            }
            for slot in params.slots_mut() {
                slot.adam_step(lr, cfg.beta1, cfg.beta2, cfg.epsilon);
                slot.zero_grad();
            }
        }
        epoch_losses.push(epoch_sse / train.len() as f64);
        let _ = epoch;
    }
    Ok(MfOutcome {
        params,
        epoch_losses,
    })
}
