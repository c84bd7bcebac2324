//! The composed model: static factorization parameters plus the Seq2Pref
//! network, with the joint forward/backward used for training and the
//! scoring interface used for evaluation.

use crate::biasedmf::MfParams;
use crate::corpus::Corpus;
use crate::error::Result;
use crate::estimator::{predict, TrainingExample, Variant};
use crate::kernel::ops::Mode;
use crate::kernel::ParamSlot;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::seq2pref::{FragmentForward, Seq2PrefParams, SeqDims};
use crate::tensor::axpy;

#[derive(Debug, Clone)]
pub struct S2pnmModel<T> {
    pub mf: MfParams<T>,
    pub net: Seq2PrefParams<T>,
    pub variant: Variant,
}

impl<T: Scalar> S2pnmModel<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        m: usize,
        n: usize,
        dims: SeqDims,
        activation: crate::kernel::Activation,
        p_drop: f64,
        variant: Variant,
        global_mean: f64,
        rng: &Rng,
    ) -> S2pnmModel<T> {
        S2pnmModel {
            mf: MfParams::init(m, n, dims.d_user, global_mean, rng),
            net: Seq2PrefParams::init(n, dims, activation, p_drop, rng),
            variant,
        }
    }

    pub fn slots(&self) -> Vec<&ParamSlot<T>> {
        let mut out = self.mf.slots();
        out.extend(self.net.slots());
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        let mut out: Vec<&mut ParamSlot<T>> = Vec::new();
        out.extend(self.mf.slots_mut());
        out.extend(self.net.slots_mut());
        out
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot<T>> {
        self.slots().into_iter().find(|s| s.name == name)
    }

    /// l2 penalty over the embedding tables that participate in the variant's
    /// score: user factors, item factors, and the input item embedding. GRU,
    /// attention, decoder, and dictionary weights are regularized only by
    /// dropout.
    pub fn regularization(&self, l2: f64) -> T {
        let l2 = T::from_f64(l2);
        let mut acc = T::ZERO;
        if self.variant != Variant::DynamicOnly {
            acc += self.mf.user_factors.value.squared_norm();
        }
        acc += self.mf.item_factors.value.squared_norm();
        if self.variant != Variant::StaticOnly {
            acc += self.net.item_embed.value.squared_norm();
        }
        l2 * acc
    }

    fn reg_gradients(&mut self, l2: f64) {
        let two_l2 = T::from_f64(2.0 * l2);
        if two_l2 == T::ZERO {
            return;
        }
        let apply = |slot: &mut ParamSlot<T>| {
            let g = slot.grad.as_mut_slice();
            let v = slot.value.as_slice();
            for i in 0..g.len() {
                g[i] += two_l2 * v[i];
            }
        };
        if self.variant != Variant::DynamicOnly {
            apply(&mut self.mf.user_factors);
        }
        apply(&mut self.mf.item_factors);
        if self.variant != Variant::StaticOnly {
            apply(&mut self.net.item_embed);
        }
    }
}

/// One slot's worth of work in a training step: a window of a user's
/// sequence, the optional carried GRU state, and the supervised examples
/// aligned to it.
#[derive(Debug, Clone)]
pub struct StepFragment<T> {
    pub user: usize,
    pub items: Vec<usize>,
    pub carry_state: Option<Vec<T>>,
    pub examples: Vec<TrainingExample>,
}

pub(crate) struct FragmentRun<T> {
    fwd: Option<FragmentForward<T>>,
    examples: Vec<TrainingExample>,
    predictions: Vec<T>,
}

pub(crate) struct StepForward<T> {
    runs: Vec<FragmentRun<T>>,
    /// Weighted sum of squared residuals, before regularization.
    pub data_loss: T,
    pub n_examples: usize,
    /// Final GRU state per fragment, for carrying into the next window.
    pub final_states: Vec<Vec<T>>,
}

impl<T: Scalar> StepForward<T> {
    /// Concatenated activation masks of every decode, in a fixed order, for
    /// the finite-difference kink filter.
    pub(crate) fn activation_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for run in &self.runs {
            let Some(fwd) = &run.fwd else { continue };
            for decode in fwd.decodes.iter().flatten() {
                sig.extend(decode.active_mask());
            }
        }
        sig
    }
}

impl<T: Scalar> S2pnmModel<T> {
    /// Forward over one step's fragments: run the network where the variant
    /// needs it, score every example, and report the weighted data loss.
    pub(crate) fn forward_step(
        &self,
        fragments: &[StepFragment<T>],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<StepForward<T>> {
        let mut runs = Vec::with_capacity(fragments.len());
        let mut data_loss = T::ZERO;
        let mut n_examples = 0usize;
        let mut final_states = Vec::with_capacity(fragments.len());
        for frag in fragments {
            let fwd = if self.variant == Variant::StaticOnly {
                None
            } else {
                Some(
                    self.net
                        .forward_fragment(&frag.items, frag.carry_state.clone(), mode, rng)?,
                )
            };
            let mut predictions = Vec::with_capacity(frag.examples.len());
            for ex in &frag.examples {
                let u_bar = fwd.as_ref().and_then(|f| {
                    f.decodes[ex.position - 1]
                        .as_ref()
                        .map(|d| d.u_bar.as_slice())
                });
                let pred = predict(&self.mf, ex.user, ex.item, u_bar, self.variant);
                let residual = pred - T::from_f64(ex.target);
                data_loss += T::from_f64(ex.weight) * residual * residual;
                predictions.push(pred);
            }
            n_examples += frag.examples.len();
            final_states.push(match &fwd {
                Some(f) => f.final_state().to_vec(),
                None => Vec::new(),
            });
            runs.push(FragmentRun {
                fwd,
                examples: frag.examples.clone(),
                predictions,
            });
        }
        Ok(StepForward {
            runs,
            data_loss,
            n_examples,
            final_states,
        })
    }

    /// Accumulate gradients for one forward step, including the l2 term.
    pub(crate) fn backward_step(&mut self, step: &StepForward<T>, l2: f64) {
        let two = T::from_f64(2.0);
        let d_user = self.mf.d_user();
        for run in &step.runs {
            let n_positions = run.fwd.as_ref().map(|f| f.len()).unwrap_or(0);
            let mut d_ubar: Vec<Option<Vec<T>>> = vec![None; n_positions];
            for (ex, &pred) in run.examples.iter().zip(&run.predictions) {
                let dpred = two * T::from_f64(ex.weight) * (pred - T::from_f64(ex.target));
                self.mf.global_bias.grad.as_mut_slice()[0] += dpred;
                self.mf.user_bias.grad.as_mut_slice()[ex.user] += dpred;
                self.mf.item_bias.grad.as_mut_slice()[ex.item] += dpred;

                let u_bar = run.fwd.as_ref().and_then(|f| {
                    f.decodes[ex.position - 1]
                        .as_ref()
                        .map(|d| d.u_bar.as_slice())
                });
                let u = self.mf.user_factors.value.row(ex.user).to_vec();
                let v = self.mf.item_factors.value.row(ex.item).to_vec();

                // d/dv of (pref . v) is the preference vector in play.
                let mut pref = vec![T::ZERO; d_user];
                if self.variant != Variant::DynamicOnly {
                    pref.copy_from_slice(&u);
                }
                if self.variant != Variant::StaticOnly {
                    if let Some(ub) = u_bar {
                        for (p, &b) in pref.iter_mut().zip(ub) {
                            *p += b;
                        }
                    }
                }
                axpy(dpred, &pref, self.mf.item_factors.grad.row_mut(ex.item));
                if self.variant != Variant::DynamicOnly {
                    axpy(dpred, &v, self.mf.user_factors.grad.row_mut(ex.user));
                }
                if self.variant != Variant::StaticOnly && u_bar.is_some() {
                    let slot = d_ubar[ex.position - 1].get_or_insert_with(|| vec![T::ZERO; d_user]);
                    axpy(dpred, &v, slot);
                }
            }
            if let Some(fwd) = &run.fwd {
                self.net.backward_fragment(fwd, &d_ubar);
            }
        }
        self.reg_gradients(l2);
    }
}

/// Which users and items appeared in the train split. Cold entities fall back
/// to the biases that are still known.
#[derive(Debug, Clone)]
pub struct SeenSets {
    pub users: Vec<bool>,
    pub items: Vec<bool>,
}

impl SeenSets {
    pub fn from_corpus(train: &Corpus) -> SeenSets {
        let mut users = vec![false; train.num_users()];
        let mut items = vec![false; train.num_items()];
        for it in &train.interactions {
            users[it.user] = true;
            items[it.item] = true;
        }
        SeenSets { users, items }
    }

    pub fn all(m: usize, n: usize) -> SeenSets {
        SeenSets {
            users: vec![true; m],
            items: vec![true; n],
        }
    }
}

fn cold_aware<T: Scalar>(
    mf: &MfParams<T>,
    user: usize,
    item: usize,
    u_bar: Option<&[T]>,
    variant: Variant,
    seen: &SeenSets,
) -> f64 {
    let user_known = seen.users[user];
    let item_known = seen.items[item];
    if user_known && item_known {
        return predict(mf, user, item, u_bar, variant).to_f64();
    }
    // Unseen side contributes neither bias nor factors.
    let mut score = mf.global_bias.value.as_slice()[0].to_f64();
    if user_known {
        score += mf.user_bias.value.as_slice()[user].to_f64();
    }
    if item_known {
        score += mf.item_bias.value.as_slice()[item].to_f64();
        let v = mf.item_factors.value.row(item);
        let mut acc = T::ZERO;
        if user_known && variant != Variant::DynamicOnly {
            let u = mf.user_factors.value.row(user);
            for i in 0..v.len() {
                acc += u[i] * v[i];
            }
        }
        if variant != Variant::StaticOnly {
            if let Some(ub) = u_bar {
                for i in 0..v.len() {
                    acc += ub[i] * v[i];
                }
            }
        }
        score += acc.to_f64();
    }
    score
}

/// Scoring surface shared by the baseline and the sequence model.
pub trait Recommender {
    /// Prediction for every event of a chronological item sequence, each
    /// conditioned on the events strictly before it.
    fn teacher_forced(&self, user: usize, items: &[usize], seen: &SeenSets) -> Vec<f64>;

    /// Scores for candidate items given the user's history prefix.
    fn rank_scores(
        &self,
        user: usize,
        prefix: &[usize],
        candidates: &[usize],
        seen: &SeenSets,
    ) -> Vec<f64>;
}

impl<T: Scalar> Recommender for MfParams<T> {
    fn teacher_forced(&self, user: usize, items: &[usize], seen: &SeenSets) -> Vec<f64> {
        items
            .iter()
            .map(|&item| cold_aware(self, user, item, None, Variant::StaticOnly, seen))
            .collect()
    }

    fn rank_scores(
        &self,
        user: usize,
        _prefix: &[usize],
        candidates: &[usize],
        seen: &SeenSets,
    ) -> Vec<f64> {
        candidates
            .iter()
            .map(|&item| cold_aware(self, user, item, None, Variant::StaticOnly, seen))
            .collect()
    }
}

impl<T: Scalar> Recommender for S2pnmModel<T> {
    fn teacher_forced(&self, user: usize, items: &[usize], seen: &SeenSets) -> Vec<f64> {
        if self.variant == Variant::StaticOnly {
            return self.mf.teacher_forced(user, items, seen);
        }
        let mut rng = Rng::from_seed(0); // eval mode draws nothing
        let state = self
            .net
            .forward_sequence(items, Mode::Eval, &mut rng)
            .expect("non-empty sequence");
        items
            .iter()
            .enumerate()
            .map(|(k, &item)| {
                let u_bar = if k == 0 {
                    None
                } else {
                    Some(state.u_bar[k - 1].as_slice())
                };
                cold_aware(&self.mf, user, item, u_bar, self.variant, seen)
            })
            .collect()
    }

    fn rank_scores(
        &self,
        user: usize,
        prefix: &[usize],
        candidates: &[usize],
        seen: &SeenSets,
    ) -> Vec<f64> {
        let u_bar = if self.variant == Variant::StaticOnly || prefix.is_empty() {
            None
        } else {
            let mut rng = Rng::from_seed(0);
            let state = self
                .net
                .forward_sequence(prefix, Mode::Eval, &mut rng)
                .expect("non-empty prefix");
            state.u_bar.last().cloned()
        };
        candidates
            .iter()
            .map(|&item| cold_aware(&self.mf, user, item, u_bar.as_deref(), self.variant, seen))
            .collect()
    }
}
