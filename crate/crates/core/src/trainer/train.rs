//! Joint training of the full model with session-parallel mini-batches,
//! learning-rate decay, validation-based model selection, and divergence
//! detection.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use crate::biasedmf::MfParams;
use crate::checkpoint::expect_shape;
use crate::corpus::{sequences, Corpus, SplitResult, UserSequence};
use crate::error::{Error, Result};
use crate::estimator::{sample_negatives, TrainingExample};
use crate::evaluator;
use crate::kernel::ops::Mode;
use crate::kernel::ParamSlot;
use crate::model::{S2pnmModel, StepFragment};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::seq2pref::SeqDims;
use crate::trainer::batch::make_batches;
use crate::trainer::config::{Task, TrainConfig};

#[derive(Debug, Clone)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean per-example training loss (weighted residuals plus regularizer).
    pub train_loss: f64,
    /// Validation RMSE (rating) or HR@5 (ranking); NaN when no validation
    /// slice exists.
    pub val_metric: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

/// Render the per-epoch log as tab-separated lines.
pub fn format_log(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch\ttrain_loss\tval_metric\tlr\twall_seconds\n");
    for e in log {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.3}",
            e.epoch, e.train_loss, e.val_metric, e.lr, e.wall_seconds
        );
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome<T> {
    /// The validation-selected model (or the final state when no validation
    /// slice exists, or the initialization when epochs = 0).
    pub model: S2pnmModel<T>,
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose checkpoint was selected.
    pub best_epoch: Option<usize>,
    /// Batch accounting from the last epoch: supervised positives (every
    /// train event once) and sampled negatives.
    pub positives_per_epoch: usize,
    pub negatives_per_epoch: usize,
}

/// Learning rate in effect during 1-based epoch `epoch`:
/// lr0 * decay^floor((epoch - 1) / every).
pub fn lr_at_epoch(lr0: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    lr0 * decay.powi(((epoch - 1) / every) as i32)
}

/// Split the train side into a training portion and a chronologically-last
/// validation slice (10%, at least one event when the data allows it).
fn validation_slice(train: &Corpus) -> (Corpus, Corpus) {
    let mut sorted = train.interactions.clone();
    sorted.sort_by_key(|it| (it.timestamp, it.row));
    let n = sorted.len();
    let n_val = if n >= 2 { (n / 10).max(1) } else { 0 };
    let cut = n - n_val;
    let sub = Corpus {
        index: Arc::clone(&train.index),
        interactions: sorted[..cut].to_vec(),
    };
    let val = Corpus {
        index: Arc::clone(&train.index),
        interactions: sorted[cut..].to_vec(),
    };
    (sub, val)
}

fn global_mean(corpus: &Corpus, task: Task) -> f64 {
    match task {
        Task::Rating => {
            corpus.interactions.iter().map(|it| it.rating).sum::<f64>() / corpus.len().max(1) as f64
        }
        // Implicit positives all carry target 1.
        Task::Ranking => 1.0,
    }
}

fn target_of(task: Task, rating: f64) -> f64 {
    match task {
        Task::Rating => rating,
        Task::Ranking => 1.0,
    }
}

/// Validation metric for epoch selection: lower-is-better RMSE for rating,
/// higher-is-better HR@5 for ranking.
fn validation_metric<T: Scalar>(
    model: &S2pnmModel<T>,
    sub: &Corpus,
    val: &Corpus,
    cfg: &TrainConfig,
) -> f64 {
    if val.is_empty() {
        return f64::NAN;
    }
    let pseudo = SplitResult {
        train: sub.clone(),
        test: val.clone(),
        protocol: crate::corpus::Protocol::SplitByTime,
        empty_test_users: 0,
    };
    let result = match cfg.task {
        Task::Rating => evaluator::evaluate_rating(model, &pseudo, cfg.clip_predictions, &[])
            .map(|r| r.rmse.unwrap_or(f64::NAN)),
        Task::Ranking => evaluator::evaluate_ranking(model, &pseudo, &[5], &[])
            .map(|r| r.metric("hr@5").unwrap_or(f64::NAN)),
    };
    result.unwrap_or(f64::NAN)
}

fn better(task: Task, candidate: f64, incumbent: f64) -> bool {
    if incumbent.is_nan() {
        return !candidate.is_nan();
    }
    match task {
        Task::Rating => candidate < incumbent,
        Task::Ranking => candidate > incumbent,
    }
}

/// Train the model on the split's train side. Static embeddings start from
/// `pretrained` when given (all parameters are still fine-tuned jointly);
/// the checkpoint reported is the best epoch on the validation slice.
pub fn train<T: Scalar>(
    split: &SplitResult,
    cfg: &TrainConfig,
    pretrained: Option<&MfParams<T>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let m = split.train.num_users();
    let n = split.train.num_items();
    let (sub, val) = validation_slice(&split.train);
    if sub.is_empty() {
        return Err(Error::Data("train split too small to slice".into()));
    }

    let dims = SeqDims {
        d_embed: cfg.d_embed,
        d_gru: cfg.d_gru,
        d_dict: cfg.d_dict,
        d_user: cfg.d_user,
    };
    let root = Rng::from_seed(cfg.seed);
    let mut model: S2pnmModel<T> = S2pnmModel::init(
        m,
        n,
        dims,
        cfg.activation,
        cfg.p_drop,
        cfg.variant,
        global_mean(&sub, cfg.task),
        &root,
    );
    if let Some(mf) = pretrained {
        expect_shape(
            "mf.user_factors",
            mf.user_factors.value.shape(),
            &[m, cfg.d_user],
        )?;
        expect_shape(
            "mf.item_factors",
            mf.item_factors.value.shape(),
            &[n, cfg.d_user],
        )?;
        // Fresh optimizer state on pretrained values.
        model.mf = MfParams {
            user_factors: ParamSlot::new("mf.user_factors", mf.user_factors.value.clone()),
            item_factors: ParamSlot::new("mf.item_factors", mf.item_factors.value.clone()),
            user_bias: ParamSlot::new("mf.user_bias", mf.user_bias.value.clone()),
            item_bias: ParamSlot::new("mf.item_bias", mf.item_bias.value.clone()),
            global_bias: ParamSlot::new("mf.global_bias", mf.global_bias.value.clone()),
        };
    }

    let seqs: Vec<UserSequence> = sequences(&sub);
    let shuffle_root = root.stream("shuffle");
    let dropout_root = root.stream("dropout");
    let negatives_root = root.stream("negatives");

    let mut log: Vec<EpochLog> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, S2pnmModel<T>)> = None;
    let positives_per_epoch: usize = seqs.iter().map(|s| s.events.len()).sum();
    let mut negatives_per_epoch = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = lr_at_epoch(cfg.lr, cfg.lr_decay, cfg.decay_every_epochs, epoch);
        let schedule = make_batches(
            &seqs,
            cfg.batch_size,
            cfg.window,
            shuffle_root.substream(epoch as u64).next_u64(),
        );
        let mut dropout_rng = dropout_root.substream(epoch as u64);
        let mut neg_rng = negatives_root.substream(epoch as u64);

        let mut carry: Vec<Option<Vec<T>>> = vec![None; cfg.batch_size];
        let mut epoch_loss = 0.0f64;
        let mut epoch_examples = 0usize;

        for (step_idx, step) in schedule.steps.iter().enumerate() {
            let mut fragments: Vec<StepFragment<T>> = Vec::with_capacity(step.fragments.len());
            for plan in &step.fragments {
                let seq = &seqs[plan.seq];
                let items: Vec<usize> = seq.events[plan.start..plan.start + plan.len]
                    .iter()
                    .map(|e| e.item)
                    .collect();
                let mut examples = Vec::with_capacity(plan.len);
                let mut prefix: HashSet<usize> = if cfg.task == Task::Ranking {
                    seq.events[..plan.start].iter().map(|e| e.item).collect()
                } else {
                    HashSet::new()
                };
                for (k, event) in seq.events[plan.start..plan.start + plan.len]
                    .iter()
                    .enumerate()
                {
                    examples.push(TrainingExample {
                        user: seq.user,
                        item: event.item,
                        target: target_of(cfg.task, event.rating),
                        weight: if cfg.task == Task::Ranking {
                            cfg.w_pos
                        } else {
                            1.0
                        },
                        position: k + 1,
                    });
                    if cfg.task == Task::Ranking {
                        for neg in sample_negatives(&prefix, cfg.n_neg, n, &mut neg_rng) {
                            examples.push(TrainingExample {
                                user: seq.user,
                                item: neg,
                                target: 0.0,
                                weight: cfg.w_neg,
                                position: k + 1,
                            });
                        }
                        prefix.insert(event.item);
                    }
                }
                let carry_state = if plan.fresh {
                    None
                } else {
                    carry[plan.slot].clone()
                };
                fragments.push(StepFragment {
                    user: seq.user,
                    items,
                    carry_state,
                    examples,
                });
            }

            let fwd = model.forward_step(&fragments, Mode::Train, &mut dropout_rng)?;
            if !fwd.data_loss.is_finite() {
                return Err(Error::Diverged { batch: step_idx });
            }
            let reg = model.regularization(cfg.l2);
            epoch_loss += (fwd.data_loss + reg).to_f64();
            epoch_examples += fwd.n_examples;

            // Carry final states into the next window of the same sequence.
            for (plan, state) in step.fragments.iter().zip(&fwd.final_states) {
                carry[plan.slot] = if state.is_empty() {
                    None
                } else {
                    Some(state.clone())
                };
            }

            model.backward_step(&fwd, cfg.l2);
            for slot in model.slots_mut() {
                slot.adam_step(lr, cfg.beta1, cfg.beta2, cfg.epsilon);
                slot.zero_grad();
            }
        }

        negatives_per_epoch = epoch_examples.saturating_sub(positives_per_epoch);
        let val_metric = validation_metric(&model, &sub, &val, cfg);
        let improved = match &best {
            None => !val_metric.is_nan(),
            Some((_, incumbent, _)) => better(cfg.task, val_metric, *incumbent),
        };
        if improved {
            best = Some((epoch, val_metric, model.clone()));
        }
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss / epoch_examples.max(1) as f64,
            val_metric,
            lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }

    let (best_epoch, model) = match best {
        Some((epoch, _, snapshot)) => (Some(epoch), snapshot),
        None => (None, model),
    };
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        positives_per_epoch: if cfg.epochs > 0 {
            positives_per_epoch
        } else {
            0
        },
        negatives_per_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::split_per_user_prefix;
    use crate::synthetic::{gen_drift, DriftSpec};

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            d_user: 4,
            d_gru: 6,
            d_dict: 8,
            d_embed: 6,
            lr: 0.01,
            epochs: 3,
            batch_size: 4,
            window: 16,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn toy_split() -> SplitResult {
        let drift = gen_drift(&DriftSpec {
            m: 12,
            n: 10,
            d: 3,
            regimes_per_user: 2,
            events_per_user: 12,
            noise_std: 0.1,
            seed: 3,
        });
        split_per_user_prefix(&drift.corpus, 0.7).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let split = toy_split();
        let cfg = TrainConfig {
            epochs: 0,
            ..toy_cfg()
        };
        let out = train::<f64>(&split, &cfg, None).unwrap();
        assert!(out.log.is_empty());
        assert!(out.best_epoch.is_none());

        // Identical to a fresh init under the same seed.
        let (sub, _) = validation_slice(&split.train);
        let fresh: S2pnmModel<f64> = S2pnmModel::init(
            split.train.num_users(),
            split.train.num_items(),
            SeqDims {
                d_embed: cfg.d_embed,
                d_gru: cfg.d_gru,
                d_dict: cfg.d_dict,
                d_user: cfg.d_user,
            },
            cfg.activation,
            cfg.p_drop,
            cfg.variant,
            global_mean(&sub, cfg.task),
            &Rng::from_seed(cfg.seed),
        );
        for (a, b) in out.model.slots().iter().zip(fresh.slots().iter()) {
            assert_eq!(a.value.as_slice(), b.value.as_slice(), "slot {}", a.name);
        }
    }

    #[test]
    fn lr_schedule_matches_decay_rule() {
        assert_eq!(lr_at_epoch(0.1, 0.9, 5, 1), 0.1);
        assert_eq!(lr_at_epoch(0.1, 0.9, 5, 5), 0.1);
        assert!((lr_at_epoch(0.1, 0.9, 5, 6) - 0.09).abs() < 1e-15);
        assert!((lr_at_epoch(0.1, 0.9, 5, 11) - 0.1 * 0.81).abs() < 1e-15);

        let split = toy_split();
        let cfg = TrainConfig {
            epochs: 11,
            ..toy_cfg()
        };
        let out = train::<f64>(&split, &cfg, None).unwrap();
        for e in &out.log {
            let expected = cfg.lr * cfg.lr_decay.powi(((e.epoch - 1) / 5) as i32);
            assert_eq!(e.lr, expected, "epoch {}", e.epoch);
        }
        assert!((out.log[10].lr - cfg.lr * 0.81).abs() < 1e-15);
    }

    #[test]
    fn training_reduces_loss_on_toy_corpus() {
        // Noiseless 5-user x 6-item drift corpus: after 20 epochs the train
        // loss sits below 10% of the first epoch's (regression bound
        // established by this implementation).
        let drift = gen_drift(&DriftSpec {
            m: 5,
            n: 6,
            d: 2,
            regimes_per_user: 2,
            events_per_user: 12,
            noise_std: 0.0,
            seed: 3,
        });
        let split = split_per_user_prefix(&drift.corpus, 0.7).unwrap();
        let cfg = TrainConfig {
            d_user: 4,
            d_gru: 6,
            d_dict: 8,
            d_embed: 6,
            lr: 0.02,
            l2: 0.0,
            p_drop: 0.0,
            epochs: 20,
            batch_size: 4,
            window: 16,
            seed: 7,
            ..TrainConfig::default()
        };
        let out = train::<f64>(&split, &cfg, None).unwrap();
        let first = out.log.first().unwrap().train_loss;
        let last = out.log.last().unwrap().train_loss;
        assert!(
            last < 0.1 * first,
            "loss did not drop enough: {first} -> {last}"
        );
    }

    #[test]
    fn deterministic_at_f64() {
        let split = toy_split();
        let cfg = toy_cfg();
        let a = train::<f64>(&split, &cfg, None).unwrap();
        let b = train::<f64>(&split, &cfg, None).unwrap();
        for (x, y) in a.model.slots().iter().zip(b.model.slots().iter()) {
            assert_eq!(x.value.as_slice(), y.value.as_slice(), "slot {}", x.name);
        }
    }

    #[test]
    fn best_epoch_dominates_validation_log() {
        let split = toy_split();
        let cfg = TrainConfig {
            epochs: 8,
            ..toy_cfg()
        };
        let out = train::<f64>(&split, &cfg, None).unwrap();
        let best = out.best_epoch.unwrap();
        let best_metric = out.log[best - 1].val_metric;
        for e in &out.log {
            assert!(
                best_metric <= e.val_metric + 1e-12,
                "epoch {} beat the selected checkpoint",
                e.epoch
            );
        }
    }

    #[test]
    fn f32_training_runs_and_round_trips() {
        let split = toy_split();
        let cfg = TrainConfig {
            epochs: 3,
            ..toy_cfg()
        };
        let out = train::<f32>(&split, &cfg, None).unwrap();
        assert!(out.log.iter().all(|e| e.train_loss.is_finite()));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.ckpt");
        crate::checkpoint::save_model(
            &path,
            &out.model,
            crate::checkpoint::ModelMeta {
                clip_predictions: true,
            },
        )
        .unwrap();
        assert_eq!(
            crate::checkpoint::peek_dtype(&path).unwrap(),
            crate::scalar::Dtype::F32
        );
        let (back, _) = crate::checkpoint::load_model::<f32>(&path).unwrap();
        for (a, b) in out.model.slots().iter().zip(back.slots().iter()) {
            assert_eq!(a.value.as_slice(), b.value.as_slice(), "slot {}", a.name);
        }
        // Loading at the wrong precision names the offending tensor.
        let err = crate::checkpoint::load_model::<f64>(&path).unwrap_err();
        assert!(format!("{err}").contains("dtype"));
    }

    #[test]
    fn pretrained_dim_mismatch_names_tensor() {
        let split = toy_split();
        let cfg = toy_cfg();
        let wrong = MfParams::<f64>::init(
            split.train.num_users(),
            split.train.num_items(),
            cfg.d_user + 1,
            3.0,
            &Rng::from_seed(1),
        );
        let err = train::<f64>(&split, &cfg, Some(&wrong)).unwrap_err();
        assert!(format!("{err}").contains("mf.user_factors"));
    }
}
