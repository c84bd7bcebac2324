//! RMSE and top-k ranking metrics with per-user breakdown buckets.
//!
//! Rating predictions are teacher-forced: the prediction for each test event
//! conditions on every event of that user strictly before it, train or test,
//! since item identities (not ratings) are what the network consumes.
//! Ranking builds one recommendation list per user from the train-history
//! state, over candidates excluding the user's train items.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{sequences, SplitResult};
use crate::error::{Error, Result};
use crate::model::{Recommender, SeenSets};

/// Root mean squared residual over (truth, prediction) pairs.
pub fn rmse(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("rmse over empty set".into()));
    }
    let sse: f64 = pairs.iter().map(|(t, p)| (t - p) * (t - p)).sum();
    Ok((sse / pairs.len() as f64).sqrt())
}

/// Top-k candidates by descending score, ties broken by ascending item index.
pub fn rank_items(candidates: &[usize], scores: &[f64], k: usize) -> Vec<usize> {
    debug_assert_eq!(candidates.len(), scores.len());
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(candidates[a].cmp(&candidates[b]))
    });
    order.into_iter().take(k).map(|i| candidates[i]).collect()
}

/// Mean over users of |R_i ∩ T_i| / |R_i|. Users with empty truth sets are
/// excluded from the mean.
pub fn precision_at_k(lists: &[Vec<usize>], truths: &[HashSet<usize>], k: usize) -> f64 {
    mean_over_users(lists, truths, |list, truth| {
        let r: Vec<usize> = list.iter().copied().take(k).collect();
        if r.is_empty() {
            return 0.0;
        }
        let hits = r.iter().filter(|j| truth.contains(j)).count();
        hits as f64 / r.len() as f64
    })
}

/// Fraction of users whose top-k list hits the truth set at least once.
pub fn hr_at_k(lists: &[Vec<usize>], truths: &[HashSet<usize>], k: usize) -> f64 {
    mean_over_users(lists, truths, |list, truth| {
        if list.iter().take(k).any(|j| truth.contains(j)) {
            1.0
        } else {
            0.0
        }
    })
}

/// Binary-gain NDCG: DCG = sum over hit positions of 1/log2(j+1), normalized
/// by the best arrangement possible given |T_i|.
pub fn ndcg_at_k(lists: &[Vec<usize>], truths: &[HashSet<usize>], k: usize) -> f64 {
    mean_over_users(lists, truths, |list, truth| ndcg_single(list, truth, k))
}

fn ndcg_single(list: &[usize], truth: &HashSet<usize>, k: usize) -> f64 {
    let dcg: f64 = list
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, j)| truth.contains(j))
        .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    let ideal_hits = truth.len().min(k);
    let idcg: f64 = (0..ideal_hits)
        .map(|pos| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

fn mean_over_users(
    lists: &[Vec<usize>],
    truths: &[HashSet<usize>],
    per_user: impl Fn(&[usize], &HashSet<usize>) -> f64,
) -> f64 {
    debug_assert_eq!(lists.len(), truths.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for (list, truth) in lists.iter().zip(truths) {
        if truth.is_empty() {
            continue;
        }
        total += per_user(list, truth);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Bucket {
    pub label: String,
    pub metric: f64,
    pub user_fraction: f64,
    pub users: usize,
}

/// Group users by their train-event count at the given ascending edges and
/// average the per-user metric within each group.
pub fn bucket_report(
    per_user_metric: &[(usize, f64)],
    train_counts: &[usize],
    edges: &[usize],
) -> Vec<Bucket> {
    debug_assert!(edges.windows(2).all(|w| w[0] < w[1]));
    let n_buckets = edges.len() + 1;
    let mut sums = vec![0.0; n_buckets];
    let mut counts = vec![0usize; n_buckets];
    for &(user, metric) in per_user_metric {
        let c = train_counts[user];
        let b = edges.iter().position(|&e| c <= e).unwrap_or(edges.len());
        sums[b] += metric;
        counts[b] += 1;
    }
    let total: usize = counts.iter().sum();
    (0..n_buckets)
        .map(|b| {
            let label = if edges.is_empty() {
                "all".to_string()
            } else if b == 0 {
                format!("<={}", edges[0])
            } else if b == edges.len() {
                format!(">{}", edges[edges.len() - 1])
            } else {
                format!("{}-{}", edges[b - 1] + 1, edges[b])
            };
            Bucket {
                label,
                metric: if counts[b] == 0 {
                    0.0
                } else {
                    sums[b] / counts[b] as f64
                },
                user_fraction: if total == 0 {
                    0.0
                } else {
                    counts[b] as f64 / total as f64
                },
                users: counts[b],
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub task: String,
    pub rmse: Option<f64>,
    pub precision_at_k: Vec<(usize, f64)>,
    pub hr_at_k: Vec<(usize, f64)>,
    pub ndcg_at_k: Vec<(usize, f64)>,
    pub evaluated_users: usize,
    pub user_buckets: Vec<Bucket>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        if name == "rmse" {
            return self.rmse;
        }
        let (kind, k) = name.split_once('@')?;
        let k: usize = k.parse().ok()?;
        let table = match kind {
            "precision" => &self.precision_at_k,
            "hr" => &self.hr_at_k,
            "ndcg" => &self.ndcg_at_k,
            _ => return None,
        };
        table.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }

    /// Tab-separated rendering: one `name<TAB>value` line per metric, then
    /// the bucket table.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("task\t{}\n", self.task));
        if let Some(r) = self.rmse {
            out.push_str(&format!("rmse\t{r}\n"));
        }
        for (k, v) in &self.precision_at_k {
            out.push_str(&format!("precision@{k}\t{v}\n"));
        }
        for (k, v) in &self.hr_at_k {
            out.push_str(&format!("hr@{k}\t{v}\n"));
        }
        for (k, v) in &self.ndcg_at_k {
            out.push_str(&format!("ndcg@{k}\t{v}\n"));
        }
        out.push_str(&format!("evaluated_users\t{}\n", self.evaluated_users));
        for b in &self.user_buckets {
            out.push_str(&format!(
                "bucket\t{}\t{}\t{}\t{}\n",
                b.label, b.metric, b.user_fraction, b.users
            ));
        }
        out
    }
}

fn train_counts(split: &SplitResult) -> Vec<usize> {
    let mut counts = vec![0usize; split.train.num_users()];
    for it in &split.train.interactions {
        counts[it.user] += 1;
    }
    counts
}

/// Teacher-forced RMSE over the test split, with optional clipping of
/// predictions to the observed train rating range.
pub fn evaluate_rating<M: Recommender + Sync>(
    model: &M,
    split: &SplitResult,
    clip: bool,
    bucket_edges: &[usize],
) -> Result<EvalReport> {
    let seen = SeenSets::from_corpus(&split.train);
    let (lo, hi) = split
        .train
        .interactions
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), it| {
            (lo.min(it.rating), hi.max(it.rating))
        });

    // Merge each user's train and test events chronologically.
    #[derive(Clone)]
    struct MergedUser {
        user: usize,
        items: Vec<usize>,
        // (position, truth) for test events.
        tests: Vec<(usize, f64)>,
    }
    let mut merged: Vec<MergedUser> = Vec::new();
    {
        let all_users = split.train.num_users();
        let mut events: Vec<Vec<(i64, usize, usize, f64, bool)>> = vec![Vec::new(); all_users];
        for it in &split.train.interactions {
            events[it.user].push((it.timestamp, it.row, it.item, it.rating, false));
        }
        for it in &split.test.interactions {
            events[it.user].push((it.timestamp, it.row, it.item, it.rating, true));
        }
        for (user, mut evs) in events.into_iter().enumerate() {
            if evs.iter().all(|e| !e.4) {
                continue; // nothing to score
            }
            evs.sort_by_key(|e| (e.0, e.1));
            let items = evs.iter().map(|e| e.2).collect();
            let tests = evs
                .iter()
                .enumerate()
                .filter(|(_, e)| e.4)
                .map(|(pos, e)| (pos, e.3))
                .collect();
            merged.push(MergedUser { user, items, tests });
        }
    }

    let per_user: Vec<(usize, Vec<(f64, f64)>)> = merged
        .par_iter()
        .map(|mu| {
            let preds = model.teacher_forced(mu.user, &mu.items, &seen);
            let pairs: Vec<(f64, f64)> = mu
                .tests
                .iter()
                .map(|&(pos, truth)| {
                    let mut p = preds[pos];
                    if clip {
                        p = p.clamp(lo, hi);
                    }
                    (truth, p)
                })
                .collect();
            (mu.user, pairs)
        })
        .collect();

    let all_pairs: Vec<(f64, f64)> = per_user.iter().flat_map(|(_, p)| p.clone()).collect();
    let global = rmse(&all_pairs)?;
    let per_user_rmse: Vec<(usize, f64)> = per_user
        .iter()
        .map(|(user, pairs)| (*user, rmse(pairs).unwrap_or(0.0)))
        .collect();
    let buckets = bucket_report(&per_user_rmse, &train_counts(split), bucket_edges);
    Ok(EvalReport {
        task: "rating".into(),
        rmse: Some(global),
        precision_at_k: Vec::new(),
        hr_at_k: Vec::new(),
        ndcg_at_k: Vec::new(),
        evaluated_users: per_user.len(),
        user_buckets: buckets,
    })
}

/// Top-k ranking metrics over the test split. The candidate set for each
/// user is every item minus the user's train items; users whose test truth
/// is empty are excluded.
pub fn evaluate_ranking<M: Recommender + Sync>(
    model: &M,
    split: &SplitResult,
    ks: &[usize],
    bucket_edges: &[usize],
) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(Error::Config(
            "ranking evaluation needs at least one k".into(),
        ));
    }
    let seen = SeenSets::from_corpus(&split.train);
    let n_items = split.train.num_items();
    let max_k = *ks.iter().max().unwrap();

    let train_seqs = sequences(&split.train);
    let mut prefix_by_user: Vec<Option<Vec<usize>>> = vec![None; split.train.num_users()];
    for s in &train_seqs {
        prefix_by_user[s.user] = Some(s.items());
    }
    let test_seqs = sequences(&split.test);

    struct UserEval {
        user: usize,
        list: Vec<usize>,
        truth: HashSet<usize>,
    }
    let evals: Vec<UserEval> = test_seqs
        .par_iter()
        .filter_map(|ts| {
            let truth: HashSet<usize> = ts.items().into_iter().collect();
            if truth.is_empty() {
                return None;
            }
            let prefix = prefix_by_user[ts.user].clone().unwrap_or_default();
            let prefix_set: HashSet<usize> = prefix.iter().copied().collect();
            let candidates: Vec<usize> = (0..n_items).filter(|j| !prefix_set.contains(j)).collect();
            if candidates.is_empty() {
                return None;
            }
            let scores = model.rank_scores(ts.user, &prefix, &candidates, &seen);
            let list = rank_items(&candidates, &scores, max_k);
            Some(UserEval {
                user: ts.user,
                list,
                truth,
            })
        })
        .collect();

    let lists: Vec<Vec<usize>> = evals.iter().map(|e| e.list.clone()).collect();
    let truths: Vec<HashSet<usize>> = evals.iter().map(|e| e.truth.clone()).collect();
    if evals.is_empty() {
        return Err(Error::Data("every user has an empty test truth set".into()));
    }

    let precision: Vec<(usize, f64)> = ks
        .iter()
        .map(|&k| (k, precision_at_k(&lists, &truths, k)))
        .collect();
    let hr: Vec<(usize, f64)> = ks
        .iter()
        .map(|&k| (k, hr_at_k(&lists, &truths, k)))
        .collect();
    let ndcg: Vec<(usize, f64)> = ks
        .iter()
        .map(|&k| (k, ndcg_at_k(&lists, &truths, k)))
        .collect();

    let bucket_k = ks[0];
    let per_user_hr: Vec<(usize, f64)> = evals
        .iter()
        .map(|e| {
            let hit = e.list.iter().take(bucket_k).any(|j| e.truth.contains(j));
            (e.user, if hit { 1.0 } else { 0.0 })
        })
        .collect();
    let buckets = bucket_report(&per_user_hr, &train_counts(split), bucket_edges);

    Ok(EvalReport {
        task: "ranking".into(),
        rmse: None,
        precision_at_k: precision,
        hr_at_k: hr,
        ndcg_at_k: ndcg,
        evaluated_users: evals.len(),
        user_buckets: buckets,
    })
}
