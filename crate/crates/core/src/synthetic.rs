//! Synthetic corpora with known ground truth: static low-rank ratings and
//! preference-drift sequences. These power the desk-scale experiments where
//! the real datasets would be out of reach.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::corpus::{Corpus, Interaction};
use crate::rng::Rng;

const RATING_MIN: f64 = 1.0;
const RATING_MAX: f64 = 5.0;
const RATING_MID: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct StaticSpec {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub noise_std: f64,
    /// Fraction of the m*n cells observed.
    pub density: f64,
    pub seed: u64,
}

/// Ratings r = clip(u_i . v_j + b + noise) from fixed random factors, with
/// uniform random timestamps. Factor entries are scaled so the noiseless
/// signal never touches the clip bounds.
pub fn gen_static(spec: &StaticSpec) -> Corpus {
    let mut rng = Rng::from_seed(spec.seed).stream("gen_static");
    let scale = 0.9 / (spec.d as f64).sqrt();
    let u: Vec<f64> = (0..spec.m * spec.d)
        .map(|_| rng.uniform(-scale, scale))
        .collect();
    let v: Vec<f64> = (0..spec.n * spec.d)
        .map(|_| rng.uniform(-scale, scale))
        .collect();
    let mut obs = rng.stream("observe");
    let mut noise = rng.stream("noise");
    let mut ts_rng = rng.stream("timestamps");
    let mut rows = Vec::new();
    for i in 0..spec.m {
        for j in 0..spec.n {
            if obs.next_f64() >= spec.density {
                continue;
            }
            let mut r = RATING_MID;
            for k in 0..spec.d {
                r += u[i * spec.d + k] * v[j * spec.d + k];
            }
            if spec.noise_std > 0.0 {
                r += spec.noise_std * noise.normal();
            }
            let r = r.clamp(RATING_MIN, RATING_MAX);
            let t = ts_rng.below(1_000_000) as i64;
            rows.push((i, j, r, t));
        }
    }
    corpus_from_rows(spec.m, spec.n, &rows)
}

#[derive(Debug, Clone)]
pub struct DriftSpec {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub regimes_per_user: usize,
    pub events_per_user: usize,
    pub noise_std: f64,
    pub seed: u64,
}

/// Ground truth retained next to a drift corpus for oracle tests.
#[derive(Debug, Clone)]
pub struct DriftTruth {
    /// Cluster id of every item.
    pub item_cluster: Vec<usize>,
    /// Per user: (first event index, active cluster) per regime segment.
    pub user_segments: Vec<Vec<(usize, usize)>>,
    pub num_clusters: usize,
}

impl DriftTruth {
    /// Active cluster for the given event position of a user.
    pub fn active_cluster(&self, user: usize, event_idx: usize) -> usize {
        let segs = &self.user_segments[user];
        let mut active = segs[0].1;
        for &(start, cluster) in segs {
            if event_idx >= start {
                active = cluster;
            }
        }
        active
    }
}

#[derive(Debug)]
pub struct DriftCorpus {
    pub corpus: Corpus,
    pub truth: DriftTruth,
}

/// Each user's latent preference switches among a few item clusters at random
/// change points; within a regime 90% of interactions land in the aligned
/// cluster and 10% explore uniformly. Timestamps strictly increase per user
/// and interleave across users so global time splits stay meaningful.
pub fn gen_drift(spec: &DriftSpec) -> DriftCorpus {
    assert!(spec.regimes_per_user >= 1);
    assert!(spec.events_per_user >= spec.regimes_per_user);
    let root = Rng::from_seed(spec.seed).stream("gen_drift");
    let num_clusters = (4 * spec.regimes_per_user).clamp(4, 16).min(spec.n);

    // Unit-norm cluster prototypes; items sit near their prototype.
    let mut proto_rng = root.stream("prototypes");
    let mut prototypes = vec![vec![0.0f64; spec.d]; num_clusters];
    for p in prototypes.iter_mut() {
        let mut norm = 0.0;
        for x in p.iter_mut() {
            *x = proto_rng.uniform(-1.0, 1.0);
            norm += *x * *x;
        }
        let norm = norm.sqrt().max(1e-9);
        for x in p.iter_mut() {
            *x /= norm;
        }
    }
    let mut item_rng = root.stream("items");
    let item_cluster: Vec<usize> = (0..spec.n).map(|j| j % num_clusters).collect();
    let item_factors: Vec<Vec<f64>> = (0..spec.n)
        .map(|j| {
            prototypes[item_cluster[j]]
                .iter()
                .map(|&x| x + item_rng.uniform(-0.15, 0.15))
                .collect()
        })
        .collect();
    let cluster_items: Vec<Vec<usize>> = (0..num_clusters)
        .map(|c| (0..spec.n).filter(|&j| item_cluster[j] == c).collect())
        .collect();

    let mut rows = Vec::new();
    let mut user_segments = Vec::with_capacity(spec.m);
    for i in 0..spec.m {
        let mut urng = root.stream("user").substream(i as u64);
        // Choose distinct clusters for this user's regimes.
        let mut clusters: Vec<usize> = (0..num_clusters).collect();
        urng.shuffle(&mut clusters);
        clusters.truncate(spec.regimes_per_user);

        // Random contiguous segment lengths, each at least one event.
        let weights: Vec<f64> = (0..spec.regimes_per_user)
            .map(|_| urng.uniform(0.5, 1.5))
            .collect();
        let wsum: f64 = weights.iter().sum();
        let mut lengths: Vec<usize> = weights
            .iter()
            .map(|w| ((w / wsum) * spec.events_per_user as f64).floor().max(1.0) as usize)
            .collect();
        let mut total: usize = lengths.iter().sum();
        while total < spec.events_per_user {
            let idx = total % spec.regimes_per_user;
            lengths[idx] += 1;
            total += 1;
        }
        while total > spec.events_per_user {
            let idx = lengths
                .iter()
                .enumerate()
                .max_by_key(|(_, &l)| l)
                .map(|(i, _)| i)
                .unwrap();
            lengths[idx] -= 1;
            total -= 1;
        }

        let mut segments = Vec::with_capacity(spec.regimes_per_user);
        let mut event_idx = 0usize;
        for (r, &len) in lengths.iter().enumerate() {
            let cluster = clusters[r];
            segments.push((event_idx, cluster));
            let proto = &prototypes[cluster];
            for _ in 0..len {
                let item = if urng.next_f64() < 0.9 {
                    let members = &cluster_items[cluster];
                    members[urng.below(members.len())]
                } else {
                    urng.below(spec.n)
                };
                let mut rating = RATING_MID;
                for k in 0..spec.d {
                    rating += 0.8 * proto[k] * item_factors[item][k];
                }
                if spec.noise_std > 0.0 {
                    rating += spec.noise_std * urng.normal();
                }
                let rating = rating.clamp(RATING_MIN, RATING_MAX);
                // Strictly increasing per user, interleaved across users.
                let t = (event_idx * spec.m + i) as i64;
                rows.push((i, item, rating, t));
                event_idx += 1;
            }
        }
        user_segments.push(segments);
    }
    DriftCorpus {
        corpus: corpus_from_rows(spec.m, spec.n, &rows),
        truth: DriftTruth {
            item_cluster,
            user_segments,
            num_clusters,
        },
    }
}

/// Render a corpus in the CSV schema `load_csv` ingests.
pub fn to_csv(corpus: &Corpus) -> String {
    let mut out = String::new();
    for it in &corpus.interactions {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            corpus.index.user_id(it.user),
            corpus.index.item_id(it.item),
            it.rating,
            it.timestamp
        );
    }
    out
}

/// Render drift ground truth as `user<TAB>segment_start<TAB>cluster` lines.
pub fn truth_to_tsv(truth: &DriftTruth) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "#clusters\t{}", truth.num_clusters);
    for (user, segments) in truth.user_segments.iter().enumerate() {
        for &(start, cluster) in segments {
            let _ = writeln!(out, "{user}\t{start}\t{cluster}");
        }
    }
    out
}

fn corpus_from_rows(m: usize, n: usize, rows: &[(usize, usize, f64, i64)]) -> Corpus {
    let interactions: Vec<Interaction> = rows
        .iter()
        .enumerate()
        .map(|(row, &(user, item, rating, timestamp))| Interaction {
            user,
            item,
            rating,
            timestamp,
            row,
        })
        .collect();
    Corpus {
        index: Arc::new(crate::corpus::Index::with_ranges(m, n)),
        interactions,
    }
}
