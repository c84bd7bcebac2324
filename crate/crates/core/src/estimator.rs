//! Score prediction and the two training objectives (squared error for
//! rating prediction, weighted squared error with sampled negatives for
//! ranking), plus negative sampling.

use std::collections::HashSet;

use crate::biasedmf::MfParams;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::dot;

/// Which preference terms enter the score. The ablation variants train and
/// predict without the other term rather than just zeroing it at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// b_g + b_i + b_j + (u_i* + ubar).v_j
    Full,
    /// b_g + b_i + b_j + ubar.v_j
    DynamicOnly,
    /// b_g + b_i + b_j + u_i*.v_j
    StaticOnly,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "full" => Some(Variant::Full),
            "dynamic_only" => Some(Variant::DynamicOnly),
            "static_only" => Some(Variant::StaticOnly),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::DynamicOnly => "dynamic_only",
            Variant::StaticOnly => "static_only",
        }
    }
}

/// b_g + b_i + b_j + (u_i* + ubar_t).v_j, with the variant deciding which of
/// the two preference vectors participate. `u_bar = None` means "no history":
/// the dynamic term is exactly zero.
pub fn predict<T: Scalar>(
    mf: &MfParams<T>,
    user: usize,
    item: usize,
    u_bar: Option<&[T]>,
    variant: Variant,
) -> T {
    let base = mf.global_bias.value.as_slice()[0]
        + mf.user_bias.value.as_slice()[user]
        + mf.item_bias.value.as_slice()[item];
    let v = mf.item_factors.value.row(item);
    let u = mf.user_factors.value.row(user);
    match (variant, u_bar) {
        (Variant::StaticOnly, _) | (Variant::Full, None) => base + dot(u, v),
        (Variant::Full, Some(ub)) => {
            let fused: Vec<T> = u.iter().zip(ub).map(|(&a, &b)| a + b).collect();
            base + dot(&fused, v)
        }
        (Variant::DynamicOnly, Some(ub)) => base + dot(ub, v),
        (Variant::DynamicOnly, None) => base,
    }
}

/// One supervised target: predict `target` for (user, item) at sequence
/// position `position` (the 1-based index of the predicted event within its
/// fragment). Ranking batches carry sampled negatives with target 0 and a
/// smaller weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub user: usize,
    pub item: usize,
    pub target: f64,
    pub weight: f64,
    pub position: usize,
}

/// sum_i w_i (r_i - rhat_i)^2.
pub fn weighted_sse<T: Scalar>(examples: &[TrainingExample], predictions: &[T]) -> T {
    debug_assert_eq!(examples.len(), predictions.len());
    let mut acc = T::ZERO;
    for (ex, &pred) in examples.iter().zip(predictions) {
        let residual = pred - T::from_f64(ex.target);
        acc += T::from_f64(ex.weight) * residual * residual;
    }
    acc
}

/// Rating objective: sum of squared residuals plus the regularizer. Rating
/// batches carry weight 1, so this is the ranking objective's special case
/// and shares its code path.
pub fn rating_loss<T: Scalar>(examples: &[TrainingExample], predictions: &[T], reg: T) -> T {
    weighted_sse(examples, predictions) + reg
}

/// Ranking objective: weighted squared residuals plus the regularizer.
pub fn ranking_loss<T: Scalar>(examples: &[TrainingExample], predictions: &[T], reg: T) -> T {
    weighted_sse(examples, predictions) + reg
}

/// Draw up to `n_neg` items uniformly without replacement from the items NOT
/// in the user's observed prefix. Returns every candidate (ascending) when
/// fewer than `n_neg` exist.
pub fn sample_negatives(
    prefix: &HashSet<usize>,
    n_neg: usize,
    universe: usize,
    rng: &mut Rng,
) -> Vec<usize> {
    let eligible = universe - prefix.iter().filter(|&&j| j < universe).count();
    if eligible == 0 {
        return Vec::new();
    }
    if n_neg >= eligible {
        return (0..universe).filter(|j| !prefix.contains(j)).collect();
    }
    if eligible < 2 * n_neg {
        // Rejection would thrash near exhaustion; enumerate instead.
        let mut candidates: Vec<usize> = (0..universe).filter(|j| !prefix.contains(j)).collect();
        rng.shuffle(&mut candidates);
        candidates.truncate(n_neg);
        return candidates;
    }
    let mut drawn = HashSet::with_capacity(n_neg);
    let mut out = Vec::with_capacity(n_neg);
    while out.len() < n_neg {
        let j = rng.below(universe);
        if prefix.contains(&j) || !drawn.insert(j) {
            continue;
        }
        out.push(j);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::ParamSlot;
    use crate::tensor::Tensor;

    fn mf(m: usize, n: usize, d: usize) -> MfParams<f64> {
        MfParams {
            user_factors: ParamSlot::new("mf.user_factors", Tensor::zeros(&[m, d])),
            item_factors: ParamSlot::new("mf.item_factors", Tensor::zeros(&[n, d])),
            user_bias: ParamSlot::new("mf.user_bias", Tensor::zeros(&[m])),
            item_bias: ParamSlot::new("mf.item_bias", Tensor::zeros(&[n])),
            global_bias: ParamSlot::new("mf.global_bias", Tensor::scalar(0.0)),
        }
    }

    #[test]
    fn predict_without_history_equals_static() {
        let mut p = mf(1, 1, 2);
        p.global_bias.value = Tensor::scalar(2.5);
        p.user_factors.value = Tensor::from_vec(&[1, 2], vec![0.3, -0.7]).unwrap();
        p.item_factors.value = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let s = predict(&p, 0, 0, None, Variant::Full);
        assert_eq!(s, p.predict_static(0, 0));
        let with_zero = predict(&p, 0, 0, Some(&[0.0, 0.0]), Variant::Full);
        assert_eq!(with_zero, s);
    }

    #[test]
    fn predict_hand_example() {
        let mut p = mf(1, 1, 2);
        p.global_bias.value = Tensor::scalar(3.0);
        p.user_factors.value = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        p.item_factors.value = Tensor::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap();
        let s = predict(&p, 0, 0, Some(&[0.0, 1.0]), Variant::Full);
        assert!((s - 8.0).abs() < 1e-12);
    }

    #[test]
    fn variants_drop_terms() {
        let mut p = mf(1, 1, 1);
        p.user_factors.value = Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
        p.item_factors.value = Tensor::from_vec(&[1, 1], vec![10.0]).unwrap();
        let ub = [3.0];
        assert_eq!(predict(&p, 0, 0, Some(&ub), Variant::Full), 50.0);
        assert_eq!(predict(&p, 0, 0, Some(&ub), Variant::DynamicOnly), 30.0);
        assert_eq!(predict(&p, 0, 0, Some(&ub), Variant::StaticOnly), 20.0);
    }

    fn ex(target: f64, weight: f64) -> TrainingExample {
        TrainingExample {
            user: 0,
            item: 0,
            target,
            weight,
            position: 1,
        }
    }

    #[test]
    fn rating_loss_cases() {
        let exs = [ex(1.0, 1.0), ex(2.0, 1.0)];
        assert_eq!(rating_loss(&exs, &[1.0, 2.0], 0.0), 0.0);
        assert_eq!(rating_loss(&exs, &[2.0, 1.0], 0.0), 2.0);
        assert_eq!(rating_loss(&exs, &[2.0, 1.0], 0.25), 2.25);
    }

    #[test]
    fn ranking_loss_hand_example() {
        let exs = [ex(1.0, 1.0), ex(0.0, 0.2)];
        let loss = ranking_loss(&exs, &[0.5, 0.5], 0.0);
        assert!((loss - 0.3).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_negatives_contribute_nothing() {
        let exs = [ex(1.0, 1.0), ex(0.0, 0.0)];
        let loss = ranking_loss(&exs, &[1.0, 123.0], 0.0);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn ranking_degenerates_to_rating_with_unit_weights() {
        let exs = [ex(3.5, 1.0), ex(-1.0, 1.0), ex(0.25, 1.0)];
        let preds = [3.0, 0.0, 1.0];
        assert_eq!(
            ranking_loss(&exs, &preds, 0.1),
            rating_loss(&exs, &preds, 0.1)
        );
    }

    #[test]
    fn losses_nonnegative() {
        let exs = [ex(1.0, 0.3), ex(-2.0, 2.0)];
        assert!(ranking_loss(&exs, &[0.7, 0.1], 0.5) >= 0.0);
    }

    #[test]
    fn negatives_exclude_prefix() {
        let prefix: HashSet<usize> = [0, 1].into_iter().collect();
        let mut rng = Rng::from_seed(3);
        let negs = sample_negatives(&prefix, 3, 5, &mut rng);
        assert_eq!(negs.len(), 3);
        let set: HashSet<usize> = negs.into_iter().collect();
        assert_eq!(set, [2, 3, 4].into_iter().collect());
    }

    #[test]
    fn negatives_exhaustion_returns_candidates() {
        let prefix: HashSet<usize> = [0, 2].into_iter().collect();
        let mut rng = Rng::from_seed(3);
        let negs = sample_negatives(&prefix, 10, 5, &mut rng);
        assert_eq!(negs, vec![1, 3, 4]);
    }

    #[test]
    fn negatives_never_collide_with_prefix() {
        let mut rng = Rng::from_seed(9);
        for trial in 0..200 {
            let mut prefix = HashSet::new();
            for _ in 0..rng.below(30) {
                prefix.insert(rng.below(40));
            }
            let negs = sample_negatives(&prefix, 4, 40, &mut rng.substream(trial));
            for j in negs {
                assert!(!prefix.contains(&j));
            }
        }
    }

    #[test]
    fn negatives_roughly_uniform() {
        let prefix: HashSet<usize> = (0..10).collect();
        let universe = 100;
        let eligible = 90.0;
        let draws = 10_000;
        let root = Rng::from_seed(31);
        let mut counts = vec![0usize; universe];
        for i in 0..draws {
            let mut rng = root.substream(i);
            for j in sample_negatives(&prefix, 1, universe, &mut rng) {
                counts[j] += 1;
            }
        }
        let p = 1.0 / eligible;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let expected = draws as f64 * p;
        for j in 10..universe {
            let dev = (counts[j] as f64 - expected).abs();
            assert!(
                dev <= 3.0 * sigma,
                "item {j}: count {} vs {expected}",
                counts[j]
            );
        }
        for j in 0..10 {
            assert_eq!(counts[j], 0);
        }
    }
}
