//! Desk-scale regression bounds established by this implementation and
//! frozen: accuracy on a ~100k-event synthetic corpus and noisy factor
//! recovery.

use s2pnm_core::biasedmf::{train_mf, MfConfig};
use s2pnm_core::corpus::split_by_time;
use s2pnm_core::evaluator::evaluate_rating;
use s2pnm_core::synthetic::{gen_static, StaticSpec};

#[test]
fn biasedmf_hundred_k_event_corpus_rmse_band() {
    // ~97k ratings over 900 users x 600 items with unit-ish observation
    // noise, split chronologically 9:1. The recorded band is a regression
    // bound for this implementation, not external ground truth.
    let corpus = gen_static(&StaticSpec {
        m: 900,
        n: 600,
        d: 8,
        noise_std: 1.0,
        density: 0.18,
        seed: 1,
    });
    assert!(corpus.len() > 90_000);
    let split = split_by_time(&corpus, 0.9).unwrap();
    let out = train_mf::<f64>(
        &split.train,
        &MfConfig {
            d_user: 50,
            lr: 0.005,
            l2: 0.05,
            epochs: 20,
            batch_size: 512,
            seed: 1,
            ..MfConfig::default()
        },
    )
    .unwrap();
    let rmse = evaluate_rating(&out.params, &split, true, &[])
        .unwrap()
        .rmse
        .unwrap();
    assert!(
        (0.90..=1.10).contains(&rmse),
        "test rmse {rmse} left the recorded band"
    );
}

#[test]
fn biasedmf_recovers_noisy_factors_to_noise_floor() {
    // Train RMSE approaches the observation noise when the rank matches.
    let noise = 0.1;
    let corpus = gen_static(&StaticSpec {
        m: 40,
        n: 30,
        d: 2,
        noise_std: noise,
        density: 1.0,
        seed: 6,
    });
    let cfg = MfConfig {
        d_user: 2,
        lr: 0.02,
        l2: 0.0,
        epochs: 300,
        batch_size: 128,
        seed: 2,
        ..MfConfig::default()
    };
    let out = train_mf::<f64>(&corpus, &cfg).unwrap();
    let sse: f64 = corpus
        .interactions
        .iter()
        .map(|it| {
            let r = out.params.predict_static(it.user, it.item) - it.rating;
            r * r
        })
        .sum();
    let rmse = (sse / corpus.len() as f64).sqrt();
    assert!(
        rmse < noise + 0.02,
        "train rmse {rmse} vs noise floor {noise}"
    );
}
