use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepformer::gradcheck::{check_gradients, GradCheckOptions};
use sepformer::loss::{
    mean_si_snri, permutations, pit_loss, pit_loss_tensor, si_snr, si_snr_improvement,
    si_snr_with_grad, SI_SNR_CLIP_DB, SI_SNR_EPS,
};
use sepformer::{Error, ParamList, Tensor};

fn random_vec(seed: u64, n: usize) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn noisy_copy(x: &[f64], noise: f64, seed: u64) -> Vec<f64> {
    x.iter()
        .zip(random_vec(seed, x.len()))
        .map(|(a, n)| a + noise * n)
        .collect()
}

#[test]
fn identical_signals_clip_at_30_db() {
    let t = random_vec(1, 100);
    assert_eq!(si_snr(&t, &t).unwrap(), 30.0);
    assert_eq!(SI_SNR_CLIP_DB, 30.0);
}

#[test]
fn scaled_target_clips_at_30_db() {
    let t = random_vec(2, 100);
    for alpha in [0.01, 0.5, 3.0, 100.0] {
        let e: Vec<f64> = t.iter().map(|v| alpha * v).collect();
        assert_eq!(si_snr(&e, &t).unwrap(), 30.0);
    }
}

#[test]
fn hand_example_matches_projection_formula() {
    let est = [1.0, -1.0, 1.0, -1.0];
    let target = [1.0, -1.0, 0.0, 0.0];
    // both already zero-mean; <est,target> = 2, |target|² = 2
    let alpha = 2.0 / (2.0 + SI_SNR_EPS);
    let signal = alpha * alpha * 2.0;
    let noise = 2.0 * (1.0 - alpha) * (1.0 - alpha) + 2.0;
    let want = 10.0 * (signal / (noise + SI_SNR_EPS * 4.0)).log10();
    let got = si_snr(&est, &target).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    // equal signal and residual energy
    assert!(got.abs() < 1e-6);
}

#[test]
fn mean_is_removed_before_projection() {
    let t = random_vec(3, 50);
    let e = noisy_copy(&t, 0.3, 4);
    let shifted: Vec<f64> = e.iter().map(|v| v + 7.0).collect();
    assert!((si_snr(&e, &t).unwrap() - si_snr(&shifted, &t).unwrap()).abs() < 1e-9);
}

#[test]
fn silent_reference_is_rejected() {
    let e = random_vec(5, 10);
    assert!(matches!(
        si_snr(&e, &[0.0; 10]),
        Err(Error::InvalidReference(_))
    ));
    assert!(matches!(
        si_snr(&e, &[0.5; 10]),
        Err(Error::InvalidReference(_))
    ));
    assert!(matches!(si_snr(&e, &[1.0; 9]), Err(Error::Usage(_))));
    assert!(matches!(si_snr(&[], &[]), Err(Error::Usage(_))));
}

#[test]
fn silent_estimate_stays_finite() {
    let value = si_snr(&[0.0; 8], &random_vec(6, 8)).unwrap();
    assert!(value.is_finite());
}

#[test]
fn improvement_examples() {
    let t = random_vec(7, 200);
    let mix: Vec<f64> = t
        .iter()
        .zip(random_vec(8, 200))
        .map(|(a, b)| a + b)
        .collect();
    assert_eq!(si_snr_improvement(&mix, &mix, &t).unwrap(), 0.0);
    let oracle = si_snr_improvement(&t, &mix, &t).unwrap();
    assert_eq!(oracle, 30.0 - si_snr(&mix, &t).unwrap());
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..5 {
        let t = random_vec(seed, 40);
        let e = noisy_copy(&t, 0.5 + seed as f64, seed + 50);
        let (_, grad) = si_snr_with_grad(&e, &t).unwrap();
        let h = 1e-6;
        for i in 0..e.len() {
            let mut plus = e.clone();
            plus[i] += h;
            let mut minus = e.clone();
            minus[i] -= h;
            let fd = (si_snr(&plus, &t).unwrap() - si_snr(&minus, &t).unwrap()) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "{fd} vs {}",
                grad[i]
            );
        }
    }
}

#[test]
fn clipped_values_have_zero_gradient() {
    let t = random_vec(9, 30);
    let (v, g) = si_snr_with_grad(&t, &t).unwrap();
    assert_eq!(v, 30.0);
    assert!(g.iter().all(|&x| x == 0.0));
}

#[test]
fn permutations_are_lexicographic() {
    assert_eq!(
        permutations(3),
        vec![
            vec![0, 1, 2],
            vec![0, 2, 1],
            vec![1, 0, 2],
            vec![1, 2, 0],
            vec![2, 0, 1],
            vec![2, 1, 0],
        ]
    );
}

#[test]
fn pit_identity_and_swap() {
    let a = random_vec(10, 64);
    let b = random_vec(11, 64);
    let r = pit_loss(&[a.clone(), b.clone()], &[a.clone(), b.clone()]).unwrap();
    assert_eq!(r.best_perm, vec![0, 1]);
    assert_eq!(r.loss, -30.0);
    let r = pit_loss(&[b.clone(), a.clone()], &[a, b]).unwrap();
    assert_eq!(r.best_perm, vec![1, 0]);
    assert_eq!(r.loss, -30.0);
}

#[test]
fn pit_ties_take_the_smallest_permutation() {
    let a = random_vec(12, 32);
    let r = pit_loss(&[a.clone(), a.clone()], &[a.clone(), a]).unwrap();
    assert_eq!(r.best_perm, vec![0, 1]);
}

#[test]
fn pit_rejects_count_mismatch() {
    let a = random_vec(13, 16);
    assert!(matches!(
        pit_loss(std::slice::from_ref(&a), &[a.clone(), a.clone()]),
        Err(Error::Usage(_))
    ));
}

/// Six explicit assignments, written out by hand.
fn three_source_oracle(ests: &[Vec<f64>], targets: &[Vec<f64>]) -> (f64, [usize; 3]) {
    let all = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut best = (f64::NEG_INFINITY, all[0]);
    for p in all {
        let mean = (si_snr(&ests[0], &targets[p[0]]).unwrap()
            + si_snr(&ests[1], &targets[p[1]]).unwrap()
            + si_snr(&ests[2], &targets[p[2]]).unwrap())
            / 3.0;
        if mean > best.0 {
            best = (mean, p);
        }
    }
    best
}

#[test]
fn three_sources_match_exhaustive_oracle() {
    for seed in 0..20 {
        let targets: Vec<Vec<f64>> = (0..3u64).map(|i| random_vec(seed * 10 + i, 80)).collect();
        let ests: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                let mix: Vec<f64> = (0..80)
                    .map(|n| targets.iter().map(|t| t[n]).sum::<f64>() * 0.3)
                    .collect();
                noisy_copy(
                    &targets[(i + seed as usize) % 3],
                    0.8,
                    seed * 10 + 5 + i as u64,
                )
                .iter()
                .zip(mix)
                .map(|(a, b)| a + b)
                .collect()
            })
            .collect();
        let r = pit_loss(&ests, &targets).unwrap();
        let (mean, perm) = three_source_oracle(&ests, &targets);
        assert_eq!(r.best_perm, perm.to_vec());
        assert!((r.loss + mean).abs() < 1e-12);
        let from_parts = -r.per_source_si_snr.iter().sum::<f64>() / 3.0;
        assert!((r.loss - from_parts).abs() < 1e-12);
    }
}

#[test]
fn pit_gradient_matches_finite_differences() {
    let targets = [random_vec(20, 48), random_vec(21, 48)];
    let ests = [
        noisy_copy(&targets[1], 0.7, 22),
        noisy_copy(&targets[0], 0.9, 23),
    ]
    .concat();
    let mut p = ParamList::default();
    p.push("ests", Tensor::param(ests, &[2, 48]).unwrap());
    let reports = check_gradients(
        &mut p,
        |p| Ok(pit_loss_tensor(p.get("ests").unwrap(), &targets)?.0),
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(reports[0].rel_error < 1e-6, "{:e}", reports[0].rel_error);
    let (_, r) = pit_loss_tensor(p.get("ests").unwrap(), &targets).unwrap();
    assert_eq!(r.best_perm, vec![1, 0]);
}

#[test]
fn mean_improvement_examples() {
    let targets = [random_vec(30, 120), random_vec(31, 120)];
    let mix: Vec<f64> = targets[0]
        .iter()
        .zip(&targets[1])
        .map(|(a, b)| a + b)
        .collect();
    let unprocessed = mean_si_snri(&[mix.clone(), mix.clone()], &mix, &targets).unwrap();
    assert!(unprocessed.abs() < 1e-12);
    let oracle = mean_si_snri(&targets, &mix, &targets).unwrap();
    let want = targets
        .iter()
        .map(|t| 30.0 - si_snr(&mix, t).unwrap())
        .sum::<f64>()
        / 2.0;
    assert!((oracle - want).abs() < 1e-12);
}

fn sources(ns: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (8usize..64, any::<u64>()).prop_map(move |(len, seed)| {
        let targets: Vec<Vec<f64>> = (0..ns)
            .map(|i| random_vec(seed ^ (i as u64 + 1), len))
            .collect();
        let ests: Vec<Vec<f64>> = (0..ns)
            .map(|i| random_vec(seed ^ (100 + i as u64), len))
            .collect();
        (ests, targets)
    })
}

proptest! {
    #[test]
    fn pit_is_exactly_permutation_invariant(ns in 2usize..=3, seed in any::<u64>(), len in 8usize..64) {
        let targets: Vec<Vec<f64>> = (0..ns).map(|i| random_vec(seed ^ (i as u64 + 1), len)).collect();
        let ests: Vec<Vec<f64>> = (0..ns).map(|i| noisy_copy(&targets[(i + 1) % ns], 1.0, seed ^ (50 + i as u64))).collect();
        let base = pit_loss(&ests, &targets).unwrap();
        for sigma in permutations(ns) {
            let shuffled: Vec<Vec<f64>> = sigma.iter().map(|&j| targets[j].clone()).collect();
            let r = pit_loss(&ests, &shuffled).unwrap();
            prop_assert_eq!(r.loss, base.loss);
        }
    }

    #[test]
    fn si_snr_is_scale_invariant((ests, targets) in sources(1), noise in 0.0f64..2.0) {
        let t = &targets[0];
        let e: Vec<f64> = t.iter().zip(&ests[0]).map(|(a, b)| a + noise * b).collect();
        let base = si_snr(&e, t).unwrap();
        for alpha in [0.1, 1.0, 10.0] {
            let scaled: Vec<f64> = e.iter().map(|v| alpha * v).collect();
            prop_assert!((si_snr(&scaled, t).unwrap() - base).abs() <= 1e-9);
        }
    }

    #[test]
    fn si_snr_never_exceeds_clip((ests, targets) in sources(2), mix in 0.0f64..1.0) {
        let e: Vec<f64> = ests[0].iter().zip(&targets[0]).map(|(a, b)| mix * a + b).collect();
        prop_assert!(si_snr(&e, &targets[0]).unwrap() <= 30.0);
        prop_assert!(si_snr(&ests[1], &targets[1]).unwrap() <= 30.0);
    }
}
