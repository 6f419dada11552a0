mod common;

use std::time::Instant;

use common::pearson;
use toscca_mm::simulation::{deterministic_path, gen_latent_paths, gen_truth, simulate, SimulationConfig, Theta};

#[test]
fn latent_noise_has_zero_mean() {
    let times: Vec<f64> = (1..=10).map(|t| t as f64).collect();
    let th = Theta::default();
    let sd = 0.25;
    let z = gen_latent_paths(&times, &th, Default::default(), 1000, 2, sd, 7).unwrap();
    for (a, &t) in times.iter().enumerate() {
        let det = deterministic_path(2, t, 10.0, &th, Default::default());
        let mean = z[1].column(a).mean().unwrap();
        let se = sd / (1000f64).sqrt();
        assert!((mean - det).abs() < 3.0 * se, "t={t}: {mean} vs {det}");
    }
}

#[test]
fn feature_noise_lag1_correlation_matches_psi() {
    let cfg = SimulationConfig {
        n_subjects: 5000,
        p: 3,
        q: 2,
        n_times: 4,
        n_components: 1,
        nnz_x: 1,
        nnz_y: 1,
        drop_x: 0.0,
        drop_y: 0.0,
        seed: 11,
        ..Default::default()
    };
    let sim = simulate(&cfg).unwrap();
    let x = sim.study.x.values();
    let noise_col = (0..3).find(|&j| sim.truth.w_x[0][j] == 0.0).unwrap();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for blk in sim.study.x.blocks() {
        a.push(x[[blk.start, noise_col]]);
        b.push(x[[blk.start + 1, noise_col]]);
    }
    let r = pearson(&a, &b);
    assert!((r - sim.truth.psi_x[0][1]).abs() < 0.05, "lag-1 correlation {r}");
}

#[test]
fn removal_is_per_measurement_and_can_empty_a_subject() {
    let cfg = SimulationConfig {
        n_subjects: 200,
        p: 2,
        q: 2,
        n_times: 2,
        n_components: 1,
        nnz_x: 1,
        nnz_y: 1,
        drop_x: 0.5,
        drop_y: 0.5,
        seed: 3,
        ..Default::default()
    };
    let t = gen_truth(&cfg).unwrap();
    let counts: Vec<usize> = t.removed_x.iter().map(|r| r.iter().filter(|&&b| b).count()).collect();
    assert!(counts.contains(&0));
    assert!(counts.contains(&2));
    assert!(counts.contains(&1));
    let sim = simulate(&cfg).unwrap();
    assert!(sim.study.x.n_subjects() < 200);
    assert_eq!(sim.study.x.n_rows(), 200);
}

#[test]
fn full_scale_generation_is_fast() {
    let start = Instant::now();
    let sim = simulate(&SimulationConfig {
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let elapsed = start.elapsed();
    assert_eq!(sim.study.x.n_features(), 10_000);
    assert_eq!(sim.study.x.n_rows(), 800);
    assert_eq!(sim.study.y.n_rows(), 700);
    assert!(elapsed.as_secs_f64() < 60.0, "{elapsed:?}");
}
