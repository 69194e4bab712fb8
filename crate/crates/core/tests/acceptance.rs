//! Acceptance suite. Each test prints one `PASS`/`FAIL` line with the
//! measured values and wall time, then asserts.

use std::time::{Duration, Instant};

use dsca_core::checkpoint::{load_checkpoint, save_checkpoint};
use dsca_core::engine::{Engine, EngineConfig, Variant};
use dsca_core::experiment::{run_experiment, ExperimentResult, RunConfig};
use dsca_core::gradcheck::{check_random_states, GradcheckConfig, ProblemShape};
use dsca_core::interference::{corollary_trials, lemma_trials, TrialShape};
use dsca_core::linalg::{gaussian_vector, max_principal_angle, random_orthonormal_rows, Matrix, Vector};
use dsca_core::loss::LossWeights;
use dsca_core::metrics::{cl_metrics, AccuracyMatrix};
use dsca_core::subspace::{ipca_refine, pca_init};
use dsca_core::world::{Split, WorldConfig, WorldModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, pass: bool, detail: String, elapsed: Duration, limit: Duration) -> bool {
    let ok = pass && elapsed <= limit;
    println!(
        "criterion {id} [{}] {name}: {detail} ({:.2}s, limit {}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    ok
}

fn run(world: &WorldModel, variant: Variant, edits: usize) -> ExperimentResult {
    let cfg = RunConfig {
        edits_total: edits,
        variant,
        checkpoints: 0,
        ..RunConfig::default()
    };
    run_experiment(world, &EngineConfig::default(), &cfg, &mut |_, _| Ok(()))
        .expect("experiment runs")
        .1
}

#[test]
fn criterion_1_orthogonal_subspaces_do_not_interfere() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let r = lemma_trials(TrialShape::default(), 1e-10, &mut rng).unwrap();
    let ok = report(
        1,
        "non-interference for orthogonal subspaces",
        r.violations == 0 && r.trials == 1000,
        format!("{} checks, {} violations, worst ratio {:.2e}", r.checks, r.violations, r.worst_ratio),
        t.elapsed(),
        Duration::from_secs(10),
    );
    assert!(ok);
}

#[test]
fn criterion_2_overlap_bounds_interference() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let targets = [1e-4, 1e-3, 1e-2];
    let reports = corollary_trials(TrialShape::default(), &targets, &mut rng).unwrap();
    let violations: usize = reports.iter().map(|r| r.violations).sum();
    let calibrated = reports
        .iter()
        .all(|r| (r.measured_overlap - r.target_overlap).abs() <= 0.01 * r.target_overlap);
    let detail = reports
        .iter()
        .map(|r| {
            format!(
                "eps {:.3e}: {} violations, worst ratio {:.3}",
                r.measured_overlap, r.violations, r.worst_ratio
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    let ok = report(
        2,
        "bounded interference under overlap",
        violations == 0 && calibrated,
        detail,
        t.elapsed(),
        Duration::from_secs(30),
    );
    assert!(ok);
}

#[test]
fn criterion_3_residualized_refinement_keeps_overlap_flat() {
    let t = Instant::now();
    let world = WorldModel::new(WorldConfig::default()).unwrap();
    let full = run(&world, Variant::Full, 1000);
    let plain = run(&world, Variant::NoOrthogonality, 1000);
    let f = full.report.final_mean_overlap.expect("K >= 2 after 1000 edits");
    let p = plain.report.final_mean_overlap.expect("K >= 2 after 1000 edits");
    let ok = report(
        3,
        "overlap drift over 1000 edits",
        f <= 1e-2 && p >= 10.0 * f && p > 0.0,
        format!("residualized {f:.3e}, no-orthogonality {p:.3e}"),
        t.elapsed(),
        Duration::from_secs(600),
    );
    assert!(ok);
}

#[test]
fn criterion_4_gradients_match_finite_differences() {
    let t = Instant::now();
    let world = WorldModel::new(WorldConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let cfg = GradcheckConfig::default();
    let shape = ProblemShape {
        rank: 8,
        bottleneck: 8,
        modules: 3,
        batch_edit: 4,
        batch_replay: 8,
    };
    let r = check_random_states(&world, shape, &LossWeights::default(), &cfg, &mut rng, None).unwrap();
    let tensors = r.tensors.len();
    let ok = report(
        4,
        "gradient check",
        r.passed() && cfg.num_states == 10 && r.worst() <= 1e-4,
        format!("{tensors} tensor checks over 10 states, worst relative error {:.2e}", r.worst()),
        t.elapsed(),
        Duration::from_secs(60),
    );
    assert!(ok);
}

#[test]
fn criterion_5_routing_is_sparse() {
    let t = Instant::now();
    assert_eq!(LossWeights::default().lambda_sparse, 1e-2);
    let world = WorldModel::new(WorldConfig::default()).unwrap();
    let res = run(&world, Variant::Full, 200);
    let s = &res.sparsity;
    let ok = report(
        5,
        "routing sparsity",
        s.fraction_negligible >= 0.95 && s.mean_active <= 5.0 && s.total_weights > 0,
        format!(
            "{:.4} of {} weights < 0.05, mean active {:.3}",
            s.fraction_negligible, s.total_weights, s.mean_active
        ),
        t.elapsed(),
        Duration::from_secs(300),
    );
    assert!(ok);
}

#[test]
fn criterion_6_lifelong_editing_ordering() {
    let t = Instant::now();
    let world = WorldModel::new(WorldConfig::default()).unwrap();
    assert_eq!(world.num_concepts(), 16);
    let full = run(&world, Variant::Full, 200);
    let m = full.final_metrics.unwrap();
    let full_drop = full.locality_drop().unwrap();
    let no_orth = run(&world, Variant::NoOrthogonality, 200).locality_drop().unwrap();
    let no_sparse = run(&world, Variant::NoGateSparsity, 200).locality_drop().unwrap();
    let locality = m.text_locality.min(m.multimodal_locality);
    let ok = report(
        6,
        "lifelong editing ordering",
        m.reliability >= 0.95 && locality >= 0.99 && no_orth >= 2.0 * full_drop && no_sparse >= 2.0 * full_drop,
        format!(
            "edit success {:.3}, locality {locality:.3}, locality drop full {full_drop:.3} / no-orthogonality {no_orth:.3} / no-gate-sparsity {no_sparse:.3}",
            m.reliability
        ),
        t.elapsed(),
        Duration::from_secs(900),
    );
    assert!(ok);
}

/// Direct transcription of the four definitions, one loop per metric.
fn cl_oracle(a: &[Vec<f64>], zero: &[f64]) -> (f64, f64, f64, f64) {
    let t = a.len();
    let mut acc = 0.0;
    for i in 0..t {
        acc += a[t - 1][i];
    }
    let mut bwt = 0.0;
    for i in 0..t - 1 {
        bwt += a[t - 1][i] - a[i][i];
    }
    let mut fwt = 0.0;
    for i in 1..t {
        fwt += a[i - 1][i] - zero[i];
    }
    let mut diag = 0.0;
    for i in 0..t {
        diag += a[i][i];
    }
    (acc / t as f64, bwt / (t - 1) as f64, fwt / (t - 1) as f64, diag / t as f64)
}

#[test]
fn criterion_7_continual_metrics_and_bwt_ordering() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(2..=8);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
        let zero: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let m = AccuracyMatrix::new(Matrix::from_row_slice(n, n, &flat), Vector::from_vec(zero.clone())).unwrap();
        let got = cl_metrics(&m).unwrap();
        let want = cl_oracle(&rows, &zero);
        for (g, w) in [(got.acc, want.0), (got.bwt, want.1), (got.fwt, want.2), (got.a_t, want.3)] {
            worst = worst.max((g - w).abs());
        }
    }
    let mut dsca = Vec::new();
    let mut dense = Vec::new();
    for seed in [7, 11, 23] {
        let world = WorldModel::new(WorldConfig {
            new_shared: 0.5,
            seed,
            ..WorldConfig::default()
        })
        .unwrap();
        dsca.push(run(&world, Variant::Full, 200).cl.unwrap().bwt);
        dense.push(run(&world, Variant::DenseReference, 200).cl.unwrap().bwt);
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (d, r) = (mean(&dsca), mean(&dense));
    let ok = report(
        7,
        "continual metrics and BWT ordering",
        worst <= 1e-12 && d > r,
        format!("cl_metrics max error {worst:.1e}; mean BWT over 3 related worlds: DSCA {d:.4} ({dsca:?}), dense {r:.4} ({dense:?})"),
        t.elapsed(),
        Duration::from_secs(900),
    );
    assert!(ok);
}

#[test]
fn criterion_8_incremental_pca_matches_batch_pca() {
    let t = Instant::now();
    let (d, r, batches, per_batch) = (64, 8, 10, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let dirs = random_orthonormal_rows(&mut rng, r, d);
    let scales: Vec<f64> = (0..r).map(|i| 10.0 - i as f64).collect();
    let offset = gaussian_vector(&mut rng, d, 3.0);
    let mut all = Vec::new();
    let mut chunks = Vec::new();
    for _ in 0..batches {
        let chunk: Vec<Vector> = (0..per_batch)
            .map(|_| {
                let mut x = offset.clone() + gaussian_vector(&mut rng, d, 0.3);
                for (i, s) in scales.iter().enumerate() {
                    x += dirs.row(i).transpose() * (s * rng.random::<f64>().mul_add(2.0, -1.0) * 3f64.sqrt());
                }
                x
            })
            .collect();
        all.extend(chunk.iter().cloned());
        chunks.push(chunk);
    }
    let mut basis = pca_init(0, &chunks[0], r, r).unwrap();
    for chunk in &chunks[1..] {
        basis = ipca_refine(&basis, chunk, &[]).unwrap();
    }
    let batch = pca_init(0, &all, r, r).unwrap();
    let angle = max_principal_angle(basis.rows(), batch.rows());
    let ok = report(
        8,
        "incremental PCA against batch PCA",
        angle <= 1e-2 && basis.n_seen() == batches * per_batch,
        format!("max principal angle {angle:.3e} rad after {batches} mini-batches"),
        t.elapsed(),
        Duration::from_secs(10),
    );
    assert!(ok);
}

#[test]
fn criterion_9_cold_start_identity_and_checkpoint_round_trip() {
    let t = Instant::now();
    let world = WorldModel::new(WorldConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let probes: Vec<_> = (0..1000)
        .map(|i| {
            let split = if i % 2 == 0 { Split::Edit } else { Split::Replay };
            world.draw(rng.random_range(0..world.num_concepts()), split, &mut rng).unwrap()
        })
        .collect();
    let cold = Engine::new(EngineConfig::default(), &world, 9).unwrap();
    let identity = probes
        .iter()
        .all(|s| cold.edit_inference(s).unwrap().0 == s.fused);

    let cfg = RunConfig {
        edits_total: 200,
        checkpoints: 0,
        ..RunConfig::default()
    };
    let (engine, _) = run_experiment(&world, &EngineConfig::default(), &cfg, &mut |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&engine, &world, dir.path()).unwrap();
    let (loaded, loaded_world) = load_checkpoint(dir.path()).unwrap();
    let mut changed = 0usize;
    let exact = probes.iter().all(|s| {
        let a = engine.edit_inference(s).unwrap();
        let b = loaded.edit_inference(s).unwrap();
        if a.0 != s.fused {
            changed += 1;
        }
        a == b
    });
    let ok = report(
        9,
        "cold-start identity and checkpoint round-trip",
        identity && exact && engine.active_dsams() > 0 && loaded_world.fingerprint() == world.fingerprint(),
        format!(
            "identity on 1000 probes: {identity}; round-trip exact: {exact} ({} active modules, {changed} probes edited)",
            engine.active_dsams()
        ),
        t.elapsed(),
        Duration::from_secs(10),
    );
    assert!(ok);
}
