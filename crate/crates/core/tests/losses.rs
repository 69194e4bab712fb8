use std::collections::BTreeMap;

use dsca_core::dsam::{sgd_step, DsamParams};
use dsca_core::gradcheck::{check_gradients, random_problem, GradcheckConfig, ProblemShape};
use dsca_core::linalg::{gaussian_matrix, gaussian_vector, random_orthonormal_rows, Matrix, Vector};
use dsca_core::loss::{
    grad_align, loss_align, loss_cdistill, loss_sparse, loss_task, objective, BatchInputs, EditInput, LossBreakdown,
    LossWeights, ReplayInput, SparseForm,
};
use dsca_core::router::RoutingDecision;
use dsca_core::subspace::SubspaceBasis;
use dsca_core::world::{TaskHead, WorldConfig, WorldModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn zero_weights() -> LossWeights {
    LossWeights {
        lambda_align: 0.0,
        lambda_distill: 0.0,
        lambda_sparse: 0.0,
        ..LossWeights::default()
    }
}

#[test]
fn task_loss_cases() {
    let head = TaskHead::new(Matrix::identity(4, 4));
    assert!((loss_task(&Vector::zeros(4), 1, &head).unwrap() - 4f64.ln()).abs() <= 1e-15);
    let mut z = Vector::zeros(4);
    z[2] = 50.0;
    assert!(loss_task(&z, 2, &head).unwrap() <= 1e-20);
}

#[test]
fn task_loss_matches_log_sum_exp() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let head = TaskHead::new(gaussian_matrix(&mut rng, 6, 10, 1.0));
    let h = gaussian_vector(&mut rng, 10, 1.0);
    let z = head.logits(&h).unwrap();
    let m = z.max();
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    assert!((loss_task(&h, 3, &head).unwrap() - (lse - z[3])).abs() <= 1e-12);
}

#[test]
fn align_matches_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = gaussian_vector(&mut rng, 9, 1.0);
    let b = gaussian_vector(&mut rng, 9, 1.0);
    let c = a.dot(&b) / (a.norm() * b.norm());
    assert!((loss_align(&a, &b).unwrap() - (1.0 - c)).abs() <= 1e-12);
    let t = gaussian_vector(&mut rng, 9, 1.0);
    let g = grad_align(&t, &t).unwrap();
    assert!(g.dot(&t).abs() <= 1e-12);
}

#[test]
fn cdistill_with_orthogonal_teachers_and_small_tau() {
    let t: Vec<Vector> = (0..3)
        .map(|i| {
            let mut v = Vector::zeros(3);
            v[i] = 1.0;
            v
        })
        .collect();
    assert!(loss_cdistill(&t, &t, 0.01).unwrap() <= 1e-6);
}

#[test]
fn cdistill_matches_similarity_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e: Vec<Vector> = (0..8).map(|_| gaussian_vector(&mut rng, 6, 1.0)).collect();
    let t: Vec<Vector> = (0..8).map(|_| gaussian_vector(&mut rng, 6, 1.0)).collect();
    let tau = 0.07;
    let mut s = Matrix::zeros(8, 8);
    for i in 0..8 {
        for j in 0..8 {
            s[(i, j)] = e[i].dot(&t[j]) / (e[i].norm() * t[j].norm()) / tau;
        }
    }
    let mut want = 0.0;
    for i in 0..8 {
        let denom: f64 = (0..8).map(|j| s[(i, j)].exp()).sum();
        want -= (s[(i, i)].exp() / denom).ln();
    }
    want /= 8.0;
    assert!((loss_cdistill(&e, &t, tau).unwrap() - want).abs() <= 1e-10);
}

fn decision(weights: Vec<f64>) -> RoutingDecision {
    let n = weights.len();
    RoutingDecision {
        num_concepts: n,
        candidates: (0..n).collect(),
        scores: vec![0.0; n],
        logits: weights.iter().map(|w| w.ln().max(-50.0)).collect(),
        weights,
    }
}

#[test]
fn sparse_loss_cases() {
    assert_eq!(loss_sparse(&[], SparseForm::Weights), 0.0);
    assert_eq!(loss_sparse(&[RoutingDecision::empty(3)], SparseForm::Weights), 0.0);
    let ds = vec![decision(vec![0.25, 0.75]), RoutingDecision::single(2, 1)];
    assert!((loss_sparse(&ds, SparseForm::Weights) - 1.0).abs() <= 1e-15);
    let mixed = vec![decision(vec![0.25, 0.75]), RoutingDecision::empty(2), decision(vec![0.5, 0.5])];
    let want = (0.25 + 0.75 + 0.0 + 0.5 + 0.5) / 3.0;
    assert!((loss_sparse(&mixed, SparseForm::Weights) - want).abs() <= 1e-15);
}

fn world() -> WorldModel {
    WorldModel::new(WorldConfig::default()).unwrap()
}

fn shape() -> ProblemShape {
    ProblemShape {
        rank: 4,
        bottleneck: 4,
        modules: 3,
        batch_edit: 3,
        batch_replay: 4,
    }
}

#[test]
fn zero_lambdas_leave_only_task() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = random_problem(&world(), shape(), &zero_weights(), &mut rng).unwrap();
    let (b, _) = objective(&p.batch, &p.dsams, &p.bases, &p.head, &zero_weights(), false).unwrap();
    assert_eq!(b.total, b.task);
}

#[test]
fn breakdown_recombines_with_table_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = LossWeights::default();
    assert_eq!((w.lambda_align, w.lambda_distill, w.lambda_sparse), (0.5, 1.0, 0.01));
    let p = random_problem(&world(), shape(), &w, &mut rng).unwrap();
    let (b, _) = objective(&p.batch, &p.dsams, &p.bases, &p.head, &w, false).unwrap();
    let want = b.task + 0.5 * b.align + 1.0 * b.cdistill + 0.01 * b.sparse;
    assert!((b.total - want).abs() <= 1e-12);
    assert_eq!(LossBreakdown::combine(b.task, b.align, b.cdistill, b.sparse, &w), b);
}

#[test]
fn noop_modules_give_identity_distillation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut p = random_problem(&world(), shape(), &LossWeights::default(), &mut rng).unwrap();
    for (k, d) in p.dsams.iter_mut() {
        *d = DsamParams::new_noop(*k, &p.bases[k], 4, true, &mut rng).unwrap();
    }
    let (b, _) = objective(&p.batch, &p.dsams, &p.bases, &p.head, &LossWeights::default(), false).unwrap();
    let outs: Vec<Vector> = p.batch.replay.iter().map(|r| r.teacher.clone()).collect();
    assert_eq!(b.cdistill, loss_cdistill(&outs, &outs, 0.07).unwrap());
    assert!(b.sparse >= 0.0);
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = GradcheckConfig::default();
    for _ in 0..3 {
        let p = random_problem(&world(), shape(), &LossWeights::default(), &mut rng).unwrap();
        let r = check_gradients(&p, &cfg, &mut rng, None).unwrap();
        assert!(r.passed(), "worst {}", r.worst());
    }
}

#[test]
fn corrupted_gradients_are_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = random_problem(&world(), shape(), &LossWeights::default(), &mut rng).unwrap();
    let r = check_gradients(&p, &GradcheckConfig::default(), &mut rng, Some(1e-2)).unwrap();
    assert!(!r.passed());
}

/// One concept, one edit sample.
fn tiny() -> (BatchInputs, BTreeMap<usize, DsamParams>, BTreeMap<usize, SubspaceBasis>, TaskHead) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 16;
    let basis = SubspaceBasis::from_rows(0, &random_orthonormal_rows(&mut rng, 4, d)).unwrap();
    let params = DsamParams::new_noop(0, &basis, 2, true, &mut rng).unwrap();
    let head = TaskHead::new(gaussian_matrix(&mut rng, 4, d, 1.0));
    let h = gaussian_vector(&mut rng, d, 1.0);
    let predicted = head.predict(&h).unwrap();
    let batch = BatchInputs {
        edit: vec![EditInput {
            fused: h.clone(),
            visual: h.clone(),
            text: h,
            target_class: (predicted + 1) % 4,
            decision: RoutingDecision::single(1, 0),
        }],
        replay: Vec::<ReplayInput>::new(),
    };
    (batch, BTreeMap::from([(0, params)]), BTreeMap::from([(0, basis)]), head)
}

#[test]
fn two_hundred_sgd_steps_cut_the_task_loss_by_ninety_percent() {
    let (batch, mut dsams, bases, head) = tiny();
    let w = zero_weights();
    let (first, _) = objective(&batch, &dsams, &bases, &head, &w, false).unwrap();
    for _ in 0..200 {
        let (_, grads) = objective(&batch, &dsams, &bases, &head, &w, true).unwrap();
        sgd_step(dsams.get_mut(&0).unwrap(), &grads[&0], 0.1, 0.0, None).unwrap();
    }
    let (last, _) = objective(&batch, &dsams, &bases, &head, &w, false).unwrap();
    assert!(last.task <= 0.1 * first.task, "{} -> {}", first.task, last.task);
}

proptest! {
    #[test]
    fn breakdown_invariant_holds(seed in 0u64..100, la in 0.0f64..2.0, ld in 0.0f64..2.0, ls in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = LossWeights { lambda_align: la, lambda_distill: ld, lambda_sparse: ls, ..LossWeights::default() };
        let p = random_problem(&world(), shape(), &w, &mut rng).unwrap();
        let (b, _) = objective(&p.batch, &p.dsams, &p.bases, &p.head, &w, false).unwrap();
        prop_assert!((b.total - (b.task + la * b.align + ld * b.cdistill + ls * b.sparse)).abs() <= 1e-12);
        prop_assert!(b.task >= 0.0 && b.align >= 0.0 && b.align <= 2.0 && b.cdistill >= 0.0);
    }
}
