use std::collections::BTreeMap;

use dsca_core::dsam::{intervene, DsamParams};
use dsca_core::linalg::{gaussian_matrix, gaussian_vector, random_orthonormal_rows, Vector};
use dsca_core::partition::{Concept, ConceptSet};
use dsca_core::router::{apply_edit, coarse_filter, route, RouterConfig, RoutingDecision};
use dsca_core::subspace::SubspaceBasis;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn concepts(fused: &[Vector], visual: &[Vector]) -> ConceptSet {
    ConceptSet::from_concepts(
        fused
            .iter()
            .zip(visual)
            .enumerate()
            .map(|(i, (f, v))| {
                let mut c = Concept::new(i, f.clone(), v.clone(), 1.0, 1.0);
                c.dsam_active = true;
                c
            })
            .collect(),
    )
}

fn cfg(tau_visual: f64, tau: f64) -> RouterConfig {
    RouterConfig {
        tau_visual,
        tau,
        single_stage: false,
    }
}

fn cos(a: &Vector, b: &Vector) -> f64 {
    let mut dot = 0.0;
    let (mut na, mut nb) = (0.0, 0.0);
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

#[test]
fn coarse_filter_trivial_cases() {
    let e = |i: usize| {
        let mut v = Vector::zeros(3);
        v[i] = 1.0;
        v
    };
    let set = concepts(&[e(0), e(1)], &[e(0), e(1)]);
    assert_eq!(coarse_filter(&e(1), &set, &cfg(0.9, 0.07)).unwrap(), vec![1]);
    assert!(coarse_filter(&e(2), &set, &cfg(0.0, 0.07)).unwrap().is_empty());
}

#[test]
fn coarse_filter_matches_cosine_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vis: Vec<Vector> = (0..20).map(|_| gaussian_vector(&mut rng, 6, 1.0)).collect();
    let set = concepts(&vis, &vis);
    for _ in 0..50 {
        let q = gaussian_vector(&mut rng, 6, 1.0);
        let want: Vec<usize> = (0..20).filter(|&i| cos(&q, &vis[i]) > 0.3).collect();
        assert_eq!(coarse_filter(&q, &set, &cfg(0.3, 0.07)).unwrap(), want);
    }
}

/// Three unit prototypes in the plane with cosine `s_k` to the query `e_0`.
fn scored_set(scores: &[f64]) -> ConceptSet {
    let protos: Vec<Vector> = scores
        .iter()
        .map(|&s| Vector::from_vec(vec![s, (1.0 - s * s).sqrt()]))
        .collect();
    concepts(&protos, &protos)
}

#[test]
fn route_matches_scalar_softmax() {
    let scores = [0.9, 0.5, 0.1];
    let set = scored_set(&scores);
    let d = route(&Vector::from_vec(vec![1.0, 0.0]), &[0, 1, 2], &set, &cfg(0.3, 0.07)).unwrap();
    let exps: Vec<f64> = scores.iter().map(|s| (s / 0.07).exp()).collect();
    let z: f64 = exps.iter().sum();
    for k in 0..3 {
        assert!((d.weights[k] - exps[k] / z).abs() <= 1e-12);
        assert!((d.scores[k] - scores[k]).abs() <= 1e-12);
    }
}

#[test]
fn tiny_temperature_approaches_argmax() {
    let set = scored_set(&[0.9, 0.5, 0.1]);
    let d = route(&Vector::from_vec(vec![1.0, 0.0]), &[0, 1, 2], &set, &cfg(0.3, 1e-4)).unwrap();
    assert_eq!(d.weights, vec![1.0, 0.0, 0.0]);
}

#[test]
fn apply_edit_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let basis = SubspaceBasis::from_rows(0, &random_orthonormal_rows(&mut rng, 3, 12)).unwrap();
    let p = DsamParams::new_noop(0, &basis, 2, true, &mut rng).unwrap();
    let dsams = BTreeMap::from([(0, p)]);
    let bases = BTreeMap::from([(0, basis)]);
    let h = gaussian_vector(&mut rng, 12, 1.0);
    assert_eq!(apply_edit(&h, &RoutingDecision::empty(1), &dsams, &bases).unwrap(), h);
    let out = apply_edit(&h, &RoutingDecision::single(1, 0), &dsams, &bases).unwrap();
    assert!((out - &h).amax() <= 1e-15);
}

#[test]
fn apply_edit_matches_term_by_term_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows = random_orthonormal_rows(&mut rng, 6, 12);
    let mut dsams = BTreeMap::new();
    let mut bases = BTreeMap::new();
    for k in 0..2 {
        let b = SubspaceBasis::from_rows(k, &rows.rows(3 * k, 3).into_owned()).unwrap();
        let mut p = DsamParams::new_noop(k, &b, 2, true, &mut rng).unwrap();
        p.w = gaussian_matrix(&mut rng, 3, 12, 0.5);
        p.b = gaussian_vector(&mut rng, 3, 1.0);
        p.gate_b = gaussian_vector(&mut rng, 12, 1.0);
        dsams.insert(k, p);
        bases.insert(k, b);
    }
    let decision = RoutingDecision {
        num_concepts: 2,
        candidates: vec![0, 1],
        scores: vec![0.0, 0.0],
        logits: vec![0.0, 0.0],
        weights: vec![0.3, 0.7],
    };
    let h = gaussian_vector(&mut rng, 12, 1.0);
    let mut want = h.clone();
    for k in 0..2 {
        let psi = intervene(&dsams[&k], &bases[&k], &h).unwrap();
        want += psi * decision.weights[k];
    }
    let got = apply_edit(&h, &decision, &dsams, &bases).unwrap();
    assert!((got - want).amax() <= 1e-12);
}

proptest! {
    #[test]
    fn weights_form_a_distribution(seed in 0u64..500, n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let protos: Vec<Vector> = (0..n).map(|_| gaussian_vector(&mut rng, 5, 1.0)).collect();
        let set = concepts(&protos, &protos);
        let ids: Vec<usize> = (0..n).collect();
        let d = route(&gaussian_vector(&mut rng, 5, 1.0), &ids, &set, &RouterConfig::default()).unwrap();
        prop_assert!((d.weight_sum() - 1.0).abs() <= 1e-12);
        prop_assert!(d.weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn routing_is_scale_invariant(seed in 0u64..500, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let protos: Vec<Vector> = (0..4).map(|_| gaussian_vector(&mut rng, 5, 1.0)).collect();
        let set = concepts(&protos, &protos);
        let h = gaussian_vector(&mut rng, 5, 1.0);
        let a = route(&h, &[0, 1, 2, 3], &set, &RouterConfig::default()).unwrap();
        let b = route(&(&h * scale), &[0, 1, 2, 3], &set, &RouterConfig::default()).unwrap();
        for k in 0..4 {
            prop_assert!((a.weights[k] - b.weights[k]).abs() <= 1e-9);
        }
        prop_assert_eq!(
            coarse_filter(&h, &set, &RouterConfig::default()).unwrap(),
            coarse_filter(&(&h * scale), &set, &RouterConfig::default()).unwrap()
        );
    }
}
