use dsca_core::dsam::{effective_subspace_coords, gate, intervene, raw_update, sgd_step, DsamGrads, DsamParams, Tensor};
use dsca_core::linalg::{gaussian_matrix, gaussian_vector, random_orthonormal_rows, Matrix, Vector};
use dsca_core::subspace::SubspaceBasis;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const D: usize = 16;
const R: usize = 4;
const B: usize = 3;

fn setup(seed: u64) -> (DsamParams, SubspaceBasis, Vector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = SubspaceBasis::from_rows(0, &random_orthonormal_rows(&mut rng, R, D)).unwrap();
    let mut p = DsamParams::new_noop(0, &basis, B, true, &mut rng).unwrap();
    p.w = gaussian_matrix(&mut rng, R, D, 0.3);
    p.b = gaussian_vector(&mut rng, R, 1.0);
    p.gate_u = gaussian_matrix(&mut rng, D, B, 0.5);
    p.gate_v = gaussian_matrix(&mut rng, B, D, 0.5);
    p.gate_b = gaussian_vector(&mut rng, D, 0.5);
    let h = gaussian_vector(&mut rng, D, 1.0);
    (p, basis, h)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn gate_closed_open_and_uniform() {
    let (mut p, _, h) = setup(1);
    p.gate_u = Matrix::zeros(D, B);
    p.gate_b = Vector::zeros(D);
    assert!(gate(&p, &h).unwrap().iter().all(|&g| g == 0.5));
    p.gate_b = Vector::from_element(D, 50.0);
    assert!(gate(&p, &h).unwrap().iter().all(|&g| g >= 1.0 - 1e-20));
}

#[test]
fn gate_matches_dense_oracle() {
    let (p, _, h) = setup(2);
    let wg = &p.gate_u * &p.gate_v;
    let got = gate(&p, &h).unwrap();
    for i in 0..D {
        let mut z = p.gate_b[i];
        for j in 0..D {
            z += wg[(i, j)] * h[j];
        }
        assert!((got[i] - sigmoid(z)).abs() <= 1e-12);
    }
}

#[test]
fn raw_update_trivial_cases() {
    let (mut p, basis, h) = setup(3);
    p.w = basis.rows().clone();
    p.b = Vector::zeros(R);
    assert!(raw_update(&p, &basis, &h).unwrap().amax() <= 1e-15);
    let mut e1 = Vector::zeros(R);
    e1[0] = 1.0;
    p.b = e1;
    let got = raw_update(&p, &basis, &Vector::zeros(D)).unwrap();
    assert!((got - basis.rows().row(0).transpose()).amax() <= 1e-15);
}

#[test]
fn raw_update_matches_four_step_oracle() {
    let (p, basis, h) = setup(4);
    let projected = basis.rows() * &h;
    let transformed = &p.w * &h + &p.b;
    let residual = transformed - projected;
    let lifted = basis.rows().transpose() * residual;
    assert!((raw_update(&p, &basis, &h).unwrap() - lifted).amax() <= 1e-12);
}

#[test]
fn intervene_gate_cases() {
    let (mut p, basis, h) = setup(5);
    let raw = raw_update(&p, &basis, &h).unwrap();
    p.gate_u = Matrix::zeros(D, B);
    p.gate_b = Vector::from_element(D, -50.0);
    assert!(intervene(&p, &basis, &h).unwrap().norm() <= 1e-18 * raw.norm());
    assert!(effective_subspace_coords(&p, &basis, &h).unwrap().norm() <= 1e-18 * raw.norm());
    p.gate_b = Vector::zeros(D);
    assert_eq!(intervene(&p, &basis, &h).unwrap(), &raw * 0.5);
    let coords = effective_subspace_coords(&p, &basis, &h).unwrap();
    let residual = &p.w * &h + &p.b - basis.rows() * &h;
    assert!((coords - residual * 0.5).amax() <= 1e-12);
}

#[test]
fn intervene_is_gate_times_raw() {
    let (p, basis, h) = setup(6);
    let g = gate(&p, &h).unwrap();
    let raw = raw_update(&p, &basis, &h).unwrap();
    let got = intervene(&p, &basis, &h).unwrap();
    for i in 0..D {
        assert!((got[i] - g[i] * raw[i]).abs() <= 1e-12);
    }
    let coords = effective_subspace_coords(&p, &basis, &h).unwrap();
    assert!((coords - basis.rows() * got).amax() <= 1e-12);
}

#[test]
fn noop_parameters_are_exactly_zero() {
    let (_, basis, h) = setup(7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = DsamParams::new_noop(0, &basis, B, true, &mut rng).unwrap();
    assert!(intervene(&p, &basis, &h).unwrap().amax() <= 1e-15);
}

#[test]
fn wrong_dimension_is_rejected() {
    let (p, basis, _) = setup(8);
    assert!(intervene(&p, &basis, &Vector::zeros(D + 1)).is_err());
    assert!(gate(&p, &Vector::zeros(D - 1)).is_err());
}

#[test]
fn sgd_cases() {
    let (mut p, _, _) = setup(9);
    let before = p.clone();
    let zero = DsamGrads::zeros_like(&p);
    sgd_step(&mut p, &zero, 0.1, 0.0, None).unwrap();
    assert_eq!(p, before);

    let mut g = DsamGrads::zeros_like(&p);
    for t in Tensor::ALL {
        g.tensor_mut(t).copy_from_slice(p.tensor(t));
    }
    sgd_step(&mut p, &g, 1.0, 0.0, None).unwrap();
    for t in Tensor::ALL {
        assert!(p.tensor(t).iter().all(|&x| x == 0.0));
    }
}

#[test]
fn sgd_matches_elementwise_subtraction() {
    let (mut p, _, _) = setup(10);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let before = p.clone();
    let mut g = DsamGrads::zeros_like(&p);
    for t in Tensor::ALL {
        for x in g.tensor_mut(t) {
            *x = gaussian_vector(&mut rng, 1, 1.0)[0];
        }
    }
    sgd_step(&mut p, &g, 0.03, 0.0, None).unwrap();
    for t in Tensor::ALL {
        for ((a, b), d) in p.tensor(t).iter().zip(before.tensor(t)).zip(g.tensor(t)) {
            assert!((a - (b - 0.03 * d)).abs() <= 1e-15);
        }
    }
}

#[test]
fn non_finite_gradient_leaves_params_untouched() {
    let (mut p, _, _) = setup(11);
    let before = p.clone();
    let mut g = DsamGrads::zeros_like(&p);
    g.tensor_mut(Tensor::ALL[1])[0] = f64::NAN;
    assert!(sgd_step(&mut p, &g, 0.1, 0.0, None).is_err());
    assert_eq!(p, before);
}

proptest! {
    #[test]
    fn raw_update_lies_in_the_subspace(seed in 0u64..500) {
        let (p, basis, h) = setup(seed);
        let raw = raw_update(&p, &basis, &h).unwrap();
        prop_assert!((&raw - basis.project(&raw).unwrap()).norm() <= 1e-10 * (raw.norm() + 1.0));
    }

    #[test]
    fn gate_is_in_unit_interval(seed in 0u64..500) {
        let (p, _, h) = setup(seed);
        for g in gate(&p, &h).unwrap().iter() {
            prop_assert!((0.0..=1.0).contains(g));
        }
    }
}
