use std::fs;

use dsca_core::checkpoint::{load_checkpoint, save_checkpoint};
use dsca_core::engine::{Engine, EngineConfig};
use dsca_core::experiment::{run_experiment, RunConfig};
use dsca_core::subspace::{mean_overlap, SubspaceBasis};
use dsca_core::world::{generate_stream, WorldConfig, WorldModel};

fn trained() -> (Engine, WorldModel) {
    let w = WorldModel::new(WorldConfig::default()).unwrap();
    let cfg = RunConfig {
        checkpoints: 0,
        ..RunConfig::default()
    };
    let (e, _) = run_experiment(&w, &EngineConfig::default(), &cfg, &mut |_, _| Ok(())).unwrap();
    (e, w)
}

#[test]
fn round_trip_preserves_state_and_future_steps() {
    let (mut e, w) = trained();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&e, &w, dir.path()).unwrap();
    let (mut l, lw) = load_checkpoint(dir.path()).unwrap();

    assert_eq!(lw.config(), w.config());
    assert_eq!(l.concepts(), e.concepts());
    assert_eq!(l.dsams(), e.dsams());
    assert_eq!(l.bases(), e.bases());
    assert_eq!(l.step(), e.step());
    assert_eq!(l.audit(), e.audit());

    let stream = generate_stream(&w, 4, 8, 77).unwrap();
    for s in &stream {
        assert_eq!(l.edit_inference(s).unwrap(), e.edit_inference(s).unwrap());
    }
    let a = e.train_step(&stream[..4], &stream[4..]).unwrap();
    let b = l.train_step(&stream[..4], &stream[4..]).unwrap();
    assert_eq!(a, b);
    assert_eq!(l.dsams(), e.dsams());
}

#[test]
fn overlap_recomputed_from_checkpoint_matches_the_engine() {
    let (e, w) = trained();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&e, &w, dir.path()).unwrap();
    let (l, _) = load_checkpoint(dir.path()).unwrap();
    let refs: Vec<&SubspaceBasis> = l.bases().values().collect();
    let rep = mean_overlap(&refs).unwrap();
    assert_eq!(rep.mean_overlap, e.overlap_report().unwrap().mean_overlap);
}

#[test]
fn parts_round_trip() {
    let (e, _) = trained();
    let back = Engine::from_parts(e.to_parts()).unwrap();
    assert_eq!(back.dsams(), e.dsams());
    assert_eq!(back.to_parts().rng, e.to_parts().rng);
}

#[test]
fn corrupt_or_foreign_checkpoints_are_rejected() {
    let (e, w) = trained();
    let other = WorldModel::new(WorldConfig {
        seed: 3,
        ..WorldConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(save_checkpoint(&e, &other, dir.path()).is_err());

    save_checkpoint(&e, &w, dir.path()).unwrap();
    let bin = dir.path().join("dsams.bin");
    let bytes = fs::read(&bin).unwrap();
    fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());

    let missing = tempfile::tempdir().unwrap();
    assert!(load_checkpoint(missing.path()).is_err());
}
