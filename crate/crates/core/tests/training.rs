use std::path::PathBuf;

use mgmap::training::{
    checkpoint_config, load_checkpoint, oracle_probability, sub_seed, MetricRecord,
};
use mgmap::world::{generate_scene, sample_episodes};
use mgmap::{Corpus, Error, RunConfig, Trainer};
use mgmap_tensor::TensorError;

fn tiny() -> RunConfig {
    let mut run = RunConfig::default();
    for kv in [
        "map.c=4",
        "map.hidden=2",
        "policy.embed=8",
        "policy.lstm=8",
        "policy.gru=16",
        "policy.loc_dim=8",
        "policy.ray_hidden=8",
        "policy.ray_out=8",
        "train.teacher_epochs=1",
        "train.trajectories=2",
        "train.epochs_per_iteration=1",
        "sim.budget=60",
    ] {
        run.apply(kv).unwrap();
    }
    run
}

fn corpus(run: &RunConfig) -> Corpus {
    let scene = generate_scene(77, &run.scene_params().unwrap()).unwrap();
    let eps = sample_episodes(&scene, 77, 2, &run.episode_params().unwrap()).unwrap();
    Corpus::new(vec![scene], eps).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mgmap-training-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn schedule_halves() {
    assert_eq!(oracle_probability(0), 1.0);
    assert_eq!(oracle_probability(1), 0.5);
    assert_eq!(oracle_probability(3), 0.125);
    assert_ne!(sub_seed(1, &[2]), sub_seed(1, &[3]));
    assert_eq!(sub_seed(1, &[2, 3]), sub_seed(1, &[2, 3]));
}

#[test]
fn missing_scene_is_reported() {
    let run = tiny();
    let c = corpus(&run);
    assert!(matches!(
        Corpus::new(Vec::new(), c.episodes),
        Err(Error::MissingScenes(_))
    ));
}

#[test]
fn teacher_forcing_logs_every_head_evaluation() {
    let run = tiny();
    let c = corpus(&run);
    let mut t = Trainer::new(&run).unwrap();
    let mut buf = Vec::new();
    t.train_teacher_forcing(&c).unwrap();
    let ticks: usize = t.shards[0]
        .iter()
        .flat_map(|r| &r.steps)
        .filter(|s| s.tick)
        .count();
    assert_eq!(t.log.len(), ticks);
    assert!(t.shards[0]
        .iter()
        .all(|r| r.oracle_steps() == r.steps.len()));
    for (k, m) in t.log.iter().enumerate() {
        assert_eq!(m.step, k);
        let total = m.l_s + 10.0 * (m.l_o + m.l_p + m.l_w);
        assert!((total - m.total).abs() < 1e-9);
    }
    serde_json::to_writer(&mut buf, &t.log[0]).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(
        keys,
        ["L", "epoch", "iter", "l_o", "l_p", "l_s", "l_w", "step"]
    );
    let back: MetricRecord = serde_json::from_slice(&buf).unwrap();
    assert_eq!(back, t.log[0]);
}

#[test]
fn dagger_grows_the_dataset() {
    let run = tiny();
    let c = corpus(&run);
    let mut t = Trainer::new(&run).unwrap();
    t.train_teacher_forcing(&c).unwrap();
    assert_eq!(t.dataset_size(), 2);
    t.dagger_iteration(&c, 1).unwrap();
    assert_eq!(t.dataset_size(), 4);
    assert!(t.log.iter().any(|m| m.iter == 1));
    assert!(matches!(t.dagger_iteration(&c, 0), Err(Error::Usage(_))));
}

#[test]
fn checkpoint_round_trip_and_checks() {
    let run = tiny();
    let c = corpus(&run);
    let mut t = Trainer::new(&run).unwrap();
    t.train_teacher_forcing(&c).unwrap();
    let path = scratch("ck.mgt");
    t.save(&path).unwrap();

    let (_, store) = load_checkpoint(&path, &run, false).unwrap();
    assert_eq!(store.to_named(), t.store.to_named());
    assert_eq!(checkpoint_config(&path).unwrap().to_text(), run.to_text());

    // Same shapes, different architecture flag.
    let mut cosine = run.clone();
    cosine.set("policy.cosine", "true").unwrap();
    assert!(matches!(
        load_checkpoint(&path, &cosine, false),
        Err(Error::HashMismatch { .. })
    ));
    assert!(load_checkpoint(&path, &cosine, true).is_ok());

    // Different shapes fail even when forced.
    let mut wider = run.clone();
    wider.set("policy.gru", "24").unwrap();
    match load_checkpoint(&path, &wider, true) {
        Err(Error::Tensor(TensorError::ParamShape { .. })) => {}
        other => panic!("expected a shape error, got {:?}", other.err()),
    }

    // Non-arch keys do not matter.
    let mut lr = run.clone();
    lr.set("train.lr", "0.01").unwrap();
    assert!(load_checkpoint(&path, &lr, false).is_ok());

    let bytes = std::fs::read(&path).unwrap();
    let cut = scratch("cut.mgt");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&cut, &run, false).is_err());
}

#[test]
fn resumed_trainer_continues_from_saved_parameters() {
    let run = tiny();
    let c = corpus(&run);
    let mut t = Trainer::new(&run).unwrap();
    t.train_teacher_forcing(&c).unwrap();
    let path = scratch("resume.mgt");
    t.save(&path).unwrap();
    let r = Trainer::from_checkpoint(&run, &path, false).unwrap();
    assert_eq!(r.store.to_named(), t.store.to_named());
}

#[test]
fn training_is_deterministic() {
    let run = tiny();
    let c = corpus(&run);
    let go = || {
        let mut t = Trainer::new(&run).unwrap();
        t.train_teacher_forcing(&c).unwrap();
        t.dagger_iteration(&c, 1).unwrap();
        (t.log, t.store.to_named())
    };
    assert_eq!(go(), go());
}
