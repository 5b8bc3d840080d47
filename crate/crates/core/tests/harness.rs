use mgmap::harness::config::KEYS;
use mgmap::harness::{run_eval, Agent, Grid};
use mgmap::world::{generate_scene, sample_episodes};
use mgmap::{Corpus, Error, RunConfig};

#[test]
fn config_text_parses_and_reports_lines() {
    let run = RunConfig::parse("# comment\nseed = 4\n\nmap.c = 8 # trailing\n").unwrap();
    assert_eq!(run.seed().unwrap(), 4);
    assert_eq!(run.get("map.c").unwrap(), "8");
    match RunConfig::parse("seed = 1\nmap.nope = 2\n") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
    assert!(matches!(
        RunConfig::parse("seed 1\n"),
        Err(Error::Parse { line: 1, .. })
    ));
    let mut run = RunConfig::default();
    assert!(matches!(run.apply("seed"), Err(Error::Usage(_))));
    assert!(matches!(run.set("nope", "1"), Err(Error::Config(_))));
}

#[test]
fn every_key_has_a_valid_default() {
    let run = RunConfig::default();
    for k in KEYS {
        assert_eq!(run.get(k.name).unwrap(), k.default, "{}", k.name);
    }
    run.validate().unwrap();
    assert_eq!(
        RunConfig::parse(&run.to_text()).unwrap().to_text(),
        run.to_text()
    );
    let mut bad = run.clone();
    bad.set("sim.forward", "-1").unwrap();
    assert!(bad.validate().is_err());
}

#[test]
fn grid_files_round_trip() {
    let g = Grid::from_chw(2, 3, 4, &(0..24).map(|v| v as f32).collect::<Vec<_>>()).unwrap();
    let path = std::env::temp_dir().join(format!("mgmap-grid-{}.mgg", std::process::id()));
    g.write(&path).unwrap();
    let back = Grid::read(&path).unwrap();
    let _ = std::fs::remove_file(&path);
    assert_eq!(back, g);
    assert_eq!(back.at(1, 2, 1), 12.0 + 6.0);
    assert_eq!(g.channel_csv(0).unwrap().lines().next().unwrap(), "0,1,2,3");
    let gray = g.channel_gray(1).unwrap();
    assert_eq!((gray[0], gray[11]), (0, 255));
    assert!(Grid::from_chw(2, 3, 4, &[0.0; 5]).is_err());
}

fn corpus(run: &RunConfig) -> Corpus {
    let mut scenes = Vec::new();
    let mut eps = Vec::new();
    for s in 0..2 {
        let scene = generate_scene(300 + s, &run.scene_params().unwrap()).unwrap();
        eps.extend(sample_episodes(&scene, s, 3, &run.episode_params().unwrap()).unwrap());
        scenes.push(scene);
    }
    Corpus::new(scenes, eps).unwrap()
}

#[test]
fn oracle_eval_writes_sorted_lines_and_a_report() {
    let run = RunConfig::default();
    let c = corpus(&run);
    let mut lines = Vec::new();
    let report = run_eval(&run, &c, &Agent::Oracle, Some(&mut lines)).unwrap();
    let text = String::from_utf8(lines).unwrap();
    let ids: Vec<String> = text
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["episode_id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    assert_eq!(ids.len(), 6);
    assert_eq!(report.metrics.sr, 1.0);
    assert_eq!(report.metrics.iou, None);
    let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(v["agent"], "oracle");
    assert_eq!(v["config"]["map.m"], "100");
    assert_eq!(
        report.to_json(),
        run_eval(&run, &c, &Agent::Oracle, None).unwrap().to_json()
    );
}

#[test]
fn eval_refuses_missing_scenes() {
    let run = RunConfig::default();
    let mut c = corpus(&run);
    let first = c.scenes.keys().next().unwrap().clone();
    c.scenes.remove(&first);
    assert!(
        matches!(run_eval(&run, &c, &Agent::Oracle, None), Err(Error::MissingScenes(v)) if v == vec![first])
    );
}
