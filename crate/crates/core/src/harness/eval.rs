//! Closed-loop evaluation over an episode set.

use std::io::Write;

use mgmap_tensor::ParamStore;
use serde::Serialize;

use super::config::RunConfig;
use super::metrics::{
    aggregate, evaluate_episode, localization_iou, top_mask, waypoint_hit, Aggregate, EpisodeResult,
};
use crate::error::{Error, Result};
use crate::navigator::{NavPolicy, Navigator, OraclePolicy};
use crate::supervision::{coarse_localization_gt, GtMode};
use crate::training::{collect_rollout, sub_seed, Corpus, Rollout};

pub enum Agent<'a> {
    Oracle,
    Learned {
        nav: &'a Navigator,
        store: &'a ParamStore<f32>,
    },
}

impl Agent<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Agent::Oracle => "oracle",
            Agent::Learned { .. } => "policy",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub agent: String,
    pub seed: u64,
    pub metrics: Aggregate,
    pub config: serde_json::Value,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Runs `agent` on one episode and scores it. Localization IoU and waypoint
/// hits are measured against the soft coarse target at each head evaluation.
pub fn run_episode(
    run: &RunConfig,
    corpus: &Corpus,
    index: usize,
    agent: &Agent,
) -> Result<(EpisodeResult, Rollout)> {
    let sim = run.sim_params()?;
    let policy = run.policy_config()?;
    let spec = &policy.map;
    let ep = &corpus.episodes[index];
    let scene = corpus.scene(ep)?;
    let seed = sub_seed(run.seed()?, &[0xe7a1, index as u64]);
    let goal = scene.geodesic_field(ep.goal)?;
    let success = run.success_distance()?;
    let threshold = run.parsed("supervision.hard_threshold")?;
    match agent {
        Agent::Oracle => {
            let mut p = OraclePolicy::default();
            let r = collect_rollout(
                scene,
                ep,
                index,
                &sim,
                spec.cell,
                policy.replan_every,
                0.0,
                Some(&mut p),
                seed,
            )?;
            Ok((evaluate_episode(&r, &ep.episode_id, &goal, success), r))
        }
        Agent::Learned { nav, store } => {
            let mut p = NavPolicy::new(nav, store);
            let r = collect_rollout(
                scene,
                ep,
                index,
                &sim,
                spec.cell,
                policy.replan_every,
                0.0,
                Some(&mut p),
                seed,
            )?;
            let mut res = evaluate_episode(&r, &ep.episode_id, &goal, success);
            for (_, pose, h) in &p.heads {
                let gt = coarse_localization_gt(
                    &ep.path,
                    pose,
                    spec.m,
                    spec.m,
                    spec.cell,
                    GtMode::Soft,
                    threshold,
                )?;
                let target: Vec<f32> = gt.p.iter().map(|&v| v as f32).collect();
                res.iou.push(localization_iou(&h.p_loc, &target));
                res.waypoint_hits
                    .push(waypoint_hit(h.waypoint_local, spec, &top_mask(&target)));
            }
            res.sem_accuracy = p.sem_accuracy.clone();
            Ok((res, r))
        }
    }
}

/// Evaluates every episode of `corpus`, writes one JSON line per episode to
/// `per_episode` in episode-id order, and returns the aggregate report.
pub fn run_eval(
    run: &RunConfig,
    corpus: &Corpus,
    agent: &Agent,
    per_episode: Option<&mut dyn Write>,
) -> Result<Report> {
    let missing = corpus.missing_scenes();
    if !missing.is_empty() {
        return Err(Error::MissingScenes(missing));
    }
    run.validate()?;
    let mut results = Vec::with_capacity(corpus.episodes.len());
    for i in 0..corpus.episodes.len() {
        results.push(run_episode(run, corpus, i, agent)?.0);
    }
    results.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    if let Some(w) = per_episode {
        for r in &results {
            serde_json::to_writer(&mut *w, r).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
    }
    Ok(Report {
        agent: agent.name().into(),
        seed: run.seed()?,
        metrics: aggregate(&results),
        config: run.to_json(),
    })
}
