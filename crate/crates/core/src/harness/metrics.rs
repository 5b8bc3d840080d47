//! Episode metrics and localization diagnostics.

use serde::{Deserialize, Serialize};

use crate::geom::Point;
use crate::mapping::MapSpec;
use crate::simulator::TraceRecord;
use crate::training::Rollout;
use crate::world::GeodesicField;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: String,
    pub success: bool,
    pub oracle_success: bool,
    /// Summed executed translation (m).
    pub trajectory_length: f64,
    /// Geodesic distance from the final position to the goal (m).
    pub navigation_error: f64,
    pub spl: f64,
    pub steps: usize,
    pub collisions: usize,
    pub iou: Vec<f64>,
    pub waypoint_hits: Vec<bool>,
    /// Hallucination accuracy on observed cells, per head evaluation.
    pub sem_accuracy: Vec<f64>,
}

impl EpisodeResult {
    pub fn mean_iou(&self) -> Option<f64> {
        mean(&self.iou)
    }

    pub fn hit_rate(&self) -> Option<f64> {
        let v: Vec<f64> = self.waypoint_hits.iter().map(|&h| h as u8 as f64).collect();
        mean(&v)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// `s · d / max(d, d̄)`.
pub fn spl(success: bool, shortest: f64, taken: f64) -> f64 {
    if !success {
        return 0.0;
    }
    let denom = shortest.max(taken);
    if denom <= 0.0 {
        1.0
    } else {
        shortest / denom
    }
}

/// Success, oracle success, path length, error and SPL of a finished
/// rollout against the goal's geodesic field.
pub fn evaluate_episode(
    r: &Rollout,
    episode_id: &str,
    goal: &GeodesicField,
    success_distance: f64,
) -> EpisodeResult {
    let start = r.steps.first().map(|s| s.pose).unwrap_or(r.end);
    let shortest = goal.at(start.position());
    let tl: f64 = r.steps.iter().map(|s| s.moved).sum();
    let ne = goal.at(r.end.position());
    let success = r.stopped && ne <= success_distance;
    let oracle_success = r
        .steps
        .iter()
        .map(|s| s.pose.position())
        .chain(std::iter::once(r.end.position()))
        .any(|p| goal.at(p) <= success_distance);
    EpisodeResult {
        episode_id: episode_id.to_string(),
        success,
        oracle_success,
        trajectory_length: tl,
        navigation_error: ne,
        spl: spl(success, shortest, tl),
        steps: r.steps.len(),
        collisions: r.steps.iter().filter(|s| s.collision).count(),
        iou: Vec::new(),
        waypoint_hits: Vec::new(),
        sem_accuracy: Vec::new(),
    }
}

pub fn trace(r: &Rollout) -> Vec<TraceRecord> {
    r.steps
        .iter()
        .enumerate()
        .map(|(i, s)| TraceRecord {
            step: i,
            pose: s.pose,
            action: s.executed,
            collision: s.collision,
        })
        .collect()
}

/// Cells holding the top 10% of probability mass by rank: the
/// `⌈n/10⌉` most probable cells, ties broken by raster order.
pub fn top_mask(p: &[f32]) -> Vec<bool> {
    let n = p.len();
    let k = n.div_ceil(10).max(1).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    for &i in &idx[..k] {
        mask[i] = true;
    }
    mask
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let union = a.iter().zip(b).filter(|(&x, &y)| x || y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn localization_iou(p_hat: &[f32], p: &[f32]) -> f64 {
    mask_iou(&top_mask(p_hat), &top_mask(p))
}

/// Whether an agent-frame waypoint falls in a cell of `mask`; off-map is a miss.
pub fn waypoint_hit(w: Point, spec: &MapSpec, mask: &[bool]) -> bool {
    match spec.cell_at(w) {
        Some((i, j)) => mask[i * spec.m + j],
        None => false,
    }
}

/// Fraction of waypoints inside the top-10% cells of the matching target grid.
pub fn waypoint_hit_rate(pairs: &[(Point, &[f32])], spec: &MapSpec) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs
        .iter()
        .filter(|(w, p)| waypoint_hit(*w, spec, &top_mask(p)))
        .count();
    hits as f64 / pairs.len() as f64
}

/// Means over episodes; IoU and hit rate over the episodes that have samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub episodes: usize,
    pub sr: f64,
    pub os: f64,
    pub spl: f64,
    pub tl: f64,
    pub ne: f64,
    pub iou: Option<f64>,
    pub waypoint_hit_rate: Option<f64>,
    pub sem_accuracy: Option<f64>,
}

pub fn aggregate(results: &[EpisodeResult]) -> Aggregate {
    let n = results.len().max(1) as f64;
    let avg = |f: &dyn Fn(&EpisodeResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    let ious: Vec<f64> = results.iter().filter_map(EpisodeResult::mean_iou).collect();
    let hits: Vec<f64> = results.iter().filter_map(EpisodeResult::hit_rate).collect();
    let sem: Vec<f64> = results
        .iter()
        .filter_map(|r| mean(&r.sem_accuracy))
        .collect();
    Aggregate {
        episodes: results.len(),
        sr: avg(&|r| r.success as u8 as f64),
        os: avg(&|r| r.oracle_success as u8 as f64),
        spl: avg(&|r| r.spl),
        tl: avg(&|r| r.trajectory_length),
        ne: avg(&|r| r.navigation_error),
        iou: mean(&ious),
        waypoint_hit_rate: mean(&hits),
        sem_accuracy: mean(&sem),
    }
}
