//! Weak-supervision targets and loss terms.

use mgmap_tensor::{Graph, Scalar, Var, PROB_FLOOR};

use crate::error::{Error, Result};
use crate::geom::{self, Point, Pose};
use crate::world::GeodesicField;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GtMode {
    Soft,
    Hard,
}

impl std::str::FromStr for GtMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(GtMode::Soft),
            "hard" => Ok(GtMode::Hard),
            _ => Err(Error::Config(format!("unknown gt mode `{s}` (soft, hard)"))),
        }
    }
}

pub const HARD_THRESHOLD: f64 = 0.72;

/// Coarse localization target over an egocentric `rows × cols` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseGt {
    pub rows: usize,
    pub cols: usize,
    pub mode: GtMode,
    /// Cell-center distance to the path.
    pub d: Vec<f64>,
    pub p_prime: Vec<f64>,
    pub p: Vec<f64>,
}

/// Agent-frame center of cell `(i, j)`: rows run forward to back, columns
/// left to right, and the agent sits at `(rows/2, cols/2)`.
pub fn cell_center(rows: usize, cols: usize, cell: f64, i: usize, j: usize) -> Point {
    Point::new(
        ((rows / 2) as f64 - i as f64) * cell,
        ((cols / 2) as f64 - j as f64) * cell,
    )
}

/// Distance-softmax target: `P′ = (d_max − d)/(d_max − d_min)`, `P = softmax(P′)`
/// (soft), or uniform over cells closer than `hard_threshold` (hard).
pub fn coarse_localization_gt(
    path: &[Point],
    pose: &Pose,
    rows: usize,
    cols: usize,
    cell: f64,
    mode: GtMode,
    hard_threshold: f64,
) -> Result<CoarseGt> {
    if path.is_empty() || rows == 0 || cols == 0 {
        return Err(Error::Domain(
            "coarse GT needs a path and a nonempty grid".into(),
        ));
    }
    let local: Vec<Point> = path.iter().map(|&p| pose.to_local(p)).collect();
    let mut d = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            d.push(geom::polyline_distance(
                cell_center(rows, cols, cell, i, j),
                &local,
            ));
        }
    }
    let n = d.len() as f64;
    let d_max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let d_min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let p_prime: Vec<f64> = if d_max > d_min {
        d.iter().map(|&x| (d_max - x) / (d_max - d_min)).collect()
    } else {
        vec![1.0; d.len()]
    };
    let p = match mode {
        GtMode::Soft if d_max > d_min => softmax(&p_prime),
        GtMode::Soft => vec![1.0 / n; d.len()],
        GtMode::Hard => {
            let k = d.iter().filter(|&&x| x < hard_threshold).count();
            if k == 0 {
                vec![1.0 / n; d.len()]
            } else {
                d.iter()
                    .map(|&x| {
                        if x < hard_threshold {
                            1.0 / k as f64
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        }
    };
    Ok(CoarseGt {
        rows,
        cols,
        mode,
        d,
        p_prime,
        p,
    })
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_normalized(name: &str, p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-5 || p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Domain(format!(
            "{name} is not a distribution (sum {s})"
        )));
    }
    Ok(())
}

/// `KL(P ‖ P̂) = Σ P·ln(P/P̂)` with `0·ln 0 = 0` and `P̂` floored.
pub fn localization_loss(p_hat: &[f64], p: &[f64]) -> Result<f64> {
    if p_hat.len() != p.len() {
        return Err(Error::Domain(format!(
            "grid sizes {} and {} differ",
            p_hat.len(),
            p.len()
        )));
    }
    check_normalized("predicted localization", p_hat)?;
    check_normalized("coarse GT", p)?;
    Ok(p.iter()
        .zip(p_hat)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(PROB_FLOOR)).ln())
        .sum())
}

/// Agent-frame waypoint: the first exit of the radius-`radius` disc around
/// the agent along the straight hop to the nearest path point followed by
/// the rest of the path; the goal when the whole curve stays inside.
pub fn waypoint_gt(pose: &Pose, path: &[Point], radius: f64) -> Point {
    let a = pose.position();
    let proj = geom::project_polyline(a, path);
    let mut curve = vec![a, proj.point];
    curve.extend_from_slice(&path[(proj.segment + 1).min(path.len())..]);
    let goal = *path.last().unwrap();
    for w in curve.windows(2) {
        let (p, q) = (w[0], w[1]);
        if q.dist(a) <= radius {
            continue;
        }
        let d = q.sub(p);
        let f = p.sub(a);
        let (qa, qb, qc) = (d.dot(d), 2.0 * f.dot(d), f.dot(f) - radius * radius);
        let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
        let t = ((-qb + disc.sqrt()) / (2.0 * qa)).clamp(0.0, 1.0);
        return pose.to_local(p.add(d.scale(t)));
    }
    pose.to_local(goal)
}

/// Completeness `1 − g(pose)/g(start)` that holds its last value while the
/// agent stands where the goal field is undefined.
#[derive(Clone, Debug)]
pub struct ProgressTracker {
    pub total: f64,
    pub last: f64,
    pub frozen_steps: usize,
}

impl ProgressTracker {
    pub fn new(goal_field: &GeodesicField, start: Point) -> Result<Self> {
        let total = goal_field.at(start);
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::Domain(format!(
                "start-to-goal geodesic distance {total} is unusable"
            )));
        }
        Ok(ProgressTracker {
            total,
            last: 0.0,
            frozen_steps: 0,
        })
    }

    /// Progress at `p`, and whether it was frozen.
    pub fn update(&mut self, goal_field: &GeodesicField, p: Point) -> (f64, bool) {
        let g = goal_field.at(p);
        if !g.is_finite() {
            self.frozen_steps += 1;
            return (self.last, true);
        }
        self.last = (1.0 - g / self.total).clamp(0.0, 1.0);
        (self.last, false)
    }
}

/// Squared waypoint error and squared progress error.
pub fn regression_losses(w_hat: Point, w: Point, p_hat: f64, p: f64) -> (f64, f64) {
    (w_hat.sub(w).dot(w_hat.sub(w)), (p_hat - p) * (p_hat - p))
}

/// Graph form of [`regression_losses`] for `w_hat[2]` and `p_hat[1]`.
pub fn regression_losses_graph<T: Scalar>(
    g: &mut Graph<T>,
    w_hat: Var,
    w: Var,
    p_hat: Var,
    p: Var,
) -> Result<(Var, Var)> {
    let dw = g.sub(w_hat, w)?;
    let sq = g.mul(dw, dw)?;
    let lw = g.sum(sq)?;
    let dp = g.sub(p_hat, p)?;
    let sq = g.mul(dp, dp)?;
    let lp = g.sum(sq)?;
    Ok((lw, lp))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 10.0,
            beta: 10.0,
            gamma: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub l_s: f64,
    pub l_o: f64,
    pub l_p: f64,
    pub l_w: f64,
}

impl LossTerms {
    pub fn check(&self, at: &str) -> Result<()> {
        for (term, v) in [
            ("l_s", self.l_s),
            ("l_o", self.l_o),
            ("l_p", self.l_p),
            ("l_w", self.l_w),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term,
                    at: at.into(),
                });
            }
        }
        Ok(())
    }

    /// `l_s + α·l_o + β·l_p + γ·l_w`.
    pub fn total(&self, w: &LossWeights) -> Result<f64> {
        self.check("total loss")?;
        Ok(self.l_s + w.alpha * self.l_o + w.beta * self.l_p + w.gamma * self.l_w)
    }
}
