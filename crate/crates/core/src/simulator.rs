//! Kinematic point agent, ray-scan sensing and the shortest-path oracle.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Point, Pose};
use crate::world::scene::{HitTarget, WALL_CATEGORY};
use crate::world::{GeodesicField, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
}

impl Action {
    pub const ALL: [Action; 4] = [
        Action::Forward,
        Action::TurnLeft,
        Action::TurnRight,
        Action::Stop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Action::Forward => "forward",
            Action::TurnLeft => "turn_left",
            Action::TurnRight => "turn_right",
            Action::Stop => "stop",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimParams {
    pub forward: f64,
    pub turn_deg: f64,
    pub n_rays: usize,
    pub fov_deg: f64,
    pub max_range: f64,
    pub noise_std: f64,
    pub budget: usize,
    /// Gap kept between the agent and a surface it runs into.
    pub margin: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            forward: 0.25,
            turn_deg: 15.0,
            n_rays: 64,
            fov_deg: 90.0,
            max_range: 6.0,
            noise_std: 0.02,
            budget: 500,
            margin: 0.01,
        }
    }
}

impl SimParams {
    pub fn turn(&self) -> f64 {
        self.turn_deg.to_radians()
    }

    /// Ray angles relative to the heading, left to right.
    pub fn ray_angles(&self) -> Vec<f64> {
        let half = self.fov_deg.to_radians() / 2.0;
        if self.n_rays == 1 {
            return vec![0.0];
        }
        let step = 2.0 * half / (self.n_rays - 1) as f64;
        (0..self.n_rays).map(|i| half - i as f64 * step).collect()
    }

    fn turns_per_circle(&self) -> Option<i64> {
        let n = 360.0 / self.turn_deg;
        (n.fract() == 0.0).then_some(n as i64)
    }
}

/// One ray scan.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub n_rays: usize,
    pub feat_dim: usize,
    /// Row-major `n_rays × feat_dim`.
    pub feat: Vec<f32>,
    pub depth: Vec<f64>,
    /// Hit category, `-1` when nothing lies within range.
    pub cat: Vec<i32>,
    /// Ray angles relative to the heading.
    pub angles: Vec<f64>,
}

impl Observation {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.feat[i * self.feat_dim..(i + 1) * self.feat_dim]
    }

    pub fn is_hit(&self, i: usize) -> bool {
        self.cat[i] >= 0
    }
}

#[derive(Clone, Debug)]
pub struct SimState<'a> {
    pub scene: &'a Scene,
    pub params: SimParams,
    pub pose: Pose,
    base_heading: f64,
    turns: i64,
    pub steps: usize,
    pub collisions: usize,
    pub done: bool,
    pub stopped: bool,
}

/// Outcome of one action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub collided: bool,
    pub moved: f64,
}

impl<'a> SimState<'a> {
    pub fn new(scene: &'a Scene, start: Pose, params: SimParams) -> Result<Self> {
        if scene.in_obstacle(start.position()) {
            return Err(Error::Domain(format!(
                "start ({:.3}, {:.3}) is not in free space",
                start.x, start.y
            )));
        }
        Ok(SimState {
            scene,
            params,
            pose: start,
            base_heading: start.heading,
            turns: 0,
            steps: 0,
            collisions: 0,
            done: false,
            stopped: false,
        })
    }

    pub fn step(&mut self, action: Action) -> Result<StepInfo> {
        if self.done {
            return Err(Error::Usage(format!(
                "action {} after the episode ended",
                action.name()
            )));
        }
        let mut info = StepInfo {
            collided: false,
            moved: 0.0,
        };
        match action {
            Action::Forward => {
                let (p, collided) =
                    self.translate(self.pose.position(), self.pose.heading, self.params.forward);
                info.moved = p.dist(self.pose.position());
                info.collided = collided;
                if collided {
                    self.collisions += 1;
                }
                self.pose = Pose {
                    x: p.x,
                    y: p.y,
                    heading: self.pose.heading,
                };
            }
            Action::TurnLeft => self.rotate(1),
            Action::TurnRight => self.rotate(-1),
            Action::Stop => {
                self.done = true;
                self.stopped = true;
            }
        }
        self.steps += 1;
        if self.steps >= self.params.budget {
            self.done = true;
        }
        Ok(info)
    }

    fn rotate(&mut self, dir: i64) {
        self.turns += dir;
        if let Some(n) = self.params.turns_per_circle() {
            self.turns = self.turns.rem_euclid(n);
        }
        self.pose.heading = if self.turns == 0 {
            self.base_heading
        } else {
            geom::wrap_angle(self.base_heading + self.turns as f64 * self.params.turn())
        };
    }

    /// Where a forward move of `dist` from `p` along `heading` ends, and
    /// whether it touched a surface.
    pub fn translate(&self, p: Point, heading: f64, dist: f64) -> (Point, bool) {
        let scene = self.scene;
        let margin = self.params.margin;
        let d = Point::unit(heading);
        let Some(hit) = scene.raycast(p, d, dist + margin) else {
            return (p.add(d.scale(dist)), false);
        };
        let go = (hit.t - margin).max(0.0);
        let contact = p.add(d.scale(go));
        let along = d.dot(hit.tangent);
        let slide_dir = if along >= 0.0 {
            hit.tangent
        } else {
            hit.tangent.scale(-1.0)
        };
        let slide = (dist - go) * along.abs();
        let mut end = contact;
        if slide > 1e-9 {
            let s = match scene.raycast(contact, slide_dir, slide + margin) {
                Some(h) => (h.t - margin).max(0.0),
                None => slide,
            };
            end = contact.add(slide_dir.scale(s));
        }
        if scene.in_obstacle(end) {
            end = if scene.in_obstacle(contact) {
                p
            } else {
                contact
            };
        }
        (end, true)
    }

    /// Ray scan from the current pose; noise is drawn from `rng`.
    pub fn observe(&self, rng: &mut impl Rng) -> Observation {
        observe(self.scene, &self.pose, &self.params, rng)
    }
}

pub fn observe(scene: &Scene, pose: &Pose, p: &SimParams, rng: &mut impl Rng) -> Observation {
    let f = scene.attr_dim;
    let angles = p.ray_angles();
    let mut obs = Observation {
        n_rays: angles.len(),
        feat_dim: f,
        feat: vec![0.0; angles.len() * f],
        depth: vec![p.max_range; angles.len()],
        cat: vec![-1; angles.len()],
        angles: angles.clone(),
    };
    let noise = Normal::new(0.0, p.noise_std.max(0.0)).expect("finite noise level");
    let wall = scene.wall_feature();
    let o = pose.position();
    for (i, a) in angles.iter().enumerate() {
        let Some(hit) = scene.raycast(o, Point::unit(pose.heading + a), p.max_range) else {
            continue;
        };
        obs.depth[i] = hit.t.max(1e-6);
        let (src, cat) = match hit.target {
            HitTarget::Wall(_) => (&wall, WALL_CATEGORY),
            HitTarget::Object(k) => (&scene.objects[k].attributes, scene.objects[k].category_id),
        };
        obs.cat[i] = cat as i32;
        for (dst, v) in obs.feat[i * f..(i + 1) * f].iter_mut().zip(src) {
            let n = if p.noise_std > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            *dst = (*v as f64 + n) as f32;
        }
    }
    obs
}

/// Geodesic pursuit of a reference path.
#[derive(Clone, Debug)]
pub struct Oracle {
    pub path: Vec<Point>,
    pub goal: Point,
    pub stop_radius: f64,
    pub advance_radius: f64,
    /// Distance below which the goal is approached by direct steering.
    pub approach_radius: f64,
    target: usize,
    fields: Vec<Option<GeodesicField>>,
}

impl Oracle {
    pub fn new(path: &[Point]) -> Result<Self> {
        let goal = *path
            .last()
            .ok_or_else(|| Error::Planning("oracle needs a nonempty path".into()))?;
        Ok(Oracle {
            path: path.to_vec(),
            goal,
            stop_radius: 0.25,
            advance_radius: 0.5,
            approach_radius: 1.0,
            target: 0,
            fields: vec![None; path.len()],
        })
    }

    pub fn target(&self) -> usize {
        self.target
    }

    fn field(&mut self, scene: &Scene, i: usize) -> Result<&GeodesicField> {
        if self.fields[i].is_none() {
            let f = scene
                .grid
                .field(&[self.path[i]])
                .map_err(|e| Error::Planning(format!("path vertex {i}: {e}")))?;
            self.fields[i] = Some(f);
        }
        Ok(self.fields[i].as_ref().unwrap())
    }

    /// Teacher action for the current state.
    pub fn act(&mut self, s: &SimState) -> Result<Action> {
        let pos = s.pose.position();
        if pos.dist(self.goal) <= self.stop_radius {
            return Ok(Action::Stop);
        }
        let last = self.path.len() - 1;
        let ahead = (geom::project_polyline(pos, &self.path).segment + 1).min(last);
        if self.path.len() > 1 {
            self.target = self.target.max(ahead);
        }
        while self.target < last && pos.dist(self.path[self.target]) <= self.advance_radius {
            self.target += 1;
        }
        let turn = s.params.turn();
        if self.target == last
            && pos.dist(self.goal) < self.approach_radius
            && s.scene.grid.line_of_sight(pos, self.goal)
        {
            let to = self.goal.sub(pos);
            return Ok(steer(to.y.atan2(to.x) - s.pose.heading, turn));
        }
        let target = self.target;
        let aim = self.lookahead(s.scene, pos, target)?;
        let to = aim.sub(pos);
        Ok(steer(to.y.atan2(to.x) - s.pose.heading, turn))
    }

    fn lookahead(&mut self, scene: &Scene, pos: Point, i: usize) -> Result<Point> {
        let vertex = self.path[i];
        let field = self.field(scene, i)?;
        lookahead(scene, field, pos, vertex).ok_or_else(|| {
            Error::Planning(format!(
                "path vertex {i} unreachable from ({:.3}, {:.3})",
                pos.x, pos.y
            ))
        })
    }
}

/// Farthest point within 0.75 m of arc along the steepest-descent walk on
/// `field` that is in line of sight; `source` once the walk reaches it.
/// `None` when `pos` has no reachable free cell nearby.
pub fn lookahead(scene: &Scene, field: &GeodesicField, pos: Point, source: Point) -> Option<Point> {
    const LOOKAHEAD: f64 = 0.75;
    let grid = &scene.grid;
    let start = match grid.cell_of(pos) {
        Some(c) if !grid.blocked[c] => Some(c),
        _ => grid.nearest_free(pos, (0.5 / grid.cell).ceil() as usize),
    };
    let start = start.filter(|&c| field.dist[c].is_finite())?;
    let walk = grid.descend(&field.dist, start);
    let from = grid.center(start);
    let mut aim = from;
    let mut arc = 0.0;
    for w in walk.windows(2) {
        let (a, b) = (grid.center(w[0]), grid.center(w[1]));
        arc += a.dist(b);
        if arc > LOOKAHEAD || !grid.line_of_sight(from, b) {
            break;
        }
        aim = b;
    }
    let end = *walk.last().unwrap();
    if (field.dist[end] == 0.0 && aim == grid.center(end)) || aim.dist(pos) < 1e-9 {
        aim = source;
    }
    Some(aim)
}

/// Forward when the heading error is within half a turn, otherwise turn
/// towards the target direction.
pub fn steer(err: f64, turn: f64) -> Action {
    let err = geom::wrap_angle(err);
    if err.abs() <= turn / 2.0 {
        Action::Forward
    } else if err > 0.0 {
        Action::TurnLeft
    } else {
        Action::TurnRight
    }
}

/// Per-step trace record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub pose: Pose,
    pub action: Action,
    pub collision: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene::Footprint;
    use crate::world::SceneObject;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn room() -> Scene {
        Scene::empty_room(10.0, 10.0, vec![])
    }

    #[test]
    fn forward_in_open_space() {
        let s = room();
        let mut st = SimState::new(&s, Pose::new(5.0, 5.0, 0.0), SimParams::default()).unwrap();
        st.step(Action::Forward).unwrap();
        assert!((st.pose.x - 5.25).abs() < 1e-12 && st.pose.y == 5.0);
        assert_eq!(st.collisions, 0);
    }

    #[test]
    fn full_turn_is_exact() {
        let s = room();
        let start = Pose::new(5.0, 5.0, 0.3);
        let mut st = SimState::new(&s, start, SimParams::default()).unwrap();
        for _ in 0..24 {
            st.step(Action::TurnLeft).unwrap();
        }
        assert_eq!(st.pose.heading, start.heading);
    }

    #[test]
    fn wall_truncates_forward() {
        let s = room();
        let mut st = SimState::new(&s, Pose::new(9.9, 5.0, 0.0), SimParams::default()).unwrap();
        let info = st.step(Action::Forward).unwrap();
        assert!(info.collided && st.collisions == 1);
        assert!(st.pose.x - 9.9 < 0.10 && st.pose.x < 10.0);
    }

    #[test]
    fn action_after_stop_is_rejected() {
        let s = room();
        let mut st = SimState::new(&s, Pose::new(5.0, 5.0, 0.0), SimParams::default()).unwrap();
        st.step(Action::Stop).unwrap();
        assert!(matches!(st.step(Action::Forward), Err(Error::Usage(_))));
    }

    #[test]
    fn disc_depth_on_center_ray() {
        let obj = SceneObject {
            center: Point::new(4.0, 5.0),
            footprint: Footprint::Disc { radius: 0.5 },
            category_id: 2,
            attributes: vec![0.5; 8],
        };
        let s = Scene::empty_room(10.0, 10.0, vec![obj]);
        let p = SimParams {
            n_rays: 63,
            noise_std: 0.0,
            ..SimParams::default()
        };
        let o = observe(
            &s,
            &Pose::new(1.0, 5.0, 0.0),
            &p,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!((o.depth[31] - 2.5).abs() < 1e-9);
        assert_eq!(o.cat[31], 2);
        assert!(o.angles[0] > 0.0 && o.angles[62] < 0.0);
    }

    #[test]
    fn oracle_stops_on_goal() {
        let s = room();
        let st = SimState::new(&s, Pose::new(5.0, 5.0, 0.0), SimParams::default()).unwrap();
        let mut o = Oracle::new(&[Point::new(5.0, 5.0)]).unwrap();
        assert_eq!(o.act(&st).unwrap(), Action::Stop);
        let mut o = Oracle::new(&[Point::new(5.0, 5.0), Point::new(7.0, 5.0)]).unwrap();
        assert_eq!(o.act(&st).unwrap(), Action::Forward);
    }
}
