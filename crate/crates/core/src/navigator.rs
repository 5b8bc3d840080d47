//! Instruction-conditioned waypoint policy with map localization, and the
//! local controller that turns waypoints into low-level actions.

use mgmap_tensor::nn::{self, GruParams, LstmParams};
use mgmap_tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{Point, Pose};
use crate::mapping::{
    cell_accuracy, render_egocentric, AllocentricBuffer, BnUpdate, MapNet, MapSpec, MapVariant,
    Mode,
};
use crate::simulator::{self, Action, Observation, SimState};
use crate::world::grid::GridFrame;
use crate::world::{Episode, GeodesicField, Scene};

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub vocab: usize,
    pub embed: usize,
    /// Hidden size of each LSTM direction.
    pub lstm: usize,
    pub gru: usize,
    /// Width of the localization projections `W_q`, `W_k`.
    pub loc_dim: usize,
    pub ray_hidden: usize,
    pub ray_out: usize,
    pub n_rays: usize,
    pub max_range: f64,
    pub map: MapSpec,
    pub variant: MapVariant,
    pub cosine: bool,
    pub lambda_p: f64,
    pub replan_every: usize,
    pub align_deg: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            vocab: 25,
            embed: 32,
            lstm: 32,
            gru: 128,
            loc_dim: 32,
            ray_hidden: 64,
            ray_out: 32,
            n_rays: 64,
            max_range: 6.0,
            map: MapSpec::default(),
            variant: MapVariant::Multi,
            cosine: false,
            lambda_p: 0.8,
            replan_every: 3,
            align_deg: 15.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Dense {
            w: store.add_glorot(format!("{name}/w"), &[out, input], input, out, rng),
            b: store.add_zeros(format!("{name}/b"), &[out]),
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        Ok(g.linear(x, w, Some(b))?)
    }
}

/// Parameter handles of the whole policy.
#[derive(Clone, Debug)]
pub struct Navigator {
    pub cfg: PolicyConfig,
    pub map: MapNet,
    embed: ParamId,
    lstm_fwd: LstmParams,
    lstm_bwd: LstmParams,
    map_reduce: [(ParamId, ParamId); 3],
    f_r: [Dense; 2],
    f_d: [Dense; 2],
    gru1: GruParams,
    att_q: ParamId,
    w_q: ParamId,
    w_k: ParamId,
    gru2: GruParams,
    head_w: Dense,
    head_p: Dense,
}

/// Per-tick inputs.
#[derive(Clone, Debug)]
pub struct TickInput<T> {
    /// Egocentric fine map `[c_f × m × m]`.
    pub mf: Tensor<T>,
    /// Ray features, `n_rays·c_f`.
    pub rays: Tensor<T>,
    /// Depths divided by the sensor range.
    pub depth: Tensor<T>,
}

impl<T: Scalar> TickInput<T> {
    pub fn new(mf: Tensor<T>, obs: &Observation, max_range: f64) -> Self {
        TickInput {
            mf,
            rays: Tensor::from_vec(obs.feat.iter().map(|&v| T::of(v as f64)).collect()),
            depth: Tensor::from_vec(obs.depth.iter().map(|&d| T::of(d / max_range)).collect()),
        }
    }
}

/// Graph handles produced by one head evaluation.
#[derive(Clone, Copy, Debug)]
pub struct TickVars {
    pub sem: Var,
    pub fused: Var,
    pub s: Var,
    pub i_bar: Var,
    /// Localization distribution over `m·m` cells.
    pub p_loc: Var,
    pub m_bar: Var,
    pub h2: Var,
    pub waypoint: Var,
    pub progress: Var,
}

impl Navigator {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &PolicyConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = cfg.map.c;
        let d = 2 * cfg.lstm;
        let map = MapNet::register(store, "policy/map", &cfg.map, rng)?;
        let embed = store.add_glorot(
            "policy/embed",
            &[cfg.vocab, cfg.embed],
            cfg.vocab,
            cfg.embed,
            rng,
        );
        let lstm_fwd = LstmParams::register(store, "policy/instr/fwd", cfg.embed, cfg.lstm, rng);
        let lstm_bwd = LstmParams::register(store, "policy/instr/bwd", cfg.embed, cfg.lstm, rng);
        let mut map_reduce = Vec::new();
        for l in 0..3 {
            let w = store.add_glorot(
                format!("policy/state/map{l}/w"),
                &[c, c, 3, 3],
                c * 9,
                c * 9,
                rng,
            );
            let b = store.add_zeros(format!("policy/state/map{l}/b"), &[c]);
            map_reduce.push((w, b));
        }
        let rays_in = cfg.n_rays * cfg.map.c_f;
        let f_r = [
            Dense::register(store, "policy/state/f_r0", rays_in, cfg.ray_hidden, rng),
            Dense::register(store, "policy/state/f_r1", cfg.ray_hidden, cfg.ray_out, rng),
        ];
        let f_d = [
            Dense::register(store, "policy/state/f_d0", cfg.n_rays, cfg.ray_hidden, rng),
            Dense::register(store, "policy/state/f_d1", cfg.ray_hidden, cfg.ray_out, rng),
        ];
        let gru1 =
            GruParams::register(store, "policy/state/gru", c + 2 * cfg.ray_out, cfg.gru, rng);
        let att_q = store.add_glorot("policy/attend/query", &[d, cfg.gru], cfg.gru, d, rng);
        let w_q = store.add_glorot("policy/loc/w_q", &[cfg.loc_dim, d], d, cfg.loc_dim, rng);
        let w_k = store.add_glorot("policy/loc/w_k", &[cfg.loc_dim, c], c, cfg.loc_dim, rng);
        let gru2 = GruParams::register(store, "policy/fuse/gru", c + d + cfg.gru, cfg.gru, rng);
        let head_w = Dense::register(store, "policy/head/waypoint", cfg.gru, 2, rng);
        let head_p = Dense::register(store, "policy/head/progress", cfg.gru, 1, rng);
        Ok(Navigator {
            cfg: cfg.clone(),
            map,
            embed,
            lstm_fwd,
            lstm_bwd,
            map_reduce: [map_reduce[0], map_reduce[1], map_reduce[2]],
            f_r,
            f_d,
            gru1,
            att_q,
            w_q,
            w_k,
            gru2,
            head_w,
            head_p,
        })
    }

    /// Per-token features `[L × 2·lstm]` of the non-padding tokens.
    pub fn encode_instruction<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: &[usize],
    ) -> Result<Var> {
        let ids: Vec<usize> = tokens.iter().copied().filter(|&t| t != 0).collect();
        if ids.is_empty() {
            return Err(Error::Domain(
                "instruction has no non-padding tokens".into(),
            ));
        }
        if let Some(t) = ids.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::Domain(format!(
                "token id {t} outside the vocabulary of {}",
                self.cfg.vocab
            )));
        }
        let table = g.param(store, self.embed)?;
        let x = g.embedding(table, &ids)?;
        let fwd = self.lstm_fwd.bind(g, store)?;
        let bwd = self.lstm_bwd.bind(g, store)?;
        Ok(nn::bilstm(g, x, &fwd, &bwd)?)
    }

    /// Three stride-2 convolutions and a spatial mean: `[c × m × m] → [c]`.
    pub fn reduce_map<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        m: Var,
    ) -> Result<Var> {
        let mut x = m;
        for &(w, b) in &self.map_reduce {
            let w = g.param(store, w)?;
            let b = g.param(store, b)?;
            x = g.conv2d(x, w, Some(b), 2, 1)?;
            x = g.relu(x)?;
        }
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
        Ok(g.mean_axis(flat, 1)?)
    }

    fn mlp<T: Scalar>(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        layers: &[Dense; 2],
        x: Var,
    ) -> Result<Var> {
        let h = layers[0].apply(g, store, x)?;
        let h = g.relu(h)?;
        let h = layers[1].apply(g, store, h)?;
        Ok(g.relu(h)?)
    }

    /// `s_t, h_t = GRU([M̃, f_R(R), f_D(D)], h_{t−1})` with `s_t = h_t`.
    pub fn state_encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        m_vec: Var,
        rays: Var,
        depth: Var,
        h: Var,
    ) -> Result<Var> {
        let r = Self::mlp(g, store, &self.f_r, rays)?;
        let d = Self::mlp(g, store, &self.f_d, depth)?;
        let x = g.concat(&[m_vec, r, d], 0)?;
        let p = self.gru1.bind(g, store)?;
        Ok(nn::gru_cell(g, x, h, &p)?)
    }

    /// Scaled dot-product attention of the projected state over token features.
    pub fn attend_instruction<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        s: Var,
        instr: Var,
    ) -> Result<Var> {
        let wq = g.param(store, self.att_q)?;
        let q = g.linear(s, wq, None)?;
        Ok(nn::scaled_dot_attention(g, q, instr, instr)?)
    }

    /// Softmax over cells of `⟨W_q ī, W_k M_cell⟩` (cosine when configured).
    pub fn predict_localization<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        i_bar: Var,
        m: Var,
    ) -> Result<Var> {
        let wq = g.param(store, self.w_q)?;
        let wk = g.param(store, self.w_k)?;
        localization_logits(g, i_bar, m, wq, wk, self.cfg.cosine).and_then(|l| Ok(g.softmax(l, 0)?))
    }

    /// `m̄ = Σ P̂_cell · M_cell`.
    pub fn pool_map<T: Scalar>(g: &mut Graph<T>, m: Var, p_loc: Var) -> Result<Var> {
        let s = g.shape(m).to_vec();
        let flat = g.reshape(m, &[s[0], s[1] * s[2]])?;
        let p = g.reshape(p_loc, &[s[1] * s[2], 1])?;
        let out = g.matmul(flat, p)?;
        Ok(g.reshape(out, &[s[0]])?)
    }

    pub fn fuse_state<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        m_bar: Var,
        i_bar: Var,
        s: Var,
        h2: Var,
    ) -> Result<Var> {
        let x = g.concat(&[m_bar, i_bar, s], 0)?;
        let p = self.gru2.bind(g, store)?;
        Ok(nn::gru_cell(g, x, h2, &p)?)
    }

    /// Waypoint `[2]` (agent frame, meters) and progress `[1]` in (0, 1).
    pub fn predict_heads<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        s2: Var,
    ) -> Result<(Var, Var)> {
        let w = self.head_w.apply(g, store, s2)?;
        let p = self.head_p.apply(g, store, s2)?;
        Ok((w, g.sigmoid(p)?))
    }

    /// One full head evaluation.
    #[allow(clippy::too_many_arguments)]
    pub fn tick<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: &TickInput<T>,
        instr: Var,
        h1: Var,
        h2: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<TickVars> {
        let mf = g.constant(input.mf.clone())?;
        let sem = self.map.hallucinate(g, store, mf, mode, updates)?;
        let fused = self.map.encode(g, store, mf, sem, self.cfg.variant)?;
        let m_vec = self.reduce_map(g, store, fused)?;
        let rays = g.constant(input.rays.clone())?;
        let depth = g.constant(input.depth.clone())?;
        let s = self.state_encode(g, store, m_vec, rays, depth, h1)?;
        let i_bar = self.attend_instruction(g, store, s, instr)?;
        let p_loc = self.predict_localization(g, store, i_bar, fused)?;
        let m_bar = Self::pool_map(g, fused, p_loc)?;
        let h2 = self.fuse_state(g, store, m_bar, i_bar, s, h2)?;
        let (waypoint, progress) = self.predict_heads(g, store, h2)?;
        Ok(TickVars {
            sem,
            fused,
            s,
            i_bar,
            p_loc,
            m_bar,
            h2,
            waypoint,
            progress,
        })
    }
}

/// Cell logits `[m·m]` of `⟨W_q ī, W_k M_cell⟩`, or of the cosine between
/// the two projections.
pub fn localization_logits<T: Scalar>(
    g: &mut Graph<T>,
    i_bar: Var,
    m: Var,
    wq: Var,
    wk: Var,
    cosine: bool,
) -> Result<Var> {
    let s = g.shape(m).to_vec();
    if s.len() != 3 || g.shape(wk).get(1) != Some(&s[0]) {
        return Err(Error::Domain(format!(
            "map {:?} does not match W_k {:?}",
            s,
            g.shape(wk)
        )));
    }
    let cells = s[1] * s[2];
    let flat = g.reshape(m, &[s[0], cells])?;
    let q = g.linear(i_bar, wq, None)?;
    let logits = if cosine {
        let k = g.matmul(wk, flat)?;
        let k = g.l2_normalize(k, 0)?;
        let q = g.l2_normalize(q, 0)?;
        let ld = g.shape(q)[0];
        let q = g.reshape(q, &[1, ld])?;
        g.matmul(q, k)?
    } else {
        let wkt = g.transpose(wk)?;
        let u = g.linear(q, wkt, None)?;
        let u = g.reshape(u, &[1, s[0]])?;
        g.matmul(u, flat)?
    };
    Ok(g.reshape(logits, &[cells])?)
}

/// Recurrent and planning state of a running policy.
#[derive(Clone, Debug)]
pub struct AgentState<T> {
    pub h1: Tensor<T>,
    pub h2: Tensor<T>,
    pub since_replan: usize,
    /// Current waypoint in world coordinates.
    pub waypoint: Option<Point>,
    pub progress: f64,
    field: Option<GeodesicField>,
}

/// What one head evaluation produced, read back from the graph.
#[derive(Clone, Debug)]
pub struct HeadEval {
    pub waypoint_local: Point,
    pub progress: f64,
    pub p_loc: Vec<f32>,
    pub sem: Vec<f32>,
    /// Fine map input `[c_f × m × m]`.
    pub mf: Vec<f32>,
    /// Fused map `[c × m × m]`.
    pub fused: Vec<f32>,
}

impl<T: Scalar> AgentState<T> {
    pub fn new(cfg: &PolicyConfig) -> Self {
        AgentState {
            h1: Tensor::zeros(vec![cfg.gru]),
            h2: Tensor::zeros(vec![cfg.gru]),
            since_replan: 0,
            waypoint: None,
            progress: 0.0,
            field: None,
        }
    }

    /// Runs the heads when a replan is due and returns them; updates the
    /// stored waypoint and progress.
    pub fn maybe_replan(
        &mut self,
        nav: &Navigator,
        store: &ParamStore<T>,
        tokens: &[usize],
        pose: &Pose,
        input: impl FnOnce() -> TickInput<T>,
    ) -> Result<Option<HeadEval>> {
        if self.since_replan != 0 {
            return Ok(None);
        }
        let mut g = Graph::new();
        let instr = nav.encode_instruction(&mut g, store, tokens)?;
        let h1 = g.constant(self.h1.clone())?;
        let h2 = g.constant(self.h2.clone())?;
        let input = input();
        let mf: Vec<f32> = input.mf.data().iter().map(|v| v.as_f64() as f32).collect();
        let t = nav.tick(
            &mut g,
            store,
            &input,
            instr,
            h1,
            h2,
            Mode::Eval,
            &mut Vec::new(),
        )?;
        self.h1 = g.value(t.s).clone();
        self.h2 = g.value(t.h2).clone();
        let w = g.value(t.waypoint).data();
        let local = Point::new(w[0].as_f64(), w[1].as_f64());
        self.progress = g.value(t.progress).item().as_f64();
        self.waypoint = Some(pose.to_world(local));
        self.field = None;
        Ok(Some(HeadEval {
            waypoint_local: local,
            progress: self.progress,
            p_loc: g
                .value(t.p_loc)
                .data()
                .iter()
                .map(|v| v.as_f64() as f32)
                .collect(),
            sem: g
                .value(t.sem)
                .data()
                .iter()
                .map(|v| v.as_f64() as f32)
                .collect(),
            mf,
            fused: g
                .value(t.fused)
                .data()
                .iter()
                .map(|v| v.as_f64() as f32)
                .collect(),
        }))
    }

    /// Low-level action for the current step; advances the replan counter.
    pub fn act(&mut self, nav: &Navigator, sim: &SimState) -> Action {
        let every = nav.cfg.replan_every.max(1);
        self.since_replan = (self.since_replan + 1) % every;
        if self.progress > nav.cfg.lambda_p {
            return Action::Stop;
        }
        let Some(wp) = self.waypoint else {
            return Action::Forward;
        };
        if self.field.is_none() {
            self.field = waypoint_field(sim.scene, wp);
        }
        controller_action(sim, wp, self.field.as_ref(), nav.cfg.align_deg.to_radians())
    }
}

/// Anything that picks an action each step from the simulator state, the
/// current observation and the map built so far.
pub trait Policy {
    fn begin(&mut self, episode: &Episode) -> Result<()>;
    fn act(&mut self, sim: &SimState, obs: &Observation, buf: &AllocentricBuffer)
        -> Result<Action>;
}

/// The learned policy driving the local controller.
pub struct NavPolicy<'a> {
    pub nav: &'a Navigator,
    pub store: &'a ParamStore<f32>,
    pub state: AgentState<f32>,
    tokens: Vec<usize>,
    /// Head evaluations of the current episode with the step and pose they ran at.
    pub heads: Vec<(usize, Pose, HeadEval)>,
    /// Keep the map tensors of each head evaluation (otherwise only `p_loc`).
    pub keep_maps: bool,
    /// Hallucination accuracy on observed cells at each head evaluation that saw any.
    pub sem_accuracy: Vec<f64>,
}

impl<'a> NavPolicy<'a> {
    pub fn new(nav: &'a Navigator, store: &'a ParamStore<f32>) -> Self {
        NavPolicy {
            nav,
            store,
            state: AgentState::new(&nav.cfg),
            tokens: Vec::new(),
            heads: Vec::new(),
            keep_maps: false,
            sem_accuracy: Vec::new(),
        }
    }
}

impl Policy for NavPolicy<'_> {
    fn begin(&mut self, episode: &Episode) -> Result<()> {
        self.state = AgentState::new(&self.nav.cfg);
        self.tokens = episode.instruction_tokens.clone();
        self.heads.clear();
        self.sem_accuracy.clear();
        Ok(())
    }

    fn act(
        &mut self,
        sim: &SimState,
        obs: &Observation,
        buf: &AllocentricBuffer,
    ) -> Result<Action> {
        let (nav, pose) = (self.nav, sim.pose);
        let mut gt = Vec::new();
        let head = self
            .state
            .maybe_replan(nav, self.store, &self.tokens, &pose, || {
                let view = render_egocentric(buf, &pose, &nav.cfg.map);
                gt = view.gt.clone();
                TickInput::new(view.feat_tensor(), obs, nav.cfg.max_range)
            })?;
        if let Some(mut h) = head {
            if let Some(acc) = cell_accuracy(&h.sem, nav.cfg.map.c_s, &gt) {
                self.sem_accuracy.push(acc);
            }
            if !self.keep_maps {
                h.sem = Vec::new();
                h.mf = Vec::new();
                h.fused = Vec::new();
            }
            self.heads.push((sim.steps, pose, h));
        }
        Ok(self.state.act(nav, sim))
    }
}

/// The privileged path follower as a [`Policy`].
#[derive(Default)]
pub struct OraclePolicy {
    oracle: Option<simulator::Oracle>,
}

impl Policy for OraclePolicy {
    fn begin(&mut self, episode: &Episode) -> Result<()> {
        self.oracle = Some(simulator::Oracle::new(&episode.path)?);
        Ok(())
    }

    fn act(
        &mut self,
        sim: &SimState,
        _obs: &Observation,
        _buf: &AllocentricBuffer,
    ) -> Result<Action> {
        match self.oracle.as_mut() {
            Some(o) => o.act(sim),
            None => Err(Error::Usage("oracle policy used before begin".into())),
        }
    }
}

/// Geodesic field from the free cell nearest to `wp` (searched up to 3 m).
pub fn waypoint_field(scene: &Scene, wp: Point) -> Option<GeodesicField> {
    let b = scene.bounds;
    let p = Point::new(
        wp.x.clamp(b.min.x, b.max.x - 1e-6),
        wp.y.clamp(b.min.y, b.max.y - 1e-6),
    );
    let cell = scene
        .grid
        .nearest_free(p, (3.0 / scene.grid.cell).ceil() as usize)?;
    Some(GeodesicField {
        grid: GridFrame::of(&scene.grid),
        dist: scene.grid.distances_from_cells(&[cell]),
    })
}

/// Turns towards the geodesic look-ahead point for `wp` when the heading
/// error exceeds `tolerance`, otherwise moves forward.
pub fn controller_action(
    sim: &SimState,
    wp: Point,
    field: Option<&GeodesicField>,
    tolerance: f64,
) -> Action {
    let pos = sim.pose.position();
    let aim = field
        .and_then(|f| simulator::lookahead(sim.scene, f, pos, wp))
        .filter(|a| a.dist(pos) > 1e-6)
        .unwrap_or(wp);
    let to = aim.sub(pos);
    if to.norm() < 1e-6 {
        return Action::Forward;
    }
    let err = crate::geom::wrap_angle(to.y.atan2(to.x) - sim.pose.heading);
    if err.abs() <= tolerance {
        Action::Forward
    } else if err > 0.0 {
        Action::TurnLeft
    } else {
        Action::TurnRight
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::SimParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> PolicyConfig {
        PolicyConfig {
            embed: 4,
            lstm: 3,
            gru: 6,
            loc_dim: 3,
            ray_hidden: 5,
            ray_out: 3,
            n_rays: 5,
            map: MapSpec {
                m: 12,
                c: 4,
                hidden: 2,
                ..MapSpec::default()
            },
            ..PolicyConfig::default()
        }
    }

    #[test]
    fn tick_shapes_and_ranges() {
        let cfg = small();
        let mut store = ParamStore::<f64>::new();
        let nav = Navigator::register(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut g = Graph::new();
        let instr = nav
            .encode_instruction(&mut g, &store, &[1, 2, 3, 0])
            .unwrap();
        assert_eq!(g.shape(instr), &[3, 6]);
        let input = TickInput {
            mf: Tensor::full(vec![8, 12, 12], 0.3),
            rays: Tensor::full(vec![40], 0.5),
            depth: Tensor::full(vec![5], 0.2),
        };
        let h = g.constant(Tensor::zeros(vec![6])).unwrap();
        let t = nav
            .tick(
                &mut g,
                &store,
                &input,
                instr,
                h,
                h,
                Mode::Train,
                &mut Vec::new(),
            )
            .unwrap();
        assert_eq!(g.shape(t.p_loc), &[144]);
        let s: f64 = g.value(t.p_loc).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        let p = g.value(t.progress).item();
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn stop_and_alignment_rules() {
        let cfg = small();
        let mut store = ParamStore::<f32>::new();
        let nav = Navigator::register(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let scene = Scene::empty_room(10.0, 10.0, vec![]);
        let sim = SimState::new(&scene, Pose::new(5.0, 5.0, 0.0), SimParams::default()).unwrap();
        let mut st = AgentState::<f32>::new(&cfg);
        st.progress = 0.9;
        assert_eq!(st.act(&nav, &sim), Action::Stop);
        st.progress = 0.1;
        st.waypoint = Some(Point::new(7.0, 5.0));
        assert_eq!(st.act(&nav, &sim), Action::Forward);
        st.waypoint = Some(Point::new(5.0, 7.0));
        st.field = None;
        assert_eq!(st.act(&nav, &sim), Action::TurnLeft);
    }
}
