//! Imitation training: rollout collection, teacher forcing, DAgger and
//! checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use mgmap_tensor::{checkpoint, AdamState, Graph, ParamStore, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point, Pose};
use crate::harness::config::RunConfig;
use crate::mapping::{
    apply_bn_updates, render_egocentric, semantic_loss, AllocentricBuffer, BnUpdate, MapSpec, Mode,
};
use crate::navigator::{NavPolicy, Navigator, Policy, PolicyConfig, TickInput, TickVars};
use crate::simulator::{Action, Observation, Oracle, SimParams, SimState};
use crate::supervision::{
    coarse_localization_gt, regression_losses_graph, waypoint_gt, GtMode, LossTerms, LossWeights,
    ProgressTracker,
};
use crate::world::{Episode, GeodesicField, Scene};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weights: LossWeights,
    pub teacher_epochs: usize,
    pub dagger_iterations: usize,
    pub trajectories: usize,
    pub epochs_per_iteration: usize,
    /// Episodes per optimizer update.
    pub batch_size: usize,
    /// Head evaluations per backpropagation window.
    pub tbptt: usize,
    pub clip: f64,
    pub checkpoint_every: usize,
    pub gt_mode: GtMode,
    pub hard_threshold: f64,
    pub waypoint_radius: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2.5e-4,
            weights: LossWeights::default(),
            teacher_epochs: 10,
            dagger_iterations: 4,
            trajectories: 200,
            epochs_per_iteration: 4,
            batch_size: 1,
            tbptt: 12,
            clip: 5.0,
            checkpoint_every: 1,
            gt_mode: GtMode::Soft,
            hard_threshold: crate::supervision::HARD_THRESHOLD,
            waypoint_radius: 3.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let positive = [
            ("lr", self.lr),
            ("clip", self.clip),
            ("hard_threshold", self.hard_threshold),
            ("waypoint_radius", self.waypoint_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("alpha", w.alpha), ("beta", w.beta), ("gamma", w.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be non-negative, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("trajectories", self.trajectories),
            ("batch_size", self.batch_size),
            ("tbptt", self.tbptt),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Probability of executing the oracle action in DAgger iteration `n`
/// (`n = 0` is teacher forcing).
pub fn oracle_probability(n: usize) -> f64 {
    0.5f64.powi(n as i32)
}

/// One simulator step of a rollout.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub pose: Pose,
    pub obs: Observation,
    pub oracle: Action,
    pub executed: Action,
    pub by_oracle: bool,
    /// Whether the heads are evaluated at this step.
    pub tick: bool,
    pub collision: bool,
    pub moved: f64,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    /// Index into the corpus episodes.
    pub episode: usize,
    pub steps: Vec<StepRecord>,
    pub end: Pose,
    pub stopped: bool,
    /// Set when the oracle could not label a state; the rollout ends there.
    pub aborted: Option<String>,
}

impl Rollout {
    pub fn oracle_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.by_oracle).count()
    }
}

/// Scenes by id plus the episodes that refer to them.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub scenes: BTreeMap<String, Scene>,
    pub episodes: Vec<Episode>,
}

impl Corpus {
    pub fn new(scenes: Vec<Scene>, episodes: Vec<Episode>) -> Result<Self> {
        let scenes: BTreeMap<String, Scene> =
            scenes.into_iter().map(|s| (s.id.clone(), s)).collect();
        let corpus = Corpus { scenes, episodes };
        let missing = corpus.missing_scenes();
        if !missing.is_empty() {
            return Err(Error::MissingScenes(missing));
        }
        Ok(corpus)
    }

    /// Scene ids referenced by episodes but not loaded, sorted and unique.
    pub fn missing_scenes(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .episodes
            .iter()
            .filter(|e| !self.scenes.contains_key(&e.scene_id))
            .map(|e| e.scene_id.clone())
            .collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn scene(&self, ep: &Episode) -> Result<&Scene> {
        self.scenes
            .get(&ep.scene_id)
            .ok_or_else(|| Error::MissingScenes(vec![ep.scene_id.clone()]))
    }
}

/// Per-rollout randomness derived from a run seed and labels.
pub fn sub_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = rng.gen::<u64>();
    for &p in parts {
        s = ChaCha8Rng::seed_from_u64(s ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15)).gen();
    }
    s
}

/// Runs one episode. Each step executes the oracle action with probability
/// `beta` and the policy's otherwise; the oracle label is always stored.
/// With `beta ≥ 1` the policy is never consulted.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollout(
    scene: &Scene,
    episode: &Episode,
    index: usize,
    sim: &SimParams,
    map_cell: f64,
    replan_every: usize,
    beta: f64,
    mut policy: Option<&mut dyn Policy>,
    seed: u64,
) -> Result<Rollout> {
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    let mut coin = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c01e);
    let mut state = SimState::new(scene, episode.start, sim.clone())?;
    let mut oracle = Oracle::new(&episode.path)?;
    let mut buf = AllocentricBuffer::new(&scene.bounds, map_cell, scene.attr_dim);
    let teacher = beta >= 1.0;
    if !teacher {
        match policy.as_deref_mut() {
            Some(p) => p.begin(episode)?,
            None => {
                return Err(Error::Usage(
                    "a policy is needed unless every action is the oracle's".into(),
                ))
            }
        }
    }
    let mut steps = Vec::new();
    let mut aborted = None;
    while !state.done {
        let obs = state.observe(&mut noise);
        buf.project(&state.pose, &obs)?;
        let tick = state.steps % replan_every.max(1) == 0;
        let label = match oracle.act(&state) {
            Ok(a) => a,
            Err(e) => {
                aborted = Some(e.to_string());
                break;
            }
        };
        let by_oracle = teacher || coin.gen::<f64>() < beta;
        let executed = match policy.as_deref_mut() {
            Some(p) if !teacher => {
                let a = p.act(&state, &obs, &buf)?;
                if by_oracle {
                    label
                } else {
                    a
                }
            }
            _ => label,
        };
        let pose = state.pose;
        let info = state.step(executed)?;
        steps.push(StepRecord {
            pose,
            obs,
            oracle: label,
            executed,
            by_oracle,
            tick,
            collision: info.collided,
            moved: info.moved,
        });
    }
    Ok(Rollout {
        episode: index,
        steps,
        end: state.pose,
        stopped: state.stopped,
        aborted,
    })
}

/// One logged head evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: usize,
    pub epoch: usize,
    pub step: usize,
    pub l_s: f64,
    pub l_o: f64,
    pub l_w: f64,
    pub l_p: f64,
    #[serde(rename = "L")]
    pub total: f64,
}

/// Parameters, optimizer and aggregated data of one training run.
pub struct Trainer {
    pub run: RunConfig,
    pub cfg: TrainConfig,
    pub sim: SimParams,
    pub nav: Navigator,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Shard 0 holds the teacher-forcing rollouts, shard `n` those of DAgger iteration `n`.
    pub shards: Vec<Vec<Rollout>>,
    pub log: Vec<MetricRecord>,
    pub metrics: Option<Box<dyn Write>>,
    ticks: usize,
    pending: usize,
    goal_fields: HashMap<usize, GeodesicField>,
}

impl Trainer {
    pub fn new(run: &RunConfig) -> Result<Self> {
        let cfg = run.train_config()?;
        let policy = run.policy_config()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[0x1417]));
        let nav = Navigator::register(&mut store, &policy, &mut rng)?;
        Ok(Trainer {
            run: run.clone(),
            sim: run.sim_params()?,
            adam: AdamState::new(cfg.lr),
            cfg,
            nav,
            store,
            shards: Vec::new(),
            log: Vec::new(),
            metrics: None,
            ticks: 0,
            pending: 0,
            goal_fields: HashMap::new(),
        })
    }

    /// Resumes from a checkpoint written with a compatible configuration.
    pub fn from_checkpoint(run: &RunConfig, path: &Path, force: bool) -> Result<Self> {
        let mut t = Trainer::new(run)?;
        let (_, store) = load_checkpoint(path, run, force)?;
        t.store = store;
        Ok(t)
    }

    fn collect(&self, corpus: &Corpus, n: usize, indices: &[usize]) -> Result<Vec<Rollout>> {
        let beta = oracle_probability(n);
        let map_cell = self.nav.cfg.map.cell;
        let every = self.nav.cfg.replan_every;
        let mut out = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            let ep = &corpus.episodes[i];
            let scene = corpus.scene(ep)?;
            let seed = sub_seed(self.cfg.seed, &[n as u64, k as u64]);
            let r = if n == 0 {
                collect_rollout(scene, ep, i, &self.sim, map_cell, every, beta, None, seed)?
            } else {
                let mut pol = NavPolicy::new(&self.nav, &self.store);
                collect_rollout(
                    scene,
                    ep,
                    i,
                    &self.sim,
                    map_cell,
                    every,
                    beta,
                    Some(&mut pol),
                    seed,
                )?
            };
            if let Some(msg) = &r.aborted {
                eprintln!("rollout {} ({}) cut short: {msg}", k, ep.episode_id);
            }
            out.push(r);
        }
        Ok(out)
    }

    /// Teacher forcing: one oracle rollout per episode, then
    /// `teacher_epochs` epochs over them.
    pub fn train_teacher_forcing(&mut self, corpus: &Corpus) -> Result<()> {
        if corpus.episodes.is_empty() {
            return Err(Error::Domain(
                "teacher forcing needs a nonempty dataset".into(),
            ));
        }
        self.collect_teacher_shard(corpus)?;
        for epoch in 0..self.cfg.teacher_epochs {
            self.train_epoch(corpus, 0, epoch)?;
        }
        Ok(())
    }

    /// Oracle rollouts over every episode, stored as shard 0.
    pub fn collect_teacher_shard(&mut self, corpus: &Corpus) -> Result<()> {
        let all: Vec<usize> = (0..corpus.episodes.len()).collect();
        let shard = self.collect(corpus, 0, &all)?;
        if self.shards.is_empty() {
            self.shards.push(shard);
        } else {
            self.shards[0] = shard;
        }
        Ok(())
    }

    /// DAgger iteration `n ≥ 1`: collect a shard with the mixed policy and
    /// train on the union of all shards.
    pub fn dagger_iteration(&mut self, corpus: &Corpus, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::Usage("DAgger iterations are numbered from 1".into()));
        }
        if corpus.episodes.is_empty() {
            return Err(Error::Domain("DAgger needs a nonempty dataset".into()));
        }
        let picks: Vec<usize> = (0..self.cfg.trajectories)
            .map(|k| k % corpus.episodes.len())
            .collect();
        let shard = self.collect(corpus, n, &picks)?;
        if shard.iter().all(|r| !r.stopped) {
            eprintln!("DAgger iteration {n}: no rollout called STOP");
        }
        while self.shards.len() < n {
            self.shards.push(Vec::new());
        }
        self.shards.push(shard);
        for epoch in 0..self.cfg.epochs_per_iteration {
            self.train_epoch(corpus, n, epoch)?;
        }
        Ok(())
    }

    pub fn dataset_size(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }

    /// One pass over every stored rollout in a seeded order.
    pub fn train_epoch(&mut self, corpus: &Corpus, iter: usize, epoch: usize) -> Result<()> {
        let mut order: Vec<(usize, usize)> = self
            .shards
            .iter()
            .enumerate()
            .flat_map(|(s, v)| (0..v.len()).map(move |k| (s, k)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(
            self.cfg.seed,
            &[0xe90c, iter as u64, epoch as u64],
        ));
        order.shuffle(&mut rng);
        let shards = std::mem::take(&mut self.shards);
        let res = order
            .iter()
            .try_for_each(|&(s, k)| self.train_rollout(corpus, &shards[s][k], iter, epoch));
        self.shards = shards;
        res?;
        self.flush_update();
        Ok(())
    }

    fn flush_update(&mut self) {
        if self.pending == 0 {
            return;
        }
        self.store.clip_grad_norm(self.cfg.clip);
        self.adam.step_store(&mut self.store);
        self.store.zero_grads();
        self.pending = 0;
    }

    fn goal_field(&mut self, corpus: &Corpus, i: usize) -> Result<GeodesicField> {
        if let Some(f) = self.goal_fields.get(&i) {
            return Ok(f.clone());
        }
        let ep = &corpus.episodes[i];
        let f = corpus.scene(ep)?.geodesic_field(ep.goal)?;
        self.goal_fields.insert(i, f.clone());
        Ok(f)
    }

    /// Replays a rollout, evaluating every loss at each head evaluation and
    /// backpropagating through windows of `tbptt` evaluations.
    pub fn train_rollout(
        &mut self,
        corpus: &Corpus,
        r: &Rollout,
        iter: usize,
        epoch: usize,
    ) -> Result<()> {
        let ep = &corpus.episodes[r.episode];
        let scene = corpus.scene(ep)?;
        let field = self.goal_field(corpus, r.episode)?;
        let mut tracker = ProgressTracker::new(&field, ep.start.position())?;
        let spec = self.nav.cfg.map.clone();
        let max_range = self.nav.cfg.max_range;
        let n_ticks = r.steps.iter().filter(|s| s.tick).count();
        if n_ticks == 0 {
            return Ok(());
        }
        let w = self.cfg.weights;
        let norm = 1.0 / n_ticks as f32;
        let mut buf = AllocentricBuffer::new(&scene.bounds, spec.cell, scene.attr_dim);
        let mut h1 = Tensor::zeros(vec![self.nav.cfg.gru]);
        let mut h2 = Tensor::zeros(vec![self.nav.cfg.gru]);
        let mut window: Option<Window> = None;
        let mut seen = 0;
        for (k, step) in r.steps.iter().enumerate() {
            buf.project(&step.pose, &step.obs)?;
            let (progress, _) = tracker.update(&field, step.pose.position());
            if !step.tick {
                continue;
            }
            seen += 1;
            let win = match window.as_mut() {
                Some(win) => win,
                None => window.insert(Window::open(
                    &self.nav,
                    &self.store,
                    &ep.instruction_tokens,
                    &h1,
                    &h2,
                )?),
            };
            let g = &mut win.g;
            let ego = render_egocentric(&buf, &step.pose, &spec);
            let input = TickInput::new(ego.feat_tensor(), &step.obs, max_range);
            let coarse = coarse_localization_gt(
                &ep.path,
                &step.pose,
                spec.m,
                spec.m,
                spec.cell,
                self.cfg.gt_mode,
                self.cfg.hard_threshold,
            )?;
            let targets = TickTargets {
                sem: ego.gt,
                p: coarse.p,
                waypoint: waypoint_gt(&step.pose, &ep.path, self.cfg.waypoint_radius),
                progress,
            };
            let (t, l) = tick_losses(
                &self.nav,
                g,
                &self.store,
                &input,
                win.instr,
                win.h1,
                win.h2,
                &targets,
                &mut win.updates,
            )?;
            let terms = LossTerms {
                l_s: g.value(l[0]).item() as f64,
                l_o: g.value(l[1]).item() as f64,
                l_p: g.value(l[2]).item() as f64,
                l_w: g.value(l[3]).item() as f64,
            };
            let at = format!(
                "iteration {iter}, epoch {epoch}, episode {}, step {k}",
                ep.episode_id
            );
            let total = terms.total(&w).map_err(|e| match e {
                Error::NonFinite { term, .. } => Error::NonFinite {
                    term,
                    at: at.clone(),
                },
                e => e,
            })?;
            let sum = weighted_total(g, l, &w)?;
            let scaled = g.scale(sum, norm)?;
            win.loss = Some(match win.loss {
                Some(acc) => g.add(acc, scaled)?,
                None => scaled,
            });
            win.h1 = t.s;
            win.h2 = t.h2;
            win.count += 1;
            self.record(MetricRecord {
                iter,
                epoch,
                step: self.ticks,
                l_s: terms.l_s,
                l_o: terms.l_o,
                l_w: terms.l_w,
                l_p: terms.l_p,
                total,
            })?;
            self.ticks += 1;
            if win.count == self.cfg.tbptt || seen == n_ticks {
                let win = window.take().unwrap();
                let (a, b) = win.close(&mut self.store)?;
                h1 = a;
                h2 = b;
            }
        }
        self.pending += 1;
        if self.pending >= self.cfg.batch_size {
            self.flush_update();
        }
        Ok(())
    }

    fn record(&mut self, m: MetricRecord) -> Result<()> {
        if let Some(w) = self.metrics.as_mut() {
            serde_json::to_writer(&mut *w, &m).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        self.log.push(m);
        Ok(())
    }

    /// Teacher forcing followed by every configured DAgger iteration.
    /// `after_iteration` sees the trainer after each iteration.
    pub fn run(
        &mut self,
        corpus: &Corpus,
        mut after_iteration: impl FnMut(&Trainer, usize) -> Result<()>,
    ) -> Result<()> {
        self.train_teacher_forcing(corpus)?;
        after_iteration(self, 0)?;
        for n in 1..=self.cfg.dagger_iterations {
            self.dagger_iteration(corpus, n)?;
            after_iteration(self, n)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.store, &self.run, path)
    }
}

/// Supervision for one head evaluation.
#[derive(Clone, Debug)]
pub struct TickTargets {
    /// Per-cell category of the egocentric map, `-1` unknown.
    pub sem: Vec<i32>,
    /// Coarse localization distribution over the map cells.
    pub p: Vec<f64>,
    /// Agent-frame waypoint.
    pub waypoint: Point,
    pub progress: f64,
}

/// Runs one head evaluation and returns its graph handles with the loss
/// terms `[l_s, l_o, l_p, l_w]`.
#[allow(clippy::too_many_arguments)]
pub fn tick_losses<T: Scalar>(
    nav: &Navigator,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    input: &TickInput<T>,
    instr: Var,
    h1: Var,
    h2: Var,
    targets: &TickTargets,
    updates: &mut Vec<BnUpdate<T>>,
) -> Result<(TickVars, [Var; 4])> {
    let t = nav.tick(g, store, input, instr, h1, h2, Mode::Train, updates)?;
    let (l_s, _) = semantic_loss(g, t.sem, &targets.sem)?;
    let p = g.constant(Tensor::from_vec(
        targets.p.iter().map(|&v| T::of(v)).collect(),
    ))?;
    let l_o = g.kl_divergence(p, t.p_loc)?;
    let wv = g.constant(Tensor::from_vec(vec![
        T::of(targets.waypoint.x),
        T::of(targets.waypoint.y),
    ]))?;
    let pv = g.constant(Tensor::from_vec(vec![T::of(targets.progress)]))?;
    let (l_w, l_p) = regression_losses_graph(g, t.waypoint, wv, t.progress, pv)?;
    Ok((t, [l_s, l_o, l_p, l_w]))
}

/// `l_s + α·l_o + β·l_p + γ·l_w` on the graph.
pub fn weighted_total<T: Scalar>(g: &mut Graph<T>, l: [Var; 4], w: &LossWeights) -> Result<Var> {
    let mut sum = l[0];
    for (v, c) in [(l[1], w.alpha), (l[2], w.beta), (l[3], w.gamma)] {
        let s = g.scale(v, T::of(c))?;
        sum = g.add(sum, s)?;
    }
    Ok(sum)
}

/// End-to-end finite-difference check of the whole policy in `f64`: two
/// consecutive head evaluations with all four losses, differentiated with
/// respect to `probes` randomly chosen parameter elements. Returns the worst
/// relative error.
pub fn policy_gradcheck(seed: u64, probes: usize) -> Result<f64> {
    let cfg = PolicyConfig {
        vocab: 12,
        embed: 4,
        lstm: 3,
        gru: 5,
        loc_dim: 3,
        ray_hidden: 4,
        ray_out: 3,
        n_rays: 4,
        map: MapSpec {
            m: 8,
            c_f: 3,
            c_s: 3,
            c: 4,
            hidden: 2,
            ..MapSpec::default()
        },
        ..PolicyConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let nav = Navigator::register(&mut store, &cfg, &mut rng)?;
    for e in store.entries_mut().iter_mut().filter(|e| e.trainable) {
        for v in e.tensor.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let cells = cfg.map.cells();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..2 {
        let mf = Tensor::new(
            vec![cfg.map.c_f, cfg.map.m, cfg.map.m],
            (0..cfg.map.c_f * cells)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
        )?;
        inputs.push(TickInput {
            mf,
            rays: Tensor::from_vec(
                (0..cfg.n_rays * cfg.map.c_f)
                    .map(|_| rng.gen_range(0.0..1.0))
                    .collect(),
            ),
            depth: Tensor::from_vec((0..cfg.n_rays).map(|_| rng.gen_range(0.1..1.0)).collect()),
        });
        let raw: Vec<f64> = (0..cells).map(|_| rng.gen_range(0.0..1.0)).collect();
        targets.push(TickTargets {
            sem: (0..cells)
                .map(|_| rng.gen_range(-1..cfg.map.c_s as i32))
                .collect(),
            p: crate::supervision::softmax(&raw),
            waypoint: Point::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
            progress: rng.gen_range(0.0..1.0),
        });
    }
    let tokens = [1, 5, 3, 7, 0];
    let w = LossWeights::default();
    let loss = |store: &ParamStore<f64>, backward: bool| -> Result<(f64, Option<Graph<f64>>)> {
        let mut g = Graph::new();
        let instr = nav.encode_instruction(&mut g, store, &tokens)?;
        let mut h1 = g.constant(Tensor::zeros(vec![cfg.gru]))?;
        let mut h2 = h1;
        let mut total = None;
        for (input, tg) in inputs.iter().zip(&targets) {
            let (t, l) = tick_losses(
                &nav,
                &mut g,
                store,
                input,
                instr,
                h1,
                h2,
                tg,
                &mut Vec::new(),
            )?;
            let s = weighted_total(&mut g, l, &w)?;
            total = Some(match total {
                Some(a) => g.add(a, s)?,
                None => s,
            });
            h1 = t.s;
            h2 = t.h2;
        }
        let total = total.expect("two ticks");
        let v = g.value(total).item();
        if backward {
            g.backward(total)?;
            return Ok((v, Some(g)));
        }
        Ok((v, None))
    };
    let (_, g) = loss(&store, true)?;
    let g = g.expect("graph kept");
    let mut analytic = ParamStore::clone(&store);
    analytic.zero_grads();
    analytic.accumulate_grads(&g);
    let slots: Vec<(usize, usize)> = store
        .iter()
        .enumerate()
        .filter(|(_, (_, e))| e.trainable)
        .flat_map(|(i, (_, e))| (0..e.tensor.len()).map(move |k| (i, k)))
        .collect();
    let picks = rand::seq::index::sample(&mut rng, slots.len(), probes.min(slots.len()));
    let h = 1e-5;
    let mut worst = 0.0f64;
    for p in picks.iter() {
        let (pi, k) = slots[p];
        let a = analytic.entries_mut()[pi]
            .tensor
            .grad
            .as_ref()
            .map_or(0.0, |g| g[k]);
        let mut plus = ParamStore::clone(&store);
        plus.entries_mut()[pi].tensor.data_mut()[k] += h;
        let mut minus = ParamStore::clone(&store);
        minus.entries_mut()[pi].tensor.data_mut()[k] -= h;
        let n = (loss(&plus, false)?.0 - loss(&minus, false)?.0) / (2.0 * h);
        worst = worst.max(mgmap_tensor::gradcheck::rel_err(a, n));
    }
    Ok(worst)
}

/// One truncated-backpropagation graph.
struct Window {
    g: Graph<f32>,
    instr: Var,
    h1: Var,
    h2: Var,
    loss: Option<Var>,
    count: usize,
    updates: Vec<BnUpdate<f32>>,
}

impl Window {
    fn open(
        nav: &Navigator,
        store: &ParamStore<f32>,
        tokens: &[usize],
        h1: &Tensor<f32>,
        h2: &Tensor<f32>,
    ) -> Result<Self> {
        let mut g = Graph::new();
        let instr = nav.encode_instruction(&mut g, store, tokens)?;
        let h1 = g.constant(h1.clone())?;
        let h2 = g.constant(h2.clone())?;
        Ok(Window {
            g,
            instr,
            h1,
            h2,
            loss: None,
            count: 0,
            updates: Vec::new(),
        })
    }

    /// Backpropagates, accumulates gradients and batch statistics, and
    /// returns the detached recurrent state.
    fn close(mut self, store: &mut ParamStore<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if let Some(loss) = self.loss {
            self.g.backward(loss)?;
            store.accumulate_grads(&self.g);
        }
        apply_bn_updates(store, &self.updates);
        let mut h1 = self.g.value(self.h1).clone();
        let mut h2 = self.g.value(self.h2).clone();
        h1.grad = None;
        h2.grad = None;
        Ok((h1, h2))
    }
}

const HASH_KEY: &str = "meta/config_hash";
const CONFIG_KEY: &str = "meta/config";

fn bytes_tensor(b: &[u8]) -> Tensor<f32> {
    Tensor::from_vec(b.iter().map(|&v| v as f32).collect())
}

fn tensor_bytes(t: &Tensor<f32>) -> Result<Vec<u8>> {
    t.data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::Domain(format!(
                    "checkpoint metadata holds non-byte value {v}"
                )))
            }
        })
        .collect()
}

/// Writes the parameters plus the architecture hash and resolved
/// configuration as MGT1.
pub fn save_checkpoint(store: &ParamStore<f32>, run: &RunConfig, path: &Path) -> Result<()> {
    let mut named = store.to_named();
    named.insert(HASH_KEY.into(), bytes_tensor(run.arch_hash().as_bytes()));
    named.insert(CONFIG_KEY.into(), bytes_tensor(run.to_text().as_bytes()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(checkpoint::write(path, &named)?)
}

/// The resolved configuration text stored in a checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<RunConfig> {
    let named = checkpoint::read(path)?;
    let t = named
        .get(CONFIG_KEY)
        .ok_or_else(|| Error::Domain(format!("{} has no `{CONFIG_KEY}` entry", path.display())))?;
    RunConfig::parse(&String::from_utf8_lossy(&tensor_bytes(t)?))
}

/// Builds the policy for `run` and fills it from `path`. Shapes are checked
/// first; a matching layout with a different architecture hash is refused
/// unless `force`.
pub fn load_checkpoint(
    path: &Path,
    run: &RunConfig,
    force: bool,
) -> Result<(Navigator, ParamStore<f32>)> {
    let named = checkpoint::read(path)?;
    let mut store = ParamStore::new();
    let nav = Navigator::register(
        &mut store,
        &run.policy_config()?,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    store.load_named(&named)?;
    let found = match named.get(HASH_KEY) {
        Some(t) => String::from_utf8_lossy(&tensor_bytes(t)?).into_owned(),
        None => String::new(),
    };
    let expected = run.arch_hash();
    if found != expected && !force {
        return Err(Error::HashMismatch { expected, found });
    }
    Ok((nav, store))
}
