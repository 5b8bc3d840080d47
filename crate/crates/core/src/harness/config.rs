//! Flat dotted-key run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mapping::{MapSpec, MapVariant, Resample};
use crate::navigator::PolicyConfig;
use crate::simulator::SimParams;
use crate::supervision::{GtMode, LossWeights};
use crate::training::TrainConfig;
use crate::world::{EpisodeParams, SceneParams, Vocab};

/// One registered key. `arch` keys change parameter shapes or the forward
/// computation and enter the checkpoint hash.
#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub arch: bool,
    pub doc: &'static str,
}

const fn key(name: &'static str, default: &'static str, arch: bool, doc: &'static str) -> Key {
    Key {
        name,
        default,
        arch,
        doc,
    }
}

pub const KEYS: &[Key] = &[
    key(
        "seed",
        "0",
        false,
        "master seed for generation, collection and initialization",
    ),
    key("world.width", "12", false, "scene width (m)"),
    key("world.height", "10", false, "scene height (m)"),
    key("world.rooms", "3", false, "rooms per scene"),
    key("world.objects", "10", false, "objects per scene"),
    key(
        "world.ambiguity",
        "0.3",
        false,
        "fraction of objects placed as same-category look-alike pairs",
    ),
    key(
        "world.categories",
        "8",
        true,
        "object categories K, including the wall class",
    ),
    key("world.attr_dim", "8", true, "attribute feature width F"),
    key(
        "world.clearance",
        "0.15",
        false,
        "agent radius used for the occupancy grid (m)",
    ),
    key("world.grid_cell", "0.06", false, "occupancy grid cell (m)"),
    key(
        "world.category_preset",
        "desk",
        true,
        "category names: desk or cm2",
    ),
    key(
        "episodes.min_len",
        "5",
        false,
        "shortest accepted geodesic start-goal distance (m)",
    ),
    key(
        "episodes.max_len",
        "12",
        false,
        "longest accepted geodesic start-goal distance (m)",
    ),
    key(
        "episodes.landmark_radius",
        "1.5",
        false,
        "distance within which the path passes a landmark (m)",
    ),
    key(
        "episodes.max_pass_landmarks",
        "3",
        false,
        "landmarks mentioned before the goal object",
    ),
    key(
        "episodes.goal_radius",
        "1.3",
        false,
        "goal distance from the goal object (m)",
    ),
    key("sim.forward", "0.25", false, "forward step (m)"),
    key("sim.turn_deg", "15", false, "turn step (degrees)"),
    key("sim.n_rays", "64", true, "rays per observation"),
    key(
        "sim.fov_deg",
        "90",
        false,
        "horizontal field of view (degrees)",
    ),
    key("sim.max_range", "6", true, "sensor range (m)"),
    key(
        "sim.noise_std",
        "0.02",
        false,
        "feature noise standard deviation",
    ),
    key("sim.budget", "500", false, "step budget per episode"),
    key("map.m", "100", true, "egocentric map side (cells)"),
    key("map.cell", "0.12", false, "map cell (m)"),
    key("map.c", "32", true, "fused map channels"),
    key(
        "map.hidden",
        "8",
        true,
        "channels inside the hallucination network",
    ),
    key(
        "map.resample",
        "nearest",
        false,
        "egocentric resampling: nearest or bilinear",
    ),
    key(
        "map.variant",
        "multi",
        true,
        "map fed to the policy: multi, semantic or fine",
    ),
    key("policy.embed", "32", true, "token embedding width"),
    key(
        "policy.lstm",
        "32",
        true,
        "instruction LSTM width per direction",
    ),
    key("policy.gru", "128", true, "recurrent state width"),
    key(
        "policy.loc_dim",
        "32",
        true,
        "localization projection width",
    ),
    key(
        "policy.ray_hidden",
        "64",
        true,
        "hidden width of the ray encoders",
    ),
    key(
        "policy.ray_out",
        "32",
        true,
        "output width of the ray encoders",
    ),
    key(
        "policy.cosine",
        "false",
        true,
        "length-normalized localization logits",
    ),
    key(
        "policy.lambda_p",
        "0.8",
        false,
        "progress above which the agent stops",
    ),
    key(
        "policy.replan_every",
        "3",
        false,
        "steps between head evaluations",
    ),
    key(
        "policy.align_deg",
        "15",
        false,
        "heading tolerance of the local controller (degrees)",
    ),
    key(
        "supervision.gt_mode",
        "soft",
        false,
        "coarse localization target: soft or hard",
    ),
    key(
        "supervision.hard_threshold",
        "0.72",
        false,
        "path distance under which hard targets are on (m)",
    ),
    key(
        "supervision.waypoint_radius",
        "3",
        false,
        "radius of the waypoint target circle (m)",
    ),
    key("train.lr", "2.5e-4", false, "Adam learning rate"),
    key(
        "train.alpha",
        "10",
        false,
        "weight of the localization loss",
    ),
    key("train.beta", "10", false, "weight of the progress loss"),
    key("train.gamma", "10", false, "weight of the waypoint loss"),
    key(
        "train.teacher_epochs",
        "10",
        false,
        "teacher-forcing epochs",
    ),
    key("train.dagger_iterations", "4", false, "DAgger iterations"),
    key(
        "train.trajectories",
        "200",
        false,
        "rollouts collected per DAgger iteration",
    ),
    key(
        "train.epochs_per_iteration",
        "4",
        false,
        "epochs over all shards after each DAgger iteration",
    ),
    key(
        "train.batch_size",
        "1",
        false,
        "episodes per optimizer update",
    ),
    key(
        "train.tbptt",
        "12",
        false,
        "head evaluations per truncated backpropagation window",
    ),
    key("train.clip", "5", false, "global gradient norm limit"),
    key(
        "train.checkpoint_every",
        "1",
        false,
        "write a checkpoint every this many DAgger iterations",
    ),
    key(
        "eval.success_distance",
        "3",
        false,
        "geodesic success radius (m)",
    ),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .map(|k| (k.name.to_string(), k.default.to_string()))
                .collect(),
        }
    }
}

fn lookup(name: &str) -> Result<&'static Key> {
    KEYS.iter()
        .find(|k| k.name == name)
        .ok_or_else(|| Error::Config(format!("unknown key `{name}`")))
}

impl RunConfig {
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let k = lookup(name.trim())?;
        self.values
            .insert(k.name.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("expected key=value, got `{assignment}`")))?;
        self.set(k, v)
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            cfg.set(k, v).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, name: &str) -> Result<&str> {
        lookup(name)?;
        Ok(&self.values[name])
    }

    pub fn parsed<T: FromStr>(&self, name: &str) -> Result<T> {
        let raw = self.get(name)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("`{name}` has unusable value `{raw}`")))
    }

    fn positive(&self, name: &str) -> Result<f64> {
        let v: f64 = self.parsed(name)?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("`{name}` must be positive, got {v}")));
        }
        Ok(v)
    }

    fn count(&self, name: &str) -> Result<usize> {
        let v: usize = self.parsed(name)?;
        if v == 0 {
            return Err(Error::Config(format!("`{name}` must be at least 1")));
        }
        Ok(v)
    }

    pub fn seed(&self) -> Result<u64> {
        self.parsed("seed")
    }

    /// Resolved `key = value` text, one line per key in name order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.values
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect(),
        )
    }

    /// Hex SHA-256 over the architecture keys.
    pub fn arch_hash(&self) -> String {
        let mut h = Sha256::new();
        for k in KEYS.iter().filter(|k| k.arch) {
            h.update(format!("{}={}\n", k.name, self.values[k.name]).as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn scene_params(&self) -> Result<SceneParams> {
        Ok(SceneParams {
            width: self.positive("world.width")?,
            height: self.positive("world.height")?,
            rooms: self.count("world.rooms")?,
            objects: self.parsed("world.objects")?,
            ambiguity_fraction: self.parsed("world.ambiguity")?,
            categories: self.count("world.categories")?,
            attr_dim: self.count("world.attr_dim")?,
            clearance: self.positive("world.clearance")?,
            grid_cell: self.positive("world.grid_cell")?,
        })
    }

    pub fn episode_params(&self) -> Result<EpisodeParams> {
        Ok(EpisodeParams {
            min_len: self.positive("episodes.min_len")?,
            max_len: self.positive("episodes.max_len")?,
            landmark_radius: self.positive("episodes.landmark_radius")?,
            max_pass_landmarks: self.parsed("episodes.max_pass_landmarks")?,
            success_distance: self.positive("eval.success_distance")?,
            goal_radius: self.positive("episodes.goal_radius")?,
            category_preset: self.get("world.category_preset")?.to_string(),
        })
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let preset = self.get("world.category_preset")?;
        if preset != "desk" && preset != "cm2" {
            return Err(Error::Config(format!(
                "unknown category preset `{preset}` (desk, cm2)"
            )));
        }
        Ok(Vocab::for_categories(
            preset,
            self.count("world.categories")?,
        ))
    }

    pub fn sim_params(&self) -> Result<SimParams> {
        Ok(SimParams {
            forward: self.positive("sim.forward")?,
            turn_deg: self.positive("sim.turn_deg")?,
            n_rays: self.count("sim.n_rays")?,
            fov_deg: self.positive("sim.fov_deg")?,
            max_range: self.positive("sim.max_range")?,
            noise_std: self.parsed("sim.noise_std")?,
            budget: self.count("sim.budget")?,
            ..SimParams::default()
        })
    }

    pub fn map_spec(&self) -> Result<MapSpec> {
        Ok(MapSpec {
            m: self.count("map.m")?,
            cell: self.positive("map.cell")?,
            c_f: self.count("world.attr_dim")?,
            c_s: self.count("world.categories")?,
            c: self.count("map.c")?,
            hidden: self.count("map.hidden")?,
            resample: self.parsed::<String>("map.resample")?.parse::<Resample>()?,
        })
    }

    pub fn policy_config(&self) -> Result<PolicyConfig> {
        let sim = self.sim_params()?;
        Ok(PolicyConfig {
            vocab: self.vocab()?.len(),
            embed: self.count("policy.embed")?,
            lstm: self.count("policy.lstm")?,
            gru: self.count("policy.gru")?,
            loc_dim: self.count("policy.loc_dim")?,
            ray_hidden: self.count("policy.ray_hidden")?,
            ray_out: self.count("policy.ray_out")?,
            n_rays: sim.n_rays,
            max_range: sim.max_range,
            map: self.map_spec()?,
            variant: self.get("map.variant")?.parse::<MapVariant>()?,
            cosine: self.parsed("policy.cosine")?,
            lambda_p: self.positive("policy.lambda_p")?,
            replan_every: self.count("policy.replan_every")?,
            align_deg: self.positive("policy.align_deg")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.positive("train.lr")?,
            weights: LossWeights {
                alpha: self.parsed("train.alpha")?,
                beta: self.parsed("train.beta")?,
                gamma: self.parsed("train.gamma")?,
            },
            teacher_epochs: self.parsed("train.teacher_epochs")?,
            dagger_iterations: self.parsed("train.dagger_iterations")?,
            trajectories: self.count("train.trajectories")?,
            epochs_per_iteration: self.parsed("train.epochs_per_iteration")?,
            batch_size: self.count("train.batch_size")?,
            tbptt: self.count("train.tbptt")?,
            clip: self.positive("train.clip")?,
            checkpoint_every: self.count("train.checkpoint_every")?,
            gt_mode: self.get("supervision.gt_mode")?.parse::<GtMode>()?,
            hard_threshold: self.positive("supervision.hard_threshold")?,
            waypoint_radius: self.positive("supervision.waypoint_radius")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that every typed view builds.
    pub fn validate(&self) -> Result<()> {
        self.scene_params()?;
        self.episode_params()?;
        self.sim_params()?;
        self.policy_config()?;
        self.train_config()?;
        self.success_distance()?;
        Ok(())
    }

    pub fn success_distance(&self) -> Result<f64> {
        self.positive("eval.success_distance")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply("map.nope=1"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::parse("seed = 1\nfoo.bar = 2\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        c.apply("supervision.gt_mode=hard").unwrap();
        assert_eq!(c.train_config().unwrap().gt_mode, GtMode::Hard);
    }

    #[test]
    fn defaults_build() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let p = c.policy_config().unwrap();
        assert_eq!(p.map.m, 100);
        assert_eq!(p.lambda_p, 0.8);
        let t = c.train_config().unwrap();
        assert_eq!(t.lr, 2.5e-4);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn hash_tracks_arch_keys_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.apply("train.lr=1e-3").unwrap();
        assert_eq!(a.arch_hash(), b.arch_hash());
        b.apply("map.c=16").unwrap();
        assert_ne!(a.arch_hash(), b.arch_hash());
    }
}
