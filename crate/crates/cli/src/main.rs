use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mgmap::harness::eval::{run_episode, run_eval, Agent};
use mgmap::harness::grid::Grid;
use mgmap::harness::metrics::trace;
use mgmap::navigator::{NavPolicy, Navigator};
use mgmap::supervision::{coarse_localization_gt, GtMode};
use mgmap::training::{
    collect_rollout, load_checkpoint, policy_gradcheck, sub_seed, Corpus, Trainer,
};
use mgmap::world::io::{read_episodes_file, read_scene, write_episodes_file, write_scene};
use mgmap::world::{generate_scene, sample_episodes, Scene};
use mgmap::{Error, Result, RunConfig};
use mgmap_tensor::gradcheck;
use mgmap_tensor::ParamStore;

#[derive(Parser)]
#[command(
    name = "mgmap",
    version,
    about = "Multi-granularity map navigation testbed"
)]
struct Cli {
    /// `key = value` config file applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key=value` override, repeatable; applied after --config and --seed.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Data {
    /// Directory of scene JSON files.
    #[arg(long)]
    scenes: PathBuf,
    /// Episodes JSONL file.
    #[arg(long)]
    episodes: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate scenes into OUT/scenes.
    GenWorld {
        #[arg(long, default_value_t = 3)]
        count: usize,
    },
    /// Sample episodes for every scene into OUT/episodes.jsonl.
    GenEpisodes {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, default_value_t = 20)]
        per_scene: usize,
    },
    /// Teacher-forcing training.
    Train {
        #[command(flatten)]
        data: Data,
        /// Start from these parameters instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Accept a checkpoint whose architecture hash differs.
        #[arg(long)]
        force: bool,
    },
    /// DAgger fine-tuning from a checkpoint.
    Dagger {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Closed-loop evaluation.
    Eval {
        #[command(flatten)]
        data: Data,
        #[arg(long, conflicts_with_all = ["oracle", "zero"])]
        checkpoint: Option<PathBuf>,
        /// Evaluate the privileged path follower.
        #[arg(long)]
        oracle: bool,
        /// Evaluate an all-zero policy.
        #[arg(long)]
        zero: bool,
        #[arg(long)]
        force: bool,
    },
    /// Export an MGG1 grid, or dump the trace and grids of one episode.
    Inspect {
        /// MGG1 file to export.
        #[arg(long, conflicts_with = "episode")]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// csv or png.
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long, requires_all = ["scenes", "episodes"])]
        episode: Option<String>,
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 200)]
        policy_probes: usize,
    },
}

enum Outcome {
    Ok,
    Numeric(String),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    for kv in &cli.set {
        cfg.apply(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn read_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_scene(p)).collect()
}

fn corpus(data: &Data) -> Result<Corpus> {
    Corpus::new(
        read_scenes(&data.scenes)?,
        read_episodes_file(&data.episodes)?,
    )
}

fn write_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(fs::write(out.join("config.txt"), cfg.to_text())?)
}

fn run(cli: Cli) -> Result<Outcome> {
    let cfg = resolve(&cli)?;
    let out = cli.out.clone();
    match cli.cmd {
        Cmd::GenWorld { count } => {
            let p = cfg.scene_params()?;
            let dir = out.join("scenes");
            fs::create_dir_all(&dir)?;
            for k in 0..count {
                let scene = generate_scene(sub_seed(cfg.seed()?, &[0x5ce7e, k as u64]), &p)?;
                write_scene(&dir.join(format!("{}.json", scene.id)), &scene, &p)?;
                println!("{}", scene.id);
            }
        }
        Cmd::GenEpisodes { scenes, per_scene } => {
            let p = cfg.episode_params()?;
            let mut all = Vec::new();
            for (k, scene) in read_scenes(&scenes)?.iter().enumerate() {
                all.extend(sample_episodes(
                    scene,
                    sub_seed(cfg.seed()?, &[0xe915, k as u64]),
                    per_scene,
                    &p,
                )?);
            }
            fs::create_dir_all(&out)?;
            write_episodes_file(&out.join("episodes.jsonl"), &all)?;
            println!("{} episodes", all.len());
        }
        Cmd::Train { data, init, force } => {
            let corpus = corpus(&data)?;
            let mut t = match init {
                Some(p) => Trainer::from_checkpoint(&cfg, &p, force)?,
                None => Trainer::new(&cfg)?,
            };
            write_config(&cfg, &out)?;
            t.metrics = Some(Box::new(create(&out.join("metrics.jsonl"))?));
            t.train_teacher_forcing(&corpus)?;
            t.save(&out.join("checkpoint.mgt"))?;
            println!(
                "{} updates logged, checkpoint {}",
                t.log.len(),
                out.join("checkpoint.mgt").display()
            );
        }
        Cmd::Dagger {
            data,
            checkpoint,
            force,
        } => {
            let corpus = corpus(&data)?;
            let mut t = Trainer::from_checkpoint(&cfg, &checkpoint, force)?;
            write_config(&cfg, &out)?;
            t.metrics = Some(Box::new(create(&out.join("metrics.jsonl"))?));
            t.collect_teacher_shard(&corpus)?;
            for n in 1..=t.cfg.dagger_iterations {
                t.dagger_iteration(&corpus, n)?;
                if n % t.cfg.checkpoint_every == 0 {
                    t.save(&out.join(format!("checkpoint_iter{n}.mgt")))?;
                }
            }
            t.save(&out.join("checkpoint.mgt"))?;
            println!(
                "{} rollouts aggregated, checkpoint {}",
                t.dataset_size(),
                out.join("checkpoint.mgt").display()
            );
        }
        Cmd::Eval {
            data,
            checkpoint,
            oracle,
            zero,
            force,
        } => {
            let corpus = corpus(&data)?;
            let loaded;
            let zeroed;
            let agent = if oracle {
                Agent::Oracle
            } else if zero {
                zeroed = zero_policy(&cfg)?;
                Agent::Learned {
                    nav: &zeroed.0,
                    store: &zeroed.1,
                }
            } else {
                let path = checkpoint.ok_or_else(|| {
                    Error::Usage("eval needs --checkpoint, --oracle or --zero".into())
                })?;
                loaded = load_checkpoint(&path, &cfg, force)?;
                Agent::Learned {
                    nav: &loaded.0,
                    store: &loaded.1,
                }
            };
            fs::create_dir_all(&out)?;
            let mut per = create(&out.join("eval_episodes.jsonl"))?;
            let report = run_eval(&cfg, &corpus, &agent, Some(&mut per))?;
            per.flush()?;
            fs::write(out.join("report.json"), report.to_json())?;
            print!("{}", report.to_json());
        }
        Cmd::Inspect {
            grid,
            channel,
            format,
            episode,
            scenes,
            episodes,
            checkpoint,
            force,
        } => {
            if let Some(path) = grid {
                export_grid(&path, channel, &format, &out)?;
            } else if let (Some(id), Some(scenes), Some(episodes)) = (episode, scenes, episodes) {
                let corpus = corpus(&Data { scenes, episodes })?;
                inspect_episode(&cfg, &corpus, &id, checkpoint.as_deref(), force, &out)?;
            } else {
                return Err(Error::Usage(
                    "inspect needs --grid FILE or --episode ID with --scenes and --episodes".into(),
                ));
            }
        }
        Cmd::Gradcheck {
            cases,
            policy_probes,
        } => return gradcheck_suite(cases, policy_probes, cfg.seed()?),
    }
    Ok(Outcome::Ok)
}

fn zero_policy(cfg: &RunConfig) -> Result<(Navigator, ParamStore<f32>)> {
    let mut t = Trainer::new(cfg)?;
    for e in t.store.entries_mut().iter_mut().filter(|e| e.trainable) {
        e.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    Ok((t.nav, t.store))
}

fn export_grid(path: &Path, channel: usize, format: &str, out: &Path) -> Result<()> {
    let g = Grid::read(path)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("grid");
    fs::create_dir_all(out)?;
    let dest = match format {
        "csv" => {
            let dest = out.join(format!("{stem}_c{channel}.csv"));
            fs::write(&dest, g.channel_csv(channel)?)?;
            dest
        }
        "png" => {
            let dest = out.join(format!("{stem}_c{channel}.png"));
            let img = image::GrayImage::from_raw(g.w as u32, g.h as u32, g.channel_gray(channel)?)
                .ok_or_else(|| Error::Domain("grid does not fit an image".into()))?;
            img.save(&dest)
                .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
            dest
        }
        f => {
            return Err(Error::Usage(format!(
                "unknown export format `{f}` (csv, png)"
            )))
        }
    };
    println!("{}", dest.display());
    Ok(())
}

fn inspect_episode(
    cfg: &RunConfig,
    corpus: &Corpus,
    id: &str,
    checkpoint: Option<&Path>,
    force: bool,
    out: &Path,
) -> Result<()> {
    let index = corpus
        .episodes
        .iter()
        .position(|e| e.episode_id == id)
        .ok_or_else(|| Error::Usage(format!("no episode `{id}`")))?;
    let ep = &corpus.episodes[index];
    let grids = out.join("grids");
    fs::create_dir_all(&grids)?;
    let policy = cfg.policy_config()?;
    let spec = &policy.map;
    let threshold: f64 = cfg.parsed("supervision.hard_threshold")?;
    let rollout = match checkpoint {
        None => run_episode(cfg, corpus, index, &Agent::Oracle)?.1,
        Some(path) => {
            let (nav, store) = load_checkpoint(path, cfg, force)?;
            let mut pol = NavPolicy::new(&nav, &store);
            pol.keep_maps = true;
            let seed = sub_seed(cfg.seed()?, &[0xe7a1, index as u64]);
            let r = collect_rollout(
                corpus.scene(ep)?,
                ep,
                index,
                &cfg.sim_params()?,
                spec.cell,
                policy.replan_every,
                0.0,
                Some(&mut pol),
                seed,
            )?;
            let m = spec.m;
            for (step, pose, h) in &pol.heads {
                let gt = coarse_localization_gt(
                    &ep.path,
                    pose,
                    m,
                    m,
                    spec.cell,
                    GtMode::Soft,
                    threshold,
                )?;
                let p: Vec<f32> = gt.p.iter().map(|&v| v as f32).collect();
                for (name, c, data) in [
                    ("mf", spec.c_f, &h.mf),
                    ("ms", spec.c_s, &h.sem),
                    ("m", spec.c, &h.fused),
                    ("p", 1, &p),
                    ("p_hat", 1, &h.p_loc),
                ] {
                    Grid::from_chw(c, m, m, data)?
                        .write(&grids.join(format!("step_{step:04}_{name}.mgg")))?;
                }
            }
            r
        }
    };
    let mut w = create(&out.join("trace.jsonl"))?;
    for rec in trace(&rollout) {
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!("{} steps, stopped {}", rollout.steps.len(), rollout.stopped);
    Ok(())
}

fn gradcheck_suite(cases: usize, policy_probes: usize, seed: u64) -> Result<Outcome> {
    const TOL: f64 = 1e-5;
    let mut failed = Vec::new();
    for r in gradcheck::op_suite(cases, seed)? {
        let ok = r.passed(TOL);
        println!(
            "{:<24} cases {:>3} probes {:>5} max_rel_err {:.3e} {}",
            r.op,
            r.cases,
            r.probes,
            r.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.op);
        }
    }
    let e = policy_gradcheck(seed, policy_probes)?;
    let ok = e < TOL;
    println!(
        "{:<24} probes {:>5} max_rel_err {:.3e} {}",
        "policy",
        policy_probes,
        e,
        if ok { "ok" } else { "FAIL" }
    );
    if !ok {
        failed.push("policy".into());
    }
    if failed.is_empty() {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
