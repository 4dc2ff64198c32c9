//! The `ddt` command line.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::{parse_key_values, RunConfig};

use crate::data::{read_dataset, write_dataset, Dataset, DATASET_FORMAT_VERSION};
use crate::envs::{gen_dataset, reference_scores, Behavior, EnvKind};
use crate::error::{Error, Result};
use crate::eval::{attention_report, bench_inference, rollout};
use crate::model::{load_checkpoint, save_checkpoint, ActionSpace, Checkpoint, ModelConfig, Variant, CHECKPOINT_FORMAT_VERSION};
use crate::train::{desk_episodes, grad_check_model, tiny_config, train_run};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// Verbosity filter, e.g. `DDT_LOG=info`.
pub const LOG_ENV: &str = "DDT_LOG";

#[derive(Debug, Parser)]
#[command(name = "ddt", version, about = "Return-conditioned sequence policies on toy offline RL tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll out a scripted behavior and write a trajectory file.
    GenData {
        #[arg(long, default_value = "reacher")]
        env: EnvKind,
        /// random | expert | mix:P
        #[arg(long, default_value = "mix:0.5")]
        behavior: Behavior,
        /// 2000 on the reacher, 20000 on 2048.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Behavior-clone a model on a trajectory file.
    Train {
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        data: PathBuf,
        /// key=value file; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        n_layers: Option<usize>,
        #[arg(long)]
        n_heads: Option<usize>,
        #[arg(long)]
        context_length: Option<usize>,
        #[arg(long)]
        adaln_depth: Option<usize>,
        #[arg(long)]
        rtg_scale: Option<f64>,
    },
    /// Evaluate a checkpoint with return-to-go conditioning.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        env: EnvKind,
        /// Defaults to the best return in the training data.
        #[arg(long, allow_hyphen_values = true)]
        target_rtg: Option<f64>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report under this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average attention maps over inference steps and export them.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        env: EnvKind,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, allow_hyphen_values = true)]
        target_rtg: Option<f64>,
    },
    /// Inference cost of each variant against context length.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "10,20,30")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every parameter gradient.
    GradCheck {
        #[arg(long)]
        variant: Variant,
        /// Check the discrete (cross-entropy) head instead.
        #[arg(long)]
        discrete: bool,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Normal output goes to `out`, errors to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// `manifest-<command>.txt`: command, versions, seed and settings.
fn write_manifest(dir: &Path, command: &str, seed: u64, entries: &[(String, String)]) -> Result<()> {
    let mut s = format!(
        "command={command}\nversion={}\ndataset_format_version={DATASET_FORMAT_VERSION}\ncheckpoint_format_version={CHECKPOINT_FORMAT_VERSION}\nseed={seed}\n",
        env!("CARGO_PKG_VERSION")
    );
    for (k, v) in entries {
        s.push_str(&format!("{k}={v}\n"));
    }
    write_file(&dir.join(format!("manifest-{command}.txt")), s)
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn load_model(path: &Path, env: EnvKind) -> Result<(Checkpoint, crate::model::Model<f32>)> {
    let ckpt = load_checkpoint(path)?;
    if let Some(id) = ckpt.meta.get("env_id") {
        if id != env.id() {
            return Err(Error::EnvMismatch(format!("checkpoint was trained on `{id}`, asked to run on `{env}`")));
        }
    }
    let model = ckpt.to_model()?;
    Ok((ckpt, model))
}

fn default_target(ckpt: &Checkpoint, target: Option<f64>) -> Result<f64> {
    target
        .or_else(|| ckpt.meta_f64("dataset_max_return"))
        .ok_or_else(|| Error::InvalidArgument("--target-rtg is required for checkpoints without dataset_max_return".into()))
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::GenData { env, behavior, episodes, seed, out: path } => {
            let episodes = episodes.unwrap_or_else(|| desk_episodes(env));
            let ds = gen_dataset(env, behavior, episodes, seed)?;
            let dir = parent_dir(&path);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_dataset(&path, &ds.trajectories)?;
            let refs = reference_scores(env)?;
            let mut refs_path = path.clone().into_os_string();
            refs_path.push(".refs");
            write_file(Path::new(&refs_path), format!("env_id={env}\nrandom_ref={}\nexpert_ref={}\n", refs.random, refs.expert))?;
            let stats = ds.stats();
            write!(out, "{stats}").map_err(out_err)?;
            let mut entries = vec![
                ("env".to_string(), env.to_string()),
                ("behavior".to_string(), behavior.to_string()),
                ("episodes".to_string(), episodes.to_string()),
                ("out".to_string(), path.display().to_string()),
            ];
            entries.extend(stats.key_values().into_iter().map(|(k, v)| (k.to_string(), v)));
            write_manifest(&dir, "gen-data", seed, &entries)?;
        }
        Command::Train {
            variant,
            data,
            config,
            out: path,
            seed,
            steps,
            lr,
            batch_size,
            d_model,
            n_layers,
            n_heads,
            context_length,
            adaln_depth,
            rtg_scale,
        } => {
            let ds = Dataset::new(read_dataset(&data)?)?;
            let env: EnvKind = ds.env_id().parse()?;
            let stats = ds.stats();
            let mut rc = RunConfig::desk(env, variant);
            rc.model.rtg_scale = stats.suggested_rtg_scale;
            if let Some(p) = &config {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                rc.apply(&parse_key_values(p, &text)?)?;
            }
            let m = &mut rc.model;
            let h = &mut rc.train;
            if let Some(v) = seed {
                h.seed = v;
            }
            if let Some(v) = steps {
                h.steps = v;
            }
            if let Some(v) = lr {
                h.lr = v;
            }
            if let Some(v) = batch_size {
                h.batch_size = v;
            }
            if let Some(v) = d_model {
                m.d_model = v;
            }
            if let Some(v) = n_layers {
                m.n_layers = v;
            }
            if let Some(v) = n_heads {
                m.n_heads = v;
            }
            if let Some(v) = context_length {
                m.context_length = v;
            }
            if let Some(v) = adaln_depth {
                m.adaln_depth = v;
            }
            if let Some(v) = rtg_scale {
                m.rtg_scale = v;
            }
            m.variant = variant;
            m.validate()?;
            let (model, curve) = train_run(&ds, &rc.model, &rc.train)?;
            let meta = BTreeMap::from([
                ("env_id".to_string(), env.id().to_string()),
                ("dataset_max_return".to_string(), format!("{}", stats.return_max)),
                ("seed".to_string(), rc.train.seed.to_string()),
            ]);
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            save_checkpoint(&path, &Checkpoint::from_model(&model, meta))?;
            let mut loss_path = path.clone().into_os_string();
            loss_path.push(".loss.csv");
            write_file(Path::new(&loss_path), curve.to_csv())?;
            let n = curve.losses.len();
            writeln!(out, "steps={n}\nfirst_loss={:.6}\nfinal_loss_mean100={:.6}", curve.window_mean(0..100), curve.window_mean(n.saturating_sub(100)..n))
                .map_err(out_err)?;
            let mut entries = rc.entries();
            entries.push(("data".into(), data.display().to_string()));
            entries.push(("out".into(), path.display().to_string()));
            write_manifest(&parent_dir(&path), "train", rc.train.seed, &entries)?;
        }
        Command::Eval { ckpt, env, target_rtg, episodes, seed, out: dir } => {
            let (ck, model) = load_model(&ckpt, env)?;
            let target = default_target(&ck, target_rtg)?;
            let report = rollout(&model, env, target, episodes, seed)?;
            write!(out, "{report}").map_err(out_err)?;
            if let Some(dir) = dir {
                write_file(&dir.join("eval.txt"), report.to_string())?;
                let returns: Vec<String> = report.returns.iter().map(|r| format!("{r}")).collect();
                write_file(&dir.join("eval_returns.csv"), format!("episode,return\n{}", returns.iter().enumerate().map(|(i, r)| format!("{i},{r}\n")).collect::<String>()))?;
                let entries = vec![
                    ("ckpt".into(), ckpt.display().to_string()),
                    ("env".into(), env.to_string()),
                    ("target_rtg".into(), format!("{target}")),
                    ("episodes".into(), episodes.to_string()),
                ];
                write_manifest(&dir, "eval", seed, &entries)?;
            }
        }
        Command::Attn { ckpt, env, steps, out: dir, seed, target_rtg } => {
            let (ck, model) = load_model(&ckpt, env)?;
            let target = default_target(&ck, target_rtg)?;
            let map = attention_report(&model, env, steps, seed, target)?;
            let files = map.export(&dir)?;
            writeln!(out, "variant={}\nsamples={}\nsize={}\ndiagonal_mass_r1={:.6}\nfiles={}", map.variant, map.samples, map.size, map.diagonal_mass(1), files.len())
                .map_err(out_err)?;
            let entries = vec![
                ("ckpt".into(), ckpt.display().to_string()),
                ("env".into(), env.to_string()),
                ("steps".into(), steps.to_string()),
                ("target_rtg".into(), format!("{target}")),
                ("variant".into(), map.variant.to_string()),
            ];
            write_manifest(&dir, "attn", seed, &entries)?;
        }
        Command::Bench { k, trials, out: dir, seed } => {
            let base = ModelConfig::new(Variant::Dt, EnvKind::Reacher.obs_dim(), EnvKind::Reacher.action_dim(), ActionSpace::Continuous);
            let table = bench_inference(&base, &k, trials, seed)?;
            write_file(&dir.join("bench.csv"), table.to_csv())?;
            write_file(&dir.join("bench_timing.csv"), table.timing_csv())?;
            write!(out, "{}", table.to_csv()).map_err(out_err)?;
            write!(out, "{}", table.timing_csv()).map_err(out_err)?;
            let ks: Vec<String> = k.iter().map(usize::to_string).collect();
            let entries = vec![
                ("k".into(), ks.join(",")),
                ("trials".into(), trials.to_string()),
                ("d_model".into(), base.d_model.to_string()),
                ("n_layers".into(), base.n_layers.to_string()),
                ("n_heads".into(), base.n_heads.to_string()),
            ];
            write_manifest(&dir, "bench", seed, &entries)?;
        }
        Command::GradCheck { variant, discrete, tolerance, out: dir } => {
            let space = if discrete { ActionSpace::Discrete } else { ActionSpace::Continuous };
            let report = grad_check_model(&tiny_config(variant, space), tolerance)?;
            write!(out, "{report}").map_err(out_err)?;
            if let Some(dir) = dir {
                write_file(&dir.join(format!("grad-check-{variant}.txt")), report.to_string())?;
                write_manifest(&dir, "grad-check", 0, &[("variant".into(), variant.to_string()), ("discrete".into(), discrete.to_string())])?;
            }
            if !report.passed() {
                eprintln!("error: gradient check failed for {variant}");
                return Ok(EXIT_FAILURE);
            }
        }
    }
    Ok(EXIT_OK)
}
