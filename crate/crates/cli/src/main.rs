use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ebmforge::diffcore::Tensor;
use ebmforge::energies::{dump_grid_csv, BoxBounds};
use ebmforge::lab::{
    grad_audit, parse_override, preset, probe_inits, spurious_minima_probe, Checkpoint, ExperimentConfig, Trainer,
    PRESETS,
};
use ebmforge::objectives::{knn_entropy, knn_entropy_constant, Quadrature};
use ebmforge::replay::{InitPolicy, NoiseDist, Reservoir};
use ebmforge::rng::{chain_streams, stream};
use ebmforge::sampling::run_chains;

#[derive(Parser)]
#[command(name = "ebmforge", version, about = "Train and inspect energy-based models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigSource {
    /// TOML experiment file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment.
    #[arg(long)]
    preset: Option<String>,
    /// Dotted-key override, e.g. `--set sampler.steps=20`. Repeatable; the
    /// bare form `--sampler.steps=20` is accepted too.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed used when neither the file nor an override sets one.
    #[arg(long, env = "EBMFORGE_SEED")]
    seed: Option<u64>,
}

impl ConfigSource {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self
            .overrides
            .iter()
            .map(|o| parse_override(o))
            .collect::<Result<Vec<_>, _>>()?;
        let text = match (&self.config, &self.preset) {
            (Some(path), _) => std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
            (None, Some(name)) => preset(name)
                .with_context(|| format!("unknown preset '{}' (known: {})", name, PRESETS.join(", ")))?
                .to_toml()?,
            (None, None) => bail!("pass --config or --preset"),
        };
        if let Some(seed) = self.seed {
            let table: toml::Table = text.parse()?;
            let set_in_file = self.config.is_some() && table.contains_key("seed");
            if !set_in_file && !overrides.iter().any(|(k, _)| k == "seed") {
                overrides.insert(0, ("seed".into(), seed.to_string()));
            }
        }
        Ok(ExperimentConfig::from_toml_with(&text, &overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved experiment config as TOML.
    Config {
        #[command(flatten)]
        source: ConfigSource,
    },
    /// Train a model, writing metrics and checkpoints.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long, conflicts_with_all = ["config", "preset"])]
        resume: Option<PathBuf>,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint and write them as CSV.
    Sample {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 256)]
        n: usize,
        /// Chain length (defaults to the training sampler's).
        #[arg(long)]
        steps: Option<usize>,
        /// Start chains from `noise`, `data` or the stored `reservoir`.
        #[arg(long, default_value = "noise")]
        from: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every chain state as `step,chain,x0,x1,...`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Spurious-minima probe: run chains from noise and from data.
    Probe {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long)]
        steps: Option<usize>,
        /// Energy tolerance around the data median (default: 3 scaled MADs).
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cosine between estimated and exact NLL gradients over training.
    GradAudit {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Quadrature nodes per axis.
        #[arg(long, default_value_t = 121)]
        nodes: usize,
        /// Quadrature box half-width (defaults to the data range plus 3).
        #[arg(long)]
        half_width: Option<f64>,
    },
    /// Nearest-neighbour entropy estimate on N(0, std²) samples.
    EntropyCheck {
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write `x,y,E` over a square grid for a 2-D checkpoint.
    DumpGrid {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = -6.0, allow_hyphen_values = true)]
        lo: f64,
        #[arg(long, default_value_t = 6.0, allow_hyphen_values = true)]
        hi: f64,
        #[arg(long, default_value_t = 101)]
        resolution: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export or inspect replay buffers.
    Buffer {
        #[command(subcommand)]
        action: BufferAction,
    },
}

#[derive(Subcommand)]
enum BufferAction {
    /// Extract the reservoir of a checkpoint into a standalone file.
    Save { checkpoint: PathBuf, out: PathBuf },
    /// Read a reservoir file and print a summary.
    Load {
        path: PathBuf,
        /// Print every stored state as CSV.
        #[arg(long)]
        dump: bool,
    },
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn noise_for(init: &InitPolicy, dataset: &ebmforge::lab::Dataset) -> NoiseDist {
    match init {
        InitPolicy::NoiseReservoir { noise, .. } => noise.clone(),
        _ => {
            let b = dataset.bounds(1.0);
            let lo = b.lo.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = b.hi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            NoiseDist::Uniform { lo, hi }
        }
    }
}

fn write_rows(w: &mut dyn Write, t: &Tensor) -> Result<()> {
    let (n, _) = t.rows_cols();
    for i in 0..n {
        let row: Vec<String> = t.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { source } => print!("{}", source.load()?.to_toml()?),
        Command::Train { source, resume, out } => {
            let mut trainer = match resume {
                Some(path) => Trainer::resume(&path).with_context(|| format!("resuming from {}", path.display()))?,
                None => {
                    let mut cfg = source.load()?;
                    if let Some(dir) = out.clone() {
                        cfg.output.dir = Some(dir);
                    }
                    Trainer::new(cfg)?
                }
            };
            log::info!("{} from step {}", trainer.config().name, trainer.step());
            trainer.run_to_end()?;
            trainer.write_outputs()?;
            if let Some(r) = trainer.metrics().last() {
                println!("{}", serde_json::to_string(r)?);
            }
        }
        Command::Sample {
            checkpoint,
            n,
            steps,
            from,
            seed,
            out,
            trace,
        } => {
            let trainer = Trainer::from_checkpoint(Checkpoint::load(&checkpoint)?)?;
            let ds = trainer.dataset();
            let inits = match from.as_str() {
                "noise" => {
                    let noise = noise_for(&trainer.config().init, ds);
                    let mut rng = stream(seed, "sample-inits", &[]);
                    let pts: Vec<f64> = (0..n).flat_map(|_| noise.draw(ds.dim(), &mut rng)).collect();
                    Tensor::matrix(n, ds.dim(), pts)?
                }
                "data" => ds.batch(n, &mut stream(seed, "sample-inits", &[])),
                "reservoir" => {
                    let res = trainer.reservoir().context("checkpoint has no reservoir")?;
                    let pool = if res.policy().uses_data() { Some(&ds.points) } else { None };
                    res.sample_inits(n, pool, &mut stream(seed, "sample-inits", &[]))?.states
                }
                other => bail!("--from must be noise, data or reservoir, not '{}'", other),
            };
            let mut sampler = match steps {
                Some(s) => trainer.sampler().with_steps(s),
                None => trainer.sampler().clone(),
            };
            sampler.trace = trace.is_some();
            let mut rngs = chain_streams(seed, "sample-chains", n);
            let run = run_chains(&inits, trainer.model(), &sampler, &mut rngs)?;
            write_rows(output(&out)?.as_mut(), &run.final_state)?;
            if let Some(path) = trace {
                let mut w = output(&Some(path))?;
                let header: Vec<String> = (0..ds.dim()).map(|j| format!("x{}", j)).collect();
                writeln!(w, "step,chain,{}", header.join(","))?;
                for (step, state) in std::iter::once(&inits).chain(&run.trajectory).enumerate() {
                    for i in 0..n {
                        let row: Vec<String> = state.row(i).iter().map(|v| v.to_string()).collect();
                        writeln!(w, "{},{},{}", step, i, row.join(","))?;
                    }
                }
            }
        }
        Command::Probe {
            checkpoint,
            n,
            steps,
            delta,
            seed,
        } => {
            let trainer = Trainer::from_checkpoint(Checkpoint::load(&checkpoint)?)?;
            let ds = trainer.dataset();
            let noise = noise_for(&trainer.config().init, ds);
            let (noise_inits, data_inits, reference) = probe_inits(ds, &noise, n, 1000.min(ds.len()), seed)?;
            let sampler = match steps {
                Some(s) => trainer.sampler().with_steps(s),
                None => trainer.sampler().clone(),
            };
            let rep = spurious_minima_probe(
                trainer.model(),
                &noise_inits,
                &data_inits,
                &reference,
                &sampler,
                delta,
                seed,
            )?;
            println!(
                "{}",
                serde_json::json!({
                    "delta": rep.delta,
                    "data_energy_median": rep.data_energy_median,
                    "noise_success": rep.noise_success,
                    "data_success": rep.data_success,
                })
            );
        }
        Command::GradAudit {
            source,
            steps,
            nodes,
            half_width,
        } => {
            let cfg = source.load()?;
            let ds = cfg.dataset.build(ebmforge::rng::derive_seed(cfg.seed, "data", &[]))?;
            let bounds = match half_width {
                Some(h) => BoxBounds::cube(ds.dim(), -h, h)?,
                None => ds.bounds(3.0),
            };
            let audit = grad_audit(cfg, Quadrature::new(bounds, nodes), steps)?;
            for r in &audit.records {
                println!("{}", serde_json::to_string(r)?);
            }
            println!(
                "{}",
                serde_json::json!({
                    "variant": audit.variant,
                    "mean_cosine": audit.mean_cosine,
                    "min_cosine": audit.min_cosine,
                })
            );
        }
        Command::EntropyCheck { n, std, seed } => {
            use rand_distr::{Distribution, Normal};
            let normal = Normal::new(0.0, std)?;
            let mut rng = stream(seed, "entropy-check", &[]);
            let xs: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            let est = knn_entropy(&Tensor::vector(xs))? + knn_entropy_constant(1);
            let exact = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * std * std).ln();
            println!(
                "{}",
                serde_json::json!({ "n": n, "estimate": est, "exact": exact, "error": est - exact })
            );
        }
        Command::DumpGrid {
            checkpoint,
            lo,
            hi,
            resolution,
            out,
        } => {
            let trainer = Trainer::from_checkpoint(Checkpoint::load(&checkpoint)?)?;
            let bounds = BoxBounds::cube(2, lo, hi)?;
            dump_grid_csv(trainer.model(), &bounds, resolution, output(&out)?)?;
        }
        Command::Buffer { action } => match action {
            BufferAction::Save { checkpoint, out } => {
                let ckpt = Checkpoint::load(&checkpoint)?;
                let res = ckpt.reservoir.context("checkpoint has no reservoir")?;
                res.save(&out)?;
                println!("{} states of dimension {} -> {}", res.len(), res.dim(), out.display());
            }
            BufferAction::Load { path, dump } => {
                // The stored policy is not needed to read states back.
                let res = Reservoir::load(&path, InitPolicy::Persistent { reset_to_data_prob: 0.0 })?;
                println!("capacity {} len {} dim {}", res.capacity(), res.len(), res.dim());
                if dump {
                    let mut w = std::io::stdout().lock();
                    for s in res.states() {
                        let row: Vec<String> = s.iter().map(|v| v.to_string()).collect();
                        writeln!(w, "{}", row.join(","))?;
                    }
                }
            }
        },
    }
    Ok(())
}

/// Rewrites `--a.b=v` into `--set a.b=v` so config keys can be passed as
/// flags directly. Top-level keys that clash with real flags (`steps`,
/// `seed`) still need `--set`.
fn expand_overrides(args: impl Iterator<Item = String>) -> Vec<String> {
    const TOP_LEVEL: &[&str] = &["name", "batch_size", "reservoir_capacity"];
    let mut out = Vec::new();
    for a in args {
        match a.strip_prefix("--").and_then(|r| r.split_once('=')) {
            Some((key, _)) if key.contains('.') || TOP_LEVEL.contains(&key) => {
                out.push("--set".into());
                out.push(a[2..].to_string());
            }
            _ => out.push(a),
        }
    }
    out
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse_from(expand_overrides(std::env::args()))) {
        eprintln!("error: {:#}", e);
        std::process::exit(1);
    }
}
