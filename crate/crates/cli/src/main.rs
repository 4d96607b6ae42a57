use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asfnet::config::Config;
use asfnet::cost::count_cost;
use asfnet::dataset::{write_synth_dataset, Dataset};
use asfnet::density::{generate_density_map, GtParams};
use asfnet::format::{self, Checkpoint};
use asfnet::metrics::MetricReport;
use asfnet::prune::{prune, sparsity_report, Criterion, SparsityReport};
use asfnet::synth::SynthSpec;
use asfnet::train::{loss_log_csv, train, TrainOptions};
use asfnet::Error;
use clap::{Parser, Subcommand};
use serde::Serialize;

/// File written next to trained checkpoints describing the network they belong to.
const CONFIG_SIDECAR: &str = "config.json";
const FINAL_CHECKPOINT: &str = "final.asfc";
const LOSS_LOG: &str = "loss.csv";

#[derive(Parser)]
#[command(name = "asfnet", version, about = "Lightweight crowd counting with adjacent-scale feature fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (PGM images, JSON annotations, manifest).
    Synth {
        /// SynthSpec JSON; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the ground-truth density map of one annotation.
    GenGt {
        #[arg(long)]
        ann: PathBuf,
        /// Ground-truth parameter JSON; defaults apply to missing keys.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset and write checkpoints plus a loss log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint (keeping its prune mask) instead of a fresh init.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate count error of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Network config; defaults to config.json beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Predict the density map of one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a max-normalized 8-bit visualization.
        #[arg(long)]
        pgm: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Magnitude-prune a checkpoint's conv weights.
    Prune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = parse_criterion)]
        criterion: Criterion,
        #[arg(long, value_parser = parse_fraction)]
        fraction: f64,
        #[arg(long)]
        out: PathBuf,
        /// Sparsity JSON path; defaults to the output path with a .sparsity.json extension.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print parameter and FLOP accounting for a network config.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input size as CxHxW.
        #[arg(long, value_parser = parse_input_size)]
        input_size: [usize; 3],
        /// Also write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn parse_criterion(s: &str) -> Result<Criterion, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let f: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..1.0).contains(&f) {
        Ok(f)
    } else {
        Err(format!("fraction {f} outside [0, 1)"))
    }
}

fn parse_input_size(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.parse().map_err(|_| format!("`{s}` is not CxHxW")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(format!("`{s}` is not CxHxW with positive sizes")),
    }
}

#[derive(Serialize)]
struct EvalReport {
    #[serde(flatten)]
    metrics: MetricReport,
    checkpoint: String,
    sparsity: Option<SparsityReport>,
}

fn load_config(path: Option<&Path>) -> asfnet::Result<Config> {
    path.map_or_else(|| Ok(Config::default()), Config::load)
}

/// `--config` if given, else the sidecar beside the checkpoint, else defaults.
fn checkpoint_config(explicit: Option<&Path>, ckpt: &Path) -> asfnet::Result<Config> {
    if explicit.is_some() {
        return load_config(explicit);
    }
    let sidecar = ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_SIDECAR);
    if sidecar.is_file() {
        Config::load(&sidecar)
    } else {
        Ok(Config::default())
    }
}

/// Checkpoint whose parameters match the network layout exactly.
fn load_checkpoint_for(ckpt: &Path, config: &Config) -> asfnet::Result<Checkpoint> {
    let checkpoint = format::read_checkpoint(ckpt)?;
    let expected = config.network().init_params(0);
    for (name, t) in expected.iter() {
        let got = checkpoint.params.require(name)?;
        if got.dims() != t.dims() {
            return Err(Error::Argument(format!(
                "checkpoint tensor `{name}` has dims {:?}, network expects {:?}",
                got.dims(),
                t.dims()
            )));
        }
    }
    if checkpoint.params.len() != expected.len() {
        return Err(Error::Argument(format!(
            "checkpoint holds {} tensors, network expects {}",
            checkpoint.params.len(),
            expected.len()
        )));
    }
    Ok(checkpoint)
}

fn print_json<T: Serialize>(value: &T) {
    print!("{}", String::from_utf8(format::json_bytes(value)).expect("JSON is UTF-8"));
}

fn run(command: Command) -> asfnet::Result<()> {
    match command {
        Command::Synth { spec, out } => {
            let spec: SynthSpec = match spec {
                Some(p) => format::read_json(&p)?,
                None => SynthSpec::default(),
            };
            let manifest = write_synth_dataset(&spec, &out)?;
            println!("wrote {} scenes to {}", manifest.items.len(), out.display());
        }
        Command::GenGt { ann, params, out } => {
            let ann = format::load_annotation(&ann)?;
            let gt: GtParams = match params {
                Some(p) => format::read_json(&p)?,
                None => GtParams::default(),
            };
            let map = generate_density_map(&ann, &gt)?;
            format::write_tensor(&out, &map)?;
            println!("count {} -> map sum {:.6}", ann.count(), map.sum_f64());
        }
        Command::Train { config, data, out, init } => {
            let config = load_config(config.as_deref())?;
            let net = config.network();
            let dataset = Dataset::load(&data)?;
            let samples = dataset.samples(&net, &config.gt)?;
            let (params, mask) = match init {
                Some(p) => {
                    let ck = load_checkpoint_for(&p, &config)?;
                    (ck.params, ck.mask)
                }
                None => (net.init_params(config.train.rng_seed), None),
            };
            let options = TrainOptions {
                checkpoint_dir: Some(out.clone()),
                mask,
            };
            format::write_json(&out.join(CONFIG_SIDECAR), &config)?;
            let outcome = train(&net, params, &samples, &config.train, &options)?;
            format::write_checkpoint(&out.join(FINAL_CHECKPOINT), &outcome.params, options.mask.as_ref())?;
            format::write_bytes(&out.join(LOSS_LOG), loss_log_csv(&outcome.log).as_bytes())?;
            match outcome.log.last() {
                Some(e) => println!("{} steps, final mean loss {:e}", outcome.steps, e.mean_loss),
                None => println!("0 steps"),
            }
        }
        Command::Eval {
            ckpt,
            data,
            report,
            config,
        } => {
            let config = checkpoint_config(config.as_deref(), &ckpt)?;
            let checkpoint = load_checkpoint_for(&ckpt, &config)?;
            let dataset = Dataset::load(&data)?;
            let metrics = dataset.evaluate(&config.network(), &checkpoint.params)?;
            let out = EvalReport {
                metrics,
                checkpoint: ckpt.display().to_string(),
                sparsity: checkpoint.mask.as_ref().map(sparsity_report),
            };
            format::write_json(&report, &out)?;
            println!("MAE {:.4}  MSE {:.4}  images {}", out.metrics.mae, out.metrics.mse, out.metrics.n_images);
            if let Some(s) = &out.sparsity {
                println!("global sparsity {:.6}", s.global);
            }
        }
        Command::Infer {
            ckpt,
            image,
            out,
            pgm,
            config,
        } => {
            let config = checkpoint_config(config.as_deref(), &ckpt)?;
            let checkpoint = load_checkpoint_for(&ckpt, &config)?;
            let img = format::load_image(&image)?;
            let density = config.network().predict(&checkpoint.params, &img)?;
            format::write_tensor(&out, &density)?;
            if let Some(p) = pgm {
                format::write_bytes(&p, &format::density_pgm(&density))?;
            }
            println!("predicted count {:.4}", density.sum_f64());
        }
        Command::Prune {
            ckpt,
            criterion,
            fraction,
            out,
            report,
        } => {
            let checkpoint = format::read_checkpoint(&ckpt)?;
            let (params, mask) = prune(&checkpoint.params, criterion, fraction)?;
            format::write_checkpoint(&out, &params, Some(&mask))?;
            let sparsity = sparsity_report(&mask);
            let report = report.unwrap_or_else(|| out.with_extension("sparsity.json"));
            format::write_json(&report, &sparsity)?;
            print_json(&sparsity);
        }
        Command::Flops {
            config,
            input_size,
            json,
        } => {
            let config = load_config(config.as_deref())?;
            let cost = count_cost(&config.network(), input_size)?;
            print!("{}", cost.table());
            print_json(&cost);
            if let Some(p) = json {
                format::write_json(&p, &cost)?;
            }
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numeric() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
