use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use iclk::datagen::AlignmentPair;
use iclk::extract::{Checkpoint, ExtractorSpec};
use iclk::harness::{self, Manifest, Method, TrainFile};
use iclk::solver::{SolverConfig, StopKind};
use iclk::{Error, Result};

#[derive(Parser)]
#[command(name = "iclk", version, about = "Dense inverse-compositional image alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stop {
    DeltaP,
    Residual,
}

#[derive(clap::Args)]
struct SolverArgs {
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    #[arg(long, value_enum, default_value = "delta-p")]
    stop: Stop,
    /// Corner displacement of the update below which the solver stops.
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    /// Mean absolute residual below which the residual rule stops.
    #[arg(long, default_value_t = 1e-3)]
    residual_epsilon: f64,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            max_iterations: self.max_iters,
            stop_kind: match self.stop {
                Stop::DeltaP => StopKind::DeltaP,
                Stop::Residual => StopKind::Residual,
            },
            delta_p_corner_epsilon: self.epsilon,
            residual_epsilon: self.residual_epsilon,
            ..SolverConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Align a template to an image and print the homography.
    Align {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// identity, normalize, conv:<checkpoint> or external:<stride>
        #[arg(long, default_value = "identity")]
        extractor: String,
        #[arg(long)]
        template_features: Option<PathBuf>,
        #[arg(long)]
        image_features: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Run alignment methods on held-out pairs and write per-pair records.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated: noop, iclk-raw, iclk-norm, conv:<ckpt>,
        /// conv-init:<seed>, external:<dir>:<stride>
        #[arg(long, value_delimiter = ',', default_value = "iclk-raw")]
        methods: Vec<String>,
        #[arg(long, default_value_t = 100)]
        pairs: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Fill the wall-time column (makes the output nondeterministic).
        #[arg(long)]
        record_time: bool,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Train a convolutional feature extractor through the solver.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        single_iteration: bool,
    },
    /// Turn an evaluation CSV into cumulative error curves.
    Cdf {
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write evaluation pairs as images and FGT1 files plus their warps.
    DumpPairs {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 100)]
        pairs: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_extractor(s: &str, features: bool) -> Result<ExtractorSpec> {
    Ok(match s {
        "identity" => ExtractorSpec::Identity,
        "normalize" => ExtractorSpec::Normalize,
        _ => {
            if let Some(p) = s.strip_prefix("conv:") {
                ExtractorSpec::ConvStack(Checkpoint::load(p)?.stack)
            } else if let Some(stride) = s.strip_prefix("external:") {
                if !features {
                    return Err(Error::Config(
                        "external extractor needs --template-features and --image-features".into(),
                    ));
                }
                ExtractorSpec::ExternalFile {
                    path: PathBuf::new(),
                    stride: stride
                        .parse()
                        .map_err(|_| Error::Config(format!("bad stride in `{s}`")))?,
                }
            } else {
                return Err(Error::Config(format!("unknown extractor `{s}`")));
            }
        }
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Align {
            template,
            image,
            extractor,
            template_features,
            image_features,
            solver,
        } => {
            let features = template_features.as_deref().zip(image_features.as_deref());
            let spec = parse_extractor(&extractor, features.is_some())?;
            let t = harness::load_grid(&template)?;
            let i = harness::load_grid(&image)?;
            let out = harness::align(&t, &i, &spec, features, &solver.config())?;
            for row in out.warp.to_row_array().chunks(3) {
                println!("{} {} {}", row[0], row[1], row[2]);
            }
            println!("converged {}", out.converged);
            println!("iterations {}", out.iterations);
            if let Some(r) = out.final_residual {
                println!("final_residual {r}");
            }
            if let Some(e) = &out.error {
                eprintln!("solver stopped: {e}");
            }
            Ok(if out.converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Evaluate {
            manifest,
            methods,
            pairs,
            seed,
            out,
            record_time,
            solver,
        } => {
            let cfg = solver.config();
            cfg.validate()?;
            let methods: Vec<Method> = methods.iter().map(|m| m.parse()).collect::<Result<_>>()?;
            let stream = Manifest::load(&manifest)?.stream(seed)?;
            let records = harness::evaluate(&stream, &methods, pairs, &cfg, record_time)?;
            harness::write_file(&out, &harness::eval_csv(&records)?)?;
            print!("{}", harness::format_summary(&records));
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            config,
            manifest,
            out,
            resume,
            single_iteration,
        } => {
            let file = TrainFile::load(&config)?;
            let manifest = Manifest::load(&manifest)?;
            let outcome = harness::run_training(&file, &manifest, &out, resume, single_iteration)?;
            let s = &outcome.state;
            println!(
                "steps {} best_step {} best_val {} skipped_pairs {}",
                s.step, s.best_step, s.best_val, outcome.skipped_pairs
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Cdf { eval, out } => {
            let bytes = std::fs::read(&eval).map_err(|e| io_error(&eval, e))?;
            let records = harness::read_eval_csv(&bytes)?;
            harness::write_file(&out, &harness::cdf_csv(&records)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::DumpPairs {
            manifest,
            pairs,
            seed,
            out,
        } => {
            let stream = Manifest::load(&manifest)?.stream(seed)?;
            std::fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
            let mut all: Vec<(u64, AlignmentPair)> = Vec::new();
            for id in 0..pairs {
                let p = stream.evaluation_pair(id)?;
                for (side, g) in [("template", &p.template), ("image", &p.image)] {
                    iclk::fgt::save_fgt(harness::pair_file(&out, id, side, "fgt"), g)?;
                    iclk::grid::save_png(g, harness::pair_file(&out, id, side, "png"))?;
                }
                all.push((id, p));
            }
            let refs: Vec<(u64, &AlignmentPair)> = all.iter().map(|(i, p)| (*i, p)).collect();
            harness::write_file(&out.join("pairs.csv"), &harness::pairs_csv(&refs)?)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn main() -> ExitCode {
    // Usage errors exit 1 so that 2 keeps meaning "did not converge".
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
