use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use stcnn::dictionary::{dict_learn, select_target, DictConfig};
use stcnn::gradcheck::run_suite;
use stcnn::joint::{Stage, TrainConfig};
use stcnn::kv::KvMap;
use stcnn::overlap::ThresholdRule;
use stcnn::pipeline::{self, EvalInputs};
use stcnn::volume::{normalize, read_map, read_volume4d, Cohort, SyntheticSpec};

#[derive(Parser)]
#[command(name = "stcnn", version, about = "Spatio-temporal CNN for target network identification in 4D volumes")]
struct Cli {
    /// Worker threads for data-parallel loops (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DictArgs {
    /// Number of atoms.
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 0.15)]
    lambda: f64,
    /// Outer dictionary-learning iterations.
    #[arg(long, default_value_t = 30)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DictArgs {
    fn config(&self) -> DictConfig {
        DictConfig {
            atoms: self.k,
            lambda: self.lambda,
            iters: self.iters,
            seed: self.seed,
            ..DictConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate one synthetic volume from a key-value spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a train/test cohort sharing one target network.
    Cohort {
        #[arg(long, default_value_t = 40)]
        train: usize,
        #[arg(long, default_value_t = 10)]
        test: usize,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dictionary-learning decomposition of one volume.
    Dictlearn {
        #[arg(long)]
        data: PathBuf,
        /// Single-frame template map; enables target selection.
        #[arg(long)]
        template: Option<PathBuf>,
        #[command(flatten)]
        dict: DictArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label every volume in a directory with its template-matched atom.
    Label {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[command(flatten)]
        dict: DictArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the networks (all three stages unless --stage is given).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Key-value config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Stage to run: 1-3 or spatial_only / temporal_only / joint_finetune. Repeatable.
        #[arg(long)]
        stage: Vec<Stage>,
        /// Checkpoint directory to resume from when starting after stage 1.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Predict map and series for a volume or a directory of volumes.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against truth and write a CSV report.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Data directory; adds the dictionary baseline and supervised validation.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for slice mosaics (PGM) and series tables.
        #[arg(long)]
        plots: Option<PathBuf>,
        #[command(flatten)]
        dict: DictArgs,
    },
    /// Finite-difference check of every op and both networks.
    Gradcheck {
        #[arg(long, default_value_t = 2017)]
        seed: u64,
    },
}

fn read_kv(path: &Path) -> Result<KvMap> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(KvMap::parse(&text)?)
}

fn file_stem(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("volume");
    name.split('.').next().unwrap_or(name).to_string()
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        stcnn::par::set_threads(n).map_err(anyhow::Error::msg)?;
    }
    match cli.command {
        Command::Synth { spec, out } => {
            let name = file_stem(&spec);
            let spec = SyntheticSpec::from_kv(&read_kv(&spec)?)?;
            pipeline::write_synthetic(&spec, &name, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Cohort { train, test, noise, seed, out } => {
            let mut cohort = Cohort::default();
            if let Some(s) = noise {
                cohort.noise_sigma = s;
            }
            if let Some(s) = seed {
                cohort.seed = s;
            }
            pipeline::write_cohort(&cohort, train, test, &out)?;
            println!("wrote {} training and {} test subjects to {}", train, test, out.display());
        }
        Command::Dictlearn { data, template, dict, out } => {
            let vol = normalize(&read_volume4d(&data)?);
            let model = dict_learn(&vol, &dict.config())?;
            let matched = match template {
                Some(t) => Some(select_target(&model, &read_map(&t)?, ThresholdRule::default())?),
                None => None,
            };
            pipeline::write_dictionary(&model, matched.as_ref(), &out)?;
            println!("objective {:.6}", model.objective());
            if let Some(m) = matched {
                print!("{}", pipeline::match_report(&m));
            }
        }
        Command::Label { data, template, dict, out } => {
            let template = read_map(&template)?;
            for (name, m) in pipeline::label_dir(&data, &template, &dict.config(), &out)? {
                println!("{} atom {} jaccard {:.4}{}", name, m.best_index, m.jaccard, if m.no_match() { " (no match)" } else { "" });
            }
        }
        Command::Train { data, labels, config, out, stage, init } => {
            let cfg = match config {
                Some(p) => TrainConfig::parse(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => TrainConfig::default(),
            };
            let start = Instant::now();
            let trace = pipeline::train_dirs(&data, &labels, &cfg, &out, &stage, init.as_deref())?;
            for s in Stage::ALL {
                let l = trace.losses(s);
                if let (Some(a), Some(b)) = (l.first(), l.last()) {
                    println!("{}: {} steps, loss {:.5} -> {:.5}", s, l.len(), a, b);
                }
            }
            println!("trained in {:.1}s; model in {}", start.elapsed().as_secs_f64(), out.join(pipeline::FINAL_DIR).display());
        }
        Command::Infer { ckpt, data, out } => {
            let names = pipeline::infer_path(&ckpt, &data, &out)?;
            println!("wrote {} predictions to {}", names.len(), out.display());
        }
        Command::Eval { pred, truth, template, out, data, plots, dict } => {
            let inputs = EvalInputs {
                pred: &pred,
                truth: &truth,
                template: &template,
                data: data.as_deref(),
                dict: dict.config(),
                plots: plots.as_deref(),
            };
            let report = pipeline::evaluate_dirs(&inputs, &out)?;
            let means = report.means();
            println!("{} subjects", report.rows.len());
            for (name, v) in stcnn::eval::REPORT_COLUMNS[1..].iter().zip(means) {
                if let Some(v) = v {
                    println!("mean {} = {:.4}", name, v);
                }
            }
        }
        Command::Gradcheck { seed } => {
            let start = Instant::now();
            let report = run_suite(seed)?;
            for c in &report.cases {
                println!("{}", c);
            }
            println!("{:.1}s", start.elapsed().as_secs_f64());
            if !report.passed() {
                bail!("gradient check failed");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
