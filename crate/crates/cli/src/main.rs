use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hsnn::checkpoint;
use hsnn::data::{Dataset, DatasetKind};
use hsnn::energy::emit_report;
use hsnn::gradcheck::{gradcheck, GradcheckConfig, TINY_ARCH};
use hsnn::network::{resolve_arch, NetworkModel};
use hsnn::train::{build_model, evaluate, fit, parse_key_values, TrainConfig};

#[derive(Parser)]
#[command(name = "hsnn", version, about = "One-time-step spiking networks with Hoyer-regularized thresholds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, log per-epoch metrics as CSV and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Test-set accuracy and per-layer spiking activity of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Per-layer compute energy report of a checkpoint as CSV.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic gradients with finite differences on a small network.
    Gradcheck {
        /// Architecture descriptor.
        #[arg(long, default_value = TINY_ARCH)]
        arch: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-2)]
        lambda_h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Options shared by the data-driven commands. Each has a `key = value`
/// equivalent in the `--config` file; flags take precedence.
#[derive(Args)]
struct Common {
    /// Flat `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// mnist or cifar10.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding the dataset files [default: data/<dataset>].
    #[arg(long)]
    data_dir: Option<String>,
    /// Use only the first N samples of each split.
    #[arg(long)]
    limit: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Accepted for compatibility; every run is deterministic.
    #[arg(long)]
    deterministic: bool,
    /// CSV destination [default: stdout].
    #[arg(long)]
    out: Option<String>,
    /// Checkpoint to write (train) or read (eval, analyze).
    #[arg(long)]
    checkpoint: Option<String>,
}

#[derive(Args)]
struct TrainFlags {
    /// vgg-s, resnet-s, mlp or a full descriptor.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// adam or sgd.
    #[arg(long)]
    optimizer: Option<String>,
    /// SGD momentum or Adam beta1.
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    lambda_h: Option<String>,
    #[arg(long)]
    surrogate_scale: Option<String>,
    #[arg(long)]
    ema_momentum: Option<String>,
    /// tensor or channel.
    #[arg(long)]
    extremum_mode: Option<String>,
    /// hoyer, plain or identity.
    #[arg(long)]
    spike_kind: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    /// 0 for full precision, 2 to 6 for quantized conv weights.
    #[arg(long)]
    quant_bits: Option<String>,
    /// Random flips and crops of training images.
    #[arg(long)]
    augment: bool,
}

fn push(pairs: &mut Vec<(String, String)>, key: &str, value: &Option<String>) {
    if let Some(v) = value {
        pairs.push((key.to_string(), v.clone()));
    }
}

impl Common {
    fn pairs(&self) -> Vec<(String, String)> {
        let mut p = Vec::new();
        push(&mut p, "dataset", &self.dataset);
        push(&mut p, "data_dir", &self.data_dir);
        push(&mut p, "limit", &self.limit);
        push(&mut p, "batch_size", &self.batch_size);
        push(&mut p, "seed", &self.seed);
        push(&mut p, "out", &self.out);
        push(&mut p, "checkpoint", &self.checkpoint);
        if self.deterministic {
            p.push(("deterministic".into(), "true".into()));
        }
        p
    }
}

impl TrainFlags {
    fn pairs(&self) -> Vec<(String, String)> {
        let mut p = Vec::new();
        push(&mut p, "arch", &self.arch);
        push(&mut p, "epochs", &self.epochs);
        push(&mut p, "lr", &self.lr);
        push(&mut p, "optimizer", &self.optimizer);
        push(&mut p, "momentum", &self.momentum);
        push(&mut p, "lambda_h", &self.lambda_h);
        push(&mut p, "surrogate_scale", &self.surrogate_scale);
        push(&mut p, "ema_momentum", &self.ema_momentum);
        push(&mut p, "extremum_mode", &self.extremum_mode);
        push(&mut p, "spike_kind", &self.spike_kind);
        push(&mut p, "dropout", &self.dropout);
        push(&mut p, "weight_decay", &self.weight_decay);
        push(&mut p, "quant_bits", &self.quant_bits);
        if self.augment {
            p.push(("augment".into(), "true".into()));
        }
        p
    }
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<hsnn::Error> for Failure {
    fn from(e: hsnn::Error) -> Self {
        match e {
            hsnn::Error::Config(_) | hsnn::Error::Descriptor(_) => Failure::Usage(e.to_string()),
            _ => Failure::Run(e.to_string()),
        }
    }
}

struct Settings {
    cfg: TrainConfig,
    dataset: DatasetKind,
    data_dir: Option<PathBuf>,
    arch: String,
    limit: Option<usize>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
}

fn resolve(common: &Common, train: Option<&TrainFlags>) -> Result<Settings, Failure> {
    let mut pairs = Vec::new();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?;
        pairs.extend(parse_key_values(&text)?);
    }
    pairs.extend(common.pairs());
    pairs.extend(train.map(TrainFlags::pairs).unwrap_or_default());
    let mut s = Settings {
        cfg: TrainConfig::default(),
        dataset: DatasetKind::Mnist,
        data_dir: None,
        arch: "vgg-s".into(),
        limit: None,
        out: None,
        checkpoint: None,
    };
    for (key, value) in pairs {
        match key.as_str() {
            "dataset" => s.dataset = value.parse()?,
            "data_dir" => s.data_dir = Some(value.into()),
            "arch" => s.arch = value,
            "limit" => {
                s.limit = Some(value.parse().map_err(|_| Failure::Usage(format!("invalid limit `{value}`")))?)
            }
            "out" => s.out = Some(value.into()),
            "checkpoint" => s.checkpoint = Some(value.into()),
            "deterministic" => {
                value
                    .parse::<bool>()
                    .map_err(|_| Failure::Usage(format!("invalid value `{value}` for `deterministic`")))?;
            }
            _ => s.cfg.set(&key, &value)?,
        }
    }
    s.cfg.validate()?;
    Ok(s)
}

impl Settings {
    fn load(&self, train: bool) -> Result<Dataset<f32>, Failure> {
        let dir = self
            .data_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("data").join(self.dataset.to_string()));
        let data = self
            .dataset
            .load(&dir, train)
            .map_err(|e| Failure::Run(format!("loading {} from {}: {e}", self.dataset, dir.display())))?;
        Ok(match self.limit {
            Some(n) => data.take(n),
            None => data,
        })
    }

    fn load_checkpoint(&self) -> Result<NetworkModel<f32>, Failure> {
        let path = self
            .checkpoint
            .as_ref()
            .ok_or_else(|| Failure::Usage("--checkpoint is required".into()))?;
        let (model, _) =
            checkpoint::load::<f32>(path).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?;
        if model.input_shape() != self.dataset.input_shape() {
            return Err(Failure::Run(format!(
                "checkpoint expects {:?} inputs, {} provides {:?}",
                model.input_shape(),
                self.dataset,
                self.dataset.input_shape()
            )));
        }
        Ok(model)
    }

    fn emit(&self, text: &str) -> Result<(), Failure> {
        match &self.out {
            Some(path) => fs::write(path, text).map_err(|e| Failure::Run(format!("{}: {e}", path.display()))),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

fn cmd_train(s: Settings) -> Result<(), Failure> {
    let train = s.load(true)?;
    let test = s.load(false)?;
    let desc = resolve_arch(&s.arch, s.dataset.input_shape(), train.classes)?;
    let mut model = build_model::<f32>(&desc, &s.cfg)?;
    let mut log = String::from("epoch,loss,ce,hoyer,acc,mean_activity\n");
    fit(&mut model, &train, &s.cfg, |m, _| {
        log.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.epoch,
            m.loss,
            m.ce,
            m.hoyer,
            m.accuracy,
            m.activity.mean_activity()
        ));
        Ok(())
    })?;
    s.emit(&log)?;
    let path = s.checkpoint.clone().unwrap_or_else(|| PathBuf::from("model.hsnn"));
    checkpoint::save(&path, &model, &s.cfg).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?;
    let eval = evaluate(&model, &test, s.cfg.batch_size)?;
    eprintln!(
        "{desc}: test accuracy {:.4}, mean spiking activity {:.4}, checkpoint {}",
        eval.accuracy(),
        eval.activity.mean_activity(),
        path.display()
    );
    Ok(())
}

fn cmd_eval(s: Settings) -> Result<(), Failure> {
    let model = s.load_checkpoint()?;
    let test = s.load(false)?;
    let eval = evaluate(&model, &test, s.cfg.batch_size)?;
    let mut text = format!("accuracy {:.4} ({}/{})\n", eval.accuracy(), eval.correct, eval.total);
    text.push_str(&format!("mean spiking activity {:.4}\n", eval.activity.mean_activity()));
    for l in &eval.activity.layers {
        text.push_str(&format!("layer {} spiking activity {:.4}\n", l.layer, l.activity()));
    }
    text.push_str("reference: VGG16 on CIFAR-10, 93.44% accuracy, 21.87% spiking activity\n");
    s.emit(&text)
}

fn cmd_analyze(s: Settings) -> Result<(), Failure> {
    let model = s.load_checkpoint()?;
    let test = s.load(false)?;
    let report = emit_report(&model, &test, s.cfg.batch_size)?;
    s.emit(&report.to_csv())
}

fn cmd_gradcheck(arch: &str, seed: u64, lambda_h: f64, tolerance: f64) -> Result<(), Failure> {
    let cfg = GradcheckConfig { tolerance, ..GradcheckConfig::default() };
    let report = gradcheck(arch, seed, lambda_h, &cfg)?;
    for g in &report.groups {
        let verdict = if g.max_rel_err < tolerance { "ok" } else { "FAIL" };
        println!("{:<36} {:>6} {:.3e} {verdict}", g.name, g.entries, g.max_rel_err);
    }
    let failures: Vec<&str> = report.failures().iter().map(|g| g.name.as_str()).collect();
    if failures.is_empty() {
        println!("all {} groups within {tolerance:e}", report.groups.len());
        Ok(())
    } else {
        Err(Failure::Run(format!("gradient check failed for {}", failures.join(", "))))
    }
}

fn set_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("HSNN_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("HSNN_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Run(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    set_threads()?;
    match cli.command {
        Command::Train { common, train } => cmd_train(resolve(&common, Some(&train))?),
        Command::Eval { common } => cmd_eval(resolve(&common, None)?),
        Command::Analyze { common } => cmd_analyze(resolve(&common, None)?),
        Command::Gradcheck { arch, seed, lambda_h, tolerance } => cmd_gradcheck(&arch, seed, lambda_h, tolerance),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
