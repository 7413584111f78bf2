//! Command-line pipeline: every subcommand reads and writes fixed file names
//! inside the output directory, so the stages can be run one after another.
//!
//! Settings come from an optional TOML file of flat `key = value` lines;
//! every key can be overridden by the global flag of the same name.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::diffmask::{attribute, train_probe, Baselines, MaskMode, PerExampleConfig, ProbeConfig, ProbeParams};
use crate::error::{Error, Result};
use crate::experiments::{self, ATTRIBUTION_SEED};
use crate::hardconcrete::HardConcrete;
use crate::heatmap::{render_svg, HeatmapRow};
use crate::metrics::{write_report_csv, write_report_json, ReportRow};
use crate::model::{self, ModelConfig, ModelParams, TrainConfig};
use crate::toytask::{generate_dataset, ToyDataset, ToyExample};

pub const DATA_FILE: &str = "data.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const PROBE_FILE: &str = "probe.json";
pub const CONSTRAINT_FILE: &str = "constraint_trace.csv";
pub const ATTRIBUTION_CSV: &str = "attribution.csv";
pub const ATTRIBUTION_SVG: &str = "attribution.svg";
pub const COMPARE_CSV: &str = "compare.csv";
pub const COMPARE_JSON: &str = "compare.json";
pub const TABLE1_CSV: &str = "table1.csv";
pub const TABLE2_CSV: &str = "table2.csv";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Debug, Parser)]
#[command(name = "diffmask", version, about = "Differentiable masking on the digit-counting toy task")]
pub struct Cli {
    /// TOML file of `key = value` settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Sample the dataset and write it as JSON lines.
    GenerateData,
    /// Train the toy classifier on the generated data.
    TrainModel,
    /// Train an amortized probe on the frozen classifier.
    TrainProbe,
    /// Attribute one example and draw the per-layer heatmap.
    Attribute,
    /// Compare attribution methods against the ground truth and the erasure oracle.
    Compare,
    /// Summarize the artifacts of the previous stages.
    Report,
}

/// Every setting, optional so that file values and flags can be layered.
#[derive(Clone, Debug, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub data_size: Option<usize>,
    #[arg(long, global = true)]
    pub max_len: Option<usize>,
    #[arg(long, global = true)]
    pub embed_dim: Option<usize>,
    #[arg(long, global = true)]
    pub ffnn_hidden: Option<usize>,
    #[arg(long, global = true)]
    pub gru_hidden: Option<usize>,
    #[arg(long, global = true)]
    pub model_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub model_lr: Option<f64>,
    #[arg(long, global = true)]
    pub model_batch: Option<usize>,
    #[arg(long, global = true)]
    pub target_accuracy: Option<f64>,
    /// `input` (two probe layers) or `hidden` (bottleneck outputs).
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[arg(long, global = true)]
    pub margin: Option<f64>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    pub stretch_left: Option<f64>,
    #[arg(long, global = true)]
    pub stretch_right: Option<f64>,
    #[arg(long, global = true)]
    pub probe_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub probe_lr: Option<f64>,
    #[arg(long, global = true)]
    pub baseline_lr: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_lr: Option<f64>,
    /// Digits of the example to attribute, comma separated.
    #[arg(long, global = true)]
    pub digits: Option<String>,
    /// Query pair of the example to attribute, as `n,m`.
    #[arg(long, global = true)]
    pub query: Option<String>,
    /// Validation examples in the divergence table (0 = all).
    #[arg(long, global = true)]
    pub table1_examples: Option<usize>,
    /// Validation examples in the agreement table.
    #[arg(long, global = true)]
    pub table2_examples: Option<usize>,
    #[arg(long, global = true)]
    pub per_example_steps: Option<usize>,
    #[arg(long, global = true)]
    pub per_example_lr: Option<f64>,
}

macro_rules! layer {
    ($top:ident, $bottom:ident, $($field:ident),*) => {
        Settings { $($field: $top.$field.clone().or_else(|| $bottom.$field.clone())),* }
    };
}

impl Settings {
    /// Values from `self`, falling back to `other`.
    pub fn or(&self, other: &Settings) -> Settings {
        layer!(
            self, other, seed, out_dir, data_size, max_len, embed_dim, ffnn_hidden, gru_hidden, model_epochs, model_lr,
            model_batch, target_accuracy, mode, margin, temperature, stretch_left, stretch_right, probe_epochs, probe_lr,
            baseline_lr, lambda_lr, digits, query, table1_examples, table2_examples, per_example_steps, per_example_lr
        )
    }

    /// Parses a settings file, reporting the offending line on error.
    pub fn from_toml(path: &Path, text: &str) -> Result<Settings> {
        toml::from_str(text).map_err(|e| {
            let offset = e.span().map(|s| s.start).unwrap_or(0);
            Error::Parse {
                path: path.display().to_string(),
                line: text[..offset.min(text.len())].matches('\n').count() + 1,
                msg: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(path, &text)
    }
}

/// Fully resolved settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_size: usize,
    pub max_len: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mode: MaskMode,
    pub probe: ProbeConfig,
    pub example: ToyExample,
    pub table1_examples: usize,
    pub table2_examples: usize,
    pub per_example: PerExampleConfig,
}

fn parse_digits(s: &str, what: &str) -> Result<Vec<u8>> {
    s.split(',')
        .map(|d| {
            d.trim()
                .parse::<u8>()
                .map_err(|_| Error::InvalidArgument(format!("{what}: `{d}` is not a digit")))
        })
        .collect()
}

impl RunConfig {
    pub fn resolve(s: &Settings) -> Result<RunConfig> {
        let seed = s
            .seed
            .ok_or_else(|| Error::InvalidArgument("a seed is required (--seed or `seed = …` in the config)".into()))?;
        let mut model = ModelConfig::default();
        model.embed_dim = s.embed_dim.unwrap_or(model.embed_dim);
        model.ffnn_hidden = s.ffnn_hidden.unwrap_or(model.ffnn_hidden);
        model.gru_hidden = s.gru_hidden.unwrap_or(model.gru_hidden);
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            seed,
            epochs: s.model_epochs.unwrap_or(defaults.epochs),
            lr: s.model_lr.unwrap_or(defaults.lr),
            batch_size: s.model_batch.unwrap_or(defaults.batch_size),
            target_accuracy: s.target_accuracy.unwrap_or(defaults.target_accuracy),
            ..defaults
        };
        let mode = MaskMode::parse(s.mode.as_deref().unwrap_or("input"))?;
        let gate_defaults = HardConcrete::default();
        let gate = HardConcrete::new(
            s.temperature.unwrap_or(gate_defaults.temperature),
            s.stretch_left.unwrap_or(gate_defaults.left),
            s.stretch_right.unwrap_or(gate_defaults.right),
        )?;
        let pd = ProbeConfig::default();
        let margin = s.margin.unwrap_or(pd.margin);
        if margin.is_nan() || margin < 0.0 {
            return Err(Error::InvalidArgument(format!("margin must be non-negative, got {margin}")));
        }
        let probe = ProbeConfig {
            seed,
            epochs: s.probe_epochs.unwrap_or(pd.epochs),
            lr: s.probe_lr.unwrap_or(pd.lr),
            lr_baseline: s.baseline_lr.unwrap_or(pd.lr_baseline),
            lr_lambda: s.lambda_lr.unwrap_or(pd.lr_lambda),
            margin,
            gate,
            ..pd
        };
        let ped = PerExampleConfig::default();
        let per_example = PerExampleConfig {
            seed,
            steps: s.per_example_steps.unwrap_or(ped.steps),
            lr: s.per_example_lr.unwrap_or(ped.lr),
            lr_lambda: probe.lr_lambda,
            margin,
            ..ped
        };
        let digits = parse_digits(s.digits.as_deref().unwrap_or("7,3,7,1"), "digits")?;
        let query = parse_digits(s.query.as_deref().unwrap_or("7,1"), "query")?;
        let [n, m] = query[..] else {
            return Err(Error::InvalidArgument(format!("query needs two digits, got {}", query.len())));
        };
        Ok(RunConfig {
            seed,
            out_dir: s.out_dir.clone().unwrap_or_else(|| PathBuf::from("run")),
            data_size: s.data_size.unwrap_or(10_000),
            max_len: s.max_len.unwrap_or(10),
            model,
            train,
            mode,
            probe,
            example: ToyExample::new(digits, (n, m))?,
            table1_examples: s.table1_examples.unwrap_or(0),
            table2_examples: s.table2_examples.unwrap_or(100),
            per_example,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }

    /// Path of an artifact an earlier stage should have written.
    fn input(&self, file: &str) -> Result<PathBuf> {
        let p = self.path(file);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Missing(p))
        }
    }

    fn load_data(&self) -> Result<ToyDataset> {
        ToyDataset::load_jsonl(&self.input(DATA_FILE)?)
    }

    fn load_model(&self) -> Result<ModelParams> {
        ModelParams::load_checkpoint_with(&self.input(MODEL_FILE)?, self.model)
    }

    fn load_probe(&self, model: &ModelParams) -> Result<ProbeParams> {
        ProbeParams::load_checkpoint(&self.input(PROBE_FILE)?, model)
    }
}

/// Parses `args`, runs the command and returns the process exit status.
/// Messages go to `out` and diagnostics to `err`.
pub fn main_with_args<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    match run_cli(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run_cli(cli: &Cli, out: &mut dyn std::io::Write) -> Result<()> {
    let file = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    let config = RunConfig::resolve(&cli.settings.or(&file))?;
    std::fs::create_dir_all(&config.out_dir)?;
    let message = run(cli.command, &config)?;
    out.write_all(message.as_bytes())?;
    Ok(())
}

/// Runs one stage and returns a short description of what it wrote.
pub fn run(command: Command, config: &RunConfig) -> Result<String> {
    match command {
        Command::GenerateData => generate_data(config),
        Command::TrainModel => train_model(config),
        Command::TrainProbe => train_probe_stage(config),
        Command::Attribute => attribute_stage(config),
        Command::Compare => compare(config),
        Command::Report => report(config),
    }
}

fn generate_data(config: &RunConfig) -> Result<String> {
    let data = generate_dataset(config.seed, config.data_size, config.max_len)?;
    let path = config.path(DATA_FILE);
    data.save_jsonl(&path)?;
    Ok(format!(
        "wrote {} ({} train, {} validation)\n",
        path.display(),
        data.train.len(),
        data.validation.len()
    ))
}

fn write_lines(path: &Path, header: &str, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{header}")?;
    for line in lines {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn train_model(config: &RunConfig) -> Result<String> {
    let data = config.load_data()?;
    let trained = model::train(&data, config.model, &config.train)?;
    trained.params.save_checkpoint(&config.path(MODEL_FILE))?;
    write_lines(
        &config.path(TRAIN_LOG_FILE),
        "epoch,train_loss,validation_accuracy",
        trained
            .log
            .iter()
            .map(|e| format!("{},{},{}", e.epoch, e.train_loss, e.validation_accuracy)),
    )?;
    Ok(format!(
        "validation accuracy {:.4} after {} epochs; wrote {}\n",
        trained.validation_accuracy,
        trained.log.len(),
        config.path(MODEL_FILE).display()
    ))
}

fn train_probe_stage(config: &RunConfig) -> Result<String> {
    let data = config.load_data()?;
    let model = config.load_model()?;
    let trained = train_probe(&model, &data, &config.probe, config.mode)?;
    trained.probe.save_checkpoint(&config.path(PROBE_FILE))?;
    write_lines(
        &config.path(CONSTRAINT_FILE),
        "epoch,layer,mean_kl,mean_expected_l0,lambda",
        trained.log.iter().map(|r| {
            format!(
                "{},{},{},{},{}",
                r.epoch, r.layer, r.mean_kl, r.mean_expected_l0, r.lambda
            )
        }),
    )?;
    let last: Vec<String> = trained
        .log
        .iter()
        .rev()
        .take(trained.probe.layers.len())
        .rev()
        .map(|r| format!("layer {}: KL {:.4}, expected L0 {:.3}", r.layer, r.mean_kl, r.mean_expected_l0))
        .collect();
    Ok(format!(
        "{} probe trained; {}; wrote {}\n",
        config.mode.as_str(),
        last.join("; "),
        config.path(PROBE_FILE).display()
    ))
}

fn attribute_stage(config: &RunConfig) -> Result<String> {
    let model = config.load_model()?;
    let probe = config.load_probe(&model)?;
    let ex = &config.example;
    let layers = probe.mode.layers();
    let attrs = layers
        .iter()
        .map(|&l| attribute(&model, &probe, ex, l, ATTRIBUTION_SEED))
        .collect::<Result<Vec<_>>>()?;
    let header = std::iter::once("position,digit".to_string())
        .chain(layers.iter().map(|l| format!("layer_{l}")))
        .collect::<Vec<_>>()
        .join(",");
    write_lines(
        &config.path(ATTRIBUTION_CSV),
        &header,
        (0..ex.len()).map(|i| {
            let mut line = format!("{i},{}", ex.digits[i]);
            for a in &attrs {
                let _ = write!(line, ",{}", a.raw[i]);
            }
            line
        }),
    )?;
    let rows: Vec<HeatmapRow> = layers
        .iter()
        .zip(&attrs)
        .map(|(l, a)| HeatmapRow {
            label: format!("ℓ={l}"),
            values: a.raw.clone(),
        })
        .collect();
    let columns: Vec<String> = ex.digits.iter().map(u8::to_string).collect();
    let title = format!("query ({}, {})", ex.query.0, ex.query.1);
    std::fs::write(config.path(ATTRIBUTION_SVG), render_svg(&title, &columns, &rows))?;
    Ok(format!(
        "wrote {} and {}\n",
        config.path(ATTRIBUTION_CSV).display(),
        config.path(ATTRIBUTION_SVG).display()
    ))
}

fn compare(config: &RunConfig) -> Result<String> {
    let data = config.load_data()?;
    let model = config.load_model()?;
    let probe = config.load_probe(&model)?;
    let validation = &data.validation;
    let take = if config.table1_examples == 0 {
        validation.len()
    } else {
        config.table1_examples.min(validation.len())
    };
    let table1 = experiments::divergence_table(&model, &probe, &validation[..take])?;
    let short: Vec<ToyExample> = validation
        .iter()
        .filter(|ex| ex.len() <= config.max_len)
        .take(config.table2_examples)
        .cloned()
        .collect();
    let baselines = Baselines::from_probe(&probe);
    let table2 = experiments::agreement_table(&model, &short, &baselines, config.probe.gate, &config.per_example, probe.mode)?;
    let sep = experiments::separability(&model);

    let rows1 = experiments::divergence_rows(&table1);
    let rows2 = experiments::agreement_rows(&table2.table);
    let rows3 = vec![
        ReportRow::new("bottleneck", "membership_separability", sep.membership),
        ReportRow::new("bottleneck", "role_separability", sep.roles),
    ];
    write_report_csv(&config.path(TABLE1_CSV), &rows1)?;
    write_report_csv(&config.path(TABLE2_CSV), &rows2)?;
    let all: Vec<ReportRow> = rows1.into_iter().chain(rows2).chain(rows3).collect();
    write_report_csv(&config.path(COMPARE_CSV), &all)?;
    write_report_json(&config.path(COMPARE_JSON), &all)?;
    Ok(format!(
        "compared {} examples (divergence) and {} examples (agreement); wrote {}\n",
        take,
        short.len(),
        config.path(COMPARE_CSV).display()
    ))
}

fn read_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let parts: Vec<&str> = l.split(',').collect();
            let bad = |msg: &str| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let [method, metric, value] = parts[..] else {
                return Err(bad("expected method,metric,value"));
            };
            let value = value.parse().map_err(|_| bad("value is not a number"))?;
            Ok(ReportRow::new(method, metric, value))
        })
        .collect()
}

fn report(config: &RunConfig) -> Result<String> {
    let mut text = String::new();
    let _ = writeln!(text, "seed {}  output {}", config.seed, config.out_dir.display());
    let log = config.input(TRAIN_LOG_FILE)?;
    let last = std::fs::read_to_string(&log)?.lines().last().unwrap_or_default().to_string();
    if let [epoch, loss, acc] = last.split(',').collect::<Vec<_>>()[..] {
        let _ = writeln!(text, "\ntoy model: epoch {epoch}, train loss {loss}, validation accuracy {acc}");
    }
    let trace = std::fs::read_to_string(config.input(CONSTRAINT_FILE)?)?;
    let _ = writeln!(text, "\nprobe constraint (last epoch):");
    let lines: Vec<&str> = trace.lines().skip(1).collect();
    if let Some(last_epoch) = lines.last().and_then(|l| l.split(',').next()) {
        for l in lines.iter().filter(|l| l.split(',').next() == Some(last_epoch)) {
            let f: Vec<&str> = l.split(',').collect();
            if let [_, layer, kl, l0, lambda] = f[..] {
                let _ = writeln!(text, "  layer {layer}: KL {kl}  expected L0 {l0}  lambda {lambda}");
            }
        }
    }
    let rows = read_rows(&config.input(COMPARE_CSV)?)?;
    let _ = writeln!(text, "\n{:<22} {:<24} {:>12}", "method", "metric", "value");
    for r in &rows {
        let _ = writeln!(text, "{:<22} {:<24} {:>12.4}", r.method, r.metric, r.value);
    }
    std::fs::write(config.path(REPORT_FILE), &text)?;
    Ok(text)
}
