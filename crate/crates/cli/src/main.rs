//! Command-line entry point: data generation, training, forecasting,
//! report generation, evaluation, ablation and self-verification.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use traffic_text::checkpoint::Checkpoint;
use traffic_text::dataset::{generate_synthetic, Dataset, Sample, SyntheticConfig};
use traffic_text::metrics::plot_csv;
use traffic_text::model::{Components, Conditioning, Dims, Model, ModelConfig, Prepared};
use traffic_text::training::{
    evaluate_model, loss_trace_csv, run_ablation, split_dataset, train, Evaluation, Experiment, TrainConfig,
};
use traffic_text::verify::{self, VerifyOptions};
use traffic_text::Error;

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_UNKNOWN_COMMAND: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "traffic-text", version, about = "Text-guided traffic forecasting and report generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic road network dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus its loss trace.
    Train(TrainArgs),
    /// Write forecasts for the test split as CSV.
    Predict(RunArgs),
    /// Write generated reports for the test split as JSON lines.
    Describe(RunArgs),
    /// Score a checkpoint on the test split.
    Evaluate(RunArgs),
    /// Train and score every component configuration.
    Ablate(AblateArgs),
    /// Run gradient checks and reference comparisons.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    nodes: usize,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0.3)]
    anomaly_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    depth: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Field-by-field overrides of config.json.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Component set: full, none, no-text, or `+`-joined gcn/importance/xattn/memory.
    #[arg(long)]
    ablate: Option<Components>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lambda_text: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long, value_parser = parse_conditioning)]
    conditioning: Option<Conditioning>,
    /// Start from the full-scale schedule (lr 5e-5, 50 epochs, 5 warmup).
    #[arg(long)]
    full_scale: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Traffic the report generator reads: the forecast or the observed future.
    #[arg(long, value_parser = parse_conditioning)]
    conditioning: Option<Conditioning>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, hide = true)]
    inject_grad_corruption: bool,
}

fn parse_conditioning(s: &str) -> Result<Conditioning, String> {
    match s {
        "predicted" => Ok(Conditioning::Predicted),
        "observed" => Ok(Conditioning::Observed),
        other => Err(format!("expected predicted or observed, got {other:?}")),
    }
}

/// Merged view of config.json and flag overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

impl RunConfig {
    fn resolve(o: &Overrides) -> Result<RunConfig, Failure> {
        let mut cfg = match &o.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::usage(format!("invalid config {}: {e}", path.display())))?
            }
            None if o.full_scale => RunConfig {
                train: TrainConfig::full_scale(),
                ..RunConfig::default()
            },
            None => RunConfig::default(),
        };
        if let Some(v) = o.ablate {
            cfg.model.components = v;
        }
        if let Some(v) = o.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = o.warmup_epochs {
            cfg.train.warmup_epochs = v;
        }
        if let Some(v) = o.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = o.batch {
            cfg.train.batch = v;
        }
        if let Some(v) = o.lambda_text {
            cfg.train.lambda_text = v;
        }
        if let Some(v) = o.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = o.window {
            cfg.model.window = v;
        }
        if let Some(v) = o.d_model {
            cfg.model.d_model = v;
        }
        if let Some(v) = o.conditioning {
            cfg.model.eval_conditioning = v;
        }
        cfg.model.validate().map_err(Failure::from)?;
        cfg.train.validate().map_err(Failure::from)?;
        Ok(cfg)
    }
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        let code = if matches!(e, Error::Divergence(_)) { EXIT_DIVERGENCE } else { EXIT_USAGE };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                ErrorKind::InvalidSubcommand => EXIT_UNKNOWN_COMMAND,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Describe(a) => describe(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Verify(a) => verify_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn write_file(path: &Path, body: &[u8]) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::usage(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, body).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

fn load_data(dir: &Path) -> Result<Dataset, Failure> {
    if !dir.is_dir() {
        return Err(Failure::usage(format!("data directory {} does not exist", dir.display())));
    }
    Ok(Dataset::load(dir)?)
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let cfg = SyntheticConfig::new(a.nodes, a.steps, a.anomaly_rate, a.depth, a.seed);
    let data = generate_synthetic(&cfg)?;
    let anomalies = data.events.len();
    let mut ds: Dataset = data.into();
    ds.seed = Some(a.seed);
    ds.save(&a.out)?;
    println!(
        "wrote {}: {} nodes, {} steps, {} anomalies",
        a.out.display(),
        ds.graph.n_nodes(),
        ds.series.n_steps(),
        anomalies
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let cfg = RunConfig::resolve(&a.overrides)?;
    let ds = load_data(&a.data)?;
    let exp = Experiment::from_dataset(&ds, cfg.model.window, cfg.model.text_len)?;
    let mut model = exp.build(cfg.model.clone(), cfg.train.seed)?;
    println!(
        "training {} ({} parameters) on {} windows for {} epochs",
        cfg.model.components,
        model.params.num_scalars(),
        exp.train.len(),
        cfg.train.epochs
    );
    let outcome = train(&mut model, &exp.train, &cfg.train)?;
    for e in &outcome.trace {
        println!("epoch {:>3}  loss {:.5}  mse {:.5}  ce {:.5}", e.epoch, e.total, e.mse, e.ce);
    }
    let ck = Checkpoint {
        model,
        stats: exp.stats.clone(),
        vocab: exp.vocab.words().to_vec(),
        seed: cfg.train.seed,
    };
    ck.save(&a.out)?;
    write_file(&a.out.join("loss_trace.csv"), loss_trace_csv(&outcome.trace).as_bytes())?;
    write_file(
        &a.out.join("run_config.json"),
        serde_json::to_string_pretty(&cfg).expect("config serializes").as_bytes(),
    )?;
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

/// Checkpoint plus the test split of `data`, checked for compatibility.
struct Loaded {
    ck: Checkpoint,
    test: Vec<Sample>,
}

fn load_run(ckpt: &Path, data: &Path) -> Result<Loaded, Failure> {
    let ck = Checkpoint::load(ckpt)?;
    let ds = load_data(data)?;
    let m = &ck.model;
    let dims = Dims {
        n_nodes: ds.series.n_nodes(),
        channels: ds.series.channels(),
        vocab_size: m.dims.vocab_size,
    };
    if dims != m.dims {
        return Err(Failure::usage(format!(
            "data has {} nodes x {} channels, checkpoint expects {} x {}",
            dims.n_nodes, dims.channels, m.dims.n_nodes, m.dims.channels
        )));
    }
    if ds.graph.node_names != m.graph.node_names {
        return Err(Failure::usage("data node names differ from the checkpoint's".to_string()));
    }
    let vocab = ck.vocab()?;
    let (_, test) = split_dataset(&ds, &vocab, m.config.window, m.config.text_len)?;
    Ok(Loaded { ck, test })
}

fn run_eval(l: &Loaded, conditioning: Option<Conditioning>) -> Result<Evaluation, Failure> {
    let vocab = l.ck.vocab()?;
    let cond = conditioning.unwrap_or(l.ck.model.config.eval_conditioning);
    Ok(evaluate_model(&l.ck.model, &l.test, &l.ck.stats, &vocab, cond)?)
}

fn predict(a: RunArgs) -> CmdResult {
    let l = load_run(&a.ckpt, &a.data)?;
    let model: &Model = &l.ck.model;
    let (n, c) = (model.dims.n_nodes, model.dims.channels);
    let mut out = String::from("anchor,step");
    for name in &model.graph.node_names {
        for ch in 0..c {
            if c == 1 {
                write!(out, ",{name}").unwrap();
            } else {
                write!(out, ",{name}:{ch}").unwrap();
            }
        }
    }
    out.push('\n');
    for s in &l.test {
        let p = Prepared::from_sample(s, &l.ck.stats);
        let y = model.forecast(&model.params, &p)?;
        let y = traffic_text::model::to_original_units(y, model.config.window, model.dims, &l.ck.stats)?;
        for (step, row) in y.data().chunks(n * c).enumerate() {
            write!(out, "{},{}", s.anchor, step + 1).unwrap();
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
    }
    write_file(&a.out, out.as_bytes())?;
    println!("wrote {} forecast windows to {}", l.test.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct ReportLine<'a> {
    anchor: usize,
    text: String,
    selected_nodes: Vec<&'a str>,
}

fn describe(a: RunArgs) -> CmdResult {
    let l = load_run(&a.ckpt, &a.data)?;
    let ev = run_eval(&l, a.conditioning)?;
    let vocab = l.ck.vocab()?;
    let names = &l.ck.model.graph.node_names;
    let mut out = String::new();
    for ((anchor, seq), sel) in ev.anchors.iter().zip(&ev.generated).zip(&ev.selected) {
        let line = ReportLine {
            anchor: *anchor,
            text: vocab.decode(&seq.ids),
            selected_nodes: sel.iter().map(|&i| names[i].as_str()).collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("line serializes"));
        out.push('\n');
    }
    write_file(&a.out, out.as_bytes())?;
    println!("wrote {} reports to {}", ev.generated.len(), a.out.display());
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}_{suffix}"))
}

fn evaluate(a: RunArgs) -> CmdResult {
    let l = load_run(&a.ckpt, &a.data)?;
    let ev = run_eval(&l, a.conditioning)?;
    let report = &ev.report;
    report.validate()?;
    write_file(&a.out, report.to_json().as_bytes())?;

    let mut horizons = String::from("horizon,mae,rmse\n");
    let mut keys: Vec<_> = report.pred.iter().collect();
    keys.sort_by_key(|(k, _)| k[1..].parse::<usize>().unwrap_or(usize::MAX));
    for (k, h) in &keys {
        writeln!(horizons, "{k},{},{}", h.mae, h.rmse).unwrap();
    }
    write_file(&sibling(&a.out, "horizons.csv"), horizons.as_bytes())?;
    let targets: Vec<_> = l.test.iter().map(|s| s.y_future.clone()).collect();
    let series = plot_csv(&ev.anchors, &ev.forecasts, &targets)?;
    write_file(&sibling(&a.out, "series.csv"), series.as_bytes())?;

    for (k, h) in keys {
        println!("{k:<4} MAE {:.4}  RMSE {:.4}", h.mae, h.rmse);
    }
    println!(
        "BLEU-4 {:.2}  METEOR {:.4}  ROUGE-L {:.4}  ({} samples)",
        report.text.bleu4, report.text.meteor, report.text.rouge_l, report.n_samples
    );
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> CmdResult {
    let cfg = RunConfig::resolve(&a.overrides)?;
    let ds = load_data(&a.data)?;
    let exp = Experiment::from_dataset(&ds, cfg.model.window, cfg.model.text_len)?;
    let table = run_ablation(&exp, &cfg.model, &cfg.train)?;
    write_file(&a.out, table.to_json().as_bytes())?;
    print!("{}", table.render());
    Ok(())
}

fn verify_cmd(a: VerifyArgs) -> CmdResult {
    let opts = VerifyOptions {
        grad_corruption: if a.inject_grad_corruption { 1.01 } else { 1.0 },
    };
    let report = verify::run(opts);
    print!("{}", report.render());
    println!("{} checks in {:.1}s", report.checks.len(), report.elapsed_secs);
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<_> = report.failures().iter().map(|c| c.name.clone()).collect();
        Err(Failure {
            code: EXIT_VERIFY,
            message: format!("verification failed: {}", names.join(", ")),
        })
    }
}
