use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::Value;

use halunet::baselines::{logistic_train, predictive_entropy, token_nll, LogisticModel};
use halunet::features::{load_dataset, read_dataset, save_dataset, DEFAULT_L_MAX};
use halunet::gradcheck::{check_random_configs, GradCheckConfig};
use halunet::metrics::{evaluate_supervised, evaluate_unsupervised, EvalReport, ScoredSet};
use halunet::model::{predict, EncoderPreset, Feature, FusionKind, HaluNet, ModelConfig};
use halunet::{generate, train, Dataset, SynthConfig, TrainConfig};

#[derive(Parser)]
#[command(
    name = "halunet",
    version,
    about = "Hallucination detection from token uncertainty features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic HFJ dataset.
    Synth(SynthArgs),
    /// Train HaluNet (or the logistic baseline) on an HFJ file.
    Train(TrainArgs),
    /// Score a test HFJ file and write evaluation reports.
    Eval(EvalArgs),
    /// Print `id<TAB>p<TAB>prediction` per record.
    Score(ScoreArgs),
    /// Compare analytic and finite-difference gradients on random small models.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    separability: f64,
    #[arg(long, default_value_t = 32)]
    d_emb: usize,
    #[arg(long, default_value_t = DEFAULT_L_MAX)]
    l_max: usize,
    #[arg(long, default_value_t = 0.5)]
    hallucination_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ModelFlags {
    /// Comma-separated subset of ll,ent,emb.
    #[arg(long, default_value = "ll,ent,emb")]
    features: String,
    /// all-cnn, mixed or all-mlp.
    #[arg(long, default_value = "all-cnn")]
    encoder: String,
    /// attention or concat.
    #[arg(long, default_value = "concat")]
    fusion: String,
    /// Pool over all l_max positions instead of the real tokens only.
    #[arg(long)]
    no_mask: bool,
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    d_mlp: Option<usize>,
    #[arg(long)]
    d_a: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; the training report goes to `<out>.report.json`.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with optional `model` and `train` objects; its fields override flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `logistic` trains the logistic baseline instead of HaluNet.
    #[arg(long)]
    baseline: Option<String>,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// HaluNet checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma-separated subset of pe,tnll,logistic.
    #[arg(long)]
    baseline: Option<String>,
    /// Trained logistic model for `--baseline logistic`.
    #[arg(long)]
    logistic_model: Option<PathBuf>,
    /// Fit the logistic baseline on this HFJ file when no `--logistic-model` is given.
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Output directory for reports, curves and score files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    /// HFJ input; reads standard input when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    configs: usize,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: Option<Value>,
    train: Option<Value>,
}

/// Overlays the fields present in `file` onto `base`.
fn overlay<T: serde::Serialize + serde::de::DeserializeOwned>(base: &T, file: Option<&Value>, what: &str) -> Result<T> {
    let Some(file) = file else {
        return Ok(serde_json::from_value(serde_json::to_value(base)?)?);
    };
    let Value::Object(fields) = file else {
        bail!("config `{what}` must be an object");
    };
    let mut merged = serde_json::to_value(base)?;
    let target = merged.as_object_mut().expect("config serializes to an object");
    for (k, v) in fields {
        if !target.contains_key(k) {
            bail!("unknown {what} config field `{k}`");
        }
        target.insert(k.clone(), v.clone());
    }
    serde_json::from_value(merged).with_context(|| format!("invalid {what} config"))
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_features(list: &str) -> Result<Vec<Feature>> {
    list.split(',')
        .map(|s| s.trim().parse::<Feature>().map_err(anyhow::Error::from))
        .collect()
}

fn model_config(flags: &ModelFlags, ds: &Dataset, file: Option<&Value>) -> Result<ModelConfig> {
    let preset: EncoderPreset = flags.encoder.parse()?;
    let fusion: FusionKind = flags.fusion.parse()?;
    let mut cfg = ModelConfig::with_preset(&parse_features(&flags.features)?, preset, fusion, ds.d_emb);
    cfg.l_max = ds.l_max;
    cfg.pooling_masked = !flags.no_mask;
    if let Some(d) = flags.d_h {
        cfg.d_h = d;
        cfg.d_conv = d;
    }
    cfg.d_mlp = flags.d_mlp.unwrap_or(cfg.d_mlp);
    cfg.d_a = flags.d_a.unwrap_or(cfg.d_a);
    let cfg: ModelConfig = overlay(&cfg, file, "model")?;
    if cfg.d_emb != ds.d_emb || cfg.l_max != ds.l_max {
        bail!(
            "model expects d_emb {} and l_max {}, data has {} and {}",
            cfg.d_emb,
            cfg.l_max,
            ds.d_emb,
            ds.l_max
        );
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let ds = generate(&SynthConfig {
        n_records: a.n,
        d_emb: a.d_emb,
        l_max: a.l_max,
        separability: a.separability,
        hallucination_rate: a.hallucination_rate,
        seed: a.seed,
    })?;
    save_dataset(&ds, &a.out)?;
    eprintln!("wrote {} records to {}", ds.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    match a.baseline.as_deref() {
        None => {}
        Some("logistic") => {
            let model = logistic_train(&ds, a.seed)?;
            model.save(&a.out)?;
            eprintln!("wrote logistic model to {}", a.out.display());
            return Ok(());
        }
        Some(other) => bail!("only the logistic baseline is trainable, got `{other}`"),
    }

    let file = read_config(a.config.as_deref())?;
    let mcfg = model_config(&a.model, &ds, file.model.as_ref())?;
    let defaults = TrainConfig::default();
    let flags = TrainConfig {
        max_epochs: a.epochs.unwrap_or(defaults.max_epochs),
        lr: a.lr.unwrap_or(defaults.lr),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        patience: a.patience.unwrap_or(defaults.patience),
        seed: a.seed,
        ..defaults
    };
    let tcfg: TrainConfig = overlay(&flags, file.train.as_ref(), "train")?;

    let (params, report) = train(&ds, &mcfg, &tcfg)?;
    let net = HaluNet::from_parts(mcfg, params)?;
    net.save(&a.out)?;
    let report_path = PathBuf::from(format!("{}.report.json", a.out.display()));
    report.save(&report_path)?;
    eprintln!(
        "best epoch {} val AUROC {:.4}; wrote {} and {}",
        report.best_epoch,
        report.best_val_auroc(),
        a.out.display(),
        report_path.display()
    );
    Ok(())
}

fn write_scores(dir: &Path, scorer: &str, ids: &[String], scores: &[f64], labels: &[u8]) -> Result<()> {
    let set = ScoredSet::new(ids, scores, labels)?;
    let path = dir.join(format!("{scorer}.scores.tsv"));
    let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    set.write_tsv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let baselines: Vec<String> = a
        .baseline
        .as_deref()
        .map(|s| s.split(',').map(|b| b.trim().to_owned()).collect())
        .unwrap_or_default();
    if a.model.is_none() && baselines.is_empty() {
        bail!("nothing to evaluate: pass --model and/or --baseline");
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ids: Vec<String> = ds.records.iter().map(|r| r.id.clone()).collect();
    let labels = ds.labels();

    let mut results: Vec<(EvalReport, Vec<f64>)> = Vec::new();
    if let Some(path) = &a.model {
        let net = HaluNet::load(path)?;
        check_shape(net.config(), &ds)?;
        let p = net.score_all(&ds.records)?;
        results.push((evaluate_supervised("halunet", &p, &labels)?, p));
    }
    for b in &baselines {
        let (report, scores) = match b.as_str() {
            "pe" => {
                let s: Vec<f64> = ds.records.iter().map(predictive_entropy).collect();
                (evaluate_unsupervised("pe", &s, &labels)?, s)
            }
            "tnll" => {
                let s: Vec<f64> = ds.records.iter().map(token_nll).collect();
                (evaluate_unsupervised("tnll", &s, &labels)?, s)
            }
            "logistic" => {
                let model = match (&a.logistic_model, &a.train_data) {
                    (Some(path), _) => LogisticModel::load(path)?,
                    (None, Some(train_path)) => logistic_train(&load_dataset(train_path)?, a.seed)?,
                    (None, None) => bail!("--baseline logistic needs --logistic-model or --train-data"),
                };
                let p: Vec<f64> = ds.records.iter().map(|r| model.predict_proba(r)).collect();
                (evaluate_supervised("logistic", &p, &labels)?, p)
            }
            other => bail!("unknown baseline `{other}` (expected pe, tnll or logistic)"),
        };
        results.push((report, scores));
    }

    for (report, scores) in &results {
        report.save(&a.out)?;
        write_scores(&a.out, &report.scorer, &ids, scores, &labels)?;
        println!(
            "{}\tauroc {:.4}\taurac {:.4}\tra@50 {:.4}\tf1@b {:.4}",
            report.scorer, report.auroc, report.aurac, report.ra_at_50, report.f1_at_best
        );
    }
    Ok(())
}

fn check_shape(cfg: &ModelConfig, ds: &Dataset) -> Result<()> {
    if cfg.d_emb != ds.d_emb || cfg.l_max != ds.l_max {
        bail!(
            "checkpoint expects d_emb {} and l_max {}, data has {} and {}",
            cfg.d_emb,
            cfg.l_max,
            ds.d_emb,
            ds.l_max
        );
    }
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let net = HaluNet::load(&a.model)?;
    let ds = match &a.data {
        Some(path) => load_dataset(path)?,
        None => read_dataset(io::stdin().lock())?,
    };
    check_shape(net.config(), &ds)?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for r in &ds.records {
        let p = f64::from(net.forward(r)?.p);
        writeln!(out, "{}\t{}\t{}", r.id, p, predict(p))?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let check = GradCheckConfig {
        eps: a.eps,
        tolerance: a.tolerance,
        ..GradCheckConfig::default()
    };
    let reports = check_random_configs(a.configs, a.seed, &check)?;
    let mut worst = 0f64;
    for (i, r) in reports.iter().enumerate() {
        for t in &r.tensors {
            println!("{i}\t{}\t{:.3e}\t{} skipped", t.name, t.max_rel_error, t.skipped);
        }
        worst = worst.max(r.max_rel_error());
    }
    println!("max relative error {worst:.3e} (tolerance {:e})", a.tolerance);
    if worst.is_nan() || worst >= a.tolerance {
        bail!(
            "gradient check failed: max relative error {worst:.3e} >= {:e}",
            a.tolerance
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Score(a) => cmd_score(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
