use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use meta_debias::bias::{dataset_distribution, is_degenerate, kl_divergence, BiasGroup, BiasType};
use meta_debias::experiment::{evaluate, mean, run_seed, ExperimentConfig, SeedRun};
use meta_debias::meta::{train, DifferentiableModel, ParamVector};
use meta_debias::metrics::MetricsReport;
use meta_debias::splitter::build_episode;
use meta_debias::synth::{
    erm_baseline, featurize_dataset, generate_biased_dataset, SynthConfig, ToyFeaturizer, ToyModel,
};
use meta_debias::triplet::{load_dataset, save_dataset};
use meta_debias::Error;

#[derive(Parser)]
#[command(name = "meta-debias", version, about = "Meta-learning debiasing for relation-triplet predictors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write per-bias-type conditional distributions of a dataset.
    Audit {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Build one support/query episode.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        epoch: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Meta-train the toy predictor, optionally next to the ERM baseline.
    Train {
        /// Training annotations with features; the synthetic task is used when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        test_consistent: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        test_contradicting: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score saved parameters on a dataset.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Second split used for the bias gap, with `--dataset` as the consistent one.
        #[arg(long)]
        contradicting: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,3")]
        k: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic biased task.
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

/// Flags shared by every experiment command; each overrides the JSON config.
#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Meta-training learning rate [default: 0.0005]
    #[arg(long)]
    alpha: Option<f64>,
    /// Meta-optimization learning rate [default: 0.01]
    #[arg(long)]
    beta: Option<f64>,
    /// Fraction of videos in the support set [default: 0.6]
    #[arg(long)]
    support_fraction: Option<f64>,
    #[arg(long)]
    query_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<BiasGroup>,
    #[arg(long)]
    first_order: bool,
    #[arg(long)]
    with_baseline: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Parse {
                    path: path.clone(),
                    line: e.line(),
                    column: e.column(),
                    message: e.to_string(),
                })?
            }
            None => ExperimentConfig {
                with_baseline: false,
                ..ExperimentConfig::default()
            },
        };
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
            cfg.synth.seed = seed;
            cfg.split.seed = seed;
        }
        if let Some(v) = self.epochs {
            cfg.meta.epochs = v;
        }
        if let Some(v) = self.alpha {
            cfg.meta.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.meta.beta = v;
        }
        if let Some(v) = self.support_fraction {
            cfg.split.support_fraction = v;
        }
        if let Some(v) = self.query_size {
            cfg.split.query_size = v;
        }
        if !self.ablate.is_empty() {
            cfg.split.ablate = self.ablate.clone();
        }
        if self.first_order {
            cfg.meta.second_order = false;
        }
        if self.with_baseline {
            cfg.with_baseline = true;
        }
        cfg.meta.validate()?;
        cfg.synth.validate()?;
        if cfg.seeds.is_empty() {
            return Err(Error::Validation("seed list is empty".into()));
        }
        Ok(cfg)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Csv(_) => 4,
        Error::Divergence { .. } | Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    write_text(path, &text)
}

/// Echoes the effective configuration next to the outputs.
fn write_resolved(out: &Path, cfg: &ExperimentConfig, extra: Value) -> Result<(), Error> {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    if let (Value::Object(map), Value::Object(more)) = (&mut v, extra) {
        map.extend(more);
    }
    write_json(&out.join("config.resolved.json"), &v)
}

fn file_name(bt: &BiasType) -> String {
    bt.tag().replace([':', '|', ','], "_") + ".json"
}

fn audit(dataset: &Path, common: &Common) -> Result<(), Error> {
    let ds = load_dataset(dataset)?;
    let cfg = common.resolve()?;
    create_dir(&common.out)?;
    write_resolved(&common.out, &cfg, json!({ "dataset": dataset }))?;
    let mut summary = Vec::new();
    for bt in BiasType::all() {
        let path = common.out.join(file_name(&bt));
        if cfg.split.skip_degenerate && is_degenerate(&ds, &bt) {
            write_json(&path, &json!({ "bias_type": bt.tag(), "degenerate": "skipped" }))?;
            summary.push(json!({ "bias_type": bt.tag(), "degenerate": "skipped" }));
            continue;
        }
        let phi = dataset_distribution(&ds, &bt);
        write_json(&path, &phi.to_report(&ds))?;

        // divergence of each condition from the pooled target marginal
        let mut marginal = vec![0.0; phi.target_size()];
        for (_, e) in phi.entries() {
            for (m, &c) in marginal.iter_mut().zip(e.counts()) {
                *m += c as f64;
            }
        }
        let total: f64 = marginal.iter().sum();
        if total > 0.0 {
            marginal.iter_mut().for_each(|m| *m /= total);
        }
        let mut keys = phi
            .entries()
            .map(|(k, e)| Ok((k.0.clone(), e.support_count(), kl_divergence(e.probs(), &marginal, cfg.split.epsilon)?)))
            .collect::<Result<Vec<_>, Error>>()?;
        keys.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
        keys.truncate(5);
        summary.push(json!({
            "bias_type": bt.tag(),
            "events": phi.total_events(),
            "keys": phi.len(),
            "top_divergent": keys
                .iter()
                .map(|(k, n, d)| json!({ "key": k, "counts": n, "kl": d }))
                .collect::<Vec<_>>(),
        }));
        info!("{}: {} keys, {} events", bt.tag(), phi.len(), phi.total_events());
    }
    write_json(&common.out.join("summary.json"), &summary)?;
    println!("wrote {} bias reports to {}", summary.len(), common.out.display());
    Ok(())
}

fn split(dataset: &Path, epoch: usize, common: &Common) -> Result<(), Error> {
    let ds = load_dataset(dataset)?;
    let cfg = common.resolve()?;
    let split_cfg = cfg.split.clone();
    let episode = build_episode(&ds, &split_cfg, epoch)?;
    create_dir(&common.out)?;
    write_resolved(&common.out, &cfg, json!({ "dataset": dataset, "epoch": epoch }))?;
    write_text(&common.out.join("episode.json"), &episode.to_json())?;
    println!("support: {} videos", episode.support_ids.len());
    for q in &episode.query_sets {
        println!("{:<40} {:>4} videos  mean_kl {:.4}", q.bias_type.tag(), q.videos.len(), q.mean_kl);
    }
    Ok(())
}

fn synth(common: &Common) -> Result<(), Error> {
    let cfg = common.resolve()?;
    let task = generate_biased_dataset(&SynthConfig {
        seed: cfg.seeds[0],
        ..cfg.synth.clone()
    })?;
    create_dir(&common.out)?;
    write_resolved(&common.out, &cfg, json!({}))?;
    for (name, ds) in [
        ("train.json", &task.train),
        ("test_consistent.json", &task.test_consistent),
        ("test_contradicting.json", &task.test_contradicting),
    ] {
        save_dataset(ds, common.out.join(name))?;
        println!("{name}: {} videos, {} triplets", ds.videos.len(), ds.num_triplets());
    }
    Ok(())
}

fn write_params(path: &Path, params: &ParamVector) -> Result<(), Error> {
    write_json(path, &params.as_slice())
}

fn write_seed(dir: &Path, run: &SeedRun) -> Result<(), Error> {
    create_dir(dir)?;
    write_params(&dir.join("params.json"), &run.params)?;
    let csv_path = dir.join("history.csv");
    let file = fs::File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    run.history.write_csv(file)?;
    write_json(&dir.join("metrics.json"), &run.meta)?;
    if let (Some(p), Some(m)) = (&run.baseline_params, &run.baseline) {
        write_params(&dir.join("baseline_params.json"), p)?;
        write_json(&dir.join("baseline_metrics.json"), m)?;
    }
    Ok(())
}

fn train_synth(cfg: &ExperimentConfig, out: &Path) -> Result<(), Error> {
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        info!("seed {seed}: training");
        let run = run_seed(cfg, seed)?;
        write_seed(&out.join(format!("seed_{seed}")), &run)?;
        runs.push(run);
    }
    let k1 = cfg.ks[0];
    println!(
        "{:>6} {:>10} {:>12} {:>12} {:>12} {:>12}",
        "seed", "evals", "meta MR@k", "meta gap", "ERM MR@k", "ERM gap"
    );
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
    for r in &runs {
        let b = r.baseline.as_ref();
        println!(
            "{:>6} {:>10} {:>12.2} {:>12.2} {:>12} {:>12}",
            r.seed,
            r.grad_evals,
            r.meta.contradicting_mr(k1),
            r.meta.bias_gap[&k1],
            fmt(b.map(|b| b.contradicting_mr(k1))),
            fmt(b.map(|b| b.bias_gap[&k1])),
        );
    }
    let report = json!({
        "k": k1,
        "seeds": runs,
        "mean": {
            "meta_contradicting_mr": mean(runs.iter().map(|r| r.meta.contradicting_mr(k1))),
            "meta_bias_gap": mean(runs.iter().map(|r| r.meta.bias_gap[&k1])),
            "baseline_contradicting_mr": cfg.with_baseline
                .then(|| mean(runs.iter().filter_map(|r| r.baseline.as_ref()).map(|b| b.contradicting_mr(k1)))),
            "baseline_bias_gap": cfg.with_baseline
                .then(|| mean(runs.iter().filter_map(|r| r.baseline.as_ref()).map(|b| b.bias_gap[&k1]))),
        },
    });
    println!("mean meta gap {:.2}", report["mean"]["meta_bias_gap"].as_f64().unwrap_or(f64::NAN));
    if let Some(g) = report["mean"]["baseline_bias_gap"].as_f64() {
        println!("mean ERM gap  {g:.2}");
    }
    write_json(&out.join("report.json"), &report)
}

fn train_dataset(
    cfg: &ExperimentConfig,
    dataset: &Path,
    tests: (Option<&PathBuf>, Option<&PathBuf>),
    out: &Path,
) -> Result<(), Error> {
    let ds = load_dataset(dataset)?;
    let model = ToyModel::for_dataset(&ds)?;
    let featurizer = ToyFeaturizer {
        feature_dim: model.feature_dim,
    };
    let seed = cfg.seeds[0];
    let split = meta_debias::splitter::SplitConfig {
        seed,
        ..cfg.split.clone()
    };
    let init = model.init_params(seed, cfg.init_scale);
    let (params, history) = train(&model, &featurizer, &ds, &split, &cfg.meta, init.clone())?;
    write_params(&out.join("params.json"), &params)?;
    let csv_path = out.join("history.csv");
    let file = fs::File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    history.write_csv(file)?;

    let baseline = if cfg.with_baseline {
        let full = featurize_dataset(&ds, model.feature_dim)?;
        let lr = cfg.baseline_lr.unwrap_or(cfg.meta.beta);
        let w = erm_baseline(&model, &full, init, lr, history.grad_evals, cfg.meta.divergence_limit)?;
        write_params(&out.join("baseline_params.json"), &w)?;
        Some(w)
    } else {
        None
    };
    println!("{} meta-updates, {} gradient evaluations", history.records.len(), history.grad_evals);

    if let (Some(c), Some(x)) = tests {
        let consistent = featurize_dataset(&load_dataset(c)?, model.feature_dim)?;
        let contradicting = featurize_dataset(&load_dataset(x)?, model.feature_dim)?;
        let meta = evaluate(&model, &params, &consistent, &contradicting, &cfg.ks)?;
        let base = baseline
            .as_ref()
            .map(|w| evaluate(&model, w, &consistent, &contradicting, &cfg.ks))
            .transpose()?;
        print!("meta, contradicting split\n{}", meta.contradicting.to_table());
        if let Some(b) = &base {
            print!("ERM, contradicting split\n{}", b.contradicting.to_table());
        }
        write_json(&out.join("metrics.json"), &json!({ "meta": meta, "baseline": base }))?;
    }
    Ok(())
}

fn train_cmd(
    dataset: Option<&PathBuf>,
    tests: (Option<&PathBuf>, Option<&PathBuf>),
    common: &Common,
) -> Result<(), Error> {
    let cfg = common.resolve()?;
    if cfg.ks.is_empty() {
        return Err(Error::Validation("at least one k is required".into()));
    }
    create_dir(&common.out)?;
    write_resolved(&common.out, &cfg, json!({ "dataset": dataset }))?;
    match dataset {
        Some(path) => train_dataset(&cfg, path, tests, &common.out),
        None => train_synth(&cfg, &common.out),
    }
}

fn eval(params: &Path, dataset: &Path, contradicting: Option<&Path>, ks: &[usize], out: Option<&Path>) -> Result<(), Error> {
    let text = fs::read_to_string(params).map_err(|e| io_err(params, e))?;
    let values: Vec<f64> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: params.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let params = ParamVector::new(values)?;
    let ds = load_dataset(dataset)?;
    let model = ToyModel::for_dataset(&ds)?;
    if params.dim() != model.dim() {
        return Err(Error::Validation(format!(
            "parameter file has {} values, model for this dataset needs {}",
            params.dim(),
            model.dim()
        )));
    }
    let preds = model.predict(&params, &featurize_dataset(&ds, model.feature_dim)?)?;
    let mut report = MetricsReport::new(&preds, ks)?;
    if let Some(path) = contradicting {
        let other = load_dataset(path)?;
        let px = model.predict(&params, &featurize_dataset(&other, model.feature_dim)?)?;
        report = report.with_bias_gap(&preds, &px)?;
    }
    print!("{}", report.to_table());
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("metrics.json"), &report)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Audit { dataset, common } => audit(dataset, common),
        Command::Split { dataset, epoch, common } => split(dataset, *epoch, common),
        Command::Train {
            dataset,
            test_consistent,
            test_contradicting,
            common,
        } => train_cmd(dataset.as_ref(), (test_consistent.as_ref(), test_contradicting.as_ref()), common),
        Command::Eval {
            params,
            dataset,
            contradicting,
            k,
            out,
        } => eval(params, dataset, contradicting.as_deref(), k, out.as_deref()),
        Command::Synth { common } => synth(common),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
