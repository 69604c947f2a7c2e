use std::fs::File;
use std::path::Path;

use invbasin::data::{generate_synthetic, write_csv, EntityDataset, Span};
use invbasin::nn::{InverseModel, Placement};
use invbasin::train::{
    ensemble_nse, evaluate_inverse, finetune, load_json, reconstructed_statics, robustness_sweep, run_ubl, save_json,
    train_forward_ensemble, train_inverse, ForwardCheckpoint, InverseCheckpoint, LossBreakdown, Mode, PenaltyArtifact,
    RunHistory, StaticMetrics, SweepResult, TrainConfig,
};
use invbasin::{Error, Result};
use serde::Serialize;

use crate::runs::{self, load_config, load_data, start_run, write_report, RunMeta};
use crate::{Command, SpanArg, TrainArgs};

pub fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Generate {
            entities,
            days,
            seed,
            out,
        } => generate(*entities, *days, *seed, out),
        Command::TrainInverse(args) => train_inverse_cmd(args),
        Command::Ubl { train, base } => ubl(train, base),
        Command::TrainForward { train, statics } => train_forward_cmd(train, statics),
        Command::Evaluate { run, data, span } => evaluate(run, data.as_deref(), *span),
        Command::RobustnessSweep(args) => sweep(args),
        Command::Report { runs, out } => crate::plot::report(runs, out),
    }
}

#[derive(Serialize)]
struct GenerateReport<'a> {
    command: &'static str,
    entities: usize,
    days: usize,
    seed: u64,
    drivers: &'a [String],
    statics: &'a [String],
    start_date: String,
}

fn generate(entities: usize, days: usize, seed: u64, out: &Path) -> Result<()> {
    let ds = generate_synthetic(entities, days, seed)?;
    write_csv(&ds, out)?;
    write_report(
        out,
        &GenerateReport {
            command: "generate",
            entities,
            days,
            seed,
            drivers: &ds.driver_names,
            statics: &ds.static_names,
            start_date: ds.start_date.to_string(),
        },
    )
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    epochs_run: usize,
    diverged_at: Option<usize>,
    best_val: Option<LossBreakdown>,
}

impl TrainSummary {
    fn of(h: &RunHistory) -> Self {
        Self {
            best_epoch: h.best_epoch,
            epochs_run: h.epochs.len() - 1,
            diverged_at: h.diverged_at,
            best_val: h.best().map(|e| e.val),
        }
    }
}

#[derive(Serialize)]
struct InverseReport {
    command: &'static str,
    mode: Mode,
    placement: Placement,
    seed: u64,
    #[serde(flatten)]
    training: TrainSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    penalty: Option<PenaltyArtifact>,
}

fn first_seed(cfg: &TrainConfig) -> u64 {
    cfg.seeds[0]
}

fn save_inverse(out: &Path, model: &InverseModel, history: &RunHistory, seed: u64) -> Result<()> {
    save_json(&InverseCheckpoint::new(model, seed, history.best_epoch), &out.join(runs::CHECKPOINT))?;
    history.write_csv(File::create(out.join(runs::HISTORY))?)
}

fn load_model(path: &Path) -> Result<(InverseModel, u64)> {
    let ck: InverseCheckpoint = load_json(path)?;
    Ok((ck.to_model()?, ck.seed))
}

fn load_penalty(path: &Path, ds: &EntityDataset) -> Result<PenaltyArtifact> {
    let art: PenaltyArtifact = load_json(path)?;
    if art.feature_names != ds.static_names {
        return Err(Error::Config(format!(
            "penalty features {:?} do not match the dataset's {:?}",
            art.feature_names, ds.static_names
        )));
    }
    Ok(art)
}

fn train_inverse_cmd(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), args.seed)?;
    let ds = load_data(&args.data, &cfg)?;
    let seed = first_seed(&cfg);
    start_run(&args.out, "train-inverse", &cfg, &args.data)?;
    let (run, penalty) = if cfg.mode == Mode::UblPhase2 {
        let source = cfg.ubl_source.as_deref().expect("validated");
        let (base, _) = load_model(Path::new(source))?;
        let art = load_penalty(Path::new(cfg.ubl_penalty.as_deref().expect("validated")), &ds)?;
        save_json(&art, &args.out.join(runs::PENALTY))?;
        (finetune(&cfg, &base, &ds, seed, &art.w, art.t_scale)?, Some(art))
    } else {
        (train_inverse(&cfg, &ds, seed)?, None)
    };
    save_inverse(&args.out, &run.model, &run.history, seed)?;
    log::info!("best epoch {} of {}", run.history.best_epoch, run.history.epochs.len() - 1);
    write_report(
        &args.out,
        &InverseReport {
            command: "train-inverse",
            mode: cfg.mode,
            placement: run.model.config.placement,
            seed,
            training: TrainSummary::of(&run.history),
            penalty,
        },
    )
}

fn ubl(args: &TrainArgs, base: &Path) -> Result<()> {
    runs::require_dir(base)?;
    let mut cfg = load_config(args.config.as_deref(), args.seed)?;
    let ds = load_data(&args.data, &cfg)?;
    let seed = first_seed(&cfg);
    let (base_model, _) = load_model(&base.join(runs::CHECKPOINT))?;
    cfg.mode = Mode::UblPhase2;
    cfg.ubl_source = Some(base.join(runs::CHECKPOINT).display().to_string());
    cfg.ubl_penalty = Some(args.out.join(runs::PENALTY).display().to_string());
    start_run(&args.out, "ubl", &cfg, &args.data)?;
    let run = run_ubl(&cfg, &base_model, &ds, seed)?;
    save_json(&run.penalty, &args.out.join(runs::PENALTY))?;
    save_inverse(&args.out, &run.model, &run.history, seed)?;
    log::info!("chose temperature {} with weights {:?}", run.penalty.t_scale, run.penalty.w);
    write_report(
        &args.out,
        &InverseReport {
            command: "ubl",
            mode: Mode::UblPhase2,
            placement: run.model.config.placement,
            seed,
            training: TrainSummary::of(&run.history),
            penalty: Some(run.penalty),
        },
    )
}

#[derive(Serialize)]
struct ForwardReport {
    command: &'static str,
    statics: &'static str,
    seeds: Vec<u64>,
    per_seed_nse: Vec<Option<f64>>,
    ensemble_nse: Option<f64>,
    final_train_loss: Vec<Option<f64>>,
}

fn train_forward_cmd(args: &TrainArgs, statics: &str) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), args.seed)?;
    let ds = load_data(&args.data, &cfg)?;
    let (z, source) = if statics == "observed" {
        (ds.statics_tensor(), "observed")
    } else {
        let dir = Path::new(statics);
        runs::require_dir(dir)?;
        let (model, seed) = load_model(&dir.join(runs::CHECKPOINT))?;
        (reconstructed_statics(&cfg, &model, &ds, seed)?, "reconstructed")
    };
    start_run(&args.out, "train-forward", &cfg, &args.data)?;
    let fwd = train_forward_ensemble(&cfg, &ds, &z, &cfg.seeds)?;
    let ensemble = ensemble_nse(&ds, &fwd)?;
    let checkpoints: Vec<ForwardCheckpoint> = fwd
        .iter()
        .map(|r| ForwardCheckpoint {
            model: r.model.clone(),
            seed: r.seed,
        })
        .collect();
    save_json(&checkpoints, &args.out.join(runs::CHECKPOINT))?;
    write_predictions(&args.out.join("predictions.csv"), &ds, &fwd)?;
    log::info!("ensemble test NSE {ensemble:?}");
    write_report(
        &args.out,
        &ForwardReport {
            command: "train-forward",
            statics: source,
            seeds: cfg.seeds.clone(),
            per_seed_nse: fwd.iter().map(|r| r.average_nse).collect(),
            ensemble_nse: ensemble,
            final_train_loss: fwd.iter().map(|r| r.train_loss.last().copied()).collect(),
        },
    )
}

/// Seed-averaged test-span predictions next to observations, in raw units.
fn write_predictions(path: &Path, ds: &EntityDataset, fwd: &[invbasin::train::ForwardRun]) -> Result<()> {
    let test = ds.span(Span::Test)?;
    let norm = ds.norm().ok_or_else(|| Error::Data("dataset is not normalized".into()))?;
    let c = ds.channels() - 1;
    let raw = |v: f64| v * norm.channel_std[c] + norm.channel_mean[c];
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["entity_id", "date", "observed", "predicted"])?;
    for (e, id) in ds.entity_ids.iter().enumerate() {
        let obs = ds.response(e, test.clone());
        for (k, date) in ds.start_date.iter_days().skip(test.start).take(test.len()).enumerate() {
            let p = fwd.iter().map(|r| r.predictions[e][k]).sum::<f64>() / fwd.len() as f64;
            w.write_record([id.clone(), date.to_string(), raw(obs[k]).to_string(), raw(p).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Contents of `report.json` after `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub command: String,
    pub mode: Mode,
    pub placement: Placement,
    pub span: String,
    pub seed: u64,
    pub k_samples: usize,
    pub window: usize,
    pub feature_names: Vec<String>,
    #[serde(flatten)]
    pub metrics: StaticMetrics,
}

fn span_of(s: SpanArg) -> (Span, &'static str) {
    match s {
        SpanArg::Train => (Span::Train, "train"),
        SpanArg::Val => (Span::Val, "val"),
        SpanArg::Test => (Span::Test, "test"),
    }
}

fn evaluate(run: &Path, data: Option<&Path>, span: SpanArg) -> Result<()> {
    runs::require_dir(run)?;
    let meta = RunMeta::load(run)?;
    if meta.command != "train-inverse" && meta.command != "ubl" {
        return Err(Error::Config(format!("`evaluate` needs an inverse run, {} holds `{}`", run.display(), meta.command)));
    }
    let cfg = TrainConfig::load(&run.join(runs::CONFIG))?;
    let ds = load_data(data.unwrap_or(&meta.data), &cfg)?;
    let (model, seed) = load_model(&run.join(runs::CHECKPOINT))?;
    let (span, span_name) = span_of(span);
    let ev = evaluate_inverse(&model, &ds, span, cfg.unc_window, cfg.k_mc, seed)?;
    ev.report.write_csv(File::create(run.join(runs::UNCERTAINTY))?)?;
    let m = &ev.metrics;
    let mut w = csv::Writer::from_path(run.join("metrics.csv"))?;
    w.write_record(["feature", "mse", "nse", "epistemic", "unc_epistemic_corr"])?;
    for (j, f) in ds.static_names.iter().enumerate() {
        w.write_record([
            f.clone(),
            m.feature_mse[j].to_string(),
            opt(m.feature_nse[j]),
            m.feature_epistemic[j].to_string(),
            opt(m.corr_per_feature[j]),
        ])?;
    }
    w.flush()?;
    log::info!("static NSE {:?}, 2-sigma coverage {}", m.static_nse, m.coverage_2sd);
    write_report(
        run,
        &EvalReport {
            command: "evaluate".into(),
            mode: cfg.mode,
            placement: model.config.placement,
            span: span_name.into(),
            seed,
            k_samples: cfg.k_mc,
            window: cfg.unc_window,
            feature_names: ds.static_names.clone(),
            metrics: ev.metrics,
        },
    )
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Serialize)]
struct SweepReport {
    command: &'static str,
    fractions: Vec<f64>,
    stds: Vec<f64>,
    runs: Vec<SweepResult>,
}

fn sweep(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), args.seed)?;
    let ds = load_data(&args.data, &cfg)?;
    start_run(&args.out, "robustness-sweep", &cfg, &args.data)?;
    let results = cfg
        .seeds
        .iter()
        .map(|&s| robustness_sweep(&cfg, &ds, &cfg.noise_fractions, &cfg.noise_stds, s))
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(args.out.join("sweep.csv"))?;
    w.write_record(["seed", "fraction", "std", "recon_mse", "static_mse", "epistemic_mean", "static_nse"])?;
    for cell in results.iter().flat_map(|r| std::iter::once(&r.clean).chain(&r.cells)) {
        w.write_record([
            cell.seed.to_string(),
            cell.fraction.to_string(),
            cell.std.to_string(),
            cell.recon_mse.to_string(),
            cell.static_mse.to_string(),
            cell.epistemic_mean.to_string(),
            opt(cell.static_nse),
        ])?;
    }
    w.flush()?;
    write_report(
        &args.out,
        &SweepReport {
            command: "robustness-sweep",
            fractions: cfg.noise_fractions.clone(),
            stds: cfg.noise_stds.clone(),
            runs: results,
        },
    )
}
