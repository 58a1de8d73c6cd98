use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Command, ConfigArg, CorruptionSet, Mode, RunConfig, SearchArgs};
use crate::attribution::{deletion_curve, write_curve_csv, AttributionResult, SearchConfig};
use crate::augment::{
    attribute, build_donor_pool, export_augmented, mine_hard_batch, Candidate, CandidateReport, MiningConfig,
};
use crate::error::{Error, Result};
use crate::imaging::io::{load_image, overlay, save_ppm, write_atomic};
use crate::imaging::Image;
use crate::pipeline::{
    evaluate, evaluate_corruptions, flip_rate, train_erm, train_ssca, write_loss_csv, EvalReport, FlipRateSummary,
    MiningStats, StepLoss, TrainObserver,
};
use crate::scorer::Scorer;
use crate::testbed::{generate, load_dataset, save_dataset, Dataset, DatasetMeta, SplitName};
use crate::tinynet::io::{load_params, save_params};
use crate::tinynet::TinyNetParams;
use crate::TOOL_VERSION;

const EVAL_SPLITS: [SplitName; 3] = [
    SplitName::TestId,
    SplitName::TestOodDecorrelated,
    SplitName::TestOodCuefree,
];

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    match &arg.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

/// Loads a dataset and adopts its generation settings into `cfg`.
fn load_data(dir: &Path, cfg: &mut RunConfig) -> Result<(Dataset, DatasetMeta)> {
    if !dir.join("meta.json").is_file() {
        return Err(Error::Format(format!("{} is not a dataset directory", dir.display())));
    }
    let (ds, meta) = load_dataset(dir)?;
    cfg.dataset = meta.config.clone();
    cfg.validate()?;
    Ok((ds, meta))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn config_echo(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

fn apply_search(search: &mut SearchConfig, args: &SearchArgs) {
    if let Some(g) = &args.grid {
        search.grid_rows = g[0];
        search.grid_cols = g[1];
    }
    if args.budget.is_some() {
        search.budget_k = args.budget;
    }
    if let Some(t) = args.tau_cf {
        search.tau_cf = t;
    }
    if let Some(l) = args.lambda1 {
        search.weights.lambda1 = l;
    }
    if let Some(l) = args.lambda2 {
        search.weights.lambda2 = l;
    }
}

pub(super) fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.dataset.seed = s;
            }
            cfg.validate()?;
            let dir = out.unwrap_or_else(|| cfg.output_path("data"));
            let meta = save_dataset(&dir, &generate(&cfg.dataset)?)?;
            println!("{}", meta.content_hash);
            Ok(())
        }
        Command::Train {
            config,
            mode,
            data,
            out,
            seed,
            epochs,
            learning_rate,
            tau_aug,
            candidate_fraction,
            warmup_epochs,
            aug_weight,
            guidance,
        } => {
            let mut cfg = load_config(&config)?;
            let t = &mut cfg.train;
            t.seed = seed.unwrap_or(t.seed);
            t.epochs = epochs.unwrap_or(t.epochs);
            t.learning_rate = learning_rate.unwrap_or(t.learning_rate);
            let s = &mut cfg.ssca;
            s.mining.tau_aug = tau_aug.unwrap_or(s.mining.tau_aug);
            s.mining.candidate_fraction = candidate_fraction.unwrap_or(s.mining.candidate_fraction);
            s.warmup_epochs = warmup_epochs.unwrap_or(s.warmup_epochs);
            s.aug_weight = aug_weight.unwrap_or(s.aug_weight);
            if let Some(g) = guidance {
                s.mining.guidance = g.into();
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| {
                cfg.output_path(match mode {
                    Mode::Erm => "erm",
                    Mode::Ssca => "ssca",
                })
            });
            cmd_train(cfg, mode, &data, &out)
        }
        Command::Attribute {
            config,
            params,
            data,
            split,
            index,
            image,
            label,
            guidance,
            seed,
            search,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            apply_search(&mut cfg.attribution, &search);
            cfg.validate()?;
            let net = load_params(&params)?;
            let (img, label, source) = match (image, data, index) {
                (Some(path), _, _) => (load_image(&path)?, label, path.display().to_string()),
                (None, Some(dir), Some(i)) => {
                    let (ds, _) = load_data(&dir, &mut cfg)?;
                    let s = ds.split(split.into());
                    if i >= s.len() {
                        return Err(Error::InvalidArgument(format!("index {i} outside {} ({})", s.name, s.len())));
                    }
                    (s.images[i].clone(), Some(label.unwrap_or(s.labels[i])), format!("{}[{i}]", s.name))
                }
                _ => return Err(Error::InvalidArgument("give --image or --data with --index".into())),
            };
            let out = out.unwrap_or_else(|| cfg.output_path("attribution"));
            cmd_attribute(&cfg, &net, &img, label, guidance.into(), seed, source, &out)
        }
        Command::AugmentPreview {
            config,
            params,
            data,
            count,
            start,
            tau_aug,
            candidate_fraction,
            guidance,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            let m = &mut cfg.ssca.mining;
            m.tau_aug = tau_aug.unwrap_or(m.tau_aug);
            m.candidate_fraction = candidate_fraction.unwrap_or(m.candidate_fraction);
            if let Some(g) = guidance {
                m.guidance = g.into();
            }
            cfg.validate()?;
            let net = load_params(&params)?;
            let (ds, meta) = load_data(&data, &mut cfg)?;
            let out = out.unwrap_or_else(|| cfg.output_path("preview"));
            cmd_preview(&cfg, &net, &ds, &meta, start, count, &out)
        }
        Command::Eval {
            config,
            params,
            data,
            corruptions,
            seed,
            flip_rate,
            loss_csv,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            cfg.eval.corruption_seed = seed.unwrap_or(cfg.eval.corruption_seed);
            cfg.eval.flip_rate_samples = flip_rate.unwrap_or(cfg.eval.flip_rate_samples);
            if corruptions == CorruptionSet::None {
                cfg.eval.corruptions.clear();
            }
            cfg.validate()?;
            let loss_csv = loss_csv.or_else(|| {
                let beside = params.parent().unwrap_or(Path::new(".")).join("loss.csv");
                beside.is_file().then_some(beside)
            });
            let net = load_params(&params)?;
            let out = out.unwrap_or_else(|| cfg.output_path("report.json"));
            let report = cmd_eval(cfg, &net, &data, loss_csv)?;
            write_json(&out, &report)?;
            for (name, acc) in &report.splits {
                println!("{name}\t{acc:.2}");
            }
            Ok(())
        }
        Command::Report { reports, out } => {
            let loaded: Vec<(String, EvalReport)> = reports
                .iter()
                .map(|p| {
                    let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                    let r: EvalReport = serde_json::from_slice(&bytes)
                        .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
                    Ok((p.display().to_string(), r))
                })
                .collect::<Result<_>>()?;
            let table = report_table(&loaded);
            print!("{table}");
            if let Some(path) = out {
                write_atomic(&path, table.as_bytes())?;
            }
            Ok(())
        }
    }
}

/// Written as `train.json` next to the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub tool_version: String,
    pub mode: String,
    pub config: serde_json::Value,
    pub dataset_hash: String,
    pub params_hash: String,
    pub steps: usize,
    pub mining: MiningStats,
    /// Mean original-sample loss over the final epoch.
    pub final_epoch_loss: Option<f64>,
}

/// Progress lines on stderr, one per epoch.
struct EpochProgress {
    epoch_losses: Vec<f64>,
}

impl TrainObserver for EpochProgress {
    fn on_step(&mut self, _step: u64, _params: &TinyNetParams, loss: &StepLoss) {
        self.epoch_losses.push(loss.mean_orig());
    }

    fn on_epoch(&mut self, epoch: usize, _params: &TinyNetParams) {
        let n = self.epoch_losses.len().max(1) as f64;
        eprintln!("epoch {epoch}: mean loss {:.4}", self.epoch_losses.iter().sum::<f64>() / n);
        self.epoch_losses.clear();
    }
}

fn cmd_train(mut cfg: RunConfig, mode: Mode, data: &Path, out: &Path) -> Result<()> {
    let (ds, meta) = load_data(data, &mut cfg)?;
    let arch = cfg.resolved_arch()?;
    let train = ds.split(SplitName::Train);
    let mut progress = EpochProgress { epoch_losses: Vec::new() };
    let outcome = match mode {
        Mode::Erm => train_erm(train, &arch, &cfg.train, &mut progress)?,
        Mode::Ssca => {
            let pool = build_donor_pool(ds.donors.clone(), cfg.donor_seed)?;
            train_ssca(train, &arch, &cfg.train, &cfg.ssca, &pool, &mut progress)?
        }
    };
    if !outcome.params.is_finite() {
        return Err(Error::NonFinite("trained parameters".into()));
    }
    save_params(&out.join("params.bin"), &outcome.params)?;
    write_loss_csv(&out.join("loss.csv"), &outcome.log)?;
    let last_epoch = outcome.log.last().map(|s| s.epoch);
    let finals: Vec<f64> = outcome
        .log
        .iter()
        .filter(|s| Some(s.epoch) == last_epoch)
        .map(StepLoss::mean_orig)
        .collect();
    let manifest = TrainManifest {
        tool_version: TOOL_VERSION.into(),
        mode: format!("{mode:?}").to_lowercase(),
        config: config_echo(&cfg)?,
        dataset_hash: meta.content_hash,
        params_hash: outcome.params.content_hash(),
        steps: outcome.log.len(),
        mining: outcome.mining,
        final_epoch_loss: (!finals.is_empty()).then(|| finals.iter().sum::<f64>() / finals.len() as f64),
    };
    write_json(&out.join("train.json"), &manifest)?;
    println!("{}", manifest.params_hash);
    Ok(())
}

/// Written as `attribution.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeOutput {
    pub tool_version: String,
    pub config: serde_json::Value,
    pub source: String,
    pub params_hash: String,
    pub result: AttributionResult,
}

#[allow(clippy::too_many_arguments)]
fn cmd_attribute(
    cfg: &RunConfig,
    net: &TinyNetParams,
    image: &Image,
    label: Option<usize>,
    guidance: crate::augment::Guidance,
    seed: u64,
    source: String,
    out: &Path,
) -> Result<()> {
    net.info().check(image)?;
    let label = match label {
        Some(l) => l,
        None => net.score_batch(std::slice::from_ref(image))?[0].argmax(),
    };
    if label >= net.num_classes() {
        return Err(Error::InvalidArgument(format!("label {label} out of range")));
    }
    let mining = MiningConfig {
        guidance,
        search: cfg.attribution.clone(),
        ..MiningConfig::default()
    };
    let result = attribute(net, image, label, &mining, seed)?;
    let curve = deletion_curve(net, image, &result)?;
    write_curve_csv(&out.join("curve.csv"), &curve)?;
    save_ppm(&out.join("overlay.ppm"), &overlay(image, &result.final_mask)?)?;
    let output = AttributeOutput {
        tool_version: TOOL_VERSION.into(),
        config: config_echo(cfg)?,
        source,
        params_hash: net.content_hash(),
        result,
    };
    write_json(&out.join("attribution.json"), &output)?;
    println!(
        "regions {:?} c_max {:.4} stop {:?}",
        output.result.ordered_regions, output.result.c_max, output.result.stop_reason
    );
    Ok(())
}

/// Written as `preview.json` beside the exported samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewManifest {
    pub tool_version: String,
    pub config: serde_json::Value,
    pub dataset_hash: String,
    pub params_hash: String,
    pub batch: Vec<usize>,
    pub candidates: Vec<CandidateReport>,
}

fn cmd_preview(
    cfg: &RunConfig,
    net: &TinyNetParams,
    ds: &Dataset,
    meta: &DatasetMeta,
    start: usize,
    count: usize,
    out: &Path,
) -> Result<()> {
    let train = ds.split(SplitName::Train);
    let end = start.checked_add(count).filter(|&e| e <= train.len() && count > 0).ok_or_else(|| {
        Error::InvalidArgument(format!("batch {start}+{count} outside the {} training images", train.len()))
    })?;
    if let Some(img) = train.images.first() {
        net.info().check(img)?;
    }
    let batch: Vec<Candidate> = (start..end)
        .map(|i| Candidate {
            image: &train.images[i],
            label: train.labels[i],
            source_index: i,
        })
        .collect();
    let pool = build_donor_pool(ds.donors.clone(), cfg.donor_seed)?;
    let mut sampler = pool.sampler(cfg.train.seed);
    let mined = mine_hard_batch(&batch, net, &pool, &cfg.ssca.mining, &mut sampler)?;
    export_augmented(out, &mined.kept)?;
    for (j, a) in mined.kept.iter().enumerate() {
        save_ppm(&out.join(format!("sample_{j:03}.ppm")), &a.image)?;
        save_ppm(&out.join(format!("source_{j:03}.ppm")), &overlay(&train.images[a.source_index], &a.mask)?)?;
    }
    let manifest = PreviewManifest {
        tool_version: TOOL_VERSION.into(),
        config: config_echo(cfg)?,
        dataset_hash: meta.content_hash.clone(),
        params_hash: net.content_hash(),
        batch: (start..end).collect(),
        candidates: mined.candidates,
    };
    write_json(&out.join("preview.json"), &manifest)?;
    println!("kept {} of {} candidates", mined.kept.len(), manifest.candidates.len());
    Ok(())
}

fn cmd_eval(mut cfg: RunConfig, net: &TinyNetParams, data: &Path, loss_csv: Option<PathBuf>) -> Result<EvalReport> {
    let (ds, meta) = load_data(data, &mut cfg)?;
    let mut splits = BTreeMap::new();
    for name in EVAL_SPLITS {
        let s = ds.split(name);
        if let Some(img) = s.images.first() {
            net.info().check(img)?;
        }
        if !s.is_empty() {
            splits.insert(name.to_string(), evaluate(net, &s.images, &s.labels)?);
        }
    }
    let id = ds.split(SplitName::TestId);
    let mut corruptions = BTreeMap::new();
    if !cfg.eval.corruptions.is_empty() {
        let rows = evaluate_corruptions(net, &id.images, &id.labels, &cfg.eval.corruptions, cfg.eval.corruption_seed)?;
        for row in rows {
            if corruptions.insert(row.name.clone(), row.accuracy).is_some() {
                return Err(Error::Config(format!("corruption {} listed twice", row.name)));
            }
        }
    }
    let flip = if cfg.eval.flip_rate_samples > 0 {
        let r = flip_rate(
            net,
            &id.images,
            &id.labels,
            &cfg.attribution,
            cfg.eval.flip_rate_samples,
            cfg.eval.flip_rate_seed,
            cfg.eval.flip_rate_guidance,
        )?;
        Some(FlipRateSummary::from(&r))
    } else {
        None
    };
    Ok(EvalReport {
        tool_version: TOOL_VERSION.into(),
        config: config_echo(&cfg)?,
        seeds: vec![cfg.dataset.seed, net.seed(), cfg.eval.corruption_seed, cfg.eval.flip_rate_seed],
        splits,
        corruptions,
        flip_rate: flip,
        per_step_loss_csv: loss_csv.map(|p| p.display().to_string()),
        params_hash: net.content_hash(),
        dataset_hash: meta.content_hash,
    })
}

/// Markdown table with one row per report and one column per metric.
fn report_table(reports: &[(String, EvalReport)]) -> String {
    let split_cols: BTreeSet<&String> = reports.iter().flat_map(|(_, r)| r.splits.keys()).collect();
    let corr_cols: BTreeSet<&String> = reports.iter().flat_map(|(_, r)| r.corruptions.keys()).collect();
    let any_flip = reports.iter().any(|(_, r)| r.flip_rate.is_some());
    let mut header = vec!["report".to_string()];
    header.extend(split_cols.iter().map(|s| s.to_string()));
    header.extend(corr_cols.iter().map(|s| s.to_string()));
    if any_flip {
        header.push("flip_rate".into());
    }
    let mut t = String::new();
    let _ = writeln!(t, "| {} |", header.join(" | "));
    let _ = writeln!(t, "|{}", " --- |".repeat(header.len()));
    let fmt = |v: Option<&f64>| v.map_or("-".to_string(), |a| format!("{a:.2}"));
    for (name, r) in reports {
        let mut row = vec![name.clone()];
        row.extend(split_cols.iter().map(|k| fmt(r.splits.get(*k))));
        row.extend(corr_cols.iter().map(|k| fmt(r.corruptions.get(*k))));
        if any_flip {
            row.push(match &r.flip_rate {
                Some(FlipRateSummary { rate: Some(p), ci95: Some([lo, hi]), n }) => {
                    format!("{p:.3} [{lo:.3}, {hi:.3}] (n={n})")
                }
                Some(f) => format!("undefined (n={})", f.n),
                None => "-".into(),
            });
        }
        let _ = writeln!(t, "| {} |", row.join(" | "));
    }
    t
}
