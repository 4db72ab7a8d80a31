//! Subcommand implementations. Each returns data; printing and file output
//! happen in the binary.

use std::path::Path;
use std::time::Instant;

use lutmoe::axmul::EXACT_POWER_NW;
use lutmoe::checkpoint::{load_checkpoint, save_checkpoint, MANIFEST};
use lutmoe::cost::{count_macs, normalized_power, pareto_frontier, MacReport, SweepPoint};
use lutmoe::data::{load_dataset, resolve_data_path, synthetic_blobs, Dataset, DatasetFormat, SyntheticSpec};
use lutmoe::graph::Family;
use lutmoe::moe::{substitute_moe_with, MoeOptions};
use lutmoe::retrain::{evaluate, retrain, train, RetrainReport, TrainConfig};
use lutmoe::{arch, par, ExecCtx, Model, ModelGraph, Variant};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Context, Result};
use crate::multipliers::{resolve_all, Resolved};
use crate::report::RunRecord;

fn options(cfg: &ExperimentConfig) -> MoeOptions {
    MoeOptions {
        experts: cfg.experts,
        ratio: cfg.moe_ratio,
        granularity: cfg.granularity,
        ..MoeOptions::default()
    }
}

fn base_graph(cfg: &ExperimentConfig, classes: Option<usize>, input: Option<Vec<usize>>) -> Result<ModelGraph> {
    arch::build(&cfg.arch, cfg.classes.or(classes), cfg.input.clone().or(input)).map_err(|e| match e {
        lutmoe::Error::Param(m) => CliError::Config(m),
        other => other.into(),
    })
}

fn variant_graph(cfg: &ExperimentConfig, base: &ModelGraph, v: Variant) -> Result<ModelGraph> {
    substitute_moe_with(base, v, &options(cfg)).context(|| format!("{} {v}", base.name))
}

/// Static and effective MACs per requested variant; shape-only.
pub fn count(cfg: &ExperimentConfig) -> Result<Vec<MacReport>> {
    cfg.validate()?;
    let base = base_graph(cfg, None, None)?;
    if cfg.moe_ratio.is_some() && base.family != Family::Transformer {
        return Err(CliError::Config(format!("moe_ratio applies to transformers, {} is not one", base.name)));
    }
    cfg.variants
        .iter()
        .map(|&v| count_macs(&variant_graph(cfg, &base, v)?).context(|| format!("{} {v}", base.name)))
        .collect()
}

/// Train/eval split: the last `eval_samples` samples evaluate.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let data = if cfg.dataset == "synthetic" || cfg.dataset_format == Some(DatasetFormat::Synthetic) {
        synthetic_blobs(&SyntheticSpec {
            classes: cfg.synthetic_classes,
            samples: cfg.synthetic_samples,
            shape: cfg.synthetic_shape.clone(),
            noise: cfg.synthetic_noise,
            seed: cfg.seed,
        })?
    } else {
        let path = resolve_data_path(Path::new(&cfg.dataset));
        let format = cfg.dataset_format.unwrap_or(if path.join("samples.axt").exists() {
            DatasetFormat::AxtPair
        } else {
            DatasetFormat::Cifar100
        });
        load_dataset(&path, format)?
    };
    if cfg.eval_samples == 0 || cfg.eval_samples >= data.len() {
        return Err(CliError::Config(format!(
            "eval_samples = {} must lie in 1..{} for this dataset",
            cfg.eval_samples,
            data.len()
        )));
    }
    let (train, eval) = data.split(data.len() - cfg.eval_samples);
    Ok((train, eval))
}

fn check_executable(base: &ModelGraph) -> Result<()> {
    if base.name == "vit_small_spec" {
        return Err(CliError::Config(
            "vit_small_spec is cost-model only; use count, or a toy architecture for eval/sweep/retrain".into(),
        ));
    }
    Ok(())
}

/// The float model a variant starts from: a checkpoint when configured
/// (`<checkpoint>/manifest.json` or `<checkpoint>/<variant>/manifest.json`),
/// otherwise a seeded initialization trained for `pretrain_epochs`.
pub fn prepare_model(cfg: &ExperimentConfig, graph: &ModelGraph, v: Variant, train_set: &Dataset, eval_set: &Dataset) -> Result<Model> {
    if let Some(dir) = &cfg.checkpoint {
        let dir = resolve_data_path(dir);
        let dir = if dir.join(MANIFEST).exists() { dir } else { dir.join(v.as_str()) };
        let (model, _) = load_checkpoint(&dir)?;
        if model.graph().nodes.len() != graph.nodes.len() || model.graph().variant != v {
            return Err(CliError::Config(format!("checkpoint {} does not hold a {v} {}", dir.display(), graph.name)));
        }
        return Ok(model);
    }
    let mut model = Model::from_graph(graph, cfg.seed)?;
    if cfg.pretrain_epochs > 0 {
        let tc = TrainConfig {
            learning_rate: cfg.pretrain_lr,
            epochs: cfg.pretrain_epochs,
            ..cfg.train.clone()
        };
        train(&mut model, train_set, eval_set, &tc).context(|| format!("pretraining {v}"))?;
    }
    Ok(model)
}

fn point(cfg: &ExperimentConfig, report: &MacReport, m_base: u64, m: &Resolved, top1: f64, retrained: bool) -> Result<SweepPoint> {
    let p_norm = normalized_power(report.m_eff as f64, m_base as f64, report.f_apx, m.power_nw, EXACT_POWER_NW)?;
    Ok(SweepPoint {
        arch: report.arch.clone(),
        variant: report.variant.to_string(),
        multiplier: m.name.clone(),
        m_total: report.m_total,
        m_eff: report.m_eff,
        f_apx: report.f_apx,
        p_norm,
        top1,
        retrained,
        seed: cfg.seed,
    })
}

struct Prepared {
    variant: Variant,
    report: MacReport,
    model: Model,
}

struct Setup {
    m_base: u64,
    multipliers: Vec<Resolved>,
    prepared: Vec<Prepared>,
    train: Dataset,
    eval: Dataset,
    float_accuracy: Vec<f64>,
}

fn setup(cfg: &ExperimentConfig, need_tables: bool) -> Result<Setup> {
    cfg.validate()?;
    let multipliers = resolve_all(&cfg.multipliers)?;
    if need_tables {
        for m in &multipliers {
            m.table()?;
        }
    }
    let (train, eval) = load_data(cfg)?;
    let base = base_graph(cfg, Some(train.classes), train.sample_shape().map(<[usize]>::to_vec))?;
    check_executable(&base)?;
    let m_base = count_macs(&base)?.m_eff;
    let mut prepared = Vec::with_capacity(cfg.variants.len());
    let mut float_accuracy = Vec::with_capacity(cfg.variants.len());
    for &v in &cfg.variants {
        let g = variant_graph(cfg, &base, v)?;
        let report = count_macs(&g)?;
        let model = prepare_model(cfg, &g, v, &train, &eval)?;
        float_accuracy.push(evaluate(&model, &eval, &ExecCtx::float())?);
        prepared.push(Prepared { variant: v, report, model });
    }
    Ok(Setup {
        m_base,
        multipliers,
        prepared,
        train,
        eval,
        float_accuracy,
    })
}

/// Accuracy of each variant under each multiplier, no weight updates.
#[derive(Debug)]
pub struct EvalOutput {
    /// Float accuracy per variant, in config order.
    pub float_accuracy: Vec<(Variant, f64)>,
    pub rows: Vec<SweepPoint>,
}

pub fn eval(cfg: &ExperimentConfig) -> Result<EvalOutput> {
    if cfg.checkpoint.is_none() {
        return Err(CliError::Config("eval needs `checkpoint`; create one with the train subcommand".into()));
    }
    let s = setup(cfg, true)?;
    let mut rows = Vec::new();
    for p in &s.prepared {
        for m in &s.multipliers {
            let acc = evaluate(&p.model, &s.eval, &ExecCtx::lut(m.table()?)).context(|| format!("{} {}", p.variant, m.name))?;
            rows.push(point(cfg, &p.report, s.m_base, m, acc, false)?);
        }
    }
    Ok(EvalOutput {
        float_accuracy: s.prepared.iter().map(|p| p.variant).zip(s.float_accuracy).collect(),
        rows,
    })
}

/// Every (variant, multiplier) pair: optional retrain, evaluation and cost.
/// Pairs run concurrently; rows come back in config order.
pub fn sweep(cfg: &ExperimentConfig, deterministic: bool) -> Result<RunRecord> {
    let start = Instant::now();
    let s = setup(cfg, true)?;
    let pairs: Vec<(usize, usize)> = (0..s.prepared.len()).flat_map(|v| (0..s.multipliers.len()).map(move |m| (v, m))).collect();
    let results = par::map(&pairs, |&(vi, mi)| -> Result<SweepPoint> {
        let p = &s.prepared[vi];
        let m = &s.multipliers[mi];
        let label = || format!("{} {}", p.variant, m.name);
        let table = m.table()?;
        let (acc, retrained) = if cfg.retrain {
            let mut model = p.model.clone();
            let r = retrain(&mut model, table, &s.train, &s.eval, &cfg.train).context(label)?;
            (r.final_accuracy(), true)
        } else {
            (evaluate(&p.model, &s.eval, &ExecCtx::lut(table)).context(label)?, false)
        };
        point(cfg, &p.report, s.m_base, m, acc, retrained)
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(RunRecord {
        version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        rows,
        mac_reports: s.prepared.into_iter().map(|p| p.report).collect(),
        wall_clock_s: if deterministic { 0.0 } else { start.elapsed().as_secs_f64() },
    })
}

#[derive(Debug)]
pub struct RetrainOutput {
    pub variant: Variant,
    pub report: RetrainReport,
    pub model: Model,
}

/// Retrain every variant under every multiplier; with `out` set, each
/// retrained model is saved to `<out>/<variant>-<multiplier>/`.
pub fn retrain_cmd(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<RetrainOutput>> {
    let s = setup(cfg, true)?;
    let mut outs = Vec::new();
    for p in &s.prepared {
        for m in &s.multipliers {
            let mut model = p.model.clone();
            let report = retrain(&mut model, m.table()?, &s.train, &s.eval, &cfg.train).context(|| format!("{} {}", p.variant, m.name))?;
            if let Some(dir) = out {
                save_checkpoint(&model, cfg.seed, dir.join(format!("{}-{}", p.variant, m.name)))?;
            }
            outs.push(RetrainOutput {
                variant: p.variant,
                report,
                model,
            });
        }
    }
    Ok(outs)
}

/// Train the float model of each variant and save it under
/// `<out>/<variant>/`, the layout `checkpoint =` expects.
pub fn pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(Variant, f64)>> {
    let s = setup(cfg, false)?;
    let mut accs = Vec::new();
    for (p, acc) in s.prepared.iter().zip(&s.float_accuracy) {
        save_checkpoint(&p.model, cfg.seed, out.join(p.variant.as_str()))?;
        accs.push((p.variant, *acc));
    }
    Ok(accs)
}

/// Frontier rows, sorted by `p_norm` ascending.
pub fn pareto(rows: &[SweepPoint]) -> Result<Vec<SweepPoint>> {
    Ok(pareto_frontier(rows)?)
}
