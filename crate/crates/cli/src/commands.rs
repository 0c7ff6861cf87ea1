use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use metriflow::bench::{aggregate, generate_dataset, Dataset, DatasetConfig, MetricsReport, SW2_PROJECTIONS};
use metriflow::cfm::{train as train_model, write_loss_curve, Checkpoint, TrainConfig};
use metriflow::fields::{default_sampler, model_kinds, Architecture, MetricMode, Model};
use metriflow::integrate::{
    projected_descent, prox_modes, resolve_prox, rollout as roll, sample_points, samplers, verify_theorem1,
    verify_theorem2, LearnedField, RolloutRecord, SamplerConfig, ShrinkPendulum, StepContext, VectorField,
};
use metriflow::physics::PendulumEnergy;

use crate::config::{ensure_dir, resolve, write_json, write_provenance};
use crate::plot::{bar_chart, line_chart, Series};
use crate::Common;

/// Bad flags, settings or inputs named by the user; exits with status 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        1
    } else {
        2
    }
}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    Usage(e.to_string()).into()
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    match common.out.as_ref() {
        Some(d) => ensure_dir(d),
        None => Err(usage("--out is required")),
    }
}

fn traj_name(i: usize) -> String {
    format!("traj_{i:04}.csv")
}

#[derive(Args, Debug)]
pub struct GendataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    gamma_min: Option<f64>,
    #[arg(long)]
    gamma_max: Option<f64>,
    #[arg(long)]
    fine_substeps: Option<usize>,
}

pub fn gendata(a: GendataArgs) -> Result<()> {
    let mut cfg: DatasetConfig = resolve(&DatasetConfig::default(), a.common.config.as_deref())?;
    set(&mut cfg.seed, a.common.seed);
    set(&mut cfg.train, a.train);
    set(&mut cfg.test, a.test);
    set(&mut cfg.dt, a.dt);
    set(&mut cfg.horizon, a.horizon);
    set(&mut cfg.gamma_range[0], a.gamma_min);
    set(&mut cfg.gamma_range[1], a.gamma_max);
    set(&mut cfg.fine_substeps, a.fine_substeps);
    cfg.validate().map_err(usage)?;
    let dir = out_dir(&a.common)?;
    let ds = generate_dataset(&cfg)?;
    ds.save(&dir)?;
    write_provenance(&dir, "gendata", &cfg)?;
    log::info!(
        "wrote {} train and {} test trajectories to {}",
        ds.train.len(),
        ds.test.len(),
        dir.display()
    );
    Ok(())
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Metric {
    State,
    Constant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainSettings {
    data: Option<PathBuf>,
    model_kind: String,
    hidden: usize,
    width: usize,
    #[serde(rename = "K")]
    k: usize,
    metric: Metric,
    #[serde(flatten)]
    train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            data: None,
            model_kind: "hard-mcfm".into(),
            hidden: a.hidden,
            width: a.width,
            k: a.k,
            metric: Metric::State,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by `gendata`
    #[arg(long)]
    data: Option<PathBuf>,
    /// metriplectic-hard, metriplectic-soft, hard-mcfm or baseline
    #[arg(long)]
    model_kind: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    lambda_soft: Option<f64>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Number of Fourier frequencies in the time embedding
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long, value_enum)]
    metric: Option<Metric>,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut s: TrainSettings = resolve(&TrainSettings::default(), a.common.config.as_deref())?;
    set(&mut s.train.seed, a.common.seed);
    s.data = a.data.or(s.data);
    set(&mut s.model_kind, a.model_kind);
    set(&mut s.train.epochs, a.epochs);
    set(&mut s.train.batch_size, a.batch_size);
    set(&mut s.train.lr_max, a.lr_max);
    set(&mut s.train.lr_min, a.lr_min);
    set(&mut s.train.lambda_soft, a.lambda_soft);
    set(&mut s.train.lambda_reg, a.lambda_reg);
    set(&mut s.train.clip_norm, a.clip_norm);
    set(&mut s.hidden, a.hidden);
    set(&mut s.width, a.width);
    set(&mut s.k, a.k);
    set(&mut s.metric, a.metric);
    s.train.validate().map_err(usage)?;
    let kind = model_kinds().get(&s.model_kind).map_err(usage)?;
    let data_dir = s.data.clone().ok_or_else(|| usage("--data is required"))?;
    let dir = out_dir(&a.common)?;

    let ds = load_dataset(&data_dir)?;
    let mut desc = kind.descriptor(Architecture {
        d: 2,
        hidden: s.hidden,
        width: s.width,
        k: s.k,
    });
    desc.energy = ds.config.physics;
    desc.metric = match s.metric {
        Metric::State => MetricMode::State,
        Metric::Constant => MetricMode::Constant,
    };
    desc.validate().map_err(usage)?;
    let model = Model::init(desc, s.train.seed)?;
    let transitions = ds.transitions();
    log::info!("training {} on {} transitions", s.model_kind, transitions.len());
    let outcome = train_model(model, &transitions, &s.train)?;
    let ckpt = Checkpoint {
        model: outcome.model,
        time_scale: ds.duration(),
    };
    ckpt.save(&dir.join("checkpoint.json"))?;
    write_loss_curve(&dir.join("loss.csv"), &outcome.curve)?;
    write_provenance(&dir, "train", &s)?;
    if let Some(step) = outcome.diverged_at {
        bail!("training diverged at step {step}; saved the last finite parameters");
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RolloutSettings {
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    /// Defaults to the checkpoint kind's sampler
    sampler: Option<String>,
    h: f64,
    horizon: f64,
    projection: Switch,
    projection_eps: f64,
    prox: Option<String>,
    /// Roll out only the first `limit` test trajectories
    limit: Option<usize>,
}

impl Default for RolloutSettings {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            checkpoint: None,
            data: None,
            sampler: None,
            h: s.h,
            horizon: s.horizon,
            projection: Switch::Off,
            projection_eps: 1e-9,
            prox: None,
            limit: None,
        }
    }
}

#[derive(Args, Debug)]
pub struct RolloutArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset whose test initial conditions are rolled out
    #[arg(long)]
    data: Option<PathBuf>,
    /// rk4 or strang-prox
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long, value_enum)]
    projection: Option<Switch>,
    #[arg(long)]
    projection_eps: Option<f64>,
    /// closed-form-shrink or implicit
    #[arg(long)]
    prox: Option<String>,
    #[arg(long)]
    limit: Option<usize>,
}

pub fn rollout(a: RolloutArgs) -> Result<()> {
    let mut s: RolloutSettings = resolve(&RolloutSettings::default(), a.common.config.as_deref())?;
    if a.common.seed.is_some() {
        log::info!("rollouts are deterministic; --seed has no effect");
    }
    s.checkpoint = a.checkpoint.or(s.checkpoint);
    s.data = a.data.or(s.data);
    s.sampler = a.sampler.or(s.sampler);
    set(&mut s.h, a.h);
    set(&mut s.horizon, a.horizon);
    set(&mut s.projection, a.projection);
    set(&mut s.projection_eps, a.projection_eps);
    s.prox = a.prox.or(s.prox);
    s.limit = a.limit.or(s.limit);
    let ckpt_path = s.checkpoint.clone().ok_or_else(|| usage("--checkpoint is required"))?;
    let data_dir = s.data.clone().ok_or_else(|| usage("--data is required"))?;

    let ckpt = Checkpoint::load(&ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let scheme = s
        .sampler
        .clone()
        .unwrap_or_else(|| default_sampler(&ckpt.model.descriptor).to_string());
    s.sampler = Some(scheme.clone());
    samplers().get(&scheme).map_err(usage)?;
    if let Some(p) = &s.prox {
        prox_modes().get(p).map_err(usage)?;
    }
    let cfg = SamplerConfig {
        h: s.h,
        horizon: s.horizon,
        scheme,
        projection: (s.projection == Switch::On).then_some(s.projection_eps),
        prox: s.prox.clone(),
    };
    cfg.steps().map_err(usage)?;
    if !(s.projection_eps > 0.0) && s.projection == Switch::On {
        return Err(usage("--projection-eps must be positive"));
    }

    let ds = load_dataset(&data_dir)?;
    let field = LearnedField::new(&ckpt)?;
    let energy = ds.config.physics;
    let n = s.limit.unwrap_or(ds.test.len()).min(ds.test.len());
    let dir = out_dir(&a.common)?;
    let records: Vec<RolloutRecord> = ds.test[..n]
        .par_iter()
        .map(|tr| roll(&field, tr.initial(), &cfg, &energy))
        .collect::<metriflow::Result<_>>()?;
    let mut failures = 0;
    for (i, r) in records.iter().enumerate() {
        if let Some(f) = &r.failure {
            log::warn!("trajectory {i} stopped early: {f}");
            failures += 1;
        }
        r.save_csv(&dir.join(traj_name(i)))?;
    }
    write_provenance(&dir, "rollout", &s)?;
    log::info!("wrote {n} rollouts to {} ({failures} incomplete)", dir.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Analytic {
    ShrinkPendulum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VerifySettings {
    checkpoint: Option<PathBuf>,
    analytic: Option<Analytic>,
    gamma: f64,
    points: usize,
    h_grid: Vec<f64>,
    projection_eps: f64,
    q_range: [f64; 2],
    p_range: [f64; 2],
    seed: u64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            checkpoint: None,
            analytic: None,
            gamma: 0.2,
            points: 1000,
            h_grid: vec![0.1, 0.05, 0.025, 0.0125],
            projection_eps: 1e-9,
            q_range: [-std::f64::consts::PI, std::f64::consts::PI],
            p_range: [-2.0, 2.0],
            seed: 0,
        }
    }
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, conflicts_with = "analytic")]
    checkpoint: Option<PathBuf>,
    /// Built-in field to verify instead of a checkpoint
    #[arg(long, value_enum)]
    analytic: Option<Analytic>,
    /// Damping of the analytic field
    #[arg(long)]
    gamma: Option<f64>,
    /// Number of random evaluation points
    #[arg(long)]
    points: Option<usize>,
    /// Comma-separated step sizes
    #[arg(long, value_delimiter = ',')]
    h_grid: Option<Vec<f64>>,
}

pub fn verify(a: VerifyArgs) -> Result<()> {
    let mut s: VerifySettings = resolve(&VerifySettings::default(), a.common.config.as_deref())?;
    set(&mut s.seed, a.common.seed);
    if a.checkpoint.is_some() || a.analytic.is_some() {
        s.checkpoint = a.checkpoint;
        s.analytic = a.analytic;
    }
    set(&mut s.gamma, a.gamma);
    set(&mut s.points, a.points);
    set(&mut s.h_grid, a.h_grid);
    if s.points == 0 {
        return Err(usage("--points must be positive"));
    }
    if s.h_grid.len() < 2 || s.h_grid.iter().any(|h| !(*h > 0.0)) {
        return Err(usage("--h-grid needs at least two positive step sizes"));
    }

    let (field, t_max, energy): (Arc<dyn VectorField>, f64, PendulumEnergy) = match (&s.checkpoint, s.analytic) {
        (Some(p), None) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            let f = LearnedField::new(&ckpt)?;
            if !f.is_metriplectic() {
                return Err(metriflow::Error::NotMetriplectic(format!(
                    "{} holds a baseline field with no H, Φ or metric to verify",
                    p.display()
                ))
                .into());
            }
            (Arc::new(f), ckpt.time_scale, ckpt.model.descriptor.energy)
        }
        (None, Some(Analytic::ShrinkPendulum)) => {
            if !(s.gamma >= 0.0) {
                return Err(usage("--gamma must be non-negative"));
            }
            let f = ShrinkPendulum::new(s.gamma);
            (Arc::new(f), 0.0, f.energy)
        }
        _ => return Err(usage("give exactly one of --checkpoint or --analytic")),
    };
    let m = field.structure().expect("checked above");
    let dir = out_dir(&a.common)?;
    let points = sample_points(s.points, s.q_range, s.p_range, t_max, s.seed);
    let t1 = verify_theorem1(m, &points)?;
    let states: Vec<Vec<f64>> = points.iter().map(|(x, _)| x.clone()).collect();
    let ctx = StepContext {
        projection: None,
        prox: resolve_prox(field.as_ref(), &states[0], None)?,
    };
    let t2 = verify_theorem2(m, &states, 0.0, &s.h_grid, &ctx)?;
    let descent = projected_descent(field.as_ref(), &energy, &points, &s.h_grid, s.projection_eps)?;
    write_json(&dir.join("theorem1.json"), &t1)?;
    write_json(&dir.join("theorem2.json"), &t2)?;
    write_json(&dir.join("descent.json"), &descent)?;
    write_provenance(&dir, "verify", &s)?;
    log::info!(
        "conservation {}/{}, slope {:.3} (min {}), strict Φ decrease {}, projected descent {}",
        t1.pass_counts.conservation,
        t1.n,
        t2.slope,
        t2.slope_min,
        if t2.strict_pass { "holds" } else { "violated" },
        if descent.passed { "holds" } else { "violated" }
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RunSpec {
    name: String,
    dir: PathBuf,
}

fn parse_run(s: &str) -> std::result::Result<RunSpec, String> {
    match s.split_once('=') {
        Some((n, d)) if !n.is_empty() && !d.is_empty() => Ok(RunSpec {
            name: n.to_string(),
            dir: PathBuf::from(d),
        }),
        _ => Err(format!("expected NAME=DIR, got `{s}`")),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReportSettings {
    runs: Vec<RunSpec>,
    data: Option<PathBuf>,
    projections: usize,
    seed: u64,
}

impl Default for ReportSettings {
    fn default() -> Self {
        Self {
            runs: vec![],
            data: None,
            projections: SW2_PROJECTIONS,
            seed: 0,
        }
    }
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Rollout directory as NAME=DIR; repeat for each model
    #[arg(long = "run", value_parser = parse_run)]
    runs: Vec<RunSpec>,
    /// Dataset providing the reference terminal states
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of sliced-W2 projections
    #[arg(long)]
    projections: Option<usize>,
}

/// Differences between the first and second model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub first: String,
    pub second: String,
    pub increase_fraction_diff: f64,
    pub sign_error_fraction_diff: f64,
    pub max_energy_ratio_diff: f64,
    pub sw2_gap: f64,
    /// `|ΔSW2| / max SW2`
    pub sw2_gap_relative: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub models: Vec<MetricsReport>,
    pub comparison: Option<Comparison>,
    pub projections: usize,
    pub seed: u64,
}

/// Loads `traj_NNNN.csv` files in index order.
pub fn load_rollouts(dir: &Path) -> Result<Vec<(usize, RolloutRecord)>> {
    let mut found = BTreeMap::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(idx) = name.strip_prefix("traj_").and_then(|r| r.strip_suffix(".csv")) {
            if let Ok(i) = idx.parse::<usize>() {
                found.insert(i, path);
            }
        }
    }
    if found.is_empty() {
        bail!("no traj_NNNN.csv files in {}", dir.display());
    }
    found
        .into_iter()
        .map(|(i, p)| Ok((i, RolloutRecord::load_csv(&p)?)))
        .collect()
}

/// Metrics of each run against the test terminal states with the same indices.
pub fn compute_metrics(
    runs: &[(String, Vec<(usize, RolloutRecord)>)],
    ds: &Dataset,
    n_proj: usize,
    seed: u64,
) -> Result<Metrics> {
    let mut models = vec![];
    for (name, recs) in runs {
        let mut reference = vec![];
        for (i, _) in recs {
            let tr = ds
                .test
                .get(*i)
                .with_context(|| format!("run {name}: trajectory {i} has no test counterpart"))?;
            reference.push(tr.terminal().to_vec());
        }
        let records: Vec<RolloutRecord> = recs.iter().map(|(_, r)| r.clone()).collect();
        models.push(aggregate(name, &records, &reference, n_proj, seed)?);
    }
    let comparison = match models.as_slice() {
        [a, b] => {
            let gap = (a.sw2 - b.sw2).abs();
            Some(Comparison {
                first: a.model.clone(),
                second: b.model.clone(),
                increase_fraction_diff: a.increase_fraction - b.increase_fraction,
                sign_error_fraction_diff: a.sign_error_fraction - b.sign_error_fraction,
                max_energy_ratio_diff: a.max_energy_ratio - b.max_energy_ratio,
                sw2_gap: gap,
                sw2_gap_relative: gap / a.sw2.max(b.sw2),
            })
        }
        _ => None,
    };
    Ok(Metrics {
        models,
        comparison,
        projections: n_proj,
        seed,
    })
}

pub fn report(a: ReportArgs) -> Result<()> {
    let mut s: ReportSettings = resolve(&ReportSettings::default(), a.common.config.as_deref())?;
    set(&mut s.seed, a.common.seed);
    if !a.runs.is_empty() {
        s.runs = a.runs;
    }
    s.data = a.data.or(s.data);
    set(&mut s.projections, a.projections);
    if s.runs.is_empty() {
        return Err(usage("at least one --run NAME=DIR is required"));
    }
    if s.projections == 0 {
        return Err(usage("--projections must be positive"));
    }
    let data_dir = s.data.clone().ok_or_else(|| usage("--data is required"))?;
    let ds = load_dataset(&data_dir)?;
    let runs: Vec<(String, Vec<(usize, RolloutRecord)>)> = s
        .runs
        .iter()
        .map(|r| Ok((r.name.clone(), load_rollouts(&r.dir)?)))
        .collect::<Result<_>>()?;
    let metrics = compute_metrics(&runs, &ds, s.projections, s.seed)?;
    let dir = out_dir(&a.common)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    write_plots(&dir, &runs, &metrics)?;
    write_provenance(&dir, "report", &s)?;
    for m in &metrics.models {
        log::info!(
            "{}: increase {:.4}, sign error {:.4}, max ratio {:.4}, SW2 {:.4}",
            m.model,
            m.increase_fraction,
            m.sign_error_fraction,
            m.max_energy_ratio,
            m.sw2
        );
    }
    Ok(())
}

fn write_plots(dir: &Path, runs: &[(String, Vec<(usize, RolloutRecord)>)], metrics: &Metrics) -> Result<()> {
    let series = |f: &dyn Fn(&RolloutRecord) -> Vec<(f64, f64)>| -> Vec<Series> {
        runs.iter()
            .map(|(name, recs)| Series {
                label: name.clone(),
                lines: recs.iter().map(|(_, r)| f(r)).collect(),
            })
            .collect()
    };
    let phase = series(&|r| r.states.iter().map(|s| (s[0], s[s.len() / 2])).collect());
    let ratio = series(&|r| match r.energy.first() {
        Some(&e0) if e0 != 0.0 => r.times.iter().zip(&r.energy).map(|(t, e)| (*t, e / e0)).collect(),
        _ => vec![],
    });
    let rate = series(&|r| r.times.iter().copied().zip(r.energy_rate.iter().copied()).collect());
    let files = [
        ("phase.svg", line_chart("Phase portrait", "q", "p", &phase, false)),
        (
            "energy_ratio.svg",
            line_chart("Energy relative to start", "t [s]", "E(t)/E(0)", &ratio, false),
        ),
        (
            "energy_rate.svg",
            line_chart("Energy rate", "t [s]", "dE/dt", &rate, true),
        ),
        ("metrics.svg", {
            let cats = ["increase", "sign error", "max E/E0", "final E/E0", "SW2"];
            let vals: Vec<(String, Vec<f64>)> = metrics
                .models
                .iter()
                .map(|m| {
                    (
                        m.model.clone(),
                        vec![
                            m.increase_fraction,
                            m.sign_error_fraction,
                            m.max_energy_ratio,
                            m.final_energy_ratio,
                            m.sw2,
                        ],
                    )
                })
                .collect();
            bar_chart("Benchmark metrics", &cats, &vals)
        }),
    ];
    for (name, svg) in files {
        let p = dir.join(name);
        std::fs::write(&p, svg).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
