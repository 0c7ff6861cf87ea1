//! Damped-pendulum testbed: ground truth, datasets, and evaluation metrics.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfm::Transition;
use crate::error::{Error, Result};
use crate::integrate::{
    dot, fmt_float, rk4_step, rollout, FnField, LearnedField, RolloutRecord, SamplerConfig, ShrinkPendulum, VectorField,
};
use crate::physics::PendulumEnergy;

/// `q̇ = p/M`, `ṗ = −MgL sin q − γp`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub mass: f64,
    pub gravity: f64,
    pub length: f64,
    pub gamma: f64,
}

impl PendulumParams {
    pub fn unit(gamma: f64) -> Self {
        Self {
            mass: 1.0,
            gravity: 1.0,
            length: 1.0,
            gamma,
        }
    }

    pub fn energy_fn(&self) -> PendulumEnergy {
        PendulumEnergy {
            mass: self.mass,
            gravity: self.gravity,
            length: self.length,
        }
    }

    pub fn rhs(&self, x: &[f64]) -> [f64; 2] {
        let (q, p) = (x[0], x[1]);
        [
            p / self.mass,
            -self.mass * self.gravity * self.length * q.sin() - self.gamma * p,
        ]
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        self.energy_fn().value(x)
    }

    pub fn field(&self) -> FnField<impl Fn(&[f64], f64) -> Vec<f64> + Send + Sync> {
        let me = *self;
        FnField::new(2, move |x: &[f64], _t| me.rhs(x).to_vec())
    }
}

/// Integrates the true system with RK4 at step `h_fine`, sampling every `substeps` steps.
pub fn integrate_truth(
    params: &PendulumParams,
    x0: &[f64],
    dt: f64,
    steps: usize,
    substeps: usize,
) -> Result<Vec<Vec<f64>>> {
    let f = params.field();
    let h = dt / substeps as f64;
    let mut out = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    out.push(x.clone());
    for k in 0..steps {
        for s in 0..substeps {
            x = rk4_step(&f, &x, k as f64 * dt + s as f64 * h, h, None)?;
        }
        out.push(x.clone());
    }
    Ok(out)
}

fn default_substeps() -> usize {
    100
}

/// Dataset protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    pub dt: f64,
    pub horizon: f64,
    pub gamma_range: [f64; 2],
    pub q0_range: [f64; 2],
    pub p0_range: [f64; 2],
    #[serde(default = "default_substeps")]
    pub fine_substeps: usize,
    pub physics: PendulumEnergy,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 500,
            test: 100,
            dt: 0.1,
            horizon: 5.0,
            gamma_range: [0.05, 0.30],
            q0_range: [-0.8 * PI, 0.8 * PI],
            p0_range: [-1.5, 1.5],
            fine_substeps: default_substeps(),
            physics: PendulumEnergy::default(),
        }
    }
}

impl DatasetConfig {
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.train + self.test == 0 {
            return Err(Error::invalid("dataset needs at least one trajectory"));
        }
        if !(self.dt > 0.0) || !(self.horizon >= self.dt) || self.fine_substeps == 0 {
            return Err(Error::invalid(
                "need dt > 0, horizon ≥ dt and at least one fine substep",
            ));
        }
        for (name, r) in [
            ("gamma", self.gamma_range),
            ("q0", self.q0_range),
            ("p0", self.p0_range),
        ] {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return Err(Error::invalid(format!("invalid {name} range {r:?}")));
            }
        }
        if self.gamma_range[0] < 0.0 {
            return Err(Error::invalid("damping must be non-negative"));
        }
        let e = &self.physics;
        if !(e.mass > 0.0 && e.gravity > 0.0 && e.length > 0.0) {
            return Err(Error::invalid("M, g and L must be positive"));
        }
        Ok(())
    }

    fn params(&self, gamma: f64) -> PendulumParams {
        PendulumParams {
            mass: self.physics.mass,
            gravity: self.physics.gravity,
            length: self.physics.length,
            gamma,
        }
    }
}

/// One ground-truth trajectory sampled at `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub gamma: f64,
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn initial(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("non-empty trajectory")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Trajectory `index` draws from its own RNG stream, so generation order does not matter.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let steps = cfg.steps();
    let all: Vec<Trajectory> = (0..cfg.train + cfg.test)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let gamma = uniform(&mut rng, cfg.gamma_range);
            let q0 = uniform(&mut rng, cfg.q0_range);
            let p0 = uniform(&mut rng, cfg.p0_range);
            let states = integrate_truth(&cfg.params(gamma), &[q0, p0], cfg.dt, steps, cfg.fine_substeps)?;
            Ok(Trajectory {
                gamma,
                dt: cfg.dt,
                states,
            })
        })
        .collect::<Result<_>>()?;
    let mut train = all;
    let test = train.split_off(cfg.train);
    Ok(Dataset {
        config: cfg.clone(),
        train,
        test,
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    dt: f64,
    horizon: f64,
    steps: usize,
    counts: Counts,
    params_ranges: Ranges,
    physics: Physics,
    fine_substeps: usize,
}

#[derive(Serialize, Deserialize)]
struct Counts {
    train: usize,
    test: usize,
}

#[derive(Serialize, Deserialize)]
struct Ranges {
    gamma: [f64; 2],
    q0: [f64; 2],
    p0: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct Physics {
    #[serde(rename = "M")]
    mass: f64,
    g: f64,
    #[serde(rename = "L")]
    length: f64,
}

fn traj_file(dir: &Path, split: &str, i: usize) -> std::path::PathBuf {
    dir.join(split).join(format!("traj_{i:04}.csv"))
}

impl Dataset {
    /// All consecutive pairs of the training split.
    pub fn transitions(&self) -> Vec<Transition> {
        self.train
            .iter()
            .flat_map(|tr| {
                tr.states.windows(2).map(move |w| Transition {
                    x_k: w[0].clone(),
                    x_next: w[1].clone(),
                    dt: tr.dt,
                })
            })
            .collect()
    }

    pub fn duration(&self) -> f64 {
        self.config.steps() as f64 * self.config.dt
    }

    /// Writes `manifest.json` and one CSV per trajectory under `train/` and `test/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let m = Manifest {
            seed: c.seed,
            dt: c.dt,
            horizon: c.horizon,
            steps: c.steps(),
            counts: Counts {
                train: self.train.len(),
                test: self.test.len(),
            },
            params_ranges: Ranges {
                gamma: c.gamma_range,
                q0: c.q0_range,
                p0: c.p0_range,
            },
            physics: Physics {
                mass: c.physics.mass,
                g: c.physics.gravity,
                length: c.physics.length,
            },
            fine_substeps: c.fine_substeps,
        };
        for split in ["train", "test"] {
            let d = dir.join(split);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mp = dir.join("manifest.json");
        std::fs::write(&mp, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| Error::io(&mp, e))?;
        for (split, trajs) in [("train", &self.train), ("test", &self.test)] {
            for (i, tr) in trajs.iter().enumerate() {
                let path = traj_file(dir, split, i);
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(["t", "q", "p", "gamma"])?;
                for (k, s) in tr.states.iter().enumerate() {
                    w.write_record([
                        fmt_float(k as f64 * tr.dt),
                        fmt_float(s[0]),
                        fmt_float(s[1]),
                        fmt_float(tr.gamma),
                    ])?;
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join("manifest.json");
        let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: mp.display().to_string(),
            detail: e.to_string(),
        })?;
        let config = DatasetConfig {
            seed: m.seed,
            train: m.counts.train,
            test: m.counts.test,
            dt: m.dt,
            horizon: m.horizon,
            gamma_range: m.params_ranges.gamma,
            q0_range: m.params_ranges.q0,
            p0_range: m.params_ranges.p0,
            fine_substeps: m.fine_substeps,
            physics: PendulumEnergy {
                mass: m.physics.mass,
                gravity: m.physics.g,
                length: m.physics.length,
            },
        };
        let read = |split: &str, n: usize| -> Result<Vec<Trajectory>> {
            (0..n)
                .map(|i| {
                    let path = traj_file(dir, split, i);
                    let fmt = |detail: String| Error::Format {
                        path: path.display().to_string(),
                        detail,
                    };
                    let mut r = csv::Reader::from_path(&path)?;
                    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
                    if header != ["t", "q", "p", "gamma"] {
                        return Err(fmt(format!("unexpected header {header:?}")));
                    }
                    let mut states = vec![];
                    let mut gamma = f64::NAN;
                    for row in r.records() {
                        let row = row?;
                        let v: Vec<f64> = row
                            .iter()
                            .map(str::parse)
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|e: std::num::ParseFloatError| fmt(e.to_string()))?;
                        states.push(vec![v[1], v[2]]);
                        gamma = v[3];
                    }
                    if states.len() != m.steps + 1 {
                        return Err(fmt(format!("expected {} rows, found {}", m.steps + 1, states.len())));
                    }
                    Ok(Trajectory {
                        gamma,
                        dt: m.dt,
                        states,
                    })
                })
                .collect()
        };
        Ok(Self {
            train: read("train", m.counts.train)?,
            test: read("test", m.counts.test)?,
            config,
        })
    }
}

/// Per-trajectory physics metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub increase_fraction: f64,
    /// `None` when `E₀ = 0`
    pub max_energy_ratio: Option<f64>,
    pub final_energy_ratio: Option<f64>,
    pub sign_error_fraction: f64,
}

/// Fractions are normalised by the number of transitions `T`.
pub fn physics_metrics(record: &RolloutRecord) -> Result<TrajectoryMetrics> {
    if !record.is_complete() {
        return Err(Error::invalid(format!(
            "incomplete rollout: {}",
            record.failure.as_deref().unwrap_or("")
        )));
    }
    if record.len() < 2 {
        return Err(Error::invalid("rollout needs at least one transition"));
    }
    let e = &record.energy;
    let t = (e.len() - 1) as f64;
    let increases = e.windows(2).filter(|w| w[1] > w[0]).count() as f64;
    let sign = record.energy_rate[..e.len() - 1].iter().filter(|&&r| r > 0.0).count() as f64;
    let (max_ratio, final_ratio) = if e[0] == 0.0 {
        (None, None)
    } else {
        let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (Some(max / e[0]), Some(e[e.len() - 1] / e[0]))
    };
    Ok(TrajectoryMetrics {
        increase_fraction: increases / t,
        max_energy_ratio: max_ratio,
        final_energy_ratio: final_ratio,
        sign_error_fraction: sign / t,
    })
}

/// Unit directions from normalised Gaussian draws.
pub fn projection_directions(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let nrm = dot(&v, &v).sqrt();
            if nrm > 1e-12 {
                break v.into_iter().map(|x| x / nrm).collect();
            }
        })
        .collect()
}

/// `W₂²` between two 1-D empirical measures via their quantile functions.
pub fn w2_squared_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    }
    let (n, m) = (a.len(), b.len());
    // breakpoints i/n and j/m, walked in exact integer arithmetic on the common grid n·m
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos = 0usize;
    let total = n * m;
    let mut acc = 0.0;
    while pos < total {
        let next_a = (i + 1) * m;
        let next_b = (j + 1) * n;
        let next = next_a.min(next_b);
        let w = (next - pos) as f64 / total as f64;
        let diff = a[i] - b[j];
        acc += w * diff * diff;
        pos = next;
        if next == next_a {
            i += 1;
        }
        if next == next_b {
            j += 1;
        }
    }
    acc
}

/// Sliced Wasserstein-2 over `n_proj` random unit directions.
pub fn sliced_w2(a: &[Vec<f64>], b: &[Vec<f64>], n_proj: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("sliced W2 needs non-empty point sets"));
    }
    if n_proj == 0 {
        return Err(Error::invalid("need at least one projection"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::invalid("point sets differ in dimension"));
    }
    let dirs = projection_directions(d, n_proj, seed);
    let total: f64 = dirs
        .iter()
        .map(|th| {
            let mut pa: Vec<f64> = a.iter().map(|x| dot(th, x)).collect();
            let mut pb: Vec<f64> = b.iter().map(|x| dot(th, x)).collect();
            w2_squared_1d(&mut pa, &mut pb)
        })
        .sum();
    Ok((total / n_proj as f64).sqrt())
}

/// Aggregated metrics of one model over the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub increase_fraction: f64,
    pub max_energy_ratio: f64,
    pub final_energy_ratio: f64,
    pub sign_error_fraction: f64,
    pub sw2: f64,
    pub per_trajectory: PerTrajectory,
    /// Trajectories dropped from ratio means because `E₀ = 0`
    pub excluded_zero_energy: Vec<usize>,
    /// Trajectories whose rollout failed
    pub failed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PerTrajectory {
    pub increase_fraction: Vec<f64>,
    pub max_energy_ratio: Vec<Option<f64>>,
    pub final_energy_ratio: Vec<Option<f64>>,
    pub sign_error_fraction: Vec<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub const SW2_PROJECTIONS: usize = 128;

/// Aggregates per-trajectory records and compares terminal states with `reference`.
pub fn aggregate(
    model: &str,
    records: &[RolloutRecord],
    reference: &[Vec<f64>],
    n_proj: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let mut per = PerTrajectory::default();
    let mut failed = vec![];
    let mut excluded = vec![];
    let mut terminal = vec![];
    for (i, r) in records.iter().enumerate() {
        match physics_metrics(r) {
            Ok(m) => {
                per.increase_fraction.push(m.increase_fraction);
                per.sign_error_fraction.push(m.sign_error_fraction);
                per.max_energy_ratio.push(m.max_energy_ratio);
                per.final_energy_ratio.push(m.final_energy_ratio);
                if m.max_energy_ratio.is_none() {
                    excluded.push(i);
                }
                terminal.push(r.states.last().expect("complete record").clone());
            }
            Err(_) => failed.push(i),
        }
    }
    let sw2 = if terminal.is_empty() {
        f64::NAN
    } else {
        sliced_w2(&terminal, reference, n_proj, seed)?
    };
    Ok(MetricsReport {
        model: model.to_string(),
        increase_fraction: mean(per.increase_fraction.iter().copied()),
        max_energy_ratio: mean(per.max_energy_ratio.iter().flatten().copied()),
        final_energy_ratio: mean(per.final_energy_ratio.iter().flatten().copied()),
        sign_error_fraction: mean(per.sign_error_fraction.iter().copied()),
        sw2,
        per_trajectory: per,
        excluded_zero_energy: excluded,
        failed,
    })
}

/// A model evaluated by [`run_benchmark`].
pub trait BenchModel: Send + Sync {
    fn name(&self) -> String;

    /// Field used to roll out `traj`.
    fn field(&self, traj: &Trajectory) -> Result<Arc<dyn VectorField>>;

    fn sampler(&self) -> SamplerConfig;
}

/// The true damped pendulum with each trajectory's own `γ`, integrated by RK4.
pub struct GroundTruth {
    pub h: f64,
    pub horizon: f64,
}

impl BenchModel for GroundTruth {
    fn name(&self) -> String {
        "ground-truth".into()
    }

    fn field(&self, traj: &Trajectory) -> Result<Arc<dyn VectorField>> {
        Ok(Arc::new(ShrinkPendulum::new(traj.gamma)))
    }

    fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            h: self.h,
            horizon: self.horizon,
            scheme: "rk4".into(),
            projection: None,
            prox: None,
        }
    }
}

/// A trained checkpoint with its sampler settings.
pub struct LearnedModel {
    pub name: String,
    pub field: Arc<LearnedField>,
    pub sampler: SamplerConfig,
}

impl BenchModel for LearnedModel {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn field(&self, _traj: &Trajectory) -> Result<Arc<dyn VectorField>> {
        Ok(self.field.clone())
    }

    fn sampler(&self) -> SamplerConfig {
        self.sampler.clone()
    }
}

/// Rollouts from every test initial condition.
pub fn rollouts(model: &dyn BenchModel, test: &[Trajectory], energy: &PendulumEnergy) -> Result<Vec<RolloutRecord>> {
    let cfg = model.sampler();
    test.par_iter()
        .map(|tr| rollout(model.field(tr)?.as_ref(), tr.initial(), &cfg, energy))
        .collect()
}

/// Rolls out every model over the test split and aggregates metrics.
pub fn run_benchmark(
    models: &[&dyn BenchModel],
    dataset: &Dataset,
    n_proj: usize,
    seed: u64,
) -> Result<Vec<(MetricsReport, Vec<RolloutRecord>)>> {
    let reference: Vec<Vec<f64>> = dataset.test.iter().map(|t| t.terminal().to_vec()).collect();
    let energy = dataset.config.physics;
    models
        .iter()
        .map(|m| {
            let recs = rollouts(*m, &dataset.test, &energy)?;
            let rep = aggregate(&m.name(), &recs, &reference, n_proj, seed)?;
            Ok((rep, recs))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn record_from_energy(e: &[f64]) -> RolloutRecord {
        let n = e.len();
        RolloutRecord {
            times: (0..n).map(|k| k as f64 * 0.1).collect(),
            states: vec![vec![0.0, 0.0]; n],
            energy: e.to_vec(),
            energy_rate: vec![0.0; n],
            phi: vec![f64::NAN; n],
            dh_ham: vec![f64::NAN; n],
            dphi_ham: vec![f64::NAN; n],
            dphi_metric: vec![f64::NAN; n],
            failure: None,
        }
    }

    #[test]
    fn rhs_and_energy_examples() {
        assert_eq!(PendulumParams::unit(0.0).rhs(&[0.0, 0.0]), [0.0, 0.0]);
        assert_eq!(PendulumParams::unit(0.0).rhs(&[FRAC_PI_2, 0.0]), [0.0, -1.0]);
        let r = PendulumParams::unit(0.1).rhs(&[0.0, 2.0]);
        assert_eq!(r[0], 2.0);
        assert!((r[1] + 0.2).abs() < 1e-15);
        assert_eq!(PendulumParams::unit(0.1).energy(&[0.0, 0.0]), 0.0);
        assert!((PendulumParams::unit(0.1).energy(&[FRAC_PI_2, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn undamped_energy_is_conserved() {
        let p = PendulumParams::unit(0.0);
        let states = integrate_truth(&p, &[1.0, 0.5], 0.1, 50, 1000).unwrap();
        let e0 = p.energy(&states[0]);
        assert!(states.iter().all(|s| (p.energy(s) - e0).abs() <= 1e-8));
    }

    #[test]
    fn metric_examples() {
        let m = physics_metrics(&record_from_energy(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(m.increase_fraction, 0.0);
        assert_eq!(m.max_energy_ratio, Some(1.0));
        assert!(m.final_energy_ratio.unwrap() < 1.0);
        let m = physics_metrics(&record_from_energy(&[1.0, 2.0, 1.0])).unwrap();
        assert_eq!(m.increase_fraction, 0.5);
        assert_eq!(m.max_energy_ratio, Some(2.0));
        let m = physics_metrics(&record_from_energy(&[0.0, 0.0])).unwrap();
        assert_eq!(m.max_energy_ratio, None);
    }

    #[test]
    fn sign_errors_use_first_t_rows() {
        let mut r = record_from_energy(&[1.0, 0.9, 0.8]);
        r.energy_rate = vec![0.5, -1.0, 7.0];
        assert_eq!(physics_metrics(&r).unwrap().sign_error_fraction, 0.5);
    }

    #[test]
    fn sw2_identity_and_symmetry() {
        let a: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos()])
            .collect();
        let b: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![(i as f64 * 1.3).cos(), (i as f64).sin() + 0.2])
            .collect();
        assert!(sliced_w2(&a, &a, 128, 3).unwrap() <= 1e-12);
        assert_eq!(sliced_w2(&a, &b, 128, 3).unwrap(), sliced_w2(&b, &a, 128, 3).unwrap());
        assert!(sliced_w2(&a, &[], 8, 0).is_err());
    }

    #[test]
    fn sw2_of_unit_shift_approaches_inverse_sqrt_two() {
        let a: Vec<Vec<f64>> = (0..16)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.91).cos()])
            .collect();
        let b: Vec<Vec<f64>> = a.iter().map(|x| vec![x[0] + 1.0, x[1]]).collect();
        let s = sliced_w2(&a, &b, 4000, 9).unwrap();
        assert!((s - 0.5f64.sqrt()).abs() < 0.02, "{s}");
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = vec![];
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn sw2_matches_exhaustive_coupling() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in [1usize, 3, 6, 8] {
            let a: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
                .collect();
            let b: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
                .collect();
            let dirs = projection_directions(2, 16, 5);
            let perms = permutations(n);
            let mut total = 0.0;
            for th in &dirs {
                let pa: Vec<f64> = a.iter().map(|x| dot(th, x)).collect();
                let pb: Vec<f64> = b.iter().map(|x| dot(th, x)).collect();
                let best = perms
                    .iter()
                    .map(|p| p.iter().enumerate().map(|(i, &j)| (pa[i] - pb[j]).powi(2)).sum::<f64>() / n as f64)
                    .fold(f64::INFINITY, f64::min);
                total += best;
            }
            let oracle = (total / 16.0).sqrt();
            assert!((sliced_w2(&a, &b, 16, 5).unwrap() - oracle).abs() <= 1e-12);
        }
    }

    #[test]
    fn unequal_sizes_use_quantile_coupling() {
        // {0, 1} against {0, 0.5, 1}: quantile pieces of width 1/3, 1/6, 1/6, 1/3
        let w = w2_squared_1d(&mut [0.0, 1.0], &mut [0.0, 0.5, 1.0]);
        assert!((w - (0.25 / 6.0 + 0.25 / 6.0)).abs() < 1e-15);
        // duplicating every point leaves the measure unchanged
        let w = w2_squared_1d(&mut [0.3, -1.0], &mut [0.3, 0.3, -1.0, -1.0]);
        assert_eq!(w, 0.0);
    }

    #[test]
    fn small_dataset_shape_and_determinism() {
        let cfg = DatasetConfig {
            train: 3,
            test: 2,
            fine_substeps: 10,
            ..DatasetConfig::default()
        };
        let d = generate_dataset(&cfg).unwrap();
        assert_eq!(d.train.len(), 3);
        assert_eq!(d.test.len(), 2);
        assert!(d.train.iter().all(|t| t.states.len() == 51));
        assert_eq!(d.transitions().len(), 150);
        assert_eq!(generate_dataset(&cfg).unwrap(), d);
        let collapsed = DatasetConfig {
            gamma_range: [0.1, 0.1],
            ..cfg.clone()
        };
        assert!(generate_dataset(&collapsed)
            .unwrap()
            .train
            .iter()
            .all(|t| t.gamma == 0.1));
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), d);
    }

    #[test]
    fn invalid_dataset_config() {
        let cfg = DatasetConfig {
            train: 0,
            test: 0,
            ..DatasetConfig::default()
        };
        assert!(generate_dataset(&cfg).is_err());
        let cfg = DatasetConfig {
            gamma_range: [0.3, 0.1],
            ..DatasetConfig::default()
        };
        assert!(generate_dataset(&cfg).is_err());
    }
}
