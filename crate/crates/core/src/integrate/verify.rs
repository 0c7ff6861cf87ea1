use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dot, project_velocity, strang_step, Metriplectic, StepContext, VectorField};
use crate::error::{Error, Result};
use crate::physics::PendulumEnergy;

pub const THEOREM1_H_TOL: f64 = 1e-9;
pub const THEOREM1_PHI_TOL: f64 = 1e-12;
pub const THEOREM2_SLOPE_MIN: f64 = 2.7;
pub const STRICT_GRAD_MIN: f64 = 1e-6;

/// `n` uniform samples of `(q, p)` from the box and `t` from `[0, t_max]`.
pub fn sample_points(n: usize, q: [f64; 2], p: [f64; 2], t_max: f64, seed: u64) -> Vec<(Vec<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = vec![rng.gen_range(q[0]..=q[1]), rng.gen_range(p[0]..=p[1])];
            (x, rng.gen_range(0.0..=t_max))
        })
        .collect()
}

/// Pointwise conservation and dissipation check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub n: usize,
    pub tolerances: Theorem1Tolerances,
    pub pass_counts: Theorem1Counts,
    /// `max |⟨∇H, v⟩|`
    pub max_abs_h_rate: f64,
    /// `max −∇ΦᵀG̃∇Φ`
    pub max_dissipation_rate: f64,
    /// `max ⟨∇Φ, −G̃∇Φ⟩` from the metric channel alone
    pub max_phi_metric_rate: f64,
    /// `max ⟨∇Φ, v⟩` including `J∇Φ`, which is only softly constrained
    pub max_phi_full_rate: f64,
    pub phi_full_rate_positive: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Tolerances {
    pub h_rate: f64,
    pub phi_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Counts {
    pub conservation: usize,
    pub dissipation: usize,
    pub phi_metric: usize,
}

/// Evaluates the conservation and dissipation identities at the given `(x, t)` points.
pub fn verify_theorem1(m: &dyn Metriplectic, points: &[(Vec<f64>, f64)]) -> Result<Theorem1Report> {
    if points.is_empty() {
        return Err(Error::invalid("no sample points"));
    }
    let rows: Vec<(f64, f64, f64, f64)> = points
        .par_iter()
        .map(|(x, t)| {
            let e = m.eval(x, *t)?;
            let missing = || Error::NotMetriplectic("evaluation lacks metriplectic channels".into());
            let gh = e.grad_h.as_ref().ok_or_else(missing)?;
            let gp = e.grad_phi.as_ref().ok_or_else(missing)?;
            let diss = e.dissipative.as_ref().ok_or_else(missing)?;
            let rate = e.dissipation_rate.ok_or_else(missing)?;
            Ok((dot(gh, &e.v).abs(), rate, -dot(gp, diss), dot(gp, &e.v)))
        })
        .collect::<Result<_>>()?;
    let fold_max = |f: fn(&(f64, f64, f64, f64)) -> f64| rows.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    let counts = Theorem1Counts {
        conservation: rows.iter().filter(|r| r.0 <= THEOREM1_H_TOL).count(),
        dissipation: rows.iter().filter(|r| r.1 <= 0.0).count(),
        phi_metric: rows.iter().filter(|r| r.2 <= THEOREM1_PHI_TOL).count(),
    };
    let n = rows.len();
    Ok(Theorem1Report {
        n,
        tolerances: Theorem1Tolerances {
            h_rate: THEOREM1_H_TOL,
            phi_rate: THEOREM1_PHI_TOL,
        },
        passed: counts.conservation == n && counts.dissipation == n && counts.phi_metric == n,
        pass_counts: counts,
        max_abs_h_rate: fold_max(|r| r.0),
        max_dissipation_rate: fold_max(|r| r.1),
        max_phi_metric_rate: fold_max(|r| r.2),
        max_phi_full_rate: fold_max(|r| r.3),
        phi_full_rate_positive: rows.iter().filter(|r| r.3 > 0.0).count(),
    })
}

/// One step size of [`verify_theorem2`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Row {
    pub h: f64,
    /// `max |ΔH|` over the symplectic substeps of one Strang step
    pub max_abs_dh: f64,
    /// `max (ΔΦ + h∇ΦᵀG∇Φ)/h²`
    pub max_bound_residual: f64,
    pub max_dphi: f64,
    /// States with `‖∇Φ‖ > 1e-6`
    pub strict_checked: usize,
    /// Of those, states with `ΔΦ ≥ 0`
    pub strict_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub rows: Vec<Theorem2Row>,
    /// Least-squares slope of `log max|ΔH|` against `log h`
    pub slope: f64,
    pub slope_min: f64,
    /// Smallest `C ≥ 0` with `ΔΦ ≤ −h∇ΦᵀG∇Φ + C h²` at every sample and step size
    pub fitted_c: f64,
    pub slope_pass: bool,
    pub bound_pass: bool,
    pub strict_pass: bool,
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Single Strang steps from every state for each step size.
pub fn verify_theorem2(
    m: &dyn Metriplectic,
    states: &[Vec<f64>],
    t: f64,
    hs: &[f64],
    ctx: &StepContext,
) -> Result<Theorem2Report> {
    if hs.len() < 2 || states.is_empty() {
        return Err(Error::invalid("need at least two step sizes and one state"));
    }
    let mut rows = Vec::with_capacity(hs.len());
    for &h in hs {
        let per: Vec<(f64, f64, f64, bool)> = states
            .par_iter()
            .map(|x| {
                let tm = t + 0.5 * h;
                let e = m.eval(x, tm)?;
                let gp = e.grad_phi.clone().unwrap_or_default();
                let quad = -e.dissipation_rate.unwrap_or(0.0);
                let (_, d) = strang_step(m, x, t, h, ctx)?;
                let dphi = d.dphi_ham + d.dphi_metric;
                let strict = dot(&gp, &gp).sqrt() > STRICT_GRAD_MIN;
                Ok((d.dh_ham.abs(), (dphi + h * quad) / (h * h), dphi, strict))
            })
            .collect::<Result<_>>()?;
        let checked: Vec<&(f64, f64, f64, bool)> = per.iter().filter(|r| r.3).collect();
        rows.push(Theorem2Row {
            h,
            max_abs_dh: per.iter().map(|r| r.0).fold(0.0, f64::max),
            max_bound_residual: per.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max),
            max_dphi: per.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max),
            strict_checked: checked.len(),
            strict_violations: checked.iter().filter(|r| r.2 >= 0.0).count(),
        });
    }
    let lx: Vec<f64> = rows.iter().map(|r| r.h.ln()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.max_abs_dh.max(f64::MIN_POSITIVE).ln()).collect();
    let slope = fit_slope(&lx, &ly);
    let fitted_c = rows.iter().map(|r| r.max_bound_residual).fold(0.0, f64::max);
    Ok(Theorem2Report {
        slope_pass: slope >= THEOREM2_SLOPE_MIN,
        bound_pass: fitted_c.is_finite(),
        strict_pass: rows.iter().all(|r| r.strict_violations == 0),
        rows,
        slope,
        slope_min: THEOREM2_SLOPE_MIN,
        fitted_c,
    })
}

/// Explicit projected steps `x⁺ = x + h v_proj` against the descent-lemma bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    pub h: Vec<f64>,
    pub n: usize,
    /// Per step size: states with `E(x⁺) ≤ E(x)`
    pub descent_counts: Vec<usize>,
    /// Per step size: states exceeding `h⟨∇E, v_proj⟩ + ½ L h² ‖v_proj‖²`
    pub bound_violations: Vec<usize>,
    /// Per step size: states with `⟨∇E, v_proj⟩ > 0`
    pub positive_rates: Vec<usize>,
    pub passed: bool,
}

pub fn projected_descent(
    field: &dyn VectorField,
    energy: &PendulumEnergy,
    points: &[(Vec<f64>, f64)],
    hs: &[f64],
    eps: f64,
) -> Result<DescentReport> {
    let lip = energy.hessian_bound();
    let mut report = DescentReport {
        h: hs.to_vec(),
        n: points.len(),
        descent_counts: vec![],
        bound_violations: vec![],
        positive_rates: vec![],
        passed: true,
    };
    for &h in hs {
        let per: Vec<(bool, bool, bool)> = points
            .par_iter()
            .map(|(x, t)| {
                let g = energy.gradient(x);
                let v = project_velocity(&field.velocity(x, *t)?, &g, eps);
                let rate = dot(&g, &v);
                let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
                let de = energy.value(&xp) - energy.value(x);
                let bound = h * rate + 0.5 * lip * h * h * dot(&v, &v);
                let slack = 1e-12 * energy.value(x).abs().max(1.0);
                Ok((de <= 0.0, de > bound + slack, rate > 0.0))
            })
            .collect::<Result<_>>()?;
        let viol = per.iter().filter(|r| r.1).count();
        let pos = per.iter().filter(|r| r.2).count();
        report.passed &= viol == 0 && pos == 0;
        report.descent_counts.push(per.iter().filter(|r| r.0).count());
        report.bound_violations.push(viol);
        report.positive_rates.push(pos);
    }
    Ok(report)
}
