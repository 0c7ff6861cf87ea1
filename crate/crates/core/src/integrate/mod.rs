//! Rollout engines: RK4, the Strang splitting with a proximal metric step,
//! the energy-rate projection, and numeric checks of the conservation and
//! dissipation guarantees.

mod analytic;
mod learned;
mod verify;

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use analytic::{FnField, ShrinkPendulum};
pub use learned::LearnedField;
pub use verify::{
    fit_slope, projected_descent, sample_points, verify_theorem1, verify_theorem2, DescentReport, Theorem1Counts,
    Theorem1Report, Theorem1Tolerances, Theorem2Report, Theorem2Row, STRICT_GRAD_MIN, THEOREM1_H_TOL, THEOREM1_PHI_TOL,
    THEOREM2_SLOPE_MIN,
};

use crate::error::{Error, Result};
use crate::fields::FieldEval;
use crate::physics::PendulumEnergy;
use crate::registry::{Named, Registry};

/// `ẋ = v(x, t)` in physical time.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;

    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;

    /// The metriplectic decomposition, when the field has one.
    fn structure(&self) -> Option<&dyn Metriplectic> {
        None
    }
}

/// Access to the two channels of `J∇H − G̃∇Φ`.
pub trait Metriplectic: Send + Sync {
    fn hamiltonian(&self, x: &[f64], t: f64) -> Result<f64>;

    fn grad_h(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;

    /// Full evaluation; `phi`, `grad_phi`, `dissipative`, `metric` and `dissipation_rate` must be set.
    fn eval(&self, x: &[f64], t: f64) -> Result<FieldEval>;

    /// Set when `H` is a known separable energy, enabling velocity Verlet.
    fn separable(&self) -> Option<PendulumEnergy> {
        None
    }

    fn potential(&self, x: &[f64], t: f64) -> Result<f64> {
        self.eval(x, t)?
            .phi
            .ok_or_else(|| Error::NotMetriplectic("field has no dissipation potential".into()))
    }

    /// `γ` of a momentum-shrink metric `G = diag(0, γI)`, if that is the metric's form.
    fn shrink_rate(&self, x: &[f64], t: f64) -> Result<Option<f64>> {
        Ok(self.eval(x, t)?.gamma)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], a: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(xi, yi)| xi + a * yi).collect()
}

fn check_finite(x: &[f64], t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: format!("state at t = {t}"),
        })
    }
}

/// Removes the positive component of `v` along `grad_e`:
/// `v − max(0, ⟨g, v⟩)/(‖g‖² + ε) g`.
///
/// A short correction along `g` follows so that the computed `⟨g, v'⟩` is
/// non-positive in floating point as well.
pub fn project_velocity(v: &[f64], grad_e: &[f64], eps: f64) -> Vec<f64> {
    let rate = dot(grad_e, v);
    if !(rate > 0.0) {
        return v.to_vec();
    }
    let gg = dot(grad_e, grad_e);
    let mut out = axpy(v, -rate / (gg + eps), grad_e);
    let mut boost = 1.0;
    for _ in 0..64 {
        let r = dot(grad_e, &out);
        if !(r > 0.0) {
            break;
        }
        out = axpy(&out, -boost * r / gg, grad_e);
        boost *= 2.0;
    }
    out
}

/// Projection settings; `None` disables it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub eps: f64,
    pub energy: PendulumEnergy,
}

impl Projection {
    fn apply(&self, v: Vec<f64>, x: &[f64]) -> Vec<f64> {
        project_velocity(&v, &self.energy.gradient(x), self.eps)
    }
}

fn projected_velocity(field: &dyn VectorField, x: &[f64], t: f64, proj: Option<&Projection>) -> Result<Vec<f64>> {
    let v = field.velocity(x, t)?;
    Ok(match proj {
        Some(p) => p.apply(v, x),
        None => v,
    })
}

/// Classical four-stage Runge–Kutta step.
pub fn rk4_step(field: &dyn VectorField, x: &[f64], t: f64, h: f64, proj: Option<&Projection>) -> Result<Vec<f64>> {
    check_finite(x, t)?;
    let k1 = projected_velocity(field, x, t, proj)?;
    let x2 = axpy(x, 0.5 * h, &k1);
    let k2 = projected_velocity(field, &x2, t + 0.5 * h, proj)?;
    let x3 = axpy(x, 0.5 * h, &k2);
    let k3 = projected_velocity(field, &x3, t + 0.5 * h, proj)?;
    let x4 = axpy(x, h, &k3);
    let k4 = projected_velocity(field, &x4, t + h, proj)?;
    let out: Vec<f64> = (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    check_finite(&out, t + h)?;
    Ok(out)
}

/// One velocity-Verlet step of size `h` for `H = ½|p|²/M + V(q)`, given `∇V`.
pub fn verlet_step(grad_v: impl Fn(&[f64]) -> Vec<f64>, inv_mass: f64, x: &[f64], h: f64) -> Vec<f64> {
    let n = x.len() / 2;
    let mut q = x[..n].to_vec();
    let mut p = x[n..].to_vec();
    let f = grad_v(&q);
    for (pi, fi) in p.iter_mut().zip(&f) {
        *pi -= 0.5 * h * fi;
    }
    for (qi, pi) in q.iter_mut().zip(&p) {
        *qi += h * inv_mass * pi;
    }
    let f = grad_v(&q);
    for (pi, fi) in p.iter_mut().zip(&f) {
        *pi -= 0.5 * h * fi;
    }
    q.extend(p);
    q
}

pub const MIDPOINT_TOL: f64 = 1e-12;
pub const MIDPOINT_MAX_ITER: usize = 50;

/// Implicit midpoint step of size `h` for `ẋ = J∇H(x, t)` at frozen `t`.
pub fn implicit_midpoint_step(m: &dyn Metriplectic, x: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
    let n = x.len() / 2;
    let skew = |g: Vec<f64>| -> Vec<f64> { g[n..].iter().copied().chain(g[..n].iter().map(|v| -v)).collect() };
    let mut y = axpy(x, h, &skew(m.grad_h(x, t)?));
    let mut residual = f64::INFINITY;
    for _ in 0..MIDPOINT_MAX_ITER {
        let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 0.5 * (a + b)).collect();
        let next = axpy(x, h, &skew(m.grad_h(&mid, t)?));
        residual = next.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        y = next;
        let scale = y.iter().map(|v| v.abs()).fold(1.0, f64::max);
        if residual <= MIDPOINT_TOL * scale {
            return Ok(y);
        }
    }
    Err(Error::NoConvergence {
        iterations: MIDPOINT_MAX_ITER,
        residual,
    })
}

/// Symplectic step of `ẋ = J∇H` of size `h`: Verlet when `H` is separable, implicit midpoint otherwise.
pub fn hamiltonian_step(m: &dyn Metriplectic, x: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
    match m.separable() {
        Some(e) => Ok(verlet_step(|q| e.potential_gradient(q), 1.0 / e.mass, x, h)),
        None => implicit_midpoint_step(m, x, t, h),
    }
}

/// How the metric substep `x⁻ = x − h G(x⁻)∇Φ(x⁻)` is solved.
pub trait ProxMode: Named + Send + Sync {
    fn apply(&self, m: &dyn Metriplectic, x: &[f64], t: f64, h: f64) -> Result<Vec<f64>>;
}

/// `p ← p/(1 + γ h)` with `q` unchanged.
pub struct ClosedFormShrink;

impl Named for ClosedFormShrink {
    fn name(&self) -> &'static str {
        "closed-form-shrink"
    }
}

impl ProxMode for ClosedFormShrink {
    fn apply(&self, m: &dyn Metriplectic, x: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
        let gamma = m
            .shrink_rate(x, t)?
            .ok_or_else(|| Error::NotMetriplectic("closed-form shrink needs a momentum-shrink metric".into()))?;
        Ok(shrink(x, gamma, h))
    }
}

/// `p ← p/(1 + γh)`.
pub fn shrink(x: &[f64], gamma: f64, h: f64) -> Vec<f64> {
    let n = x.len() / 2;
    let c = 1.0 + gamma * h;
    x[..n].iter().copied().chain(x[n..].iter().map(|p| p / c)).collect()
}

/// Fixed-point iteration on the implicit Euler equation.
pub struct ImplicitFixedPoint {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ImplicitFixedPoint {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 200,
        }
    }
}

impl Named for ImplicitFixedPoint {
    fn name(&self) -> &'static str {
        "implicit"
    }
}

impl ProxMode for ImplicitFixedPoint {
    fn apply(&self, m: &dyn Metriplectic, x: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
        let diss = |y: &[f64]| -> Result<Vec<f64>> {
            m.eval(y, t)?
                .dissipative
                .ok_or_else(|| Error::NotMetriplectic("field has no metric channel".into()))
        };
        let mut y = axpy(x, -h, &diss(x)?);
        let mut residual = f64::INFINITY;
        for _ in 0..self.max_iter {
            let next = axpy(x, -h, &diss(&y)?);
            residual = next.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            y = next;
            if !residual.is_finite() {
                break;
            }
            let scale = y.iter().map(|v| v.abs()).fold(1.0, f64::max);
            if residual <= self.tol * scale {
                return Ok(y);
            }
        }
        Err(Error::NoConvergence {
            iterations: self.max_iter,
            residual,
        })
    }
}

/// `closed-form-shrink` and `implicit`.
pub fn prox_modes() -> Registry<dyn ProxMode> {
    let mut r: Registry<dyn ProxMode> = Registry::new("prox mode");
    r.register(Arc::new(ClosedFormShrink))
        .register(Arc::new(ImplicitFixedPoint::default()));
    r
}

/// Changes of `H` and `Φ` across the substeps of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub dh_ham: f64,
    pub dphi_ham: f64,
    pub dh_metric: f64,
    pub dphi_metric: f64,
}

impl StepDiagnostics {
    pub const NONE: Self = Self {
        dh_ham: f64::NAN,
        dphi_ham: f64::NAN,
        dh_metric: f64::NAN,
        dphi_metric: f64::NAN,
    };
}

/// Shared settings passed to every sampler step.
pub struct StepContext {
    pub projection: Option<Projection>,
    pub prox: Arc<dyn ProxMode>,
}

/// Strang step: `H` half-step, metric step, `H` half-step, all frozen at `t + h/2`.
pub fn strang_step(
    m: &dyn Metriplectic,
    x: &[f64],
    t: f64,
    h: f64,
    ctx: &StepContext,
) -> Result<(Vec<f64>, StepDiagnostics)> {
    check_finite(x, t)?;
    let tm = t + 0.5 * h;
    let h0 = m.hamiltonian(x, tm)?;
    let phi0 = m.potential(x, tm)?;
    let a = hamiltonian_step(m, x, tm, 0.5 * h)?;
    let ha = m.hamiltonian(&a, tm)?;
    let phia = m.potential(&a, tm)?;
    let mut b = ctx.prox.apply(m, &a, tm, h)?;
    if let Some(p) = &ctx.projection {
        let dir: Vec<f64> = b.iter().zip(&a).map(|(bi, ai)| (bi - ai) / h).collect();
        let dir = p.apply(dir, &a);
        b = axpy(&a, h, &dir);
    }
    let hb = m.hamiltonian(&b, tm)?;
    let phib = m.potential(&b, tm)?;
    let c = hamiltonian_step(m, &b, tm, 0.5 * h)?;
    let hc = m.hamiltonian(&c, tm)?;
    let phic = m.potential(&c, tm)?;
    check_finite(&c, t + h)?;
    Ok((
        c,
        StepDiagnostics {
            dh_ham: (ha - h0) + (hc - hb),
            dphi_ham: (phia - phi0) + (phic - phib),
            dh_metric: hb - ha,
            dphi_metric: phib - phia,
        },
    ))
}

/// A one-step integrator selectable by name.
pub trait Sampler: Named + Send + Sync {
    fn requires_structure(&self) -> bool;

    fn step(
        &self,
        field: &dyn VectorField,
        x: &[f64],
        t: f64,
        h: f64,
        ctx: &StepContext,
    ) -> Result<(Vec<f64>, StepDiagnostics)>;
}

pub struct Rk4;

impl Named for Rk4 {
    fn name(&self) -> &'static str {
        "rk4"
    }
}

impl Sampler for Rk4 {
    fn requires_structure(&self) -> bool {
        false
    }

    fn step(
        &self,
        field: &dyn VectorField,
        x: &[f64],
        t: f64,
        h: f64,
        ctx: &StepContext,
    ) -> Result<(Vec<f64>, StepDiagnostics)> {
        Ok((
            rk4_step(field, x, t, h, ctx.projection.as_ref())?,
            StepDiagnostics::NONE,
        ))
    }
}

pub struct StrangProx;

impl Named for StrangProx {
    fn name(&self) -> &'static str {
        "strang-prox"
    }
}

impl Sampler for StrangProx {
    fn requires_structure(&self) -> bool {
        true
    }

    fn step(
        &self,
        field: &dyn VectorField,
        x: &[f64],
        t: f64,
        h: f64,
        ctx: &StepContext,
    ) -> Result<(Vec<f64>, StepDiagnostics)> {
        let m = field
            .structure()
            .ok_or_else(|| Error::NotMetriplectic("strang-prox needs a metriplectic field".into()))?;
        strang_step(m, x, t, h, ctx)
    }
}

/// `rk4` and `strang-prox`.
pub fn samplers() -> Registry<dyn Sampler> {
    let mut r: Registry<dyn Sampler> = Registry::new("sampler");
    r.register(Arc::new(Rk4)).register(Arc::new(StrangProx));
    r
}

/// Rollout settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub h: f64,
    pub horizon: f64,
    pub scheme: String,
    /// Projection epsilon; `None` leaves velocities untouched.
    pub projection: Option<f64>,
    /// Prox mode name; `None` picks the closed form when the metric is a shrink.
    pub prox: Option<String>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            h: 0.1,
            horizon: 5.0,
            scheme: "strang-prox".into(),
            projection: None,
            prox: None,
        }
    }
}

impl SamplerConfig {
    /// Number of steps; `horizon/h` is rounded to the nearest integer.
    pub fn steps(&self) -> Result<usize> {
        if !(self.h > 0.0) || !(self.horizon >= self.h) {
            return Err(Error::invalid(format!(
                "need h > 0 and horizon ≥ h, got h = {} and horizon = {}",
                self.h, self.horizon
            )));
        }
        let ratio = self.horizon / self.h;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 * ratio {
            log::warn!(
                "horizon {} is not a multiple of h {}; using {} steps",
                self.horizon,
                self.h,
                n
            );
        }
        Ok(n as usize)
    }
}

/// Time series produced by [`rollout`]. Row `k` holds the step diagnostics for
/// the transition into row `k`, so row 0 carries NaN there.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub energy: Vec<f64>,
    pub energy_rate: Vec<f64>,
    pub phi: Vec<f64>,
    pub dh_ham: Vec<f64>,
    pub dphi_ham: Vec<f64>,
    pub dphi_metric: Vec<f64>,
    /// Set when a step failed; the series stop at the last good state.
    pub failure: Option<String>,
}

impl RolloutRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }

    fn header(d: usize) -> Vec<String> {
        let n = d / 2;
        let mut h = vec!["t".to_string()];
        if n == 1 {
            h.push("q".into());
            h.push("p".into());
        } else {
            h.extend((0..n).map(|i| format!("q{i}")));
            h.extend((0..n).map(|i| format!("p{i}")));
        }
        for c in ["E", "dEdt", "Phi", "dH_ham", "dPhi_ham", "dPhi_metric"] {
            h.push(c.into());
        }
        h
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let d = self.states.first().map_or(2, Vec::len);
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::header(d))?;
        for k in 0..self.len() {
            let mut row = vec![self.times[k]];
            row.extend(&self.states[k]);
            row.extend([
                self.energy[k],
                self.energy_rate[k],
                self.phi[k],
                self.dh_ham[k],
                self.dphi_ham[k],
                self.dphi_metric[k],
            ]);
            w.write_record(row.iter().map(|v| fmt_float(*v)))?;
        }
        w.flush().map_err(|e| Error::io("<rollout csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let fmt = |detail: String| Error::Format {
            path: path.display().to_string(),
            detail,
        };
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let cols = header.len();
        if cols < 9 || header.get(0) != Some("t") {
            return Err(fmt(format!("unexpected header {header:?}")));
        }
        let d = cols - 7;
        let mut rec = RolloutRecord {
            times: vec![],
            states: vec![],
            energy: vec![],
            energy_rate: vec![],
            phi: vec![],
            dh_ham: vec![],
            dphi_ham: vec![],
            dphi_metric: vec![],
            failure: None,
        };
        for row in r.records() {
            let row = row?;
            let v: Vec<f64> = row
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| fmt(e.to_string()))?;
            if v.len() != cols {
                return Err(fmt("ragged row".into()));
            }
            rec.times.push(v[0]);
            rec.states.push(v[1..1 + d].to_vec());
            rec.energy.push(v[1 + d]);
            rec.energy_rate.push(v[2 + d]);
            rec.phi.push(v[3 + d]);
            rec.dh_ham.push(v[4 + d]);
            rec.dphi_ham.push(v[5 + d]);
            rec.dphi_metric.push(v[6 + d]);
        }
        Ok(rec)
    }
}

/// Shortest representation that parses back to the same bits.
pub(crate) fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:?}")
    }
}

/// Resolves the prox mode for a field: explicit name, else closed form for shrink metrics.
pub fn resolve_prox(field: &dyn VectorField, x0: &[f64], name: Option<&str>) -> Result<Arc<dyn ProxMode>> {
    let reg = prox_modes();
    match name {
        Some(n) => reg.get(n),
        None => {
            let shrink = match field.structure() {
                Some(m) => m.shrink_rate(x0, 0.0)?.is_some(),
                None => false,
            };
            reg.get(if shrink { "closed-form-shrink" } else { "implicit" })
        }
    }
}

/// Integrates from `x0` at `t = 0` and records energy, energy rate, `Φ` and step diagnostics.
pub fn rollout(
    field: &dyn VectorField,
    x0: &[f64],
    cfg: &SamplerConfig,
    energy: &PendulumEnergy,
) -> Result<RolloutRecord> {
    if x0.len() != field.dim() {
        return Err(Error::invalid(format!(
            "initial state has dimension {}, field expects {}",
            x0.len(),
            field.dim()
        )));
    }
    let n = cfg.steps()?;
    let sampler = samplers().get(&cfg.scheme)?;
    if sampler.requires_structure() && field.structure().is_none() {
        return Err(Error::NotMetriplectic(format!(
            "sampler `{}` requires a metriplectic field",
            sampler.name()
        )));
    }
    let projection = match cfg.projection {
        Some(eps) if !(eps >= 0.0) => return Err(Error::invalid("projection epsilon must be non-negative")),
        Some(eps) => Some(Projection { eps, energy: *energy }),
        None => None,
    };
    let ctx = StepContext {
        projection,
        prox: resolve_prox(field, x0, cfg.prox.as_deref())?,
    };
    let mut rec = RolloutRecord {
        times: Vec::with_capacity(n + 1),
        states: Vec::with_capacity(n + 1),
        energy: Vec::with_capacity(n + 1),
        energy_rate: Vec::with_capacity(n + 1),
        phi: Vec::with_capacity(n + 1),
        dh_ham: Vec::with_capacity(n + 1),
        dphi_ham: Vec::with_capacity(n + 1),
        dphi_metric: Vec::with_capacity(n + 1),
        failure: None,
    };
    let mut x = x0.to_vec();
    let mut diag = StepDiagnostics::NONE;
    for k in 0..=n {
        let t = k as f64 * cfg.h;
        let row = (|| -> Result<(f64, f64)> {
            let v = projected_velocity(field, &x, t, ctx.projection.as_ref())?;
            let rate = dot(&energy.gradient(&x), &v);
            let phi = match field.structure() {
                Some(m) => m.potential(&x, t)?,
                None => f64::NAN,
            };
            Ok((rate, phi))
        })();
        let (rate, phi) = match row {
            Ok(r) => r,
            Err(e) => {
                rec.failure = Some(format!("t = {t}: {e}"));
                break;
            }
        };
        rec.times.push(t);
        rec.energy.push(energy.value(&x));
        rec.energy_rate.push(rate);
        rec.phi.push(phi);
        rec.dh_ham.push(diag.dh_ham);
        rec.dphi_ham.push(diag.dphi_ham);
        rec.dphi_metric.push(diag.dphi_metric);
        rec.states.push(x.clone());
        if k == n {
            break;
        }
        match sampler.step(field, &x, t, cfg.h, &ctx) {
            Ok((next, d)) => {
                x = next;
                diag = d;
            }
            Err(e) => {
                rec.failure = Some(format!("step from t = {t}: {e}"));
                break;
            }
        }
    }
    Ok(rec)
}
