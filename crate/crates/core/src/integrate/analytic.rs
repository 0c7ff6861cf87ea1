use super::{dot, Metriplectic, VectorField};
use crate::error::Result;
use crate::fields::FieldEval;
use crate::physics::PendulumEnergy;

/// Damped pendulum written as `J∇E − G∇E` with `G = diag(0, γI)`.
///
/// `H = Φ = E`, so the flow is exactly `q̇ = p/M`, `ṗ = −∇V − γp/M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkPendulum {
    pub energy: PendulumEnergy,
    pub gamma: f64,
    pub dim: usize,
}

impl ShrinkPendulum {
    pub fn new(gamma: f64) -> Self {
        Self {
            energy: PendulumEnergy::default(),
            gamma,
            dim: 2,
        }
    }
}

impl VectorField for ShrinkPendulum {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.eval(x, t)?.v)
    }

    fn structure(&self) -> Option<&dyn Metriplectic> {
        Some(self)
    }
}

impl Metriplectic for ShrinkPendulum {
    fn hamiltonian(&self, x: &[f64], _t: f64) -> Result<f64> {
        Ok(self.energy.value(x))
    }

    fn grad_h(&self, x: &[f64], _t: f64) -> Result<Vec<f64>> {
        Ok(self.energy.gradient(x))
    }

    fn separable(&self) -> Option<PendulumEnergy> {
        Some(self.energy)
    }

    fn potential(&self, x: &[f64], _t: f64) -> Result<f64> {
        Ok(self.energy.value(x))
    }

    fn shrink_rate(&self, _x: &[f64], _t: f64) -> Result<Option<f64>> {
        Ok(Some(self.gamma))
    }

    fn eval(&self, x: &[f64], _t: f64) -> Result<FieldEval> {
        let d = x.len();
        let n = d / 2;
        let g = self.energy.gradient(x);
        let cons: Vec<f64> = g[n..].iter().copied().chain(g[..n].iter().map(|v| -v)).collect();
        let diss: Vec<f64> = (0..d).map(|i| if i < n { 0.0 } else { self.gamma * g[i] }).collect();
        let mut metric = vec![0.0; d * d];
        for i in n..d {
            metric[i * d + i] = self.gamma;
        }
        let v = cons.iter().zip(&diss).map(|(a, b)| a - b).collect();
        Ok(FieldEval {
            v,
            h: Some(self.energy.value(x)),
            grad_h: Some(g.clone()),
            phi: Some(self.energy.value(x)),
            grad_phi: Some(g.clone()),
            conservative: Some(cons),
            dissipation_rate: Some(-self.gamma * dot(&g[n..], &g[n..])),
            dissipative: Some(diss),
            metric: Some(metric),
            gamma: Some(self.gamma),
        })
    }
}

/// A field given by a closure, without structure.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], f64) -> Vec<f64> + Send + Sync> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64], f64) -> Vec<f64> + Send + Sync> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok((self.f)(x, t))
    }
}
