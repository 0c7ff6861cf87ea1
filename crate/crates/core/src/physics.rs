//! Known mechanical energy `E(q, p) = ½ pᵀM⁻¹p + V(q)` for pendulum-type states.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};

/// Energy of independent pendula `V(q) = M g L (1 − cos q)` with scalar mass.
///
/// States are laid out as `[q_1..q_n, p_1..p_n]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumEnergy {
    pub mass: f64,
    pub gravity: f64,
    pub length: f64,
}

impl Default for PendulumEnergy {
    fn default() -> Self {
        Self {
            mass: 1.0,
            gravity: 1.0,
            length: 1.0,
        }
    }
}

impl PendulumEnergy {
    fn mgl(&self) -> f64 {
        self.mass * self.gravity * self.length
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let n = x.len() / 2;
        let (q, p) = x.split_at(n);
        let kinetic: f64 = p.iter().map(|v| v * v).sum::<f64>() * 0.5 / self.mass;
        let potential: f64 = q.iter().map(|v| self.mgl() * (1.0 - v.cos())).sum();
        kinetic + potential
    }

    pub fn potential(&self, q: &[f64]) -> f64 {
        q.iter().map(|v| self.mgl() * (1.0 - v.cos())).sum()
    }

    /// `∇V(q)`
    pub fn potential_gradient(&self, q: &[f64]) -> Vec<f64> {
        q.iter().map(|v| self.mgl() * v.sin()).collect()
    }

    /// `[∇V(q); M⁻¹p]`
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() / 2;
        let (q, p) = x.split_at(n);
        let mut g = self.potential_gradient(q);
        g.extend(p.iter().map(|v| v / self.mass));
        g
    }

    /// Upper bound on the Hessian spectral norm, `max(MgL, 1/M)`.
    pub fn hessian_bound(&self) -> f64 {
        self.mgl().max(1.0 / self.mass)
    }

    /// Per-column energy of a `[2n, batch]` state node, as `[1, batch]`.
    pub fn build(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let d = g.shape(x)[0];
        let n = d / 2;
        let q = g.slice_rows(x, 0, n);
        let p = g.slice_rows(x, n, n);
        let p2 = g.square(p);
        let kin = g.sum_rows(p2);
        let kin = g.scale(kin, 0.5 / self.mass);
        let c = g.cos(q);
        let one_minus = g.scale(c, -1.0);
        let one_minus = g.offset(one_minus, 1.0);
        let pot = g.sum_rows(one_minus);
        let pot = g.scale(pot, self.mgl());
        g.add(kin, pot)
    }

    /// Per-column potential part only, as `[1, batch]`.
    pub fn build_potential(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let n = g.shape(x)[0] / 2;
        let q = g.slice_rows(x, 0, n);
        let c = g.cos(q);
        let one_minus = g.scale(c, -1.0);
        let one_minus = g.offset(one_minus, 1.0);
        let pot = g.sum_rows(one_minus);
        g.scale(pot, self.mgl())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn energy_examples() {
        let e = PendulumEnergy::default();
        assert_eq!(e.value(&[0.0, 0.0]), 0.0);
        assert!((e.value(&[FRAC_PI_2, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(e.gradient(&[0.0, 2.0]), vec![0.0, 2.0]);
    }
}
