use super::{Metriplectic, VectorField};
use crate::cfm::Checkpoint;
use crate::error::{Error, Result};
use crate::fields::{CompiledField, FieldEval, FieldKind, HMode};
use crate::physics::PendulumEnergy;

/// A trained model evaluated in physical time `t`, mapped to field time `t / time_scale`.
#[derive(Debug, Clone)]
pub struct LearnedField {
    field: CompiledField,
    time_scale: f64,
}

impl LearnedField {
    pub fn new(checkpoint: &Checkpoint) -> Result<Self> {
        Ok(Self {
            field: checkpoint.model.compile(1)?,
            time_scale: checkpoint.time_scale,
        })
    }

    pub fn is_metriplectic(&self) -> bool {
        self.field.model().descriptor.kind == FieldKind::Metriplectic
    }

    fn tau(&self, t: f64) -> [f64; 1] {
        [t / self.time_scale]
    }

    fn single(&self, x: &[f64], t: f64) -> Result<FieldEval> {
        self.field
            .evaluate(x, &self.tau(t))?
            .pop()
            .ok_or_else(|| Error::invalid("empty evaluation"))
    }
}

impl VectorField for LearnedField {
    fn dim(&self) -> usize {
        self.field.model().dim()
    }

    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.field.velocities(x, &self.tau(t))?.remove(0))
    }

    fn structure(&self) -> Option<&dyn Metriplectic> {
        self.is_metriplectic().then_some(self as &dyn Metriplectic)
    }
}

impl Metriplectic for LearnedField {
    fn hamiltonian(&self, x: &[f64], t: f64) -> Result<f64> {
        Ok(self.field.hamiltonian(x, &self.tau(t))?[0])
    }

    fn grad_h(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.field.grad_h(x, &self.tau(t))?.remove(0))
    }

    fn eval(&self, x: &[f64], t: f64) -> Result<FieldEval> {
        self.single(x, t)
    }

    fn separable(&self) -> Option<PendulumEnergy> {
        let d = &self.field.model().descriptor;
        (d.h_mode == HMode::EPhys).then_some(d.energy)
    }
}
