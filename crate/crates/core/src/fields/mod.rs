//! Neural vector fields: the metriplectic field `J∇H − G̃∇Φ` and an
//! unconstrained baseline, plus the structure operators they are built from.

mod embed;
mod model;
mod structure;

use std::sync::Arc;

pub use embed::TimeEmbedding;
pub use model::{
    inverse_softplus, CompiledField, Degeneracy, DissipativeCoords, FieldDescriptor, FieldEval, FieldKind, FieldNodes,
    HMode, MetricMode, Model,
};
pub use structure::{build_projector_apply, deg_project, SkewOperator, EPS_PROJ};

use crate::registry::{Named, Registry};

/// Network sizes shared by every model kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub d: usize,
    pub hidden: usize,
    pub width: usize,
    pub k: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            d: 2,
            hidden: 2,
            width: 64,
            k: 8,
        }
    }
}

/// A named model configuration.
pub trait ModelKind: Named + Send + Sync {
    fn descriptor(&self, arch: Architecture) -> FieldDescriptor;

    /// Sampler used for rollouts unless overridden.
    fn default_sampler(&self) -> &'static str {
        "strang-prox"
    }
}

struct MetriplecticKind {
    name: &'static str,
    degeneracy: Degeneracy,
}

impl Named for MetriplecticKind {
    fn name(&self) -> &'static str {
        self.name
    }
}

impl ModelKind for MetriplecticKind {
    fn descriptor(&self, a: Architecture) -> FieldDescriptor {
        FieldDescriptor::metriplectic(a.d, a.hidden, a.width, a.k, self.degeneracy)
    }
}

/// Known energy as `H`, momentum shrink `ṗ = −γ_θ p` as the metric channel.
struct HardMcfmKind;

impl Named for HardMcfmKind {
    fn name(&self) -> &'static str {
        "hard-mcfm"
    }
}

impl ModelKind for HardMcfmKind {
    fn descriptor(&self, a: Architecture) -> FieldDescriptor {
        FieldDescriptor {
            h_mode: HMode::EPhys,
            shrink: true,
            dissipative: DissipativeCoords::Momentum,
            ..FieldDescriptor::metriplectic(a.d, a.hidden, a.width, a.k, Degeneracy::Hard)
        }
    }
}

struct BaselineKind;

impl Named for BaselineKind {
    fn name(&self) -> &'static str {
        "baseline"
    }
}

impl ModelKind for BaselineKind {
    fn descriptor(&self, a: Architecture) -> FieldDescriptor {
        FieldDescriptor::baseline(a.d, a.hidden, a.width, a.k)
    }

    fn default_sampler(&self) -> &'static str {
        "rk4"
    }
}

/// `metriplectic-hard`, `metriplectic-soft`, `hard-mcfm`, `baseline`.
pub fn model_kinds() -> Registry<dyn ModelKind> {
    let mut r: Registry<dyn ModelKind> = Registry::new("model kind");
    r.register(Arc::new(MetriplecticKind {
        name: "metriplectic-hard",
        degeneracy: Degeneracy::Hard,
    }))
    .register(Arc::new(MetriplecticKind {
        name: "metriplectic-soft",
        degeneracy: Degeneracy::Soft,
    }))
    .register(Arc::new(HardMcfmKind))
    .register(Arc::new(BaselineKind));
    r
}

/// Default sampler for a stored descriptor.
pub fn default_sampler(desc: &FieldDescriptor) -> &'static str {
    match desc.kind {
        FieldKind::Baseline => "rk4",
        FieldKind::Metriplectic => "strang-prox",
    }
}
