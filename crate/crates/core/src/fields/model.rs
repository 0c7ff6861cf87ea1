use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embed::TimeEmbedding;
use super::structure::{build_projector_apply, deg_project, SkewOperator};
use crate::autodiff::{Bindings, Evaluation, Graph, Mlp, NodeId, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::physics::PendulumEnergy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Metriplectic,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Degeneracy {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HMode {
    #[serde(rename = "learned")]
    Learned,
    #[serde(rename = "e_phys")]
    EPhys,
}

/// Whether the low-rank metric factor depends on `(x, t)` or is a free constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricMode {
    State,
    Constant,
}

/// Range restriction of the metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DissipativeCoords {
    All,
    Momentum,
}

fn default_rank() -> usize {
    2
}

fn default_metric() -> MetricMode {
    MetricMode::State
}

fn default_coords() -> DissipativeCoords {
    DissipativeCoords::All
}

/// Architecture descriptor stored next to the parameters in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDescriptor {
    pub kind: FieldKind,
    pub d: usize,
    pub hidden: usize,
    pub width: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub degeneracy: Degeneracy,
    pub h_mode: HMode,
    pub shrink: bool,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_metric")]
    pub metric: MetricMode,
    #[serde(default = "default_coords")]
    pub dissipative: DissipativeCoords,
    #[serde(default)]
    pub energy: PendulumEnergy,
}

impl FieldDescriptor {
    pub fn baseline(d: usize, hidden: usize, width: usize, k: usize) -> Self {
        Self {
            kind: FieldKind::Baseline,
            d,
            hidden,
            width,
            k,
            degeneracy: Degeneracy::Soft,
            h_mode: HMode::Learned,
            shrink: false,
            rank: default_rank(),
            metric: MetricMode::State,
            dissipative: DissipativeCoords::All,
            energy: PendulumEnergy::default(),
        }
    }

    pub fn metriplectic(d: usize, hidden: usize, width: usize, k: usize, degeneracy: Degeneracy) -> Self {
        Self {
            kind: FieldKind::Metriplectic,
            degeneracy,
            ..Self::baseline(d, hidden, width, k)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::invalid("state dimension must be positive"));
        }
        if self.kind == FieldKind::Metriplectic {
            if !self.d.is_multiple_of(2) {
                return Err(Error::invalid(
                    "metriplectic fields need an even state dimension (q, p)",
                ));
            }
            if self.rank == 0 && !self.shrink {
                return Err(Error::invalid("metric rank must be positive"));
            }
        }
        Ok(())
    }

    pub fn embedding(&self) -> TimeEmbedding {
        TimeEmbedding::dyadic(self.k, 1.0)
    }

    fn net_input(&self) -> usize {
        self.d + 2 * self.k
    }

    fn mlp(&self, name: &str, out: usize) -> Mlp {
        Mlp::with_hidden(name, self.net_input(), self.hidden, self.width, out)
    }

    fn diss_indices(&self) -> Vec<usize> {
        match self.dissipative {
            DissipativeCoords::All => (0..self.d).collect(),
            DissipativeCoords::Momentum => (self.d / 2..self.d).collect(),
        }
    }
}

/// Node handles produced by [`Model::build`] for a `[d, batch]` state input.
#[derive(Debug, Clone, Default)]
pub struct FieldNodes {
    pub v: Option<NodeId>,
    pub h: Option<NodeId>,
    pub grad_h: Option<NodeId>,
    pub phi: Option<NodeId>,
    pub grad_phi: Option<NodeId>,
    /// `J∇H`
    pub conservative: Option<NodeId>,
    /// `G̃∇Φ` (enters the velocity with a minus sign)
    pub dissipative: Option<NodeId>,
    /// `G̃∇H`, penalised in soft mode
    pub metric_grad_h: Option<NodeId>,
    /// `J∇Φ`
    pub skew_grad_phi: Option<NodeId>,
    /// Per-column `‖G‖_F²`, `[1, batch]`
    pub metric_frobenius2: Option<NodeId>,
    /// Low-rank factor rows for the dissipative coordinates, `[m·r, batch]`
    pub factor: Option<NodeId>,
    /// Shrink coefficient `γ ≥ 0`, `[1, batch]`
    pub gamma: Option<NodeId>,
    /// Number of leading nodes needed to evaluate `grad_h`.
    pub grad_h_prefix: usize,
}

/// A parameterised vector field: descriptor plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub descriptor: FieldDescriptor,
    pub params: ParameterStore,
}

const INV_SOFTPLUS_ONE: f64 = 0.541_324_854_612_918_1; // ln(e − 1)

impl Model {
    /// Fresh weights, uniform `±1/√fan_in`, deterministic in `seed`.
    pub fn init(descriptor: FieldDescriptor, seed: u64) -> Result<Self> {
        descriptor.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        let d = &descriptor;
        match d.kind {
            FieldKind::Baseline => d.mlp("f", d.d).init(&mut params, &mut rng)?,
            FieldKind::Metriplectic => {
                if d.h_mode == HMode::Learned {
                    d.mlp("H", 1).init(&mut params, &mut rng)?;
                }
                if d.shrink {
                    match d.metric {
                        MetricMode::State => d.mlp("gamma", 1).init(&mut params, &mut rng)?,
                        MetricMode::Constant => params.insert("gamma.raw", Tensor::vector(vec![INV_SOFTPLUS_ONE]))?,
                    }
                } else {
                    d.mlp("Phi", 1).init(&mut params, &mut rng)?;
                    let rows = d.diss_indices().len() * d.rank;
                    match d.metric {
                        MetricMode::State => d.mlp("L", rows).init(&mut params, &mut rng)?,
                        MetricMode::Constant => {
                            use rand::Rng;
                            let v = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
                            params.insert("L.const", Tensor::vector(v))?;
                        }
                    }
                }
            }
        }
        Ok(Self { descriptor, params })
    }

    pub fn dim(&self) -> usize {
        self.descriptor.d
    }

    pub fn is_metriplectic(&self) -> bool {
        self.descriptor.kind == FieldKind::Metriplectic
    }

    pub fn embedding(&self) -> TimeEmbedding {
        self.descriptor.embedding()
    }

    /// Zeroes the output layer of the named sub-network (`H`, `Phi`, `L`, `gamma`, `f`).
    pub fn zero_output_layer(&mut self, net: &str) {
        let d = &self.descriptor;
        let out = match net {
            "f" => d.d,
            "L" => d.diss_indices().len() * d.rank,
            _ => 1,
        };
        d.mlp(net, out).zero_output_layer(&mut self.params);
    }

    /// Appends the field to `g`. `x` is `[d, batch]`, `emb` is `[2K, batch]`.
    pub fn build(&self, g: &mut Graph, x: NodeId, emb: NodeId) -> Result<FieldNodes> {
        let d = &self.descriptor;
        let batch = g.shape(x).get(1).copied().unwrap_or(1);
        let z = g.concat(&[x, emb]);
        let mut nodes = FieldNodes::default();

        if d.kind == FieldKind::Baseline {
            nodes.v = Some(d.mlp("f", d.d).build(g, z));
            nodes.grad_h_prefix = 0;
            return Ok(nodes);
        }

        let half = d.d / 2;
        let skew = SkewOperator::canonical(d.d).expect("validated even dimension");

        let h = match d.h_mode {
            HMode::Learned => d.mlp("H", 1).build(g, z),
            HMode::EPhys => d.energy.build(g, x),
        };
        let hs = g.sum(h);
        let grad_h = g.input_gradient(hs, x)?;
        nodes.grad_h_prefix = g.len();
        nodes.h = Some(h);
        nodes.grad_h = Some(grad_h);
        let cons = skew.build(g, grad_h);
        nodes.conservative = Some(cons);

        if d.shrink {
            let raw = match d.metric {
                MetricMode::State => d.mlp("gamma", 1).build(g, z),
                MetricMode::Constant => {
                    let p = g.parameter("gamma.raw", &[1]);
                    g.broadcast_cols(p, batch)
                }
            };
            let gamma = g.softplus(raw);
            let p = g.slice_rows(x, half, half);
            let p2 = g.square(p);
            let kin = g.sum_rows(p2);
            let kin = g.scale(kin, 0.5);
            let phi = match d.h_mode {
                HMode::EPhys => {
                    let pot = d.energy.build_potential(g, x);
                    g.add(kin, pot)
                }
                HMode::Learned => kin,
            };
            let phis = g.sum(phi);
            let grad_phi = g.input_gradient(phis, x)?;
            let gp = g.slice_rows(grad_phi, half, half);
            let shrink = g.col_scale(gp, gamma);
            let diss = g.pad_rows(shrink, half, d.d);
            let gh = g.slice_rows(grad_h, half, half);
            let ggh = g.col_scale(gh, gamma);
            let ggh = g.pad_rows(ggh, half, d.d);
            let g2 = g.square(gamma);
            let fro = g.scale(g2, half as f64);
            let v = g.sub(cons, diss);
            let jgp = skew.build(g, grad_phi);
            nodes.phi = Some(phi);
            nodes.grad_phi = Some(grad_phi);
            nodes.dissipative = Some(diss);
            nodes.metric_grad_h = Some(ggh);
            nodes.skew_grad_phi = Some(jgp);
            nodes.metric_frobenius2 = Some(fro);
            nodes.gamma = Some(gamma);
            nodes.v = Some(v);
            return Ok(nodes);
        }

        let phi = d.mlp("Phi", 1).build(g, z);
        let phis = g.sum(phi);
        let grad_phi = g.input_gradient(phis, x)?;

        let idx = d.diss_indices();
        let r = d.rank;
        let rows = idx.len() * r;
        let factor = match d.metric {
            MetricMode::State => d.mlp("L", rows).build(g, z),
            MetricMode::Constant => {
                let p = g.parameter("L.const", &[rows]);
                g.broadcast_cols(p, batch)
            }
        };
        let entry: Vec<Vec<NodeId>> = (0..idx.len())
            .map(|a| (0..r).map(|j| g.slice_rows(factor, a * r + j, 1)).collect())
            .collect();

        // G a = L (Lᵀ a), restricted to the dissipative coordinates
        let apply_metric = |g: &mut Graph, a: NodeId| -> NodeId {
            let comps: Vec<NodeId> = idx.iter().map(|&i| g.slice_rows(a, i, 1)).collect();
            let s: Vec<NodeId> = (0..r)
                .map(|j| {
                    let mut acc = g.mul(entry[0][j], comps[0]);
                    for aa in 1..idx.len() {
                        let t = g.mul(entry[aa][j], comps[aa]);
                        acc = g.add(acc, t);
                    }
                    acc
                })
                .collect();
            let zero = g.constant(Tensor::zeros(&[1, batch]));
            let mut out_rows = vec![zero; d.d];
            for (aa, &i) in idx.iter().enumerate() {
                let mut acc = g.mul(entry[aa][0], s[0]);
                for (j, sj) in s.iter().enumerate().skip(1) {
                    let t = g.mul(entry[aa][j], *sj);
                    acc = g.add(acc, t);
                }
                out_rows[i] = acc;
            }
            g.concat(&out_rows)
        };

        let (diss, ggh) = match d.degeneracy {
            Degeneracy::Hard => {
                let pphi = build_projector_apply(g, grad_h, grad_phi);
                let gp = apply_metric(g, pphi);
                let diss = build_projector_apply(g, grad_h, gp);
                let ph = build_projector_apply(g, grad_h, grad_h);
                let gh = apply_metric(g, ph);
                let ggh = build_projector_apply(g, grad_h, gh);
                (diss, ggh)
            }
            Degeneracy::Soft => (apply_metric(g, grad_phi), apply_metric(g, grad_h)),
        };

        // ‖L Lᵀ‖_F² = Σ_{j,k} (Σ_a L_aj L_ak)²
        let mut fro: Option<NodeId> = None;
        for j in 0..r {
            for k in 0..r {
                let mut gram = g.mul(entry[0][j], entry[0][k]);
                for row in entry.iter().skip(1) {
                    let t = g.mul(row[j], row[k]);
                    gram = g.add(gram, t);
                }
                let sq = g.square(gram);
                fro = Some(match fro {
                    Some(f) => g.add(f, sq),
                    None => sq,
                });
            }
        }

        let v = g.sub(cons, diss);
        let jgp = skew.build(g, grad_phi);
        nodes.phi = Some(phi);
        nodes.grad_phi = Some(grad_phi);
        nodes.dissipative = Some(diss);
        nodes.metric_grad_h = Some(ggh);
        nodes.skew_grad_phi = Some(jgp);
        nodes.metric_frobenius2 = fro;
        nodes.factor = Some(factor);
        nodes.v = Some(v);
        Ok(nodes)
    }

    /// Builds a reusable evaluator for batches of `batch` points.
    pub fn compile(&self, batch: usize) -> Result<CompiledField> {
        let mut graph = Graph::new();
        let x = graph.input("x", &[self.dim(), batch]);
        let emb_dim = 2 * self.descriptor.k;
        let emb = graph.input("emb", &[emb_dim, batch]);
        let nodes = self.build(&mut graph, x, emb)?;
        Ok(CompiledField {
            model: self.clone(),
            embedding: self.embedding(),
            graph,
            nodes,
            batch,
        })
    }
}

/// Per-point field evaluation with both channels exposed.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEval {
    pub v: Vec<f64>,
    pub h: Option<f64>,
    pub grad_h: Option<Vec<f64>>,
    pub phi: Option<f64>,
    pub grad_phi: Option<Vec<f64>>,
    pub conservative: Option<Vec<f64>>,
    pub dissipative: Option<Vec<f64>>,
    /// Effective metric `G̃` (row-major `d x d`) that multiplies `∇Φ`.
    pub metric: Option<Vec<f64>>,
    pub gamma: Option<f64>,
    /// `−∇Φᵀ G̃ ∇Φ`, evaluated as a negated sum of squares.
    pub dissipation_rate: Option<f64>,
}

/// A model with its graph prebuilt for a fixed batch size.
#[derive(Debug, Clone)]
pub struct CompiledField {
    model: Model,
    embedding: TimeEmbedding,
    graph: Graph,
    nodes: FieldNodes,
    batch: usize,
}

impl CompiledField {
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    fn bind(&self, xs: &[f64], ts: &[f64]) -> Result<Bindings> {
        let d = self.model.dim();
        if ts.len() != self.batch || xs.len() != d * self.batch {
            return Err(Error::invalid(format!(
                "compiled for batch {}, got {} states and {} times",
                self.batch,
                xs.len() / d.max(1),
                ts.len()
            )));
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "field input state".into(),
            });
        }
        // columns are points; incoming states are point-major
        let mut cols = vec![0.0; d * self.batch];
        for j in 0..self.batch {
            for i in 0..d {
                cols[i * self.batch + j] = xs[j * d + i];
            }
        }
        let mut b = Bindings::new();
        b.insert("x".into(), Tensor::matrix(d, self.batch, cols));
        b.insert("emb".into(), self.embedding.embed_batch(ts));
        Ok(b)
    }

    fn run(&self, xs: &[f64], ts: &[f64], prefix: Option<usize>) -> Result<Evaluation> {
        let b = self.bind(xs, ts)?;
        match prefix {
            Some(n) => self.graph.forward_prefix(&b, &self.model.params, n),
            None => self.graph.forward(&b, &self.model.params),
        }
    }

    /// Velocities for `batch` points given point-major states `xs` and times `ts`.
    pub fn velocities(&self, xs: &[f64], ts: &[f64]) -> Result<Vec<Vec<f64>>> {
        let e = self.run(xs, ts, None)?;
        Ok(columns(e.value(self.nodes.v.expect("velocity node"))))
    }

    /// `∇H` only; evaluates the minimal graph prefix.
    pub fn grad_h(&self, xs: &[f64], ts: &[f64]) -> Result<Vec<Vec<f64>>> {
        let node = self
            .nodes
            .grad_h
            .ok_or_else(|| Error::NotMetriplectic("baseline field has no Hamiltonian".into()))?;
        let e = self.run(xs, ts, Some(self.nodes.grad_h_prefix))?;
        Ok(columns(e.value(node)))
    }

    /// `H` only.
    pub fn hamiltonian(&self, xs: &[f64], ts: &[f64]) -> Result<Vec<f64>> {
        let node = self
            .nodes
            .h
            .ok_or_else(|| Error::NotMetriplectic("baseline field has no Hamiltonian".into()))?;
        let e = self.run(xs, ts, Some(self.nodes.grad_h_prefix))?;
        Ok(e.value(node).data().to_vec())
    }

    /// Full evaluation with diagnostics.
    pub fn evaluate(&self, xs: &[f64], ts: &[f64]) -> Result<Vec<FieldEval>> {
        let e = self.run(xs, ts, None)?;
        let d = self.model.dim();
        let desc = &self.model.descriptor;
        let cols_of = |n: Option<NodeId>| n.map(|id| columns(e.value(id)));
        let scal_of = |n: Option<NodeId>| n.map(|id| e.value(id).data().to_vec());
        let v = cols_of(self.nodes.v).expect("velocity node");
        let h = scal_of(self.nodes.h);
        let gh = cols_of(self.nodes.grad_h);
        let phi = scal_of(self.nodes.phi);
        let gphi = cols_of(self.nodes.grad_phi);
        let cons = cols_of(self.nodes.conservative);
        let diss = cols_of(self.nodes.dissipative);
        let gamma = scal_of(self.nodes.gamma);
        let factor = cols_of(self.nodes.factor);

        let mut out = Vec::with_capacity(self.batch);
        for j in 0..self.batch {
            let mut fe = FieldEval {
                v: v[j].clone(),
                h: h.as_ref().map(|s| s[j]),
                grad_h: gh.as_ref().map(|c| c[j].clone()),
                phi: phi.as_ref().map(|s| s[j]),
                grad_phi: gphi.as_ref().map(|c| c[j].clone()),
                conservative: cons.as_ref().map(|c| c[j].clone()),
                dissipative: diss.as_ref().map(|c| c[j].clone()),
                metric: None,
                gamma: gamma.as_ref().map(|s| s[j]),
                dissipation_rate: None,
            };
            if let (Some(gam), Some(gp)) = (fe.gamma, fe.grad_phi.as_ref()) {
                let half = d / 2;
                let mut m = vec![0.0; d * d];
                for i in half..d {
                    m[i * d + i] = gam;
                }
                fe.metric = Some(m);
                fe.dissipation_rate = Some(-gam * gp[half..].iter().map(|v| v * v).sum::<f64>());
            } else if let (Some(f), Some(gh), Some(gp)) = (factor.as_ref(), fe.grad_h.as_ref(), fe.grad_phi.as_ref()) {
                let l = full_factor(desc, &f[j]);
                let r = desc.rank;
                let mut gm = vec![0.0; d * d];
                for a in 0..d {
                    for b in 0..d {
                        gm[a * d + b] = (0..r).map(|k| l[a * r + k] * l[b * r + k]).sum();
                    }
                }
                let (metric, w) = match desc.degeneracy {
                    Degeneracy::Hard => (deg_project(&gm, gh), project(gh, gp)),
                    Degeneracy::Soft => (gm, gp.clone()),
                };
                let s: Vec<f64> = (0..r).map(|k| (0..d).map(|a| l[a * r + k] * w[a]).sum()).collect();
                fe.metric = Some(metric);
                fe.dissipation_rate = Some(-s.iter().map(|v| v * v).sum::<f64>());
            }
            out.push(fe);
        }
        Ok(out)
    }
}

/// Expands the stored factor rows to a full row-major `d x r` matrix.
fn full_factor(desc: &FieldDescriptor, rows: &[f64]) -> Vec<f64> {
    let r = desc.rank;
    let mut l = vec![0.0; desc.d * r];
    for (a, &i) in desc.diss_indices().iter().enumerate() {
        l[i * r..(i + 1) * r].copy_from_slice(&rows[a * r..(a + 1) * r]);
    }
    l
}

/// `P a` with `P = I − n nᵀ/(‖n‖² + ε)`.
pub(crate) fn project(n: &[f64], a: &[f64]) -> Vec<f64> {
    let nn: f64 = n.iter().map(|v| v * v).sum();
    let na: f64 = n.iter().zip(a).map(|(u, v)| u * v).sum();
    let c = na / (nn + super::structure::EPS_PROJ);
    a.iter().zip(n).map(|(ai, ni)| ai - c * ni).collect()
}

fn columns(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.cols()).map(|j| t.column(j)).collect()
}

/// `softplus⁻¹`, used to pin a constant shrink coefficient.
pub fn inverse_softplus(y: f64) -> f64 {
    assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}
