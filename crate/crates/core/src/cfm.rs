//! Conditional flow matching on one-step transitions.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::fields::{FieldDescriptor, FieldKind, Model};

/// A bridge sample between consecutive states.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub x_k: Vec<f64>,
    pub x_next: Vec<f64>,
    pub dt: f64,
    pub tau: f64,
    pub x_tau: Vec<f64>,
    pub u_tau: Vec<f64>,
}

impl TrainingPair {
    pub fn with_tau(x_k: &[f64], x_next: &[f64], dt: f64, tau: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("transition spacing must be positive, got {dt}")));
        }
        if x_k.len() != x_next.len() {
            return Err(Error::invalid("transition endpoints differ in dimension"));
        }
        let x_tau = x_k.iter().zip(x_next).map(|(a, b)| (1.0 - tau) * a + tau * b).collect();
        let u_tau = x_k.iter().zip(x_next).map(|(a, b)| (b - a) / dt).collect();
        Ok(Self {
            x_k: x_k.to_vec(),
            x_next: x_next.to_vec(),
            dt,
            tau,
            x_tau,
            u_tau,
        })
    }
}

/// Draws `τ ~ U[0, 1]` and forms the bridge.
pub fn make_pair(x_k: &[f64], x_next: &[f64], dt: f64, rng: &mut impl Rng) -> Result<TrainingPair> {
    let tau = rng.gen_range(0.0..=1.0);
    TrainingPair::with_tau(x_k, x_next, dt, tau)
}

/// A stored transition `(x_k, x_{k+1})` with its spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub x_k: Vec<f64>,
    pub x_next: Vec<f64>,
    pub dt: f64,
}

fn default_lambda_soft() -> f64 {
    1e-2
}
fn default_lambda_reg() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    256
}
fn default_epochs() -> usize {
    200
}
fn default_lr_max() -> f64 {
    1e-3
}
fn default_lr_min() -> f64 {
    1e-5
}
fn default_clip() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_wd() -> f64 {
    1e-4
}

/// Loss weights and optimiser settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lambda_soft")]
    pub lambda_soft: f64,
    #[serde(default = "default_lambda_reg")]
    pub lambda_reg: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_soft", self.lambda_soft),
            ("lambda_reg", self.lambda_reg),
            ("lr_max", self.lr_max),
            ("lr_min", self.lr_min),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("invalid AdamW moments or epsilon"));
        }
        Ok(())
    }
}

/// Loss terms (penalties unweighted, averaged over the batch) and parameter gradients.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub loss: f64,
    pub mse: f64,
    pub soft_penalty: f64,
    pub reg_penalty: f64,
    pub grads: BTreeMap<String, Tensor>,
}

struct LossGraph {
    graph: Graph,
    total: NodeId,
    mse: NodeId,
    soft: Option<NodeId>,
    reg: Option<NodeId>,
}

/// Builds per-chunk sums; the caller divides by the batch size.
fn build_loss_graph(
    desc: &FieldDescriptor,
    model: &Model,
    n: usize,
    lambda_soft: f64,
    lambda_reg: f64,
) -> Result<LossGraph> {
    let mut g = Graph::new();
    let x = g.input("x", &[desc.d, n]);
    let emb = g.input("emb", &[2 * desc.k, n]);
    let u = g.input("u", &[desc.d, n]);
    let nodes = model.build(&mut g, x, emb)?;
    let v = nodes.v.expect("velocity node");
    let r = g.sub(v, u);
    let r2 = g.square(r);
    let mse = g.sum(r2);
    let mut total = mse;
    let mut soft = None;
    let mut reg = None;
    if desc.kind == FieldKind::Metriplectic {
        let a = g.square(nodes.metric_grad_h.expect("metric channel"));
        let a = g.sum(a);
        let b = g.square(nodes.skew_grad_phi.expect("metric channel"));
        let b = g.sum(b);
        let s = g.add(a, b);
        // the shrink metric is meant to act along ∇H, so its soft penalty is not trained
        if !desc.shrink && lambda_soft != 0.0 {
            let w = g.scale(s, lambda_soft);
            total = g.add(total, w);
        }
        soft = Some(s);
        let gh = g.square(nodes.grad_h.expect("hamiltonian"));
        let gh = g.sum(gh);
        let fro = g.sum(nodes.metric_frobenius2.expect("metric"));
        let rr = g.add(gh, fro);
        if lambda_reg != 0.0 {
            let w = g.scale(rr, lambda_reg);
            total = g.add(total, w);
        }
        reg = Some(rr);
    }
    Ok(LossGraph {
        graph: g,
        total,
        mse,
        soft,
        reg,
    })
}

const CHUNK: usize = 32;

/// Evaluates the CFM objective and its parameter gradient.
///
/// The batch is split into fixed chunks evaluated in parallel and reduced in
/// order, so results do not depend on the thread count.
pub fn cfm_loss(model: &Model, batch: &[TrainingPair], cfg: &TrainConfig) -> Result<LossValue> {
    cfm_loss_indexed(model, batch, cfg, 0)
}

/// Per-chunk sums of loss, mse, soft and reg penalties, and gradients.
type ChunkSums = (f64, f64, f64, f64, BTreeMap<String, Tensor>);

fn cfm_loss_indexed(model: &Model, batch: &[TrainingPair], cfg: &TrainConfig, batch_index: usize) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let desc = &model.descriptor;
    let emb = desc.embedding();
    let full = build_loss_graph(desc, model, CHUNK.min(batch.len()), cfg.lambda_soft, cfg.lambda_reg)?;
    let rem = batch.len() % CHUNK;
    let tail = if rem != 0 && batch.len() > CHUNK {
        Some(build_loss_graph(desc, model, rem, cfg.lambda_soft, cfg.lambda_reg)?)
    } else {
        None
    };

    let parts: Vec<Result<ChunkSums>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let lg = if chunk.len() == CHUNK.min(batch.len()) {
                &full
            } else {
                tail.as_ref().expect("tail graph")
            };
            let n = chunk.len();
            let d = desc.d;
            let mut xs = vec![0.0; d * n];
            let mut us = vec![0.0; d * n];
            for (j, p) in chunk.iter().enumerate() {
                for i in 0..d {
                    xs[i * n + j] = p.x_tau[i];
                    us[i * n + j] = p.u_tau[i];
                }
            }
            let ts: Vec<f64> = chunk.iter().map(|p| p.tau).collect();
            let mut b = Bindings::new();
            b.insert("x".into(), Tensor::matrix(d, n, xs));
            b.insert("u".into(), Tensor::matrix(d, n, us));
            b.insert("emb".into(), emb.embed_batch(&ts));
            let e = lg.graph.forward(&b, &model.params).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { batch: batch_index },
                other => other,
            })?;
            let grads = lg.graph.backward(&e, lg.total)?;
            let val = |id: Option<NodeId>| id.map_or(0.0, |i| e.value(i).item());
            Ok((
                e.value(lg.total).item(),
                val(Some(lg.mse)),
                val(lg.soft),
                val(lg.reg),
                grads,
            ))
        })
        .collect();

    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut mse = 0.0;
    let mut soft = 0.0;
    let mut reg = 0.0;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for part in parts {
        let (t, m, s, r, gr) = part?;
        total += t;
        mse += m;
        soft += s;
        reg += r;
        for (k, v) in gr {
            match grads.get_mut(&k) {
                Some(acc) => acc.add_assign(&v),
                None => {
                    grads.insert(k, v);
                }
            }
        }
    }
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    let loss = total * scale;
    if !loss.is_finite() || grads.values().any(|g| !g.all_finite()) {
        return Err(Error::NonFiniteLoss { batch: batch_index });
    }
    Ok(LossValue {
        loss,
        mse: mse * scale,
        soft_penalty: soft * scale,
        reg_penalty: reg * scale,
        grads,
    })
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π step/total))`
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Rescales all gradients together when their global norm exceeds `max_norm`. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// First and second moments for AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &ParameterStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }

    pub fn from_config(params: &ParameterStore, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step(
    params: &mut ParameterStore,
    grads: &BTreeMap<String, Tensor>,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for (name, theta) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingParameter(format!("no gradient for `{name}`")))?;
        if g.shape() != theta.shape() {
            return Err(Error::invalid(format!("gradient shape mismatch for `{name}`")));
        }
        let m = opt
            .m
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.clone()))?;
        let v = opt
            .v
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.clone()))?;
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (w, &gi)) in theta.data_mut().iter_mut().zip(g.data()).enumerate() {
            *w -= lr * opt.weight_decay * *w;
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= lr * mh / (vh.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// One row of the loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub mse: f64,
    pub soft_penalty: f64,
    pub reg_penalty: f64,
}

/// Result of [`train`]. On divergence `model` is the last finite state.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<LossRecord>,
    /// Optimiser step at which a non-finite loss stopped training.
    pub diverged_at: Option<usize>,
}

/// Trains `model` on the transitions. Deterministic in `cfg.seed`.
pub fn train(mut model: Model, data: &[Transition], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut opt = OptimizerState::from_config(&model.params, cfg);
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut curve = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let pairs: Vec<TrainingPair> = order
            .iter()
            .map(|&i| make_pair(&data[i].x_k, &data[i].x_next, data[i].dt, &mut rng))
            .collect::<Result<_>>()?;
        for batch in pairs.chunks(cfg.batch_size) {
            let lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min);
            let lv = match cfm_loss_indexed(&model, batch, cfg, step) {
                Ok(lv) => lv,
                Err(Error::NonFiniteLoss { .. }) => {
                    log::warn!("non-finite loss at step {step}; stopping");
                    return Ok(TrainOutcome {
                        model,
                        curve,
                        diverged_at: Some(step),
                    });
                }
                Err(e) => return Err(e),
            };
            let mut grads = lv.grads;
            clip_gradients(&mut grads, cfg.clip_norm);
            let before = model.params.clone();
            adamw_step(&mut model.params, &grads, &mut opt, lr)?;
            if !model.params.all_finite() {
                model.params = before;
                return Ok(TrainOutcome {
                    model,
                    curve,
                    diverged_at: Some(step),
                });
            }
            curve.push(LossRecord {
                step,
                lr,
                loss: lv.loss,
                mse: lv.mse,
                soft_penalty: lv.soft_penalty,
                reg_penalty: lv.reg_penalty,
            });
            step += 1;
        }
        if let Some(last) = curve.last() {
            log::info!("epoch {} loss {:.6e}", epoch + 1, last.loss);
        }
    }
    Ok(TrainOutcome {
        model,
        curve,
        diverged_at: None,
    })
}

/// Writes the loss curve as CSV.
pub fn write_loss_curve(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in curve {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Serialised model: descriptor, time normalisation and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Physical duration mapped to field time 1.
    pub time_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    descriptor: FieldDescriptor,
    time_scale: f64,
    parameters: serde_json::Value,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let f = CheckpointFile {
            descriptor: self.model.descriptor.clone(),
            time_scale: self.time_scale,
            parameters: self.model.params.to_json_value(),
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: CheckpointFile = serde_json::from_str(s)?;
        f.descriptor.validate()?;
        let params = ParameterStore::from_json_value(f.parameters)?;
        let reference = Model::init(f.descriptor.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::invalid(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::MissingParameter(name.clone())),
            }
        }
        if !(f.time_scale > 0.0) {
            return Err(Error::invalid("time_scale must be positive"));
        }
        Ok(Self {
            model: Model {
                descriptor: f.descriptor,
                params,
            },
            time_scale: f.time_scale,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| match e {
            Error::Json(j) => Error::Format {
                path: path.display().to_string(),
                detail: j.to_string(),
            },
            other => other,
        })
    }
}
