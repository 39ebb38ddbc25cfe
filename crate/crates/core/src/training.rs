//! SGD and adversarial training for [`ReferenceModel`].
//!
//! The loss is a weighted sum of per-head mean binary cross-entropies over
//! the triplet logits and the instrument, verb and target logits, with the
//! component targets obtained by OR-projecting the triplet labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Example;
use crate::error::{Error, Result};
use crate::graph::{bce_logit, Graph};
use crate::metrics::{component_ap, PredictionMatrix};
use crate::model::{ForwardOptions, ModelOutput, OutputVars, ParamGroup, ReferenceModel};
use crate::par;
use crate::tensor::{Norm, Tensor};
use crate::triplet::{ComponentId, TripletTable};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ivt: f64,
    pub i: f64,
    pub v: f64,
    pub t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ivt: 1.0, i: 1.0, v: 1.0, t: 1.0 }
    }
}

/// Binary targets for every head of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    pub ivt: Vec<f64>,
    pub i: Vec<f64>,
    pub v: Vec<f64>,
    pub t: Vec<f64>,
}

impl LossTargets {
    pub fn from_labels(labels: &[u8], table: &TripletTable) -> Result<Self> {
        if labels.len() != table.n_triplets() {
            return Err(Error::shape("loss targets", format!("{} labels for {} triplets", labels.len(), table.n_triplets())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidArgument(format!("labels must be 0 or 1, got {bad}")));
        }
        let proj = |d| -> Result<Vec<f64>> {
            Ok(table.component_labels(labels, d)?.into_iter().map(|l| if l == Some(true) { 1.0 } else { 0.0 }).collect())
        };
        Ok(LossTargets {
            ivt: labels.iter().map(|&l| l as f64).collect(),
            i: proj(ComponentId::I)?,
            v: proj(ComponentId::V)?,
            t: proj(ComponentId::T)?,
        })
    }
}

/// Records the multi-label loss on `g` and returns the scalar node.
pub fn multilabel_loss(g: &mut Graph, out: &OutputVars, targets: &LossTargets, w: &LossWeights) -> Result<crate::graph::Var> {
    let terms = [(out.y_ivt, &targets.ivt, w.ivt), (out.y_i, &targets.i, w.i), (out.y_v, &targets.v, w.v), (out.y_t, &targets.t, w.t)];
    let mut total = None;
    for (logits, t, weight) in terms {
        if weight == 0.0 {
            continue;
        }
        let bce = g.bce_with_logits(logits, t)?;
        let term = g.scale(bce, weight)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => g.constant(Tensor::scalar(0.0)),
    }
}

/// The same loss evaluated directly from a forward pass.
pub fn loss_value(out: &ModelOutput, targets: &LossTargets, w: &LossWeights) -> Result<f64> {
    let mean_bce = |z: &[f64], t: &[f64]| -> Result<f64> {
        if z.len() != t.len() || z.is_empty() {
            return Err(Error::shape("multilabel_loss", format!("{} logits, {} targets", z.len(), t.len())));
        }
        Ok(z.iter().zip(t).map(|(&z, &t)| bce_logit(z, t)).sum::<f64>() / z.len() as f64)
    };
    let mut total = 0.0;
    for (z, t, weight) in [(&out.y_ivt, &targets.ivt, w.ivt), (&out.y_i, &targets.i, w.i), (&out.y_v, &targets.v, w.v), (&out.y_t, &targets.t, w.t)] {
        if weight != 0.0 {
            total += weight * mean_bce(z, t)?;
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "multilabel_loss".into() });
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `lr0 * (1 - t / T)`.
    Linear,
    /// `lr0 * gamma^t`.
    Exponential,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSchedule {
    pub lr: f64,
    pub kind: ScheduleKind,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_gamma() -> f64 {
    0.95
}

impl GroupSchedule {
    pub fn new(lr: f64, kind: ScheduleKind) -> Self {
        GroupSchedule { lr, kind, gamma: default_gamma() }
    }

    /// Learning rate for epoch `t` (0-based) of `epochs`.
    pub fn lr_at(&self, t: usize, epochs: usize) -> f64 {
        match self.kind {
            ScheduleKind::Linear => self.lr * (1.0 - t as f64 / epochs.max(1) as f64),
            ScheduleKind::Exponential => self.lr * self.gamma.powi(t as i32),
            ScheduleKind::Constant => self.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub backbone: GroupSchedule,
    pub encoder: GroupSchedule,
    pub decoder: GroupSchedule,
    pub loss_weights: LossWeights,
    /// Validation AP used to pick the returned epoch.
    pub selection: ComponentId,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = GroupSchedule::new(1e-2, ScheduleKind::Exponential);
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            backbone: s,
            encoder: s,
            decoder: s,
            loss_weights: LossWeights::default(),
            selection: ComponentId::IVT,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be at least 1".into()));
        }
        for (name, s) in [("backbone", &self.backbone), ("encoder", &self.encoder), ("decoder", &self.decoder)] {
            if !(s.lr >= 0.0) || !s.lr.is_finite() || !(s.gamma > 0.0) {
                return Err(Error::InvalidArgument(format!("{name}: learning rate must be finite and non-negative, gamma positive")));
            }
        }
        Ok(())
    }

    pub fn schedule(&self, group: ParamGroup) -> &GroupSchedule {
        match group {
            ParamGroup::Backbone => &self.backbone,
            ParamGroup::Encoder => &self.encoder,
            ParamGroup::Decoder => &self.decoder,
        }
    }
}

/// Perturbation set for adversarial training: the `norm` ball of `radius`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialConfig {
    pub train: TrainConfig,
    pub norm: Norm,
    pub radius: f64,
    pub steps: usize,
    /// Ascent step, as a fraction of `radius`.
    pub step_size: f64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig { train: TrainConfig::default(), norm: Norm::Linf, radius: 0.05, steps: 3, step_size: 0.5 }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.radius >= 0.0) || !self.radius.is_finite() || self.steps == 0 || !(self.step_size > 0.0) {
            return Err(Error::InvalidArgument("adversarial radius must be >= 0, steps >= 1, step_size > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr_backbone: f64,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    /// Mean clean loss over the epoch's steps.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_ap_ivt: Option<f64>,
    pub val_ap_i: Option<f64>,
    pub val_ap_v: Option<f64>,
    pub val_ap_t: Option<f64>,
    /// Mean loss at the inner-max perturbation (adversarial runs only).
    pub adv_loss: Option<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,val_loss,val_ap_ivt,val_ap_i,val_ap_v,val_ap_t,lr_encoder,lr_decoder,adv_loss";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.lr_backbone,
            r.train_loss,
            opt(r.val_loss),
            opt(r.val_ap_ivt),
            opt(r.val_ap_i),
            opt(r.val_ap_v),
            opt(r.val_ap_t),
            r.lr_encoder,
            r.lr_decoder,
            opt(r.adv_loss)
        );
    }
    s
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters from the best validation epoch.
    pub model: ReferenceModel,
    /// Parameters after the last epoch.
    pub last: ReferenceModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

type Grads = BTreeMap<String, Tensor>;

fn check_examples(model: &ReferenceModel, table: &TripletTable, examples: &[&Example]) -> Result<()> {
    if table.n_triplets() != model.config().n_triplets {
        return Err(Error::shape("training", format!("table has {} triplets, model {}", table.n_triplets(), model.config().n_triplets)));
    }
    for e in examples {
        if e.labels.len() != table.n_triplets() {
            return Err(Error::shape("training labels", format!("example {} has {} labels", e.id, e.labels.len())));
        }
    }
    Ok(())
}

/// Loss and parameter gradients at input `x`.
fn param_step(model: &ReferenceModel, x: &Tensor, targets: &LossTargets, w: &LossWeights) -> Result<(f64, Grads)> {
    let mut g = Graph::new();
    let p = model.insert_params(&mut g, true)?;
    let xv = g.constant(x.clone())?;
    let out = model.build(&mut g, xv, &p, ForwardOptions::default())?;
    let loss = multilabel_loss(&mut g, &out, targets, w)?;
    let value = g.value(loss)?.item()?;
    let mut grads = g.backward(loss)?;
    let mut map = Grads::new();
    for (name, var) in &p {
        if let Some(t) = grads.take(*var) {
            map.insert(name.clone(), t);
        }
    }
    Ok((value, map))
}

/// Loss and input gradient at `x`.
fn input_step(model: &ReferenceModel, x: &Tensor, targets: &LossTargets, w: &LossWeights) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let p = model.insert_params(&mut g, false)?;
    let xv = g.leaf(x.clone(), true)?;
    let out = model.build(&mut g, xv, &p, ForwardOptions::default())?;
    let loss = multilabel_loss(&mut g, &out, targets, w)?;
    let value = g.value(loss)?.item()?;
    let gx = g.backward(loss)?.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((value, gx))
}

/// Projects `delta` onto the `norm` ball of `radius`.
pub fn project_ball(delta: &mut Tensor, norm: Norm, radius: f64) {
    match norm {
        Norm::Linf => delta.data_mut().iter_mut().for_each(|d| *d = d.clamp(-radius, radius)),
        Norm::L2 => {
            let n = delta.norm(Norm::L2);
            if n > radius {
                let k = radius / n;
                delta.data_mut().iter_mut().for_each(|d| *d *= k);
            }
        }
    }
}

/// Steepest-ascent direction of unit `norm` for gradient `g`.
pub fn ascent_direction(g: &Tensor, norm: Norm) -> Tensor {
    match norm {
        Norm::Linf => g.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }),
        Norm::L2 => {
            let n = g.norm(Norm::L2);
            if n > 0.0 {
                g.scaled(1.0 / n)
            } else {
                g.map(|_| 0.0)
            }
        }
    }
}

/// Result of the inner maximisation for one example.
#[derive(Clone, Debug)]
pub struct InnerMax {
    pub delta: Tensor,
    pub clean_loss: f64,
    /// Loss at `delta`; never below `clean_loss`.
    pub loss: f64,
}

/// Projected gradient ascent on the loss within the `norm` ball, starting at
/// zero. The iterate with the highest loss (including zero) is returned.
pub fn inner_max(model: &ReferenceModel, x: &Tensor, targets: &LossTargets, cfg: &AdversarialConfig) -> Result<InnerMax> {
    let w = &cfg.train.loss_weights;
    let (clean_loss, mut grad) = input_step(model, x, targets, w)?;
    let mut best = InnerMax { delta: Tensor::zeros(x.shape()), clean_loss, loss: clean_loss };
    if cfg.radius == 0.0 {
        return Ok(best);
    }
    let mut delta = Tensor::zeros(x.shape());
    for s in 0..cfg.steps {
        delta.axpy(cfg.step_size * cfg.radius, &ascent_direction(&grad, cfg.norm))?;
        project_ball(&mut delta, cfg.norm, cfg.radius);
        let xa = x.add(&delta)?;
        if s + 1 == cfg.steps {
            let out = model.forward(&xa)?;
            let loss = loss_value(&out, targets, w)?;
            if loss > best.loss {
                best = InnerMax { delta: delta.clone(), clean_loss, loss };
            }
        } else {
            let (loss, g) = input_step(model, &xa, targets, w)?;
            if loss > best.loss {
                best = InnerMax { delta: delta.clone(), clean_loss, loss };
            }
            grad = g;
        }
    }
    Ok(best)
}

/// Scores (logits) and labels for every example.
pub fn predictions(model: &ReferenceModel, examples: &[&Example]) -> Result<(PredictionMatrix, Vec<ModelOutput>)> {
    let outs = par::map(examples, |e| model.forward(&e.image));
    let mut pred = PredictionMatrix::new(model.config().n_triplets);
    let mut all = Vec::with_capacity(outs.len());
    for (o, e) in outs.into_iter().zip(examples) {
        let o = o?;
        pred.push(&o.y_ivt, &e.labels)?;
        all.push(o);
    }
    Ok((pred, all))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub ap: BTreeMap<ComponentId, Option<f64>>,
}

pub fn evaluate(model: &ReferenceModel, table: &TripletTable, examples: &[&Example], w: &LossWeights) -> Result<Evaluation> {
    let (pred, outs) = predictions(model, examples)?;
    let mut loss = 0.0;
    for (o, e) in outs.iter().zip(examples) {
        loss += loss_value(o, &LossTargets::from_labels(&e.labels, table)?, w)?;
    }
    let mut ap = BTreeMap::new();
    for d in ComponentId::ALL {
        ap.insert(d, component_ap(&pred, table, d)?.mean);
    }
    Ok(Evaluation { loss: loss / examples.len().max(1) as f64, ap })
}

/// Plain SGD on the multi-label loss. Deterministic for a given seed and
/// independent of worker count: per-example gradients are summed in batch
/// order.
pub fn sgd_fit(model: ReferenceModel, table: &TripletTable, train: &[&Example], val: &[&Example], cfg: &TrainConfig) -> Result<FitResult> {
    fit(model, table, train, val, cfg, None)
}

/// Adversarial training: each example is replaced by its inner-max
/// perturbation before the parameter gradient is taken.
pub fn adversarial_fit(model: ReferenceModel, table: &TripletTable, train: &[&Example], val: &[&Example], cfg: &AdversarialConfig) -> Result<FitResult> {
    cfg.validate()?;
    fit(model, table, train, val, &cfg.train, Some(cfg))
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, step, loss: f64::NAN },
        other => other,
    }
}

fn fit(
    mut model: ReferenceModel,
    table: &TripletTable,
    train: &[&Example],
    val: &[&Example],
    cfg: &TrainConfig,
    adv: Option<&AdversarialConfig>,
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    check_examples(&model, table, train)?;
    check_examples(&model, table, val)?;
    let targets: Vec<LossTargets> = train.iter().map(|e| LossTargets::from_labels(&e.labels, table)).collect::<Result<_>>()?;
    let w = cfg.loss_weights;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ReferenceModel)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = |g: ParamGroup| cfg.schedule(g).lr_at(epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let (mut clean_sum, mut adv_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let results = par::map(batch, |&k| -> Result<(f64, f64, Grads)> {
                let x = &train[k].image;
                match adv {
                    Some(a) if a.radius > 0.0 => {
                        let im = inner_max(&model, x, &targets[k], a)?;
                        let (loss, grads) = param_step(&model, &x.add(&im.delta)?, &targets[k], &w)?;
                        Ok((im.clean_loss, loss, grads))
                    }
                    _ => {
                        let (loss, grads) = param_step(&model, x, &targets[k], &w)?;
                        Ok((loss, loss, grads))
                    }
                }
            });
            let mut sum: Option<Grads> = None;
            for r in results {
                let (clean, advl, grads) = r.map_err(|e| diverged(e, epoch, step))?;
                if !clean.is_finite() || !advl.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss: advl });
                }
                clean_sum += clean;
                adv_sum += advl;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (name, g) in grads {
                            match acc.get_mut(&name) {
                                Some(a) => a.axpy(1.0, &g)?,
                                None => {
                                    acc.insert(name, g);
                                }
                            }
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let sum = sum.unwrap_or_default();
            for (name, p) in model.params_mut().iter_mut() {
                if let Some(g) = sum.get(name) {
                    let rate = lr(ParamGroup::of(name));
                    if rate != 0.0 {
                        p.axpy(-rate * inv, g)?;
                    }
                }
            }
            if !model.params().is_finite() {
                return Err(Error::Diverged { epoch, step, loss: f64::NAN });
            }
            step += 1;
        }

        let n = train.len() as f64;
        let eval = if val.is_empty() { None } else { Some(evaluate(&model, table, val, &w).map_err(|e| diverged(e, epoch, step))?) };
        let ap = |d| eval.as_ref().and_then(|e| e.ap[&d]);
        history.push(EpochRecord {
            epoch,
            lr_backbone: lr(ParamGroup::Backbone),
            lr_encoder: lr(ParamGroup::Encoder),
            lr_decoder: lr(ParamGroup::Decoder),
            train_loss: clean_sum / n,
            val_loss: eval.as_ref().map(|e| e.loss),
            val_ap_ivt: ap(ComponentId::IVT),
            val_ap_i: ap(ComponentId::I),
            val_ap_v: ap(ComponentId::V),
            val_ap_t: ap(ComponentId::T),
            adv_loss: adv.map(|_| adv_sum / n),
        });
        // Without validation data the last epoch wins.
        let score = if val.is_empty() { epoch as f64 } else { ap(cfg.selection).unwrap_or(f64::NEG_INFINITY) };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(FitResult { model: best_model, last: model, best_epoch, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvBlock, ModelConfig};
    use crate::triplet::ComponentCounts;

    fn toy() -> (ReferenceModel, TripletTable, Vec<Example>) {
        let counts = ComponentCounts::new(2, 2, 2);
        let table = TripletTable::build(counts, vec![(0, 0, 0), (1, 1, 1)]).unwrap();
        let cfg = ModelConfig {
            height: 6,
            width: 6,
            channels: 3,
            backbone: vec![ConvBlock::strided(4)],
            counts,
            n_triplets: 2,
            branch_width: 4,
            seed: 3,
        };
        let model = ReferenceModel::init(cfg).unwrap();
        let examples = (0..8)
            .map(|k| {
                let cls = k % 2;
                let mut data = vec![0.1; 6 * 6 * 3];
                for px in 0..36 {
                    data[px * 3 + cls] = 0.9;
                }
                Example {
                    id: k,
                    image: Tensor::new(vec![6, 6, 3], data).unwrap(),
                    labels: if cls == 0 { vec![1, 0] } else { vec![0, 1] },
                    video_id: "VID01".into(),
                    frame_id: k as u32,
                    core_mask: None,
                    spurious_mask: None,
                    blacked_out: false,
                    scene: None,
                }
            })
            .collect();
        (model, table, examples)
    }

    #[test]
    fn zero_logits_give_ln2_per_head() {
        let table = TripletTable::build(ComponentCounts::new(2, 2, 2), vec![(0, 0, 0), (1, 1, 1), (0, 1, 0)]).unwrap();
        let t = LossTargets::from_labels(&[0, 1, 0], &table).unwrap();
        let out = ModelOutput {
            y_i: vec![0.0; 2],
            y_v: vec![0.0; 2],
            y_t: vec![0.0; 2],
            y_ivt: vec![0.0; 3],
            cams: Tensor::zeros(&[1]),
            features: Tensor::zeros(&[1]),
        };
        let only_ivt = LossWeights { ivt: 1.0, i: 0.0, v: 0.0, t: 0.0 };
        assert!((loss_value(&out, &t, &only_ivt).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((loss_value(&out, &t, &LossWeights::default()).unwrap() - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!(LossTargets::from_labels(&[0, 2, 0], &table).is_err());
    }

    #[test]
    fn perfect_logits_give_small_loss() {
        let table = TripletTable::build(ComponentCounts::new(2, 2, 2), vec![(0, 0, 0), (1, 1, 1)]).unwrap();
        let t = LossTargets::from_labels(&[1, 0], &table).unwrap();
        let out = ModelOutput {
            y_i: vec![30.0, -30.0],
            y_v: vec![30.0, -30.0],
            y_t: vec![30.0, -30.0],
            y_ivt: vec![30.0, -30.0],
            cams: Tensor::zeros(&[1]),
            features: Tensor::zeros(&[1]),
        };
        assert!(loss_value(&out, &t, &LossWeights::default()).unwrap() < 1e-3);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (model, table, ex) = toy();
        let refs: Vec<&Example> = ex.iter().collect();
        let s = GroupSchedule::new(0.0, ScheduleKind::Linear);
        let cfg = TrainConfig { epochs: 2, batch_size: 4, backbone: s, encoder: s, decoder: s, ..TrainConfig::default() };
        let fit = sgd_fit(model.clone(), &table, &refs, &[], &cfg).unwrap();
        assert_eq!(fit.last.params(), model.params());
    }

    #[test]
    fn separable_toy_loss_decreases() {
        let (model, table, ex) = toy();
        let refs: Vec<&Example> = ex.iter().collect();
        let s = GroupSchedule::new(0.1, ScheduleKind::Constant);
        let cfg = TrainConfig { epochs: 6, batch_size: 8, backbone: s, encoder: s, decoder: s, ..TrainConfig::default() };
        let fit = sgd_fit(model, &table, &refs, &refs, &cfg).unwrap();
        let losses: Vec<f64> = fit.history.iter().map(|r| r.train_loss).collect();
        assert!(losses.windows(2).take(5).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn schedules_follow_definition() {
        let (model, table, ex) = toy();
        let refs: Vec<&Example> = ex.iter().collect();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            backbone: GroupSchedule { lr: 0.01, kind: ScheduleKind::Exponential, gamma: 0.5 },
            encoder: GroupSchedule::new(0.02, ScheduleKind::Linear),
            decoder: GroupSchedule::new(0.03, ScheduleKind::Constant),
            ..TrainConfig::default()
        };
        let fit = sgd_fit(model, &table, &refs, &refs, &cfg).unwrap();
        for r in &fit.history {
            let t = r.epoch as f64;
            assert_eq!(r.lr_backbone, 0.01 * 0.5f64.powi(r.epoch as i32));
            assert_eq!(r.lr_encoder, 0.02 * (1.0 - t / 4.0));
            assert_eq!(r.lr_decoder, 0.03);
        }
        let csv = history_csv(&fit.history);
        assert!(csv.starts_with(HISTORY_HEADER));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn radius_zero_matches_clean_training() {
        let (model, table, ex) = toy();
        let refs: Vec<&Example> = ex.iter().collect();
        let train = TrainConfig { epochs: 2, batch_size: 3, ..TrainConfig::default() };
        let clean = sgd_fit(model.clone(), &table, &refs, &refs, &train).unwrap();
        let adv = AdversarialConfig { train, radius: 0.0, ..AdversarialConfig::default() };
        let robust = adversarial_fit(model, &table, &refs, &refs, &adv).unwrap();
        assert_eq!(clean.last.params(), robust.last.params());
        let a: Vec<f64> = clean.history.iter().map(|r| r.train_loss).collect();
        let b: Vec<f64> = robust.history.iter().map(|r| r.train_loss).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn inner_max_never_lowers_the_loss() {
        let (model, table, ex) = toy();
        for (norm, radius) in [(Norm::Linf, 0.05), (Norm::L2, 0.5)] {
            let cfg = AdversarialConfig { norm, radius, steps: 3, ..AdversarialConfig::default() };
            for e in &ex {
                let t = LossTargets::from_labels(&e.labels, &table).unwrap();
                let im = inner_max(&model, &e.image, &t, &cfg).unwrap();
                assert!(im.loss >= im.clean_loss);
                assert!(im.delta.norm(norm) <= radius * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn one_step_linf_is_a_sign_step() {
        let (model, table, ex) = toy();
        let t = LossTargets::from_labels(&ex[0].labels, &table).unwrap();
        let cfg = AdversarialConfig { norm: Norm::Linf, radius: 0.1, steps: 1, step_size: 1.0, ..AdversarialConfig::default() };
        let im = inner_max(&model, &ex[0].image, &t, &cfg).unwrap();
        let (_, g) = input_step(&model, &ex[0].image, &t, &cfg.train.loss_weights).unwrap();
        if im.loss > im.clean_loss {
            let want = g.map(|v| 0.1 * v.signum() * (v != 0.0) as u8 as f64);
            assert_eq!(im.delta, want);
        }
    }
}
