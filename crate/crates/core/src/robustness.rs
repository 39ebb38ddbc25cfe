//! Minimum-norm masked perturbations and robustness curves.
//!
//! For an input `x` with label `y` and a pixel mask `S`, the robustness of
//! `x` on `S` is the smallest `||delta||_p` with `delta` zero outside `S`
//! such that the predicted label of `x + delta` differs from `y`. It is
//! estimated by bisection on the radius with a projected-gradient attack at
//! each radius, seeded by linearised walks to each class boundary.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{predict_label, Classifier};
use crate::datasets::Example;
use crate::error::{Error, Result};
use crate::explain::{attribute, top_fraction_mask, ExplainConfig, Method};
use crate::mask::FeatureMask;
use crate::par;
use crate::tensor::{Norm, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub norm: Norm,
    /// Largest radius tried; failures there are censored.
    pub epsilon_max: f64,
    /// Bisection stops once the bracket is narrower than this.
    pub tolerance: f64,
    pub max_depth: usize,
    /// PGD iterations per radius.
    pub steps: usize,
    /// PGD step as a fraction of the current radius.
    pub step_size: f64,
    /// PGD attempts per radius; the first starts at zero or at the best flip
    /// so far, the rest at random points of the ball.
    pub restarts: usize,
    /// Keep `x + delta` inside `[0, 1]`.
    pub clip: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            norm: Norm::L2,
            epsilon_max: 20.0,
            tolerance: 0.01,
            max_depth: 20,
            steps: 20,
            step_size: 0.25,
            restarts: 3,
            clip: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_max > 0.0) || !(self.tolerance > 0.0) || !self.epsilon_max.is_finite() {
            return Err(Error::InvalidArgument("epsilon_max and tolerance must be positive".into()));
        }
        if self.steps == 0 || self.restarts == 0 || !(self.step_size > 0.0) {
            return Err(Error::InvalidArgument("steps, restarts and step_size must be positive".into()));
        }
        Ok(())
    }
}

/// Which pixels an attack may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetKind {
    /// The top-fraction set chosen by an explainer.
    Relevant,
    /// Its complement.
    Irrelevant,
    /// Every pixel.
    Full,
}

impl SetKind {
    pub fn name(self) -> &'static str {
        match self {
            SetKind::Relevant => "relevant",
            SetKind::Irrelevant => "irrelevant",
            SetKind::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRecord {
    pub example_id: usize,
    /// "grad", "ig", or "full" for unmasked attacks.
    pub explainer: String,
    pub fraction: f64,
    pub set: SetKind,
    pub norm: Norm,
    /// `||delta||_p` on success; `epsilon_max` when censored.
    pub epsilon: f64,
    pub success: bool,
    pub queries: usize,
    #[serde(skip)]
    pub delta: Option<Tensor>,
}

const BACKTRACK: usize = 4;
const OVERSHOOT: f64 = 1.05;
const REFINE_GAMMA: f64 = 0.05;

enum Start<'a> {
    Zero,
    Warm(&'a Tensor),
    Random(&'a mut ChaCha8Rng),
}

struct Attack<'a> {
    model: &'a dyn Classifier,
    x: &'a Tensor,
    y: usize,
    on: Vec<usize>,
    cfg: &'a AttackConfig,
    /// Class whose logit the margin tracks; `None` follows the runner-up.
    target: Option<usize>,
    queries: usize,
}

impl Attack<'_> {
    fn flipped(logits: &[f64], y: usize) -> bool {
        predict_label(logits) != y
    }

    fn project(&self, delta: &mut Tensor, eps: f64) {
        let d = delta.data_mut();
        match self.cfg.norm {
            Norm::Linf => self.on.iter().for_each(|&i| d[i] = d[i].clamp(-eps, eps)),
            Norm::L2 => {
                let n = self.on.iter().map(|&i| d[i] * d[i]).sum::<f64>().sqrt();
                if n > eps {
                    let k = eps / n;
                    self.on.iter().for_each(|&i| d[i] *= k);
                }
            }
        }
        if self.cfg.clip {
            let x = self.x.data();
            self.on.iter().for_each(|&i| d[i] = (x[i] + d[i]).clamp(0.0, 1.0) - x[i]);
        }
    }

    /// Logit of `target` (or the largest other logit) minus the logit of `y`.
    fn margin(logits: &[f64], y: usize, target: Option<usize>) -> f64 {
        if let Some(t) = target {
            return logits[t] - logits[y];
        }
        let other = logits.iter().enumerate().filter(|&(m, _)| m != y).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
        other - logits[y]
    }

    fn margin_coeffs(logits: &[f64], y: usize, target: Option<usize>) -> Vec<f64> {
        let mut best = target;
        if best.is_none() {
            for (m, &v) in logits.iter().enumerate() {
                if m != y && best.is_none_or(|b: usize| v > logits[b]) {
                    best = Some(m);
                }
            }
        }
        let mut c = vec![0.0; logits.len()];
        if let Some(j) = best {
            c[j] = 1.0;
            c[y] = -1.0;
        }
        c
    }

    /// One PGD run at radius `eps`; returns a flipping perturbation.
    fn pgd(&mut self, eps: f64, start: Start<'_>) -> Result<Option<Tensor>> {
        let mut delta = Tensor::zeros(self.x.shape());
        match start {
            Start::Zero => {}
            Start::Warm(d0) => {
                delta = d0.clone();
                self.project(&mut delta, eps);
            }
            Start::Random(rng) => {
                let d = delta.data_mut();
                for &i in &self.on {
                    d[i] = rng.random_range(-eps..=eps);
                }
                self.project(&mut delta, eps);
            }
        }
        let alpha_max = self.cfg.step_size * eps;
        let mut alpha = alpha_max;
        let (y, tgt) = (self.y, self.target);
        let (mut logits, mut g) = self.model.logits_and_grad(&self.x.add(&delta)?, &|z| Self::margin_coeffs(z, y, tgt))?;
        self.queries += 1;
        for _ in 0..self.cfg.steps {
            if Self::flipped(&logits, y) {
                return Ok(Some(delta));
            }
            let gd = g.data();
            let dir: Vec<f64> = match self.cfg.norm {
                Norm::Linf => self.on.iter().map(|&i| gd[i].signum() * (gd[i] != 0.0) as u8 as f64).collect(),
                Norm::L2 => {
                    let n = self.on.iter().map(|&i| gd[i] * gd[i]).sum::<f64>().sqrt();
                    if !(n > 0.0) {
                        return Ok(None);
                    }
                    self.on.iter().map(|&i| gd[i] / n).collect()
                }
            };
            let m0 = Self::margin(&logits, y, tgt);
            let mut accepted = false;
            for _ in 0..BACKTRACK {
                let mut cand = delta.clone();
                let d = cand.data_mut();
                for (&i, s) in self.on.iter().zip(&dir) {
                    d[i] += alpha * s;
                }
                self.project(&mut cand, eps);
                let (l, gc) = self.model.logits_and_grad(&self.x.add(&cand)?, &|z| Self::margin_coeffs(z, y, tgt))?;
                self.queries += 1;
                if Self::margin(&l, y, tgt) > m0 {
                    (delta, logits, g) = (cand, l, gc);
                    alpha = (2.0 * alpha).min(alpha_max);
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Ok(Self::flipped(&logits, y).then_some(delta))
    }

    /// Linearised steps onto the decision boundary within the mask, with a
    /// small overshoot. Returns the first flipping perturbation.
    fn boundary_walk(&mut self) -> Result<Option<Tensor>> {
        let (y, tgt) = (self.y, self.target);
        let mut delta = Tensor::zeros(self.x.shape());
        for _ in 0..self.cfg.steps {
            let (logits, g) = self.model.logits_and_grad(&self.x.add(&delta)?, &|z| Self::margin_coeffs(z, y, tgt))?;
            self.queries += 1;
            if Self::flipped(&logits, y) {
                return Ok(Some(delta));
            }
            let gd = g.data();
            let gap = -Self::margin(&logits, y, tgt);
            let dir: Vec<f64> = match self.cfg.norm {
                Norm::L2 => self.on.iter().map(|&i| gd[i]).collect(),
                Norm::Linf => self.on.iter().map(|&i| gd[i].signum() * (gd[i] != 0.0) as u8 as f64).collect(),
            };
            let slope: f64 = self.on.iter().zip(&dir).map(|(&i, s)| gd[i] * s).sum();
            if !(slope > 0.0) {
                return Ok(None);
            }
            let t = OVERSHOOT * gap / slope;
            let d = delta.data_mut();
            for (&i, s) in self.on.iter().zip(&dir) {
                d[i] += t * s;
            }
            if self.cfg.clip {
                let x = self.x.data();
                self.on.iter().for_each(|&i| d[i] = (x[i] + d[i]).clamp(0.0, 1.0) - x[i]);
            }
        }
        let logits = self.model.logits(&self.x.add(&delta)?)?;
        self.queries += 1;
        Ok(Self::flipped(&logits, y).then_some(delta))
    }

    /// Walks along the boundary towards smaller norms: the radius shrinks by
    /// a factor `1 - gamma` after a flip and grows to the linearised boundary
    /// distance otherwise. Returns the smallest flip seen.
    fn refine(&mut self, start: Tensor) -> Result<Tensor> {
        let (y, tgt) = (self.y, self.target);
        let steps = self.cfg.steps;
        let mut best_norm = start.norm(self.cfg.norm);
        let mut best = start.clone();
        let mut eps = best_norm;
        let mut delta = start;
        for k in 0..steps {
            let anneal = 0.5 * (1.0 + (std::f64::consts::PI * k as f64 / steps as f64).cos());
            let (logits, g) = self.model.logits_and_grad(&self.x.add(&delta)?, &|z| Self::margin_coeffs(z, y, tgt))?;
            self.queries += 1;
            let n = delta.norm(self.cfg.norm);
            let gd = g.data();
            let gnorm = match self.cfg.norm {
                Norm::L2 => self.on.iter().map(|&i| gd[i] * gd[i]).sum::<f64>().sqrt(),
                Norm::Linf => self.on.iter().map(|&i| gd[i].abs()).sum::<f64>(),
            };
            if Self::flipped(&logits, y) {
                if n < best_norm {
                    (best_norm, best) = (n, delta.clone());
                }
                eps = eps.min(n) * (1.0 - REFINE_GAMMA * anneal);
            } else if gnorm > 0.0 {
                eps = (n - Self::margin(&logits, y, tgt) / gnorm).min(best_norm);
            }
            if !(gnorm > 0.0) {
                break;
            }
            let alpha = self.cfg.step_size * eps * anneal.max(0.1);
            let d = delta.data_mut();
            for &i in &self.on {
                d[i] += alpha * match self.cfg.norm {
                    Norm::L2 => gd[i] / gnorm,
                    Norm::Linf => gd[i].signum() * (gd[i] != 0.0) as u8 as f64,
                };
            }
            self.project(&mut delta, eps);
        }
        Ok(best)
    }

    /// PGD with restarts: the first run starts from `warm` (or zero), the
    /// rest from random points. A flip is shrunk to the boundary.
    fn attempt(&mut self, eps: f64, warm: Option<&Tensor>, rng: &mut ChaCha8Rng) -> Result<Option<Tensor>> {
        for r in 0..self.cfg.restarts {
            let start = match (r, warm) {
                (0, Some(d)) => Start::Warm(d),
                (0, None) => Start::Zero,
                _ => Start::Random(rng),
            };
            if let Some(d) = self.pgd(eps, start)? {
                return self.shrink(d).map(Some);
            }
        }
        Ok(None)
    }

    /// Bisects the scale `s` in `(0, 1]` so that `s * delta` still flips.
    fn shrink(&mut self, delta: Tensor) -> Result<Tensor> {
        let n = delta.norm(self.cfg.norm);
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..30 {
            if (hi - lo) * n <= 0.25 * self.cfg.tolerance {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let logits = self.model.logits(&self.x.add(&delta.scaled(mid))?)?;
            self.queries += 1;
            if Self::flipped(&logits, self.y) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(if hi < 1.0 { delta.scaled(hi) } else { delta })
    }
}

fn mask_entries(mask: &FeatureMask, shape: &[usize]) -> Result<Vec<usize>> {
    if shape.len() != 3 || mask.height() != shape[0] || mask.width() != shape[1] {
        return Err(Error::shape("attack mask", format!("{}x{} mask for input {shape:?}", mask.height(), mask.width())));
    }
    let c = shape[2];
    Ok(mask.indices().into_iter().flat_map(|p| (0..c).map(move |k| p * c + k)).collect())
}

/// Minimum-norm perturbation confined to `mask` that changes the predicted
/// label away from `y`. `stream` selects the random stream for restarts so
/// results do not depend on evaluation order.
///
/// Linearised walks to the decision boundary of each other class, each
/// followed by a short walk along that boundary, give the first upper bound; later PGD runs push towards the class it reaches.
/// Failing that, PGD runs at `epsilon_max`, halving the radius on failure (at
/// most `max_depth` times). The search then bisects below the norm of the best flip found,
/// warm-starting each run from it. Every flip is shrunk along its ray to
/// the decision boundary.
/// Returns `(epsilon, success, delta, queries)`; a failed search is censored
/// at `epsilon_max` with a zero delta.
pub fn min_norm_attack(
    model: &dyn Classifier,
    x: &Tensor,
    y: usize,
    mask: &FeatureMask,
    cfg: &AttackConfig,
    stream: u64,
) -> Result<(f64, bool, Tensor, usize)> {
    cfg.validate()?;
    if mask.is_empty() {
        return Err(Error::InvalidArgument("attack mask is empty".into()));
    }
    let on = mask_entries(mask, x.shape())?;
    let clean = model.logits(x)?;
    if predict_label(&clean) != y {
        return Err(Error::Precondition(format!("input is not classified as {y} before the attack")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut atk = Attack { model, x, y, on, cfg, target: None, queries: 1 };

    let mut found: Option<Tensor> = None;
    for t in (0..clean.len()).filter(|&t| t != y) {
        atk.target = Some(t);
        if let Some(d) = atk.boundary_walk()? {
            let d = atk.refine(d)?;
            let d = atk.shrink(d)?;
            let n = d.norm(cfg.norm);
            if n <= cfg.epsilon_max && found.as_ref().is_none_or(|b| n < b.norm(cfg.norm)) {
                found = Some(d);
            }
        }
    }
    atk.target = None;
    let mut eps = cfg.epsilon_max;
    for _ in 0..=cfg.max_depth {
        if found.is_some() {
            break;
        }
        found = atk.attempt(eps, None, &mut rng)?;
        eps *= 0.5;
        if found.is_some() || eps < cfg.tolerance {
            break;
        }
    }
    let Some(mut best) = found else {
        return Ok((cfg.epsilon_max, false, Tensor::zeros(x.shape()), atk.queries));
    };
    atk.target = Some(predict_label(&model.logits(&x.add(&best)?)?));
    atk.queries += 1;
    let mut hi = best.norm(cfg.norm);
    let mut lo = 0.0;
    let mut depth = 0;
    while hi - lo > cfg.tolerance && depth < cfg.max_depth {
        let mid = 0.5 * (lo + hi);
        match atk.attempt(mid, Some(&best), &mut rng)? {
            Some(d) => {
                hi = d.norm(cfg.norm);
                best = d;
            }
            None => lo = mid,
        }
        depth += 1;
    }
    let verified = Attack::flipped(&model.logits(&x.add(&best)?)?, y);
    atk.queries += 1;
    if !verified {
        return Ok((cfg.epsilon_max, false, Tensor::zeros(x.shape()), atk.queries));
    }
    Ok((best.norm(cfg.norm), true, best, atk.queries))
}

/// An example prepared for attack: correctly classified, single label.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackItem {
    pub id: usize,
    pub image: Tensor,
    pub label: usize,
}

/// Single-label, non-blacked-out examples whose prediction equals their
/// label, in input order.
pub fn correctly_classified(model: &dyn Classifier, examples: &[&Example]) -> Result<Vec<AttackItem>> {
    let keep = par::map(examples, |e| -> Result<Option<AttackItem>> {
        let Some(y) = e.single_label() else { return Ok(None) };
        if e.blacked_out || model.predict(&e.image)? != y {
            return Ok(None);
        }
        Ok(Some(AttackItem { id: e.id, image: e.image.clone(), label: y }))
    });
    Ok(keep.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

/// Where attack masks come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Full,
    Explainer(Method),
}

impl MaskSource {
    pub fn name(self) -> &'static str {
        match self {
            MaskSource::Full => "full",
            MaskSource::Explainer(m) => m.name(),
        }
    }
}

/// Mean of successful epsilons and the number of censored records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean: Option<f64>,
    pub n_success: usize,
    pub n_censored: usize,
}

pub fn summarize(records: &[&RobustnessRecord]) -> EvalSummary {
    let ok: Vec<f64> = records.iter().filter(|r| r.success).map(|r| r.epsilon).collect();
    let mean = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
    EvalSummary { mean, n_success: ok.len(), n_censored: records.len() - ok.len() }
}

fn masks_for(model: &dyn Classifier, item: &AttackItem, source: MaskSource, ecfg: &ExplainConfig) -> Result<Option<crate::explain::AttributionMap>> {
    match source {
        MaskSource::Full => Ok(None),
        MaskSource::Explainer(m) => attribute(model, &item.image, item.label, m, ecfg).map(Some),
    }
}

fn select(attr: Option<&crate::explain::AttributionMap>, shape: [usize; 3], fraction: f64, set: SetKind) -> Result<FeatureMask> {
    match (attr, set) {
        (None, _) | (_, SetKind::Full) => Ok(FeatureMask::full(shape[0], shape[1])),
        (Some(a), SetKind::Relevant) => Ok(top_fraction_mask(a, fraction)?.0),
        (Some(a), SetKind::Irrelevant) => Ok(top_fraction_mask(a, fraction)?.1),
    }
}

/// Attacks every item on the `set` mask built from `source` at `fraction`.
/// Items run in parallel; records come back in item order.
pub fn robustness_eval(
    model: &dyn Classifier,
    items: &[AttackItem],
    source: MaskSource,
    fraction: f64,
    set: SetKind,
    cfg: &AttackConfig,
    ecfg: &ExplainConfig,
) -> Result<(Vec<RobustnessRecord>, EvalSummary)> {
    if items.is_empty() {
        return Err(Error::NotEnoughExamples { wanted: 1, have: 0 });
    }
    let shape = model.input_shape();
    let records = par::map(items, |item| -> Result<RobustnessRecord> {
        let attr = masks_for(model, item, source, ecfg)?;
        let mask = select(attr.as_ref(), shape, fraction, set)?;
        attack_one(model, item, source, fraction, set, cfg, &mask)
    });
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = summarize(&records.iter().collect::<Vec<_>>());
    Ok((records, summary))
}

fn attack_one(
    model: &dyn Classifier,
    item: &AttackItem,
    source: MaskSource,
    fraction: f64,
    set: SetKind,
    cfg: &AttackConfig,
    mask: &FeatureMask,
) -> Result<RobustnessRecord> {
    let (epsilon, success, delta, queries) = min_norm_attack(model, &item.image, item.label, mask, cfg, item.id as u64)?;
    Ok(RobustnessRecord {
        example_id: item.id,
        explainer: source.name().into(),
        fraction,
        set,
        norm: cfg.norm,
        epsilon,
        success,
        queries,
        delta: Some(delta),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub explainer: String,
    pub fractions: Vec<f64>,
    /// Mean epsilon over successes per fraction.
    pub relevant: Vec<Option<f64>>,
    /// `None` where the complement is empty.
    pub irrelevant: Vec<Option<f64>>,
    pub relevant_censored: Vec<usize>,
    pub irrelevant_censored: Vec<usize>,
    pub n_examples: usize,
}

/// Robustness of `S_r` and its complement at each fraction. Attributions
/// are computed once per item.
pub fn robustness_curve(
    model: &dyn Classifier,
    items: &[AttackItem],
    source: MaskSource,
    fractions: &[f64],
    cfg: &AttackConfig,
    ecfg: &ExplainConfig,
) -> Result<(RobustnessCurve, Vec<RobustnessRecord>)> {
    if items.is_empty() {
        return Err(Error::NotEnoughExamples { wanted: 1, have: 0 });
    }
    if fractions.is_empty() || fractions.windows(2).any(|w| w[0] >= w[1]) || fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::InvalidArgument("fractions must be strictly ascending in (0, 1]".into()));
    }
    let shape = model.input_shape();
    let per_item = par::map(items, |item| -> Result<Vec<RobustnessRecord>> {
        let attr = masks_for(model, item, source, ecfg)?;
        let mut out = Vec::new();
        for &f in fractions {
            for set in [SetKind::Relevant, SetKind::Irrelevant] {
                let mask = select(attr.as_ref(), shape, f, set)?;
                if mask.is_empty() {
                    continue;
                }
                out.push(attack_one(model, item, source, f, set, cfg, &mask)?);
            }
        }
        Ok(out)
    });
    let mut records = Vec::new();
    for r in per_item {
        records.extend(r?);
    }
    let mut curve = RobustnessCurve {
        explainer: source.name().into(),
        fractions: fractions.to_vec(),
        relevant: Vec::new(),
        irrelevant: Vec::new(),
        relevant_censored: Vec::new(),
        irrelevant_censored: Vec::new(),
        n_examples: items.len(),
    };
    for &f in fractions {
        for set in [SetKind::Relevant, SetKind::Irrelevant] {
            let rs: Vec<&RobustnessRecord> = records.iter().filter(|r| r.fraction == f && r.set == set).collect();
            let s = summarize(&rs);
            let (means, cens) = match set {
                SetKind::Relevant => (&mut curve.relevant, &mut curve.relevant_censored),
                _ => (&mut curve.irrelevant, &mut curve.irrelevant_censored),
            };
            means.push(if rs.is_empty() { None } else { s.mean });
            cens.push(s.n_censored);
        }
    }
    Ok((curve, records))
}

pub const RECORDS_HEADER: &str = "example_id,explainer,fraction,set,norm_p,epsilon,success,queries";

pub fn records_csv(records: &[RobustnessRecord]) -> String {
    let mut s = String::from(RECORDS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{},{},{},{}", r.example_id, r.explainer, r.fraction, r.set.name(), r.norm, r.epsilon, r.success, r.queries);
    }
    s
}

pub fn records_jsonl(records: &[RobustnessRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Half-width of the lattice along every on-mask coordinate.
    pub radius: f64,
    /// Lattice points on each side of zero per coordinate.
    pub points_per_side: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridResult {
    /// Smallest flipping lattice norm, if any lattice point flips.
    pub epsilon: Option<f64>,
    /// Lattice spacing.
    pub step: f64,
    /// Distance from any point of the box to its nearest lattice point,
    /// measured in the attack norm.
    pub resolution: f64,
    pub evaluated: usize,
}

pub const GRID_MAX_DIMS: usize = 8;

/// Exhaustive lattice search over on-mask perturbations. A test oracle for
/// [`min_norm_attack`].
pub fn brute_force_epsilon(model: &dyn Classifier, x: &Tensor, y: usize, mask: &FeatureMask, norm: Norm, grid: &GridConfig) -> Result<GridResult> {
    let on = mask_entries(mask, x.shape())?;
    let d = on.len();
    if d == 0 || d > GRID_MAX_DIMS {
        return Err(Error::InvalidArgument(format!("grid search supports 1..={GRID_MAX_DIMS} masked dimensions, got {d}")));
    }
    if grid.points_per_side == 0 || !(grid.radius > 0.0) {
        return Err(Error::InvalidArgument("grid needs a positive radius and at least one point per side".into()));
    }
    let n = grid.points_per_side as i64;
    let side = (2 * n + 1) as usize;
    let total = side.checked_pow(d as u32).filter(|&t| t <= 5_000_000).ok_or_else(|| Error::InvalidArgument("grid too large".into()))?;
    let step = grid.radius / n as f64;
    let coords = |mut k: usize| -> Vec<f64> {
        (0..d)
            .map(|_| {
                let c = (k % side) as i64 - n;
                k /= side;
                c as f64 * step
            })
            .collect()
    };
    let norm_of = |v: &[f64]| match norm {
        Norm::L2 => v.iter().map(|a| a * a).sum::<f64>().sqrt(),
        Norm::Linf => v.iter().fold(0.0f64, |m, a| m.max(a.abs())),
    };
    let mut order: Vec<(f64, usize)> = (0..total).map(|k| (norm_of(&coords(k)), k)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let resolution = match norm {
        Norm::L2 => 0.5 * step * (d as f64).sqrt(),
        Norm::Linf => 0.5 * step,
    };
    let mut evaluated = 0;
    for (nrm, k) in order {
        let mut xp = x.clone();
        for (&i, c) in on.iter().zip(coords(k)) {
            xp.data_mut()[i] += c;
        }
        evaluated += 1;
        if predict_label(&model.logits(&xp)?) != y {
            return Ok(GridResult { epsilon: Some(nrm), step, resolution, evaluated });
        }
    }
    Ok(GridResult { epsilon: None, step, resolution, evaluated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::LinearClassifier;

    fn linear() -> (LinearClassifier, Tensor) {
        (LinearClassifier::binary([1, 2, 1], vec![3.0, 4.0], 0.0).unwrap(), Tensor::new(vec![1, 2, 1], vec![1.0, 1.0]).unwrap())
    }

    fn cfg() -> AttackConfig {
        AttackConfig { tolerance: 1e-4, ..AttackConfig::default() }
    }

    #[test]
    fn linear_closed_forms() {
        let (m, x) = linear();
        for (bits, want) in [(vec![0, 1], 1.4), (vec![0], 7.0 / 3.0), (vec![1], 1.75)] {
            let mask = FeatureMask::from_indices(1, 2, &bits).unwrap();
            let (eps, ok, delta, _) = min_norm_attack(&m, &x, 1, &mask, &cfg(), 0).unwrap();
            assert!(ok);
            assert!((eps - want).abs() <= 2e-4, "{eps} vs {want}");
            assert!((delta.norm(Norm::L2) - eps).abs() <= 1e-12);
            for k in 0..2 {
                if !bits.contains(&k) {
                    assert_eq!(delta.data()[k].to_bits(), 0);
                }
            }
        }
    }

    #[test]
    fn censored_when_out_of_reach() {
        let (m, x) = linear();
        let mask = FeatureMask::from_indices(1, 2, &[0]).unwrap();
        let c = AttackConfig { epsilon_max: 2.0, ..cfg() };
        let (eps, ok, _, _) = min_norm_attack(&m, &x, 1, &mask, &c, 0).unwrap();
        assert_eq!((eps, ok), (2.0, false));
    }

    #[test]
    fn precondition_and_empty_mask() {
        let (m, x) = linear();
        let full = FeatureMask::full(1, 2);
        assert!(matches!(min_norm_attack(&m, &x, 0, &full, &cfg(), 0), Err(Error::Precondition(_))));
        assert!(min_norm_attack(&m, &x, 1, &FeatureMask::empty(1, 2), &cfg(), 0).is_err());
    }

    #[test]
    fn grid_matches_linear_closed_form() {
        let (m, x) = linear();
        let g = GridConfig { radius: 2.0, points_per_side: 40 };
        let r = brute_force_epsilon(&m, &x, 1, &FeatureMask::full(1, 2), Norm::L2, &g).unwrap();
        let eps = r.epsilon.unwrap();
        assert!(eps >= 1.4 && eps <= 1.4 + r.step, "{eps}");
        let dead = LinearClassifier::binary([1, 2, 1], vec![0.0, 4.0], 1.0).unwrap();
        let r = brute_force_epsilon(&dead, &x, 1, &FeatureMask::from_indices(1, 2, &[0]).unwrap(), Norm::L2, &g).unwrap();
        assert_eq!(r.epsilon, None);
    }

    #[test]
    fn summary_mean_skips_censored() {
        let rec = |eps, success| RobustnessRecord {
            example_id: 0,
            explainer: "full".into(),
            fraction: 1.0,
            set: SetKind::Full,
            norm: Norm::L2,
            epsilon: eps,
            success,
            queries: 1,
            delta: None,
        };
        let rs = [rec(1.0, true), rec(3.0, true), rec(20.0, false)];
        let s = summarize(&rs.iter().collect::<Vec<_>>());
        assert_eq!((s.mean, s.n_success, s.n_censored), (Some(2.0), 2, 1));
        let csv = records_csv(&rs[..1]);
        assert_eq!(csv, format!("{RECORDS_HEADER}\n0,full,1,full,2,1,true,1\n"));
    }
}
