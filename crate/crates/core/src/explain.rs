//! Attribution methods and top-fraction feature selection.
//!
//! A feature is a pixel location; its three channels always move together.
//! Grad and IG produce per-channel values that are reduced to one
//! nonnegative score per pixel by [`Aggregation`].

use std::io::{Read, Write};
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::classifier::{one_hot, Classifier};
use crate::error::{Error, Result};
use crate::mask::{FeatureMask, Provenance};
use crate::model::{ModelOutput, ReferenceModel};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    SumAbs,
    MaxAbs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Grad,
    Ig,
    Cam,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Grad => "grad",
            Method::Ig => "ig",
            Method::Cam => "cam",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "grad" => Ok(Method::Grad),
            "ig" => Ok(Method::Ig),
            "cam" => Ok(Method::Cam),
            other => Err(Error::InvalidArgument(format!("unknown attribution method {other:?}"))),
        }
    }
}

/// Nonnegative per-pixel scores, row-major `height x width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub method: Method,
    pub class: usize,
    /// IG baseline description.
    pub baseline: Option<String>,
}

impl AttributionMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Reduces an `[H, W, C]` tensor to `H x W` scores.
pub fn aggregate_channels(t: &Tensor, agg: Aggregation) -> Result<Vec<f64>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::shape("aggregate_channels", format!("{s:?}")));
    }
    let c = s[2];
    Ok(t.data()
        .chunks(c)
        .map(|px| match agg {
            Aggregation::SumAbs => px.iter().map(|v| v.abs()).sum(),
            Aggregation::MaxAbs => px.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        })
        .collect())
}

fn check_class(model: &dyn Classifier, m: usize) -> Result<()> {
    if m >= model.n_classes() {
        return Err(Error::OutOfRange { what: "class", index: m, len: model.n_classes() });
    }
    Ok(())
}

/// `|d logit_m / dx|` aggregated over channels.
pub fn grad_saliency(model: &dyn Classifier, x: &Tensor, m: usize, agg: Aggregation) -> Result<AttributionMap> {
    check_class(model, m)?;
    let g = model.class_gradient(x, m)?;
    if !g.is_finite() {
        return Err(Error::NonFinite { op: "grad_saliency".into() });
    }
    let [h, w, _] = model.input_shape();
    Ok(AttributionMap { height: h, width: w, values: aggregate_channels(&g, agg)?, method: Method::Grad, class: m, baseline: None })
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgResult {
    pub map: AttributionMap,
    /// Signed per-channel attributions, `[H, W, C]`.
    pub raw: Tensor,
    /// `f(x) - f(baseline)` for class `m`.
    pub delta_f: f64,
}

impl IgResult {
    /// `|sum IG - (f(x) - f(x'))|`.
    pub fn completeness_residual(&self) -> f64 {
        (self.raw.data().iter().sum::<f64>() - self.delta_f).abs()
    }
}

/// Integrated gradients along the straight path from `baseline` to `x`,
/// trapezoid rule over `steps` intervals (`steps + 1` gradient evaluations).
/// Path points are evaluated in parallel and summed in path order.
pub fn integrated_gradients(model: &dyn Classifier, x: &Tensor, baseline: &Tensor, m: usize, steps: usize, agg: Aggregation) -> Result<IgResult> {
    check_class(model, m)?;
    if steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients needs at least one step".into()));
    }
    if x.shape() != baseline.shape() {
        return Err(Error::shape("integrated_gradients", format!("input {:?} vs baseline {:?}", x.shape(), baseline.shape())));
    }
    let diff = x.add(&baseline.scaled(-1.0))?;
    let n = model.n_classes();
    let grads = par::map_range(steps + 1, |s| {
        let alpha = s as f64 / steps as f64;
        let mut point = baseline.clone();
        point.axpy(alpha, &diff)?;
        let (_, g) = model.logits_and_grad(&point, &|_| one_hot(n, m))?;
        Ok::<_, Error>(g)
    });
    let mut total = Tensor::zeros(x.shape());
    for (s, g) in grads.into_iter().enumerate() {
        let w = if s == 0 || s == steps { 0.5 } else { 1.0 };
        total.axpy(w, &g?)?;
    }
    let raw = Tensor::new(
        x.shape().to_vec(),
        total.data().iter().zip(diff.data()).map(|(g, d)| d * g / steps as f64).collect(),
    )?;
    if !raw.is_finite() {
        return Err(Error::NonFinite { op: "integrated_gradients".into() });
    }
    let delta_f = model.logits(x)?[m] - model.logits(baseline)?[m];
    let [h, w, _] = model.input_shape();
    let base = if baseline.data().iter().all(|&v| v == 0.0) { "black".to_string() } else { "custom".to_string() };
    let map = AttributionMap { height: h, width: w, values: aggregate_channels(&raw, agg)?, method: Method::Ig, class: m, baseline: Some(base) };
    Ok(IgResult { map, raw, delta_f })
}

/// How an explainer is run by the robustness harness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub ig_steps: usize,
    pub aggregation: Aggregation,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig { ig_steps: 32, aggregation: Aggregation::SumAbs }
    }
}

/// Grad or IG (black baseline) attribution for class `m`.
pub fn attribute(model: &dyn Classifier, x: &Tensor, m: usize, method: Method, cfg: &ExplainConfig) -> Result<AttributionMap> {
    match method {
        Method::Grad => grad_saliency(model, x, m, cfg.aggregation),
        Method::Ig => Ok(integrated_gradients(model, x, &Tensor::zeros(x.shape()), m, cfg.ig_steps, cfg.aggregation)?.map),
        Method::Cam => Err(Error::InvalidArgument("CAM is not a per-class input attribution; use cam_heatmap".into())),
    }
}

/// Bilinear resize of a row-major `h x w` grid using pixel-centre alignment.
pub fn bilinear_upsample(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |o: usize, n_out: usize, n_in: usize| {
        let c = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, c - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let (r0, r1, fr) = coord(r, out_h, h);
        for c in 0..out_w {
            let (c0, c1, fc) = coord(c, out_w, w);
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bot = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    out
}

/// Rescales to `[0, 1]`; an all-equal input maps to zeros.
pub fn min_max_normalize(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    v.iter_mut().for_each(|x| *x = (*x - lo) / (hi - lo));
}

/// `sum_k weights[k] * features[k]` over `[C, h, w]` features, upsampled to
/// `out_h x out_w` and min-max normalised.
pub fn class_activation_map(features: &Tensor, weights: &[f64], out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    let s = features.shape();
    if s.len() != 3 || s[0] != weights.len() {
        return Err(Error::shape("class_activation_map", format!("features {s:?}, {} weights", weights.len())));
    }
    let (h, w) = (s[1], s[2]);
    let mut cam = vec![0.0; h * w];
    for (k, wk) in weights.iter().enumerate() {
        for (o, f) in cam.iter_mut().zip(&features.data()[k * h * w..(k + 1) * h * w]) {
            *o += wk * f;
        }
    }
    let mut up = bilinear_upsample(&cam, h, w, out_h, out_w);
    min_max_normalize(&mut up);
    Ok(up)
}

/// CAM heatmap for instrument class `class` from a forward pass.
pub fn cam_heatmap(model: &ReferenceModel, out: &ModelOutput, class: usize) -> Result<AttributionMap> {
    let w = model.params().get("encoder.cam.weight").ok_or_else(|| Error::Checkpoint("missing encoder.cam.weight".into()))?;
    let (n, c) = (w.shape()[0], w.shape()[1]);
    if class >= n {
        return Err(Error::OutOfRange { what: "instrument class", index: class, len: n });
    }
    let cfg = model.config();
    let values = class_activation_map(&out.features, &w.data()[class * c..(class + 1) * c], cfg.height, cfg.width)?;
    Ok(AttributionMap { height: cfg.height, width: cfg.width, values, method: Method::Cam, class, baseline: None })
}

fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Blends a `[0, 1]` heatmap over an `[H, W, 3]` image.
pub fn overlay(image: &Tensor, heat: &[f64], alpha: f64) -> Result<RgbImage> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 || heat.len() != s[0] * s[1] {
        return Err(Error::shape("overlay", format!("image {s:?}, {} heat values", heat.len())));
    }
    let mut img = RgbImage::new(s[1] as u32, s[0] as u32);
    for (k, px) in img.pixels_mut().enumerate() {
        let hc = heat_color(heat[k]);
        let mut out = [0u8; 3];
        for ch in 0..3 {
            let v = (1.0 - alpha) * image.data()[k * 3 + ch] + alpha * hc[ch];
            out[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        *px = Rgb(out);
    }
    Ok(img)
}

pub fn save_overlay(image: &Tensor, heat: &[f64], alpha: f64, path: &Path) -> Result<()> {
    overlay(image, heat, alpha)?.save(path)?;
    Ok(())
}

/// Selects the `round(p * H * W)` highest-scoring pixels (ties by ascending
/// row-major index) and returns the selection with its complement.
pub fn top_fraction_mask(attr: &AttributionMap, p: f64) -> Result<(FeatureMask, FeatureMask)> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction must lie in (0, 1], got {p}")));
    }
    if attr.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "top_fraction_mask".into() });
    }
    let n = attr.height * attr.width;
    let k = (p * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| attr.values[b].total_cmp(&attr.values[a]).then(a.cmp(&b)));
    let mut top = FeatureMask::from_indices(attr.height, attr.width, &order[..k])?;
    top.fraction = Some(p);
    top.provenance = Some(Provenance { method: attr.method.name().into(), class: attr.class, rule: "top".into() });
    let rest = top.complement();
    Ok((top, rest))
}

const DUMP_MAGIC: &[u8; 8] = b"IVTATTR\0";

/// Writes `attr` as a header (magic, H, W, class, method name) followed by
/// `H * W` little-endian f32 values.
pub fn write_attribution(attr: &AttributionMap, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + 4 * attr.values.len());
    buf.extend_from_slice(DUMP_MAGIC);
    for v in [attr.height as u32, attr.width as u32, attr.class as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let name = attr.method.name().as_bytes();
    buf.push(name.len() as u8);
    buf.extend_from_slice(name);
    for v in &attr.values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_attribution(path: &Path) -> Result<AttributionMap> {
    let mut buf = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse { path: path.display().to_string(), line: 0, msg: msg.into() };
    if buf.len() < 21 || &buf[..8] != DUMP_MAGIC {
        return Err(bad("not an attribution dump"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (h, w, class) = (u32_at(8), u32_at(12), u32_at(16));
    let name_len = buf[20] as usize;
    let start = 21 + name_len;
    if buf.len() != start + 4 * h * w {
        return Err(bad("truncated attribution dump"));
    }
    let method = std::str::from_utf8(&buf[21..start]).map_err(|_| bad("bad method name"))?.parse()?;
    let values = buf[start..].chunks(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Ok(AttributionMap { height: h, width: w, values, method, class, baseline: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::LinearClassifier;

    fn map(h: usize, w: usize, values: Vec<f64>) -> AttributionMap {
        AttributionMap { height: h, width: w, values, method: Method::Grad, class: 0, baseline: None }
    }

    #[test]
    fn top_fraction_examples() {
        let a = map(2, 2, vec![4.0, 3.0, 2.0, 1.0]);
        assert_eq!(top_fraction_mask(&a, 0.25).unwrap().0.indices(), vec![0]);
        assert_eq!(top_fraction_mask(&a, 0.5).unwrap().0.indices(), vec![0, 1]);
        let flat = map(2, 2, vec![1.0; 4]);
        let (top, rest) = top_fraction_mask(&flat, 0.25).unwrap();
        assert_eq!(top.indices(), vec![0]);
        assert_eq!(rest.indices(), vec![1, 2, 3]);
        assert_eq!(rest.provenance.unwrap().rule, "complement");
        assert!(top_fraction_mask(&a, 0.0).is_err());
        assert!(top_fraction_mask(&a, 1.5).is_err());
    }

    #[test]
    fn linear_grad_is_constant_field() {
        // per pixel f = 1*r - 2*g + 0.5*b
        let w: Vec<f64> = (0..12).map(|k| [1.0, -2.0, 0.5][k % 3]).collect();
        let model = LinearClassifier::binary([2, 2, 3], w, 0.0).unwrap();
        let x = Tensor::full(&[2, 2, 3], 0.3);
        let g = grad_saliency(&model, &x, 1, Aggregation::SumAbs).unwrap();
        assert_eq!(g.values, vec![3.5; 4]);
        let g = grad_saliency(&model, &x, 1, Aggregation::MaxAbs).unwrap();
        assert_eq!(g.values, vec![2.0; 4]);
    }

    #[test]
    fn linear_ig_is_exact() {
        let w = vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0];
        let model = LinearClassifier::binary([1, 2, 3], w.clone(), 0.7).unwrap();
        let x = Tensor::new(vec![1, 2, 3], vec![0.2, 0.4, 0.6, 0.8, 1.0, 0.1]).unwrap();
        for steps in [1, 3] {
            let ig = integrated_gradients(&model, &x, &Tensor::zeros(&[1, 2, 3]), 1, steps, Aggregation::SumAbs).unwrap();
            for (k, v) in ig.raw.data().iter().enumerate() {
                assert!((v - w[k] * x.data()[k]).abs() < 1e-12);
            }
            assert!(ig.completeness_residual() < 1e-12);
        }
        let same = integrated_gradients(&model, &x, &x, 1, 4, Aggregation::SumAbs).unwrap();
        assert!(same.raw.data().iter().all(|&v| v == 0.0));
        assert!(integrated_gradients(&model, &x, &x, 1, 0, Aggregation::SumAbs).is_err());
    }

    #[test]
    fn cam_of_one_hot_weight_is_that_map() {
        let f = Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, 5.0, 5.0]).unwrap();
        assert_eq!(class_activation_map(&f, &[1.0, 0.0], 1, 2).unwrap(), vec![0.0, 1.0]);
        assert_eq!(class_activation_map(&f, &[0.0, 1.0], 1, 2).unwrap(), vec![0.0, 0.0]);
        assert!(class_activation_map(&f, &[1.0], 1, 2).is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let src = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(bilinear_upsample(&src, 2, 2, 2, 2), src);
        assert!(bilinear_upsample(&[2.5; 6], 2, 3, 7, 9).iter().all(|&v| v == 2.5));
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = AttributionMap { height: 2, width: 3, values: vec![0.0, 0.5, 1.0, 2.0, 4.0, 8.0], method: Method::Ig, class: 7, baseline: None };
        let p = dir.path().join("a.attr");
        write_attribution(&a, &p).unwrap();
        assert_eq!(read_attribution(&p).unwrap(), a);
    }
}
