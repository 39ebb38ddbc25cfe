//! Reference triplet classifier: convolutional backbone, instrument encoder
//! emitting class activation maps, CAM-conditioned verb and target branches,
//! and a dense triplet decoder.
//!
//! ```text
//! x [H,W,3] -> x - 0.5 -> backbone -> F [C,h,w]
//! F -> 1x1 conv -> CAMs [C_I,h,w] -> GAP -> y_I
//! concat(F, CAMs) -> 1x1 conv -> relu -> GAP -> dense -> y_V   (same for y_T)
//! concat(GAP(F), y_I, y_V, y_T) -> dense -> y_IVT
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::graph::{Conv2dSpec, Graph, Var};
use crate::tensor::Tensor;
use crate::triplet::ComponentCounts;

/// Subtracted from every input value before the backbone.
pub const INPUT_CENTRE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_pad")]
    pub pad: usize,
    /// Optional max-pool window (stride equal to the window) after the relu.
    #[serde(default)]
    pub pool: Option<usize>,
}

fn default_kernel() -> usize {
    3
}
fn default_stride() -> usize {
    2
}
fn default_pad() -> usize {
    1
}

impl ConvBlock {
    pub fn strided(out_channels: usize) -> Self {
        ConvBlock { out_channels, kernel: 3, stride: 2, pad: 1, pool: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub backbone: Vec<ConvBlock>,
    pub counts: ComponentCounts,
    pub n_triplets: usize,
    /// Hidden width of the verb and target branches.
    pub branch_width: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// 64x112 inputs, three stride-2 blocks, 8x14 CAM grid, CholecT45 counts.
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 112,
            channels: 3,
            backbone: vec![ConvBlock::strided(8), ConvBlock::strided(16), ConvBlock::strided(16)],
            counts: ComponentCounts::CHOLECT45,
            n_triplets: 100,
            branch_width: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Backbone output `(channels, height, width)`; also the CAM grid.
    pub fn feature_dims(&self) -> Result<(usize, usize, usize)> {
        let (mut c, mut h, mut w) = (self.channels, self.height, self.width);
        for (k, b) in self.backbone.iter().enumerate() {
            if b.stride == 0 || b.kernel == 0 || h + 2 * b.pad < b.kernel || w + 2 * b.pad < b.kernel {
                return Err(Error::InvalidArgument(format!("backbone block {k} does not fit a {h}x{w} input")));
            }
            h = (h + 2 * b.pad - b.kernel) / b.stride + 1;
            w = (w + 2 * b.pad - b.kernel) / b.stride + 1;
            if let Some(p) = b.pool {
                if p == 0 || h < p || w < p {
                    return Err(Error::InvalidArgument(format!("pool {p} too large after block {k}")));
                }
                h = (h - p) / p + 1;
                w = (w - p) / p + 1;
            }
            c = b.out_channels;
        }
        Ok((c, h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.branch_width == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        let c = self.counts;
        if c.instruments == 0 || c.verbs == 0 || c.targets == 0 || self.n_triplets == 0 {
            return Err(Error::InvalidArgument("component counts must be positive".into()));
        }
        self.feature_dims().map(|_| ())
    }

    /// Stable 64-bit digest of the configuration.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParameters {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ModelParameters { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Parameter groups with separate learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Encoder,
    Decoder,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("backbone") {
            ParamGroup::Backbone
        } else if name.starts_with("encoder") {
            ParamGroup::Encoder
        } else {
            ParamGroup::Decoder
        }
    }
}

/// Which scalar of the output to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Instrument,
    Verb,
    Target,
    Triplet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OutputSelector {
    pub head: Head,
    pub index: usize,
}

impl OutputSelector {
    pub fn triplet(m: usize) -> Self {
        OutputSelector { head: Head::Triplet, index: m }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Feed zeros instead of the CAMs into the verb and target branches.
    pub zero_cam_branch: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub y_i: Vec<f64>,
    pub y_v: Vec<f64>,
    pub y_t: Vec<f64>,
    pub y_ivt: Vec<f64>,
    /// Channel-first `[C_I, h, w]`.
    pub cams: Tensor,
    /// Final backbone features, channel-first `[C, h, w]`.
    pub features: Tensor,
}

/// Graph handles for the outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    pub y_i: Var,
    pub y_v: Var,
    pub y_t: Var,
    pub y_ivt: Var,
    pub cams: Var,
    pub features: Var,
}

pub type ParamVars = BTreeMap<String, Var>;

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceModel {
    config: ModelConfig,
    params: ModelParameters,
}

impl ReferenceModel {
    /// Fresh parameters: uniform fan-in scaled weights, zero biases.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tensors = BTreeMap::new();
        let mut conv = |name: &str, co: usize, ci: usize, k: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / (ci * k * k) as f64).sqrt();
            let w = (0..co * ci * k * k).map(|_| rng.random_range(-bound..bound)).collect();
            tensors.insert(format!("{name}.weight"), Tensor::new(vec![co, ci, k, k], w).expect("shape"));
            tensors.insert(format!("{name}.bias"), Tensor::zeros(&[co]));
        };
        let mut ci = config.channels;
        for (k, b) in config.backbone.iter().enumerate() {
            conv(&format!("backbone.{k}"), b.out_channels, ci, b.kernel, &mut rng);
            ci = b.out_channels;
        }
        let c = config.counts;
        let bw = config.branch_width;
        conv("encoder.cam", c.instruments, ci, 1, &mut rng);
        conv("encoder.verb.conv", bw, ci + c.instruments, 1, &mut rng);
        conv("encoder.target.conv", bw, ci + c.instruments, 1, &mut rng);
        let mut dense = |name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng| {
            let bound = (3.0 / inp as f64).sqrt();
            let w = (0..out * inp).map(|_| rng.random_range(-bound..bound)).collect();
            tensors.insert(format!("{name}.weight"), Tensor::new(vec![out, inp], w).expect("shape"));
            tensors.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
        };
        dense("encoder.verb.fc", c.verbs, bw, &mut rng);
        dense("encoder.target.fc", c.targets, bw, &mut rng);
        dense("decoder", config.n_triplets, ci + c.instruments + c.verbs + c.targets, &mut rng);
        Ok(ReferenceModel { config, params: ModelParameters { tensors } })
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_parts(config: ModelConfig, params: ModelParameters) -> Result<Self> {
        let template = Self::init(config.clone())?;
        let same_layout = template.params.tensors.len() == params.tensors.len()
            && template
                .params
                .tensors
                .iter()
                .all(|(k, t)| params.tensors.get(k).is_some_and(|p| p.shape() == t.shape()));
        if !same_layout {
            return Err(Error::Checkpoint("parameter names or shapes do not match the model config".into()));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite { op: "parameters".into() });
        }
        Ok(ReferenceModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParameters {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParameters {
        self.params
    }

    /// Adds every parameter to `g` as a leaf.
    pub fn insert_params(&self, g: &mut Graph, requires_grad: bool) -> Result<ParamVars> {
        self.params.tensors.iter().map(|(k, t)| Ok((k.clone(), g.leaf(t.clone(), requires_grad)?))).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [self.config.height, self.config.width, self.config.channels];
        if x.shape() != want {
            return Err(Error::shape("model input", format!("expected {want:?}, got {:?}", x.shape())));
        }
        Ok(())
    }

    /// Records the forward pass on `g`. `x` must be an `[H, W, C]` node.
    pub fn build(&self, g: &mut Graph, x: Var, p: &ParamVars, opts: ForwardOptions) -> Result<OutputVars> {
        let pv = |name: &str| p.get(name).copied().ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")));
        let mut h = g.hwc_to_chw(x)?;
        let shape = g.value(h)?.shape().to_vec();
        let centre = g.constant(Tensor::full(&shape, -INPUT_CENTRE))?;
        h = g.add(h, centre)?;
        for (k, b) in self.config.backbone.iter().enumerate() {
            let w = pv(&format!("backbone.{k}.weight"))?;
            let bias = pv(&format!("backbone.{k}.bias"))?;
            h = g.conv2d(h, w, bias, Conv2dSpec { stride: b.stride, pad: b.pad })?;
            h = g.relu(h)?;
            if let Some(pool) = b.pool {
                h = g.max_pool2d(h, pool, pool)?;
            }
        }
        let features = h;
        let unit = Conv2dSpec { stride: 1, pad: 0 };
        let cams = g.conv2d(features, pv("encoder.cam.weight")?, pv("encoder.cam.bias")?, unit)?;
        let y_i = g.global_avg_pool(cams)?;
        let cam_in = if opts.zero_cam_branch {
            let shape = g.value(cams)?.shape().to_vec();
            g.constant(Tensor::zeros(&shape))?
        } else {
            cams
        };
        let joint = g.concat(&[features, cam_in])?;
        let branch = |g: &mut Graph, name: &str| -> Result<Var> {
            let hid = g.conv2d(joint, pv(&format!("{name}.conv.weight"))?, pv(&format!("{name}.conv.bias"))?, unit)?;
            let hid = g.relu(hid)?;
            let pooled = g.global_avg_pool(hid)?;
            g.dense(pooled, pv(&format!("{name}.fc.weight"))?, pv(&format!("{name}.fc.bias"))?)
        };
        let y_v = branch(g, "encoder.verb")?;
        let y_t = branch(g, "encoder.target")?;
        let pooled = g.global_avg_pool(features)?;
        let dec_in = g.concat(&[pooled, y_i, y_v, y_t])?;
        let y_ivt = g.dense(dec_in, pv("decoder.weight")?, pv("decoder.bias")?)?;
        Ok(OutputVars { y_i, y_v, y_t, y_ivt, cams, features })
    }

    fn collect(g: &Graph, o: &OutputVars) -> Result<ModelOutput> {
        Ok(ModelOutput {
            y_i: g.value(o.y_i)?.data().to_vec(),
            y_v: g.value(o.y_v)?.data().to_vec(),
            y_t: g.value(o.y_t)?.data().to_vec(),
            y_ivt: g.value(o.y_ivt)?.data().to_vec(),
            cams: g.value(o.cams)?.clone(),
            features: g.value(o.features)?.clone(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<ModelOutput> {
        self.forward_with(x, ForwardOptions::default())
    }

    pub fn forward_with(&self, x: &Tensor, opts: ForwardOptions) -> Result<ModelOutput> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let p = self.insert_params(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let o = self.build(&mut g, xv, &p, opts)?;
        Self::collect(&g, &o)
    }

    /// Gradient of the selected output scalar with respect to the image.
    pub fn grad_wrt_input(&self, x: &Tensor, sel: OutputSelector) -> Result<Tensor> {
        self.check_input(x)?;
        let c = self.config.counts;
        let len = match sel.head {
            Head::Instrument => c.instruments,
            Head::Verb => c.verbs,
            Head::Target => c.targets,
            Head::Triplet => self.config.n_triplets,
        };
        if sel.index >= len {
            return Err(Error::OutOfRange { what: "output selector", index: sel.index, len });
        }
        let mut g = Graph::new();
        let p = self.insert_params(&mut g, false)?;
        let xv = g.leaf(x.clone(), true)?;
        let o = self.build(&mut g, xv, &p, ForwardOptions::default())?;
        let head = match sel.head {
            Head::Instrument => o.y_i,
            Head::Verb => o.y_v,
            Head::Target => o.y_t,
            Head::Triplet => o.y_ivt,
        };
        let s = g.index(head, sel.index)?;
        let mut grads = g.backward(s)?;
        grads.take(xv).ok_or_else(|| Error::NonFinite { op: "input gradient".into() })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = encode_checkpoint(&self.config, &self.params)?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint together with the config stored inside it.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (config, params) = decode_checkpoint(&bytes)?;
        Self::from_parts(config, params)
    }

    /// Loads a checkpoint and requires it to have been written for `config`.
    pub fn load_checkpoint_for(path: &Path, config: &ModelConfig) -> Result<Self> {
        let model = Self::load_checkpoint(path)?;
        if model.config.hash() != config.hash() {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {:016x}, expected {:016x}",
                model.config.hash(),
                config.hash()
            )));
        }
        Ok(model)
    }
}

impl Classifier for ReferenceModel {
    fn input_shape(&self) -> [usize; 3] {
        [self.config.height, self.config.width, self.config.channels]
    }

    fn n_classes(&self) -> usize {
        self.config.n_triplets
    }

    fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.y_ivt)
    }

    fn logits_and_grad(&self, x: &Tensor, coeffs: &dyn Fn(&[f64]) -> Vec<f64>) -> Result<(Vec<f64>, Tensor)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let p = self.insert_params(&mut g, false)?;
        let xv = g.leaf(x.clone(), true)?;
        let o = self.build(&mut g, xv, &p, ForwardOptions::default())?;
        let logits = g.value(o.y_ivt)?.data().to_vec();
        let c = coeffs(&logits);
        let mut grads = g.backward_with_seed(o.y_ivt, Tensor::from_vec(c))?;
        let gx = grads.take(xv).ok_or_else(|| Error::NonFinite { op: "input gradient".into() })?;
        Ok((logits, gx))
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IVTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Layout (little-endian): magic, version u32, config hash u64, config JSON
/// (u32 length + bytes), tensor count u32, then per tensor name (u16 length +
/// bytes), rank u8, dims u32 each and f64 values; CRC32 of everything before
/// it as the trailer.
pub fn encode_checkpoint(config: &ModelConfig, params: &ModelParameters) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&config.hash().to_le_bytes());
    let json = serde_json::to_vec(config)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParameters)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 {
        return Err(Error::Checkpoint("checksum error: file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum error: CRC32 mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("version mismatch: file {version}, supported {CHECKPOINT_VERSION}")));
    }
    let hash = r.u64()?;
    let json_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(json_len)?)?;
    if config.hash() != hash {
        return Err(Error::Checkpoint("config hash does not match embedded config".into()));
    }
    let n = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor directory".into()));
    }
    Ok((config, ModelParameters { tensors }))
}
