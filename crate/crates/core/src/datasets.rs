//! Synthetic triplet scenes, a frames-directory loader and fold splitting.
//!
//! Synthetic scenes carry ground truth for attribution studies: the
//! instrument glyph (whose stripe texture encodes the verb) and the target
//! glyph are core attributes; a background texture patch whose identity
//! co-occurs with the triplet class at rate `rho` is the spurious attribute.
//!
//! On-disk layout shared by [`save_frames_dir`] and [`load_frames_dir`]:
//!
//! ```text
//! root/VIDxx/frames/%06d.png     8-bit RGB frames
//! root/VIDxx/masks/%06d.png      optional; red = core, green = spurious
//! root/labels/VIDxx.csv          frame_id,b0,...,b{C-1}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::FeatureMask;
use crate::par;
use crate::tensor::Tensor;
use crate::triplet::{ComponentCounts, TripletTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GlyphShape {
    Square,
    Disc,
    Diamond,
    Cross,
    Ring,
    Triangle,
}

impl GlyphShape {
    pub const ALL: [GlyphShape; 6] =
        [GlyphShape::Square, GlyphShape::Disc, GlyphShape::Diamond, GlyphShape::Cross, GlyphShape::Ring, GlyphShape::Triangle];

    /// Whether pixel `(r, c)` of a `size x size` cell belongs to the shape.
    pub fn covers(self, r: usize, c: usize, size: usize) -> bool {
        let half = size as f64 / 2.0;
        let dy = r as f64 + 0.5 - half;
        let dx = c as f64 + 0.5 - half;
        match self {
            GlyphShape::Square => true,
            GlyphShape::Disc => dx * dx + dy * dy <= half * half,
            GlyphShape::Diamond => dx.abs() + dy.abs() <= half,
            GlyphShape::Cross => dx.abs() <= size as f64 / 5.0 || dy.abs() <= size as f64 / 5.0,
            GlyphShape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= half * half && d2 >= (half * 0.45) * (half * 0.45)
            }
            GlyphShape::Triangle => dx.abs() <= (r as f64 + 1.0) / 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GlyphRole {
    Instrument,
    Target,
}

/// Geometry of one glyph; enough to regenerate its exact pixel set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Glyph {
    pub role: GlyphRole,
    pub class: usize,
    pub shape: GlyphShape,
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl Glyph {
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.size).flat_map(move |r| {
            (0..self.size).filter(move |&c| self.shape.covers(r, c, self.size)).map(move |c| (self.top + r, self.left + c))
        })
    }

    pub fn mask(&self, height: usize, width: usize) -> FeatureMask {
        let mut m = FeatureMask::empty(height, width);
        for (r, c) in self.pixels() {
            m.set(r, c, true);
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect, gap: usize) -> bool {
        self.top < o.top + o.height + gap
            && o.top < self.top + self.height + gap
            && self.left < o.left + o.width + gap
            && o.left < self.left + self.width + gap
    }
}

/// Ground truth recorded for each synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub glyphs: Vec<Glyph>,
    pub texture_id: usize,
    /// Whether the texture was chosen from the triplet class (probability
    /// `rho`) rather than uniformly at random.
    pub texture_correlated: bool,
    pub texture_rect: Rect,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Position in the owning dataset.
    pub id: usize,
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Binary, one entry per triplet class.
    pub labels: Vec<u8>,
    pub video_id: String,
    pub frame_id: u32,
    pub core_mask: Option<FeatureMask>,
    pub spurious_mask: Option<FeatureMask>,
    /// Every pixel exactly zero; such frames are never attacked.
    pub blacked_out: bool,
    pub scene: Option<SceneInfo>,
}

impl Example {
    pub fn positives(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l != 0).map(|(m, _)| m).collect()
    }

    /// The label when exactly one triplet is present.
    pub fn single_label(&self) -> Option<usize> {
        match self.positives().as_slice() {
            [m] => Some(*m),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub table: TripletTable,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn video_ids(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.video_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Examples whose video is in `videos`, in dataset order.
    pub fn select_videos(&self, videos: &[String]) -> Vec<&Example> {
        let set: BTreeSet<&String> = videos.iter().collect();
        self.examples.iter().filter(|e| set.contains(&e.video_id)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub counts: ComponentCounts,
    pub n_triplets: usize,
    /// Side of the instrument and target glyph cells, in pixels.
    pub glyph_size: usize,
    /// Side of the spurious texture patch, in pixels.
    pub texture_size: usize,
    /// Blend of the texture colour over the background, in `[0, 1]`.
    pub texture_contrast: f64,
    /// Probability that the texture identity is the triplet class.
    pub rho: f64,
    /// Uniform pixel noise amplitude.
    pub noise: f64,
    /// Probability of a second instrument/target pair (multi-label frame).
    pub multi_label_rate: f64,
    /// Probability of a frame with no triplet.
    pub background_rate: f64,
    /// Probability of an all-black frame.
    pub blackout_rate: f64,
    pub n_videos: usize,
    pub seed: u64,
    /// Seed of the random triplet table; kept apart from `seed` so datasets
    /// drawn with different seeds share one label space.
    pub table_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            height: 64,
            width: 112,
            counts: ComponentCounts::CHOLECT45,
            n_triplets: 100,
            glyph_size: 16,
            texture_size: 10,
            texture_contrast: 0.5,
            rho: 0.8,
            noise: 0.05,
            multi_label_rate: 0.1,
            background_rate: 0.0,
            blackout_rate: 0.0,
            n_videos: 10,
            seed: 0,
            table_seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        for (name, p) in [
            ("multi_label_rate", self.multi_label_rate),
            ("background_rate", self.background_rate),
            ("blackout_rate", self.blackout_rate),
            ("texture_contrast", self.texture_contrast),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.glyph_size < 3 || self.texture_size < 2 || self.n_videos == 0 {
            return Err(Error::InvalidArgument("glyph/texture sizes or video count too small".into()));
        }
        if self.glyph_size >= self.height || self.glyph_size >= self.width {
            return Err(Error::InvalidArgument("glyphs do not fit the image".into()));
        }
        Ok(())
    }

    pub fn table(&self) -> Result<TripletTable> {
        TripletTable::random(self.counts, self.n_triplets, self.table_seed)
    }
}

const INSTRUMENT_COLORS: [[f64; 3]; 8] = [
    [0.95, 0.95, 0.95],
    [0.15, 0.75, 0.95],
    [0.95, 0.85, 0.10],
    [0.20, 0.25, 0.95],
    [0.85, 0.30, 0.95],
    [0.20, 0.95, 0.35],
    [0.55, 0.55, 0.60],
    [0.05, 0.45, 0.45],
];

const TARGET_COLORS: [[f64; 3]; 4] = [[0.45, 0.05, 0.05], [0.80, 0.55, 0.35], [0.35, 0.20, 0.05], [0.95, 0.50, 0.50]];

const TEXTURE_COLORS: [[f64; 3]; 12] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
    [0.0, 0.5, 0.2],
    [0.6, 0.6, 0.0],
    [0.2, 0.2, 0.2],
    [1.0, 1.0, 1.0],
];

const BACKGROUND: [f64; 3] = [0.55, 0.28, 0.26];

fn texture_on(id: usize, r: usize, c: usize) -> bool {
    match (id / TEXTURE_COLORS.len()) % 9 {
        0 => true,
        1 => (r + c).is_multiple_of(2),
        2 => (r / 2 + c / 2).is_multiple_of(2),
        3 => r.is_multiple_of(2),
        4 => c.is_multiple_of(2),
        5 => (r / 2).is_multiple_of(2),
        6 => (c / 2).is_multiple_of(2),
        7 => (r + c).is_multiple_of(3),
        _ => r % 3 == 1 && c % 3 == 1,
    }
}

/// Stripe pattern of verb `v` at pixel `(r, c)` of the glyph cell.
fn verb_stripe(v: usize, r: usize, c: usize, size: usize) -> bool {
    let period = 1 + (v / 4) % 3;
    let coord = match v % 4 {
        0 => r,
        1 => c,
        2 => r + c,
        _ => r + size - c,
    };
    (coord / period).is_multiple_of(2)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Canvas {
    w: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn set(&mut self, r: usize, c: usize, rgb: [f64; 3]) {
        let o = (r * self.w + c) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }
}

/// Uniform choice among all positions that keep a one-pixel gap to `taken`.
fn place(rng: &mut ChaCha8Rng, taken: &[Rect], h: usize, w: usize, side: usize) -> Option<Rect> {
    let mut free = Vec::new();
    for top in 0..=h - side {
        for left in 0..=w - side {
            let rect = Rect { top, left, height: side, width: side };
            if taken.iter().all(|t| !t.overlaps(&rect, 1)) {
                free.push(rect);
            }
        }
    }
    (!free.is_empty()).then(|| free[rng.random_range(0..free.len())])
}

/// Places squares of the given sides without overlap, restarting the whole
/// layout when an earlier choice leaves no room.
fn layout(rng: &mut ChaCha8Rng, h: usize, w: usize, sides: &[usize]) -> Result<Vec<Rect>> {
    if sides.iter().any(|&s| s > h || s > w) {
        return Err(Error::InvalidArgument(format!("item larger than the {h}x{w} scene")));
    }
    'attempt: for _ in 0..100 {
        let mut taken = Vec::with_capacity(sides.len());
        for &side in sides {
            match place(rng, &taken, h, w, side) {
                Some(r) => taken.push(r),
                None => continue 'attempt,
            }
        }
        return Ok(taken);
    }
    Err(Error::InvalidArgument(format!("cannot lay out {} items in a {h}x{w} scene", sides.len())))
}

/// Generates `n` synthetic scenes. Deterministic per `cfg.seed`; each scene
/// uses its own random stream so generation runs in parallel.
pub fn generate_synthetic(cfg: &SyntheticConfig, n: usize) -> Result<Dataset> {
    cfg.validate()?;
    let table = cfg.table()?;
    // Exactly round(rho * n) scenes draw a class-correlated texture.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de));
    let n_corr = (cfg.rho * n as f64).round() as usize;
    let mut correlated = vec![false; n];
    for &k in &order[..n_corr] {
        correlated[k] = true;
    }
    let examples = par::map_range(n, |k| generate_scene(cfg, &table, k, n, correlated[k]));
    let examples = examples.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Dataset { table, examples })
}

fn generate_scene(cfg: &SyntheticConfig, table: &TripletTable, k: usize, n: usize, correlated: bool) -> Result<Example> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(k as u64 + 1);
    let video = (k * cfg.n_videos) / n.max(1);
    let first_in_video = (video * n).div_ceil(cfg.n_videos);
    let video_id = format!("VID{:02}", video + 1);
    let frame_id = (k - first_in_video) as u32;
    let n_trip = table.n_triplets();

    let roll: f64 = rng.random();
    if roll < cfg.blackout_rate {
        return Ok(Example {
            id: k,
            image: Tensor::zeros(&[h, w, 3]),
            labels: vec![0; n_trip],
            video_id,
            frame_id,
            core_mask: None,
            spurious_mask: None,
            blacked_out: true,
            scene: None,
        });
    }
    let background_only = roll < cfg.blackout_rate + cfg.background_rate;

    let mut canvas = Canvas { w, data: vec![0.0; h * w * 3] };
    for r in 0..h {
        for c in 0..w {
            let mut px = BACKGROUND;
            for v in px.iter_mut() {
                *v += cfg.noise * rng.random_range(-1.0..=1.0);
            }
            canvas.set(r, c, px);
        }
    }

    let mut labels = vec![0u8; n_trip];
    let mut glyphs = Vec::new();
    let mut triplets = Vec::new();
    if !background_only {
        let m = rng.random_range(0..n_trip);
        triplets.push(m);
        if rng.random::<f64>() < cfg.multi_label_rate && n_trip > 1 {
            let mut m2 = rng.random_range(0..n_trip - 1);
            if m2 >= m {
                m2 += 1;
            }
            triplets.push(m2);
        }
    }
    let gs = cfg.glyph_size;
    let ts = cfg.texture_size;
    let mut sides = vec![gs; 2 * triplets.len()];
    sides.push(ts);
    let rects = layout(&mut rng, h, w, &sides)?;
    for (k, &m) in triplets.iter().enumerate() {
        labels[m] = 1;
        let (i, v, t) = table.rows()[m];
        let rect = rects[2 * k];
        let inst = Glyph { role: GlyphRole::Instrument, class: i, shape: GlyphShape::ALL[i % 6], top: rect.top, left: rect.left, size: gs };
        let color = INSTRUMENT_COLORS[i % INSTRUMENT_COLORS.len()];
        let dim = if i / INSTRUMENT_COLORS.len() % 2 == 1 { 0.7 } else { 1.0 };
        for (r, c) in inst.pixels() {
            let stripe = verb_stripe(v, r - inst.top, c - inst.left, gs);
            let k = dim * if stripe { 1.0 } else { 0.45 };
            canvas.set(r, c, color.map(|x| x * k));
        }
        glyphs.push(inst);

        let rect = rects[2 * k + 1];
        let tgt = Glyph { role: GlyphRole::Target, class: t, shape: GlyphShape::ALL[t % 6], top: rect.top, left: rect.left, size: gs };
        let color = TARGET_COLORS[t % TARGET_COLORS.len()];
        for (r, c) in tgt.pixels() {
            canvas.set(r, c, color);
        }
        glyphs.push(tgt);
    }

    let texture_id = match triplets.first() {
        Some(&m) if correlated => m,
        _ => rng.random_range(0..n_trip),
    };
    let texture_rect = rects[2 * triplets.len()];
    let tcolor = TEXTURE_COLORS[texture_id % TEXTURE_COLORS.len()];
    let mut spurious = FeatureMask::empty(h, w);
    for r in 0..ts {
        for c in 0..ts {
            let k = if texture_on(texture_id, r, c) { 1.0 } else { 0.35 };
            let mut px = [0.0; 3];
            for ch in 0..3 {
                px[ch] = BACKGROUND[ch] + cfg.texture_contrast * (tcolor[ch] * k - BACKGROUND[ch]);
            }
            canvas.set(texture_rect.top + r, texture_rect.left + c, px);
            spurious.set(texture_rect.top + r, texture_rect.left + c, true);
        }
    }

    let mut core = FeatureMask::empty(h, w);
    for g in &glyphs {
        for (r, c) in g.pixels() {
            core.set(r, c, true);
        }
    }
    let data = canvas.data.into_iter().map(quantize).collect();
    Ok(Example {
        id: k,
        image: Tensor::new(vec![h, w, 3], data)?,
        labels,
        video_id,
        frame_id,
        core_mask: Some(core),
        spurious_mask: Some(spurious),
        blacked_out: false,
        scene: Some(SceneInfo {
            glyphs,
            texture_id,
            texture_correlated: correlated && !triplets.is_empty(),
            texture_rect,
        }),
    })
}

fn is_black(image: &Tensor) -> bool {
    image.data().iter().all(|&v| v == 0.0)
}

fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    Ok(img.to_rgb8())
}

fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data).expect("rgb buffer")
}

/// `[H, W, 3]` tensor in `[0, 1]` to an 8-bit image (values are clamped).
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("tensor_to_image", format!("{s:?}")));
    }
    let raw = t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    RgbImage::from_raw(s[1] as u32, s[0] as u32, raw).ok_or_else(|| Error::shape("tensor_to_image", "buffer size"))
}

/// Parses one per-video label CSV. Returns frame id -> labels.
pub fn parse_label_csv(text: &str, path: &Path, n_triplets: usize) -> Result<BTreeMap<u32, Vec<u8>>> {
    let err = |line: usize, msg: String| Error::Parse { path: path.display().to_string(), line, msg };
    let mut out = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let first = fields.next().unwrap_or_default();
        let Ok(frame) = first.parse::<u32>() else {
            if ln == 1 && !first.is_empty() && !first.as_bytes()[0].is_ascii_digit() {
                continue; // header row
            }
            return Err(err(ln, format!("bad frame id {first:?}")));
        };
        let labels: Vec<u8> = fields
            .map(|f| match f {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(err(ln, format!("label must be 0 or 1, got {other:?}"))),
            })
            .collect::<Result<_>>()?;
        if labels.len() != n_triplets {
            return Err(err(ln, format!("expected {n_triplets} labels, got {}", labels.len())));
        }
        if out.insert(frame, labels).is_some() {
            return Err(err(ln, format!("frame {frame} listed twice")));
        }
    }
    Ok(out)
}

fn video_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("VID") && entry.path().is_dir() {
            out.push((name, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn load_video(root: &Path, video: &str, dir: &Path, table: &TripletTable) -> Result<Vec<Example>> {
    let label_path = root.join("labels").join(format!("{video}.csv"));
    let text = std::fs::read_to_string(&label_path).map_err(|e| Error::io(&label_path, e))?;
    let labels = parse_label_csv(&text, &label_path, table.n_triplets())?;
    let frames_dir = dir.join("frames");
    let mut frames = Vec::new();
    for entry in std::fs::read_dir(&frames_dir).map_err(|e| Error::io(&frames_dir, e))? {
        let path = entry.map_err(|e| Error::io(&frames_dir, e))?.path();
        if path.extension().and_then(|s| s.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let frame: u32 = stem.parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "frame file name is not a number".into(),
        })?;
        frames.push((frame, path));
    }
    frames.sort();
    let mut out = Vec::with_capacity(frames.len());
    for (frame, path) in frames {
        let lab = labels.get(&frame).ok_or_else(|| Error::MissingLabel { path: label_path.clone(), frame })?;
        let image = image_to_tensor(&read_png(&path)?);
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let mask_path = dir.join("masks").join(format!("{frame:06}.png"));
        let (core_mask, spurious_mask) = if mask_path.exists() {
            let m = read_png(&mask_path)?;
            if m.dimensions() != (w as u32, h as u32) {
                return Err(Error::shape("mask", format!("{} does not match its frame", mask_path.display())));
            }
            let core = m.pixels().map(|p| p.0[0] > 127).collect();
            let spur = m.pixels().map(|p| p.0[1] > 127).collect();
            (Some(FeatureMask::new(h, w, core)?), Some(FeatureMask::new(h, w, spur)?))
        } else {
            (None, None)
        };
        out.push(Example {
            id: 0,
            blacked_out: is_black(&image),
            image,
            labels: lab.clone(),
            video_id: video.to_string(),
            frame_id: frame,
            core_mask,
            spurious_mask,
            scene: None,
        });
    }
    Ok(out)
}

/// Loads every `VIDxx` directory under `root`. Videos load in parallel;
/// examples are ordered by video id then frame id.
pub fn load_frames_dir(root: &Path, table: &TripletTable) -> Result<Dataset> {
    let videos = video_dirs(root)?;
    let per_video = par::map(&videos, |(name, dir)| load_video(root, name, dir, table));
    let mut examples = Vec::new();
    for v in per_video {
        examples.extend(v?);
    }
    for (k, e) in examples.iter_mut().enumerate() {
        e.id = k;
    }
    Ok(Dataset { table: table.clone(), examples })
}

/// Writes `dataset` in the frames-directory layout, including masks when
/// present, plus the triplet map as `root/triplet_map.txt`.
pub fn save_frames_dir(dataset: &Dataset, root: &Path) -> Result<()> {
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&root.join("labels"))?;
    dataset.table.save(&root.join("triplet_map.txt"))?;
    let mut csv: BTreeMap<&str, String> = BTreeMap::new();
    for e in &dataset.examples {
        let vdir = root.join(&e.video_id);
        mkdir(&vdir.join("frames"))?;
        let path = vdir.join("frames").join(format!("{:06}.png", e.frame_id));
        tensor_to_image(&e.image)?.save(&path)?;
        if let (Some(core), Some(spur)) = (&e.core_mask, &e.spurious_mask) {
            mkdir(&vdir.join("masks"))?;
            let (h, w) = (core.height(), core.width());
            let mut m = RgbImage::new(w as u32, h as u32);
            for r in 0..h {
                for c in 0..w {
                    let px = [if core.get(r, c) { 255 } else { 0 }, if spur.get(r, c) { 255 } else { 0 }, 0];
                    m.put_pixel(c as u32, r as u32, Rgb(px));
                }
            }
            m.save(vdir.join("masks").join(format!("{:06}.png", e.frame_id)))?;
        }
        let line = csv.entry(e.video_id.as_str()).or_default();
        line.push_str(&e.frame_id.to_string());
        for l in &e.labels {
            line.push(',');
            line.push(if *l != 0 { '1' } else { '0' });
        }
        line.push('\n');
    }
    for (video, text) in csv {
        let p = root.join("labels").join(format!("{video}.csv"));
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Converts an official CholecT45 `triplet/VIDxx.txt` label file (rows of
/// `frame,b0,...,b99`) into `labels/VIDxx.csv`. Frames themselves map from
/// `data/VIDxx/%06d.png` to `VIDxx/frames/%06d.png` unchanged.
pub fn convert_cholect45_labels(src: &Path, dst: &Path, n_triplets: usize) -> Result<usize> {
    let text = std::fs::read_to_string(src).map_err(|e| Error::io(src, e))?;
    let rows = parse_label_csv(&text, src, n_triplets)?;
    let mut out = String::new();
    for (frame, labels) in &rows {
        out.push_str(&frame.to_string());
        for l in labels {
            out.push_str(if *l != 0 { ",1" } else { ",0" });
        }
        out.push('\n');
    }
    std::fs::write(dst, out).map_err(|e| Error::io(dst, e))?;
    Ok(rows.len())
}

/// Partitions distinct video ids into `k` folds of near-equal size
/// (sizes differ by at most one). Deterministic per seed; each fold sorted.
pub fn kfold_split(video_ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    let mut ids: Vec<String> = video_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if k == 0 || k > ids.len() {
        return Err(Error::InvalidArgument(format!("cannot split {} videos into {k} folds", ids.len())));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (p, id) in ids.into_iter().enumerate() {
        folds[p % k].push(id);
    }
    folds.iter_mut().for_each(|f| f.sort());
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Test = fold `test_fold`; validation = the last `n_val` training videos by
/// sorted id; train = the rest.
pub fn fold_split(folds: &[Vec<String>], test_fold: usize, n_val: usize) -> Result<FoldSplit> {
    if test_fold >= folds.len() {
        return Err(Error::OutOfRange { what: "fold", index: test_fold, len: folds.len() });
    }
    let mut train: Vec<String> = folds.iter().enumerate().filter(|(i, _)| *i != test_fold).flat_map(|(_, f)| f.clone()).collect();
    train.sort();
    if n_val >= train.len() && n_val > 0 {
        return Err(Error::InvalidArgument(format!("{n_val} validation videos leave no training videos")));
    }
    let val = train.split_off(train.len() - n_val);
    Ok(FoldSplit { train, val, test: folds[test_fold].clone() })
}

/// Picks `n` examples with exactly one positive triplet (blacked-out frames
/// excluded), without replacement, deterministic per seed. Returns dataset
/// positions in sampled order.
pub fn sample_attack_set(examples: &[&Example], n: usize, seed: u64) -> Result<Vec<usize>> {
    let mut qualifying: Vec<usize> =
        (0..examples.len()).filter(|&k| !examples[k].blacked_out && examples[k].single_label().is_some()).collect();
    if qualifying.len() < n {
        return Err(Error::NotEnoughExamples { wanted: n, have: qualifying.len() });
    }
    qualifying.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    qualifying.truncate(n);
    Ok(qualifying)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            height: 24,
            width: 40,
            counts: ComponentCounts::new(3, 3, 3),
            n_triplets: 6,
            glyph_size: 7,
            texture_size: 4,
            n_videos: 3,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let cfg = SyntheticConfig { rho: 0.0, ..small_cfg() };
        let a = generate_synthetic(&cfg, 10).unwrap();
        let b = generate_synthetic(&cfg, 10).unwrap();
        for (x, y) in a.examples.iter().zip(&b.examples) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.image), bits(&y.image));
            assert_eq!(x.labels, y.labels);
        }
        let c = generate_synthetic(&SyntheticConfig { seed: 1, ..cfg }, 10).unwrap();
        assert_ne!(a.examples[0].image, c.examples[0].image);
    }

    #[test]
    fn single_class_config_gives_identical_labels() {
        let cfg = SyntheticConfig { counts: ComponentCounts::new(1, 1, 1), n_triplets: 1, multi_label_rate: 0.5, ..small_cfg() };
        let d = generate_synthetic(&cfg, 12).unwrap();
        assert!(d.examples.iter().all(|e| e.labels == vec![1]));
    }

    #[test]
    fn masks_match_regenerated_glyphs() {
        let d = generate_synthetic(&small_cfg(), 20).unwrap();
        for e in &d.examples {
            let scene = e.scene.as_ref().unwrap();
            let mut core = FeatureMask::empty(24, 40);
            for g in &scene.glyphs {
                core = core.union(&g.mask(24, 40)).unwrap();
            }
            assert_eq!(&core, e.core_mask.as_ref().unwrap());
            assert!(core.is_disjoint(e.spurious_mask.as_ref().unwrap()).unwrap());
            assert_eq!(e.spurious_mask.as_ref().unwrap().count(), 16);
            assert!(e.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn blackout_frames_are_flagged() {
        let cfg = SyntheticConfig { blackout_rate: 1.0, ..small_cfg() };
        let d = generate_synthetic(&cfg, 3).unwrap();
        assert!(d.examples.iter().all(|e| e.blacked_out && e.labels.iter().all(|&l| l == 0)));
    }

    #[test]
    fn label_csv_errors_name_file_and_line() {
        let p = Path::new("labels/VID01.csv");
        let ok = parse_label_csv("frame_id,b0,b1\n0,1,0\n1,0,1\n", p, 2).unwrap();
        assert_eq!(ok[&1], vec![0, 1]);
        let err = parse_label_csv("0,1,0\n1,0,1,1\n", p, 2).unwrap_err();
        assert_eq!(err.to_string(), "labels/VID01.csv:2: expected 2 labels, got 3");
        assert!(parse_label_csv("0,1,2\n", p, 2).is_err());
    }

    #[test]
    fn folds_are_by_video_and_balanced() {
        let ids: Vec<String> = (1..=45).map(|v| format!("VID{v:02}")).collect();
        let folds = kfold_split(&ids, 5, 7).unwrap();
        assert!(folds.iter().all(|f| f.len() == 9));
        let all: BTreeSet<&String> = folds.iter().flatten().collect();
        assert_eq!(all.len(), 45);
        assert_eq!(folds, kfold_split(&ids, 5, 7).unwrap());

        let five: Vec<String> = ids[..5].to_vec();
        assert!(kfold_split(&five, 5, 1).unwrap().iter().all(|f| f.len() == 1));
        assert!(kfold_split(&five, 6, 1).is_err());
        assert!(kfold_split(&five, 0, 1).is_err());

        let split = fold_split(&folds, 2, 5).unwrap();
        assert_eq!(split.train.len(), 31);
        assert_eq!(split.val.len(), 5);
        assert!(split.val.iter().all(|v| split.train.iter().all(|t| t < v)));
    }

    #[test]
    fn attack_set_takes_single_label_examples() {
        let mk = |labels: Vec<u8>| Example {
            id: 0,
            image: Tensor::zeros(&[1, 1, 3]),
            labels,
            video_id: "VID01".into(),
            frame_id: 0,
            core_mask: None,
            spurious_mask: None,
            blacked_out: false,
            scene: None,
        };
        let ex = [mk(vec![1, 0]), mk(vec![1, 1]), mk(vec![0, 1]), mk(vec![1, 1]), mk(vec![0, 1])];
        let refs: Vec<&Example> = ex.iter().collect();
        let mut got = sample_attack_set(&refs, 3, 4).unwrap();
        got.sort();
        assert_eq!(got, vec![0, 2, 4]);
        assert!(matches!(sample_attack_set(&refs, 4, 4), Err(Error::NotEnoughExamples { .. })));
    }
}
