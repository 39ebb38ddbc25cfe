//! Tables, curves and the run manifest.
//!
//! Everything emitted for a run goes through one [`ReportWriter`], which
//! records a content hash per file so that the manifest lists every output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::explain::{top_fraction_mask, AttributionMap};
use crate::mask::FeatureMask;
use crate::metrics::ComponentAp;
use crate::robustness::RobustnessCurve;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `metric,class,value` rows: per-class AP (empty value when undefined)
/// followed by the mean for each component.
pub fn metrics_csv(aps: &[ComponentAp]) -> String {
    let mut s = String::from("metric,class,value\n");
    for ap in aps {
        let name = format!("ap_{}", ap.component.name().to_ascii_lowercase());
        for (k, v) in ap.per_class.iter().enumerate() {
            let _ = writeln!(s, "{name},{k},{}", fmt_opt(*v));
        }
        let _ = writeln!(s, "{name},mean,{}", fmt_opt(ap.mean));
    }
    s
}

/// The `k` classes with highest AP, best first; ties keep the lower index.
pub fn top_k(per_class: &[Option<f64>], k: usize) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = per_class.iter().enumerate().filter_map(|(i, a)| a.map(|a| (i, a))).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.truncate(k);
    v
}

pub fn top_k_csv(component: &str, rows: &[(usize, f64)], names: Option<&[String]>) -> String {
    let mut s = String::from("component,rank,class,name,ap\n");
    for (r, (c, ap)) in rows.iter().enumerate() {
        let name = names.and_then(|n| n.get(*c)).map(String::as_str).unwrap_or("");
        let _ = writeln!(s, "{component},{},{c},{name},{ap}", r + 1);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassFractions {
    pub core: f64,
    pub spurious: f64,
    pub background: f64,
}

/// Where the top-`p` pixels of `attr` fall: core, spurious, or neither.
pub fn core_spurious_mass(attr: &AttributionMap, core: &FeatureMask, spurious: &FeatureMask, p: f64) -> Result<MassFractions> {
    if !core.is_disjoint(spurious)? {
        return Err(Error::InvalidArgument("core and spurious masks overlap".into()));
    }
    let (top, _) = top_fraction_mask(attr, p)?;
    let n = top.count();
    if n == 0 {
        return Err(Error::InvalidArgument(format!("fraction {p} selects no pixels")));
    }
    let c = top.intersection(core)?.count();
    let sp = top.intersection(spurious)?.count();
    let n = n as f64;
    Ok(MassFractions { core: c as f64 / n, spurious: sp as f64 / n, background: (top.count() - c - sp) as f64 / n })
}

pub fn mass_csv(rows: &[(String, f64, MassFractions)]) -> String {
    let mut s = String::from("method,fraction,core_frac,spurious_frac,background_frac\n");
    for (m, p, f) in rows {
        let _ = writeln!(s, "{m},{p},{},{},{}", f.core, f.spurious, f.background);
    }
    s
}

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart of mean epsilon against fraction, one polyline per curve and
/// set. Each data point is a `<circle>` carrying `data-explainer`,
/// `data-set`, `data-fraction` and `data-epsilon` attributes.
pub fn curve_svg(curves: &[RobustnessCurve], title: &str) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let mut pts = Vec::new();
    for c in curves {
        for (set, ys) in [("relevant", &c.relevant), ("irrelevant", &c.irrelevant)] {
            let series: Vec<(f64, f64)> = c.fractions.iter().zip(ys.iter()).filter_map(|(f, y)| y.map(|y| (*f, y))).collect();
            pts.push((c.explainer.clone(), set, series));
        }
    }
    let y_max = pts.iter().flat_map(|(_, _, s)| s.iter().map(|p| p.1)).fold(0.0f64, f64::max).max(1e-9) * 1.1;
    let sx = |f: f64| m + f * (w - 2.0 * m);
    let sy = |e: f64| h - m - e / y_max * (h - 2.0 * m);
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, w / 2.0, svg_escape(title));
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">fraction of top features</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">mean epsilon</text>"#, h / 2.0, h / 2.0);
    for t in 0..=4 {
        let f = t as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="10">{f}</text>"#, sx(f), h - m + 14.0);
        let e = y_max * f;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{:.3}</text>"#, m - 4.0, sy(e) + 3.0, e);
    }
    for (k, (explainer, set, series)) in pts.iter().enumerate() {
        let color = palette[k % palette.len()];
        let dash = if *set == "irrelevant" { r#" stroke-dasharray="6 3""# } else { "" };
        let line: Vec<String> = series.iter().map(|(f, e)| format!("{},{}", sx(*f), sy(*e))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}" data-explainer="{}" data-set="{set}"/>"#,
            line.join(" "),
            svg_escape(explainer)
        );
        for (f, e) in series {
            let _ = writeln!(
                s,
                r#"<circle cx="{}" cy="{}" r="3" fill="{color}" data-explainer="{}" data-set="{set}" data-fraction="{f}" data-epsilon="{e}"/>"#,
                sx(*f),
                sy(*e),
                svg_escape(explainer)
            );
        }
        let ly = m + 16.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" font-size="11" fill="{color}">{} {set}</text>"#, w - m - 110.0, svg_escape(explainer));
    }
    s.push_str("</svg>\n");
    s
}

/// Pulls `(explainer, set, fraction, epsilon)` back out of [`curve_svg`].
pub fn parse_svg_points(svg: &str) -> Vec<(String, String, f64, f64)> {
    let attr = |tag: &str, name: &str| -> Option<String> {
        let key = format!("{name}=\"");
        let start = tag.find(&key)? + key.len();
        Some(tag[start..start + tag[start..].find('"')?].to_string())
    };
    svg.lines()
        .filter(|l| l.trim_start().starts_with("<circle"))
        .filter_map(|l| {
            Some((attr(l, "data-explainer")?, attr(l, "data-set")?, attr(l, "data-fraction")?.parse().ok()?, attr(l, "data-epsilon")?.parse().ok()?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    /// SHA-256 of the effective configuration text.
    pub config_hash: String,
    pub config: serde_json::Value,
    /// Relative path to SHA-256 of the file contents.
    pub files: BTreeMap<String, String>,
}

/// Single writer for all run outputs under one directory.
#[derive(Debug)]
pub struct ReportWriter {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl ReportWriter {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(ReportWriter { root: root.to_path_buf(), files: BTreeMap::new() })
    }

    /// Existing manifest entries are kept, so several commands can emit into
    /// one directory.
    pub fn open(root: &Path) -> Result<Self> {
        let mut w = Self::new(root)?;
        let p = root.join("manifest.json");
        if p.exists() {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let m: Manifest = serde_json::from_str(&text)?;
            w.files = m.files;
        }
        Ok(w)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.files.insert(rel.replace('\\', "/"), sha256_hex(bytes));
        Ok(p)
    }

    /// Records a file that was written by other means.
    pub fn track(&mut self, rel: &str) -> Result<()> {
        let p = self.root.join(rel);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        self.files.insert(rel.replace('\\', "/"), sha256_hex(&bytes));
        Ok(())
    }

    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.files
    }

    /// Writes `manifest.json` and returns it.
    pub fn finish(self, config: &serde_json::Value) -> Result<Manifest> {
        let text = serde_json::to_string(config)?;
        let manifest = Manifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: sha256_hex(text.as_bytes()),
            config: config.clone(),
            files: self.files,
        };
        let p = self.root.join("manifest.json");
        let mut body = serde_json::to_string_pretty(&manifest)?;
        body.push('\n');
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        Ok(manifest)
    }
}

/// Checks every manifest entry against the file on disk.
pub fn verify_manifest(root: &Path) -> Result<Vec<String>> {
    let p = root.join("manifest.json");
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
    let mut bad = Vec::new();
    for (rel, hash) in &m.files {
        match std::fs::read(root.join(rel)) {
            Ok(bytes) if sha256_hex(&bytes) == *hash => {}
            _ => bad.push(rel.clone()),
        }
    }
    if sha256_hex(serde_json::to_string(&m.config)?.as_bytes()) != m.config_hash {
        bad.push("config".into());
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::Method;

    fn attr(h: usize, w: usize, values: Vec<f64>) -> AttributionMap {
        AttributionMap { height: h, width: w, values, method: Method::Grad, class: 0, baseline: None }
    }

    #[test]
    fn top5_order() {
        let aps = [0.9, 0.1, 0.8, 0.7, 0.6, 0.5].map(Some);
        let got: Vec<usize> = top_k(&aps, 5).into_iter().map(|(c, _)| c).collect();
        assert_eq!(got, vec![0, 2, 3, 4, 5]);
    }

    #[test]
    fn mass_examples() {
        let core = FeatureMask::from_indices(2, 4, &[0, 1]).unwrap();
        let spur = FeatureMask::from_indices(2, 4, &[6, 7]).unwrap();
        let a = attr(2, 4, vec![5.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let m = core_spurious_mass(&a, &core, &spur, 0.25).unwrap();
        assert_eq!((m.core, m.spurious, m.background), (1.0, 0.0, 0.0));
        let flat = attr(2, 4, vec![1.0; 8]);
        let m = core_spurious_mass(&flat, &core, &spur, 1.0).unwrap();
        assert_eq!((m.core, m.spurious, m.background), (0.25, 0.25, 0.5));
        assert!(core_spurious_mass(&flat, &core, &core, 0.5).is_err());
    }

    #[test]
    fn svg_points_round_trip() {
        let c = RobustnessCurve {
            explainer: "grad".into(),
            fractions: vec![0.25, 1.0],
            relevant: vec![Some(2.5), Some(1.25)],
            irrelevant: vec![Some(3.0), None],
            relevant_censored: vec![0, 0],
            irrelevant_censored: vec![0, 0],
            n_examples: 2,
        };
        let pts = parse_svg_points(&curve_svg(&[c], "t"));
        assert_eq!(
            pts,
            vec![
                ("grad".into(), "relevant".into(), 0.25, 2.5),
                ("grad".into(), "relevant".into(), 1.0, 1.25),
                ("grad".into(), "irrelevant".into(), 0.25, 3.0)
            ]
        );
    }

    #[test]
    fn manifest_lists_every_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ReportWriter::new(dir.path()).unwrap();
        w.write("a.csv", b"x\n").unwrap();
        w.write("sub/b.csv", b"y\n").unwrap();
        let m = w.finish(&serde_json::json!({"seed": 1})).unwrap();
        assert_eq!(m.files.len(), 2);
        assert!(verify_manifest(dir.path()).unwrap().is_empty());
        std::fs::write(dir.path().join("a.csv"), b"z\n").unwrap();
        assert_eq!(verify_manifest(dir.path()).unwrap(), vec!["a.csv".to_string()]);
    }
}
