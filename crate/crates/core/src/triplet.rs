//! The instrument/verb/target label space.
//!
//! A [`TripletTable`] lists, for each triplet class `m`, its component
//! indices `(i, v, t)`. From it we derive the projection `h_d(m)` onto each
//! component family and the max-projection of triplet scores onto component
//! scores.
//!
//! Map files are plain text:
//!
//! ```text
//! #counts 6 10 15 100
//! # comment lines start with '#'
//! 0,0,0,0
//! 1,0,2,3
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComponentCounts {
    pub instruments: usize,
    pub verbs: usize,
    pub targets: usize,
}

impl ComponentCounts {
    pub const CHOLECT45: ComponentCounts = ComponentCounts { instruments: 6, verbs: 10, targets: 15 };

    pub fn new(instruments: usize, verbs: usize, targets: usize) -> Self {
        ComponentCounts { instruments, verbs, targets }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentId {
    I,
    V,
    T,
    IV,
    IT,
    IVT,
}

impl ComponentId {
    pub const ALL: [ComponentId; 6] =
        [ComponentId::I, ComponentId::V, ComponentId::T, ComponentId::IV, ComponentId::IT, ComponentId::IVT];

    pub fn name(self) -> &'static str {
        match self {
            ComponentId::I => "I",
            ComponentId::V => "V",
            ComponentId::T => "T",
            ComponentId::IV => "IV",
            ComponentId::IT => "IT",
            ComponentId::IVT => "IVT",
        }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComponentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ComponentId::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown component {s:?}")))
    }
}

/// Triplet composition table with precomputed projections.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletTable {
    counts: ComponentCounts,
    rows: Vec<(usize, usize, usize)>,
    iv_pairs: Vec<(usize, usize)>,
    it_pairs: Vec<(usize, usize)>,
    iv_of: Vec<usize>,
    it_of: Vec<usize>,
}

impl TripletTable {
    /// Validates `rows` (row `m` is triplet class `m`) and builds the index
    /// maps. IV and IT classes are the distinct pairs present, numbered in
    /// lexicographic order.
    pub fn build(counts: ComponentCounts, rows: Vec<(usize, usize, usize)>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(rows.len());
        for &(i, v, t) in &rows {
            if i >= counts.instruments {
                return Err(Error::OutOfRange { what: "instrument", index: i, len: counts.instruments });
            }
            if v >= counts.verbs {
                return Err(Error::OutOfRange { what: "verb", index: v, len: counts.verbs });
            }
            if t >= counts.targets {
                return Err(Error::OutOfRange { what: "target", index: t, len: counts.targets });
            }
            if !seen.insert((i, v, t)) {
                return Err(Error::DuplicateRow((i, v, t)));
            }
        }
        let index_pairs = |key: &dyn Fn(&(usize, usize, usize)) -> (usize, usize)| {
            let distinct: BTreeMap<(usize, usize), usize> = rows.iter().map(|r| (key(r), 0)).collect();
            let pairs: Vec<_> = distinct.keys().copied().collect();
            let lookup: BTreeMap<_, _> = pairs.iter().enumerate().map(|(k, p)| (*p, k)).collect();
            let of = rows.iter().map(|r| lookup[&key(r)]).collect::<Vec<_>>();
            (pairs, of)
        };
        let (iv_pairs, iv_of) = index_pairs(&|&(i, v, _)| (i, v));
        let (it_pairs, it_of) = index_pairs(&|&(i, _, t)| (i, t));
        Ok(TripletTable { counts, rows, iv_pairs, it_pairs, iv_of, it_of })
    }

    /// A table of `n` distinct triplets drawn uniformly from the full
    /// `I x V x T` grid, sorted, deterministic per seed.
    pub fn random(counts: ComponentCounts, n: usize, seed: u64) -> Result<Self> {
        let total = counts.instruments * counts.verbs * counts.targets;
        if n > total || n == 0 {
            return Err(Error::InvalidArgument(format!("cannot draw {n} distinct triplets from {total}")));
        }
        let mut all: Vec<(usize, usize, usize)> = (0..counts.instruments)
            .flat_map(|i| (0..counts.verbs).flat_map(move |v| (0..counts.targets).map(move |t| (i, v, t))))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.shuffle(&mut rng);
        all.truncate(n);
        all.sort_unstable();
        Self::build(counts, all)
    }

    pub fn counts(&self) -> ComponentCounts {
        self.counts
    }

    pub fn n_triplets(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[(usize, usize, usize)] {
        &self.rows
    }

    pub fn iv_pairs(&self) -> &[(usize, usize)] {
        &self.iv_pairs
    }

    pub fn it_pairs(&self) -> &[(usize, usize)] {
        &self.it_pairs
    }

    /// Number of classes of component family `d`, including classes with no
    /// triplet preimage.
    pub fn n_classes(&self, d: ComponentId) -> usize {
        match d {
            ComponentId::I => self.counts.instruments,
            ComponentId::V => self.counts.verbs,
            ComponentId::T => self.counts.targets,
            ComponentId::IV => self.iv_pairs.len(),
            ComponentId::IT => self.it_pairs.len(),
            ComponentId::IVT => self.rows.len(),
        }
    }

    /// `h_d(m)`: the component class of triplet `m` under `d`.
    pub fn project(&self, d: ComponentId, m: usize) -> Result<usize> {
        let &(i, v, t) = self.rows.get(m).ok_or(Error::OutOfRange { what: "triplet", index: m, len: self.rows.len() })?;
        Ok(match d {
            ComponentId::I => i,
            ComponentId::V => v,
            ComponentId::T => t,
            ComponentId::IV => self.iv_of[m],
            ComponentId::IT => self.it_of[m],
            ComponentId::IVT => m,
        })
    }

    /// Max-projection of triplet scores onto component `d`. Classes with no
    /// preimage are `None` ("absent").
    pub fn component_logits(&self, y_ivt: &[f64], d: ComponentId) -> Result<Vec<Option<f64>>> {
        if y_ivt.len() != self.rows.len() {
            return Err(Error::shape(
                "component_logits",
                format!("{} scores for {} triplets", y_ivt.len(), self.rows.len()),
            ));
        }
        let mut out: Vec<Option<f64>> = vec![None; self.n_classes(d)];
        for (m, &score) in y_ivt.iter().enumerate() {
            let k = self.project(d, m)?;
            out[k] = Some(match out[k] {
                Some(cur) if cur >= score => cur,
                _ => score,
            });
        }
        Ok(out)
    }

    /// OR-projection of binary triplet labels onto component `d`. Absent
    /// classes are `None`.
    pub fn component_labels(&self, labels: &[u8], d: ComponentId) -> Result<Vec<Option<bool>>> {
        if labels.len() != self.rows.len() {
            return Err(Error::shape(
                "component_labels",
                format!("{} labels for {} triplets", labels.len(), self.rows.len()),
            ));
        }
        let mut out: Vec<Option<bool>> = vec![None; self.n_classes(d)];
        for (m, &l) in labels.iter().enumerate() {
            let k = self.project(d, m)?;
            out[k] = Some(out[k].unwrap_or(false) || l != 0);
        }
        Ok(out)
    }

    /// Component classes of `d` that some triplet maps to.
    pub fn present(&self, d: ComponentId) -> Vec<bool> {
        let mut out = vec![false; self.n_classes(d)];
        for m in 0..self.rows.len() {
            out[self.project(d, m).expect("m in range")] = true;
        }
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { path: source.to_string(), line, msg };
        let mut counts: Option<(ComponentCounts, usize)> = None;
        let mut rows: Vec<Option<(usize, usize, usize)>> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let ln = ln + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#counts") {
                if counts.is_some() {
                    return Err(err(ln, "repeated #counts header".into()));
                }
                let nums: Vec<usize> = rest
                    .split_whitespace()
                    .map(|s| s.parse::<usize>().map_err(|e| err(ln, format!("bad count {s:?}: {e}"))))
                    .collect::<Result<_>>()?;
                if nums.len() != 4 {
                    return Err(err(ln, format!("#counts needs 4 values (I V T IVT), got {}", nums.len())));
                }
                counts = Some((ComponentCounts::new(nums[0], nums[1], nums[2]), nums[3]));
                rows = vec![None; nums[3]];
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let Some((_, n)) = counts else {
                return Err(err(ln, "row before #counts header".into()));
            };
            let fields: Vec<usize> = line
                .split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|e| err(ln, format!("bad field {s:?}: {e}"))))
                .collect::<Result<_>>()?;
            if fields.len() != 4 {
                return Err(err(ln, format!("expected m,i,v,t but got {} fields", fields.len())));
            }
            let m = fields[0];
            if m >= n {
                return Err(err(ln, format!("triplet id {m} >= {n}")));
            }
            if rows[m].is_some() {
                return Err(err(ln, format!("triplet id {m} listed twice")));
            }
            rows[m] = Some((fields[1], fields[2], fields[3]));
        }
        let (counts, _) = counts.ok_or_else(|| err(0, "missing #counts header".into()))?;
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(m, r)| r.ok_or_else(|| err(0, format!("no row for triplet {m}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::build(counts, rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_map_string(&self) -> String {
        let c = self.counts;
        let mut s = format!("#counts {} {} {} {}\n", c.instruments, c.verbs, c.targets, self.rows.len());
        for (m, (i, v, t)) in self.rows.iter().enumerate() {
            s.push_str(&format!("{m},{i},{v},{t}\n"));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_map_string()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TripletTable {
        TripletTable::build(ComponentCounts::new(2, 2, 2), vec![(0, 0, 0), (0, 1, 1), (1, 0, 1)]).unwrap()
    }

    #[test]
    fn one_class_table() {
        let t = TripletTable::build(ComponentCounts::new(1, 1, 1), vec![(0, 0, 0)]).unwrap();
        assert_eq!(t.n_triplets(), 1);
    }

    #[test]
    fn duplicate_and_range_errors() {
        let c = ComponentCounts::new(1, 1, 1);
        assert!(matches!(TripletTable::build(c, vec![(0, 0, 0), (0, 0, 0)]), Err(Error::DuplicateRow(_))));
        assert!(matches!(TripletTable::build(c, vec![(0, 1, 0)]), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn hundred_row_cholect_shape() {
        let t = TripletTable::random(ComponentCounts::CHOLECT45, 100, 3).unwrap();
        assert_eq!(t.n_triplets(), 100);
        assert!(t.n_classes(ComponentId::IV) <= 60);
        assert!(t.n_classes(ComponentId::IT) <= 90);
    }

    #[test]
    fn projection_by_construction() {
        let t = TripletTable::build(ComponentCounts::new(3, 2, 8), vec![(0, 0, 0), (2, 1, 7)]).unwrap();
        assert_eq!(t.project(ComponentId::I, 1).unwrap(), 2);
        let k = t.project(ComponentId::IT, 1).unwrap();
        assert_eq!(t.it_pairs()[k], (2, 7));
        assert_eq!(t.project(ComponentId::IVT, 1).unwrap(), 1);
        assert!(t.project(ComponentId::I, 2).is_err());
    }

    #[test]
    fn max_projection_example() {
        let t = small();
        let y = [0.2, 0.7, 0.4];
        let get = |d| t.component_logits(&y, d).unwrap().into_iter().map(Option::unwrap).collect::<Vec<_>>();
        assert_eq!(get(ComponentId::I), vec![0.7, 0.4]);
        assert_eq!(get(ComponentId::V), vec![0.4, 0.7]);
        assert_eq!(get(ComponentId::T), vec![0.2, 0.7]);
        assert_eq!(get(ComponentId::IVT), y.to_vec());
        assert!(t.component_logits(&[0.0; 2], ComponentId::I).is_err());
    }

    #[test]
    fn absent_classes_are_none() {
        let t = TripletTable::build(ComponentCounts::new(3, 1, 1), vec![(0, 0, 0)]).unwrap();
        let y = t.component_logits(&[1.0], ComponentId::I).unwrap();
        assert_eq!(y, vec![Some(1.0), None, None]);
    }

    #[test]
    fn map_file_round_trip_and_errors() {
        let t = TripletTable::random(ComponentCounts::new(3, 4, 5), 12, 9).unwrap();
        let text = t.to_map_string();
        assert_eq!(TripletTable::parse(&text, "x").unwrap(), t);
        let with_comments = format!("# header comment\n{}\n# trailing\n", text);
        assert_eq!(TripletTable::parse(&with_comments, "x").unwrap(), t);

        let bad = "#counts 1 1 1 1\n0,0,0\n";
        match TripletTable::parse(bad, "map.txt") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(TripletTable::parse("#counts 1 1 1 2\n0,0,0,0\n", "m").is_err());
        assert!(TripletTable::parse("0,0,0,0\n", "m").is_err());
    }
}
