//! Electrode geometry.
//!
//! A [`ChannelMontage`] is an ordered list of named electrodes with unit-sphere
//! positions. Montage files are UTF-8 CSV with the header `name,x,y,z`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use num_traits::Zero;

use crate::error::{Error, Result};

const UNIT_TOLERANCE: f64 = 1e-6;
const RENORMALIZE_RANGE: (f64, f64) = (0.5, 2.0);

const DEFAULT_62: &str = include_str!("../data/montage_62.csv");

/// Channel names of the 32-electrode DEAP cap, spelled as in the 62-channel
/// default montage.
pub const DEAP_32: [&str; 32] = [
    "FP1", "AF3", "F3", "F7", "FC5", "FC1", "C3", "T7", "CP5", "CP1", "P3", "P7", "PO3", "O1", "OZ",
    "PZ", "FP2", "AF4", "FZ", "F4", "F8", "FC6", "FC2", "CZ", "C4", "T8", "CP6", "CP2", "P4", "P8",
    "PO4", "O2",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub name: String,
    pub position: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMontage {
    channels: Vec<Channel>,
    index: HashMap<String, usize>,
}

fn norm(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    norm(&d)
}

impl ChannelMontage {
    /// Builds a montage, renormalising positions whose norm lies in
    /// `[0.5, 2.0]` onto the unit sphere.
    pub fn new(channels: Vec<Channel>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Montage("montage has no channels".into()));
        }
        let mut index = HashMap::with_capacity(channels.len());
        let mut out = Vec::with_capacity(channels.len());
        for (i, mut ch) in channels.into_iter().enumerate() {
            if index.insert(ch.name.clone(), i).is_some() {
                return Err(Error::Montage(format!("duplicate channel name {:?}", ch.name)));
            }
            if ch.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::Montage(format!("non-finite position for {:?}", ch.name)));
            }
            let n = norm(&ch.position);
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                if n < RENORMALIZE_RANGE.0 || n > RENORMALIZE_RANGE.1 {
                    return Err(Error::Montage(format!(
                        "position of {:?} has norm {n}, outside [{}, {}]",
                        ch.name, RENORMALIZE_RANGE.0, RENORMALIZE_RANGE.1
                    )));
                }
            }
            // Already-unit vectors are left untouched so repeated loads are stable.
            if (n - 1.0).abs() > 4.0 * f64::EPSILON {
                for v in ch.position.iter_mut() {
                    *v /= n;
                }
            }
            out.push(ch);
        }
        Ok(Self {
            channels: out,
            index,
        })
    }

    /// The bundled 62-channel 10-10 layout.
    pub fn default_62() -> Self {
        Self::parse_csv(DEFAULT_SOURCE_NAME, DEFAULT_62).expect("bundled montage is valid")
    }

    pub fn parse_csv(source: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Montage(format!("{source}: empty file")))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["name", "x", "y", "z"] {
            return Err(Error::Montage(format!(
                "{source}: expected header `name,x,y,z`, found `{header}`"
            )));
        }
        let mut channels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(Error::Montage(format!(
                    "{source}: row {} has {} fields",
                    lineno + 2,
                    fields.len()
                )));
            }
            let mut position = [0.0; 3];
            for (k, f) in fields[1..].iter().enumerate() {
                position[k] = f.parse().map_err(|_| {
                    Error::Montage(format!("{source}: row {}: bad float {f:?}", lineno + 2))
                })?;
            }
            channels.push(Channel {
                name: fields[0].to_string(),
                position,
            });
        }
        if channels.is_empty() {
            return Err(Error::Montage(format!("{source}: empty file")));
        }
        Self::new(channels)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,x,y,z\n");
        for ch in &self.channels {
            // `{:?}` on f64 prints the shortest round-trip representation.
            let _ = writeln!(
                s,
                "{},{:?},{:?},{:?}",
                ch.name, ch.position[0], ch.position[1], ch.position[2]
            );
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.channels.iter().map(|c| c.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn position(&self, index: usize) -> [f64; 3] {
        self.channels[index].position
    }

    /// Positions as an `n × 3` matrix.
    pub fn positions(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), 3), |(i, k)| self.channels[i].position[k])
    }

    /// Chordal distance between two channels.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        distance(&self.channels[i].position, &self.channels[j].position)
    }

    /// Nearest other channel by chordal distance; ties go to the lowest index.
    pub fn nearest_neighbor(&self, index: usize) -> Result<usize> {
        self.nearest_among(index, |_| true)
            .ok_or_else(|| Error::Precondition("nearest_neighbor needs at least 2 channels".into()))
    }

    /// Nearest channel `j != index` satisfying `allowed(j)`.
    pub fn nearest_among(&self, index: usize, allowed: impl Fn(usize) -> bool) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..self.len() {
            if j == index || !allowed(j) {
                continue;
            }
            let d = self.distance(index, j);
            match best {
                Some((_, bd)) if d >= bd => {}
                _ => best = Some((j, d)),
            }
        }
        best.map(|(j, _)| j)
    }

    /// The `k` nearest channels satisfying `allowed`, closest first, with
    /// their distances. Ties are broken by index.
    pub fn k_nearest(
        &self,
        index: usize,
        k: usize,
        allowed: impl Fn(usize) -> bool,
    ) -> Vec<(usize, f64)> {
        let mut cands: Vec<(usize, f64)> = (0..self.len())
            .filter(|&j| j != index && allowed(j))
            .map(|j| (j, self.distance(index, j)))
            .collect();
        cands.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        cands.truncate(k);
        cands
    }

    /// Resolves `source_names` against this montage.
    pub fn subset_map<S: AsRef<str>>(&self, source_names: &[S]) -> Result<ChannelSubsetMap> {
        ChannelSubsetMap::new(source_names, self)
    }
}

const DEFAULT_SOURCE_NAME: &str = "montage_62.csv";

pub fn load_montage(path: &Path) -> Result<ChannelMontage> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ChannelMontage::parse_csv(&path.display().to_string(), &text)
}

/// Placement of a fewer-channel recording inside a reference montage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelSubsetMap {
    source_names: Vec<String>,
    target_indices: Vec<usize>,
}

impl ChannelSubsetMap {
    pub fn new<S: AsRef<str>>(source_names: &[S], reference: &ChannelMontage) -> Result<Self> {
        let mut target_indices = Vec::with_capacity(source_names.len());
        let mut seen = vec![false; reference.len()];
        for name in source_names {
            let name = name.as_ref();
            let idx = reference
                .index_of(name)
                .ok_or_else(|| Error::Montage(format!("channel {name:?} not in reference montage")))?;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::Montage(format!("channel {name:?} mapped twice")));
            }
            target_indices.push(idx);
        }
        Ok(Self {
            source_names: source_names.iter().map(|s| s.as_ref().to_string()).collect(),
            target_indices,
        })
    }

    pub fn source_names(&self) -> &[String] {
        &self.source_names
    }

    pub fn target_indices(&self) -> &[usize] {
        &self.target_indices
    }

    pub fn len(&self) -> usize {
        self.target_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_indices.is_empty()
    }
}

/// Places `features` (one row per source channel) into a zero-filled matrix
/// laid out like `reference`.
pub fn align_to_reference<T>(
    features: ArrayView2<T>,
    map: &ChannelSubsetMap,
    reference: &ChannelMontage,
) -> Result<Array2<T>>
where
    T: Copy + Zero,
{
    if features.nrows() != map.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} mapped channels",
            features.nrows(),
            map.len()
        )));
    }
    if let Some(&bad) = map.target_indices.iter().find(|&&t| t >= reference.len()) {
        return Err(Error::Shape(format!(
            "target index {bad} outside reference of {} channels",
            reference.len()
        )));
    }
    let mut out = Array2::from_elem((reference.len(), features.ncols()), T::zero());
    for (k, &t) in map.target_indices.iter().enumerate() {
        out.row_mut(t).assign(&features.row(k));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn line_montage(xs: &[f64]) -> ChannelMontage {
        // Points on a small arc so that chordal order follows x.
        let chans = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let a = x * 0.1;
                Channel {
                    name: format!("C{i}"),
                    position: [a.sin(), a.cos(), 0.0],
                }
            })
            .collect();
        ChannelMontage::new(chans).unwrap()
    }

    #[test]
    fn default_montage_has_62_unit_channels() {
        let m = ChannelMontage::default_62();
        assert_eq!(m.len(), 62);
        for ch in m.channels() {
            assert!((norm(&ch.position) - 1.0).abs() < 1e-9, "{}", ch.name);
        }
        for name in DEAP_32 {
            assert!(m.index_of(name).is_some(), "{name}");
        }
    }

    #[test]
    fn position_is_renormalised() {
        let m = ChannelMontage::parse_csv("t", "name,x,y,z\nA,0,0,2\nB,1,0,0\n").unwrap();
        assert_eq!(m.position(0), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_files() {
        let dup = ChannelMontage::parse_csv("t", "name,x,y,z\nFP1,1,0,0\nFP1,0,1,0\n");
        assert!(matches!(dup, Err(Error::Montage(m)) if m.contains("duplicate")));
        assert!(ChannelMontage::parse_csv("t", "name,x,y,z\nA,0,0,0\n").is_err());
        assert!(ChannelMontage::parse_csv("t", "name,x,y,z\nA,0,0,5\n").is_err());
        assert!(ChannelMontage::parse_csv("t", "").is_err());
        assert!(ChannelMontage::parse_csv("t", "name,x,y,z\n").is_err());
        // Names are case-sensitive.
        assert!(ChannelMontage::parse_csv("t", "name,x,y,z\nfp1,1,0,0\nFP1,0,1,0\n").is_ok());
    }

    #[test]
    fn load_missing_file_fails() {
        let err = load_montage(Path::new("/nonexistent/montage.csv")).unwrap_err();
        assert_eq!(err.kind(), "io");
    }

    #[test]
    fn csv_round_trip_is_stable() {
        let m = ChannelMontage::default_62();
        let again = ChannelMontage::parse_csv("t", &m.to_csv()).unwrap();
        let twice = ChannelMontage::parse_csv("t", &again.to_csv()).unwrap();
        assert_eq!(again, twice);
        assert_eq!(m, again);
    }

    #[test]
    fn nearest_neighbor_geometry() {
        let m = line_montage(&[0.0, 1.0, 3.0]);
        assert_eq!(m.nearest_neighbor(0).unwrap(), 1);
        assert_eq!(m.nearest_neighbor(2).unwrap(), 1);
        // Point 1 sits between 0 (distance 1) and 2 (distance 2).
        assert_eq!(m.nearest_neighbor(1).unwrap(), 0);
    }

    #[test]
    fn nearest_neighbor_tie_goes_to_lower_index() {
        let ch = |name: &str, position| Channel {
            name: name.into(),
            position,
        };
        let m = ChannelMontage::new(vec![
            ch("L", [-0.6, 0.8, 0.0]),
            ch("M", [0.0, 1.0, 0.0]),
            ch("R", [0.6, 0.8, 0.0]),
        ])
        .unwrap();
        assert_eq!(m.distance(1, 0), m.distance(1, 2));
        assert_eq!(m.nearest_neighbor(1).unwrap(), 0);
    }

    #[test]
    fn nearest_neighbor_single_channel_errors() {
        let m = line_montage(&[0.0]);
        assert!(m.nearest_neighbor(0).is_err());
    }

    #[test]
    fn nearest_neighbor_never_self() {
        let m = ChannelMontage::default_62();
        for i in 0..m.len() {
            assert_ne!(m.nearest_neighbor(i).unwrap(), i);
        }
    }

    #[test]
    fn align_identity_and_deap() {
        let m = ChannelMontage::default_62();
        let names: Vec<&str> = m.names().collect();
        let map = m.subset_map(&names).unwrap();
        let x = Array2::from_shape_fn((62, 5), |(i, j)| (i * 5 + j) as f32 + 0.5);
        assert_eq!(align_to_reference(x.view(), &map, &m).unwrap(), x);

        let map = m.subset_map(&DEAP_32).unwrap();
        let x = Array2::from_shape_fn((32, 5), |(i, j)| 1.0 + (i * 5 + j) as f64);
        let out = align_to_reference(x.view(), &map, &m).unwrap();
        let zero_rows = out.rows().into_iter().filter(|r| r.iter().all(|&v| v == 0.0)).count();
        assert_eq!(zero_rows, 30);
        for (k, &t) in map.target_indices().iter().enumerate() {
            assert_eq!(out.row(t), x.row(k));
        }
    }

    #[test]
    fn align_errors() {
        let m = ChannelMontage::default_62();
        assert!(m.subset_map(&["FP1", "XX9"]).is_err());
        assert!(m.subset_map(&["FP1", "FP1"]).is_err());
        let map = m.subset_map(&["FP1", "FP2"]).unwrap();
        let x = array![[1.0f64, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert!(matches!(align_to_reference(x.view(), &map, &m), Err(Error::Shape(_))));
    }
}
