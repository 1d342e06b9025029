//! Value types shared across the crate: tracks, albums, permutations and
//! per-track narrative series.
//!
//! Indices are zero-based throughout. A [`Permutation`] `p` acts on a slice
//! by gathering: `p.apply(items)[j] == items[p[j]]`.

use std::collections::HashSet;
use std::fmt;
use std::ops::Index;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generator used for every stochastic operation. ChaCha keeps streams
/// stable across platforms and crate upgrades.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent child seed, e.g. one per album, from a master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackFeatures {
    pub track_id: String,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_title: Option<String>,
}

impl TrackFeatures {
    pub fn new(track_id: impl Into<String>, features: Vec<f64>) -> Result<Self> {
        let track = TrackFeatures {
            track_id: track_id.into(),
            features,
            display_title: None,
        };
        track.check_finite()?;
        Ok(track)
    }

    pub fn with_title(mut self, title: impl Into<String>) -> Self {
        self.display_title = Some(title.into());
        self
    }

    pub fn dimension(&self) -> usize {
        self.features.len()
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature {i} of track {}",
                self.track_id
            )));
        }
        Ok(())
    }
}

/// An album with its tracks in ground-truth order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Album {
    pub album_id: String,
    pub tracks: Vec<TrackFeatures>,
}

impl Album {
    /// Builds an album, checking unique track ids, a shared feature
    /// dimension and finite features.
    pub fn new(album_id: impl Into<String>, tracks: Vec<TrackFeatures>) -> Result<Self> {
        let album = Album {
            album_id: album_id.into(),
            tracks,
        };
        album.validate()?;
        Ok(album)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.tracks {
            if !seen.insert(t.track_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate track id {:?} in album {:?}",
                    t.track_id, self.album_id
                )));
            }
            t.check_finite()?;
        }
        if let Some(first) = self.tracks.first() {
            let d = first.dimension();
            if let Some(t) = self.tracks.iter().find(|t| t.dimension() != d) {
                return Err(Error::InvalidArgument(format!(
                    "track {:?} has {} features, expected {d}",
                    t.track_id,
                    t.dimension()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn dimension(&self) -> Option<usize> {
        self.tracks.first().map(TrackFeatures::dimension)
    }

    pub fn track_ids(&self) -> Vec<&str> {
        self.tracks.iter().map(|t| t.track_id.as_str()).collect()
    }

    /// Row-major M×D feature matrix in the album's track order.
    pub fn feature_rows(&self) -> Vec<&[f64]> {
        self.tracks.iter().map(|t| t.features.as_slice()).collect()
    }

    /// The album with its tracks reordered by `p` (gather semantics).
    pub fn permuted(&self, p: &Permutation) -> Result<Album> {
        Ok(Album {
            album_id: self.album_id.clone(),
            tracks: p.apply(&self.tracks)?,
        })
    }
}

/// A bijection on `0..M`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let m = mapping.len();
        let mut seen = vec![false; m];
        for (j, &v) in mapping.iter().enumerate() {
            if v >= m {
                return Err(Error::InvalidPermutation(format!(
                    "entry {v} at position {j} is out of range for size {m}"
                )));
            }
            if std::mem::replace(&mut seen[v], true) {
                return Err(Error::InvalidPermutation(format!(
                    "entry {v} appears more than once"
                )));
            }
        }
        Ok(Permutation(mapping))
    }

    pub fn identity(m: usize) -> Self {
        Permutation((0..m).collect())
    }

    /// Uniformly random permutation by Fisher–Yates.
    pub fn random<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument(
                "random permutation needs at least one element".into(),
            ));
        }
        let mut mapping: Vec<usize> = (0..m).collect();
        mapping.shuffle(rng);
        Ok(Permutation(mapping))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }

    /// Returns `q` with `q[p[j]] == j`.
    pub fn inverse(&self) -> Permutation {
        let mut q = vec![0; self.0.len()];
        for (j, &v) in self.0.iter().enumerate() {
            q[v] = j;
        }
        Permutation(q)
    }

    /// `out[j] = items[self[j]]`.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Result<Vec<T>> {
        if items.len() != self.0.len() {
            return Err(Error::LengthMismatch {
                expected: self.0.len(),
                actual: items.len(),
            });
        }
        Ok(self.0.iter().map(|&i| items[i].clone()).collect())
    }

    /// `r[j] = self[other[j]]`, so that
    /// `r.apply(x) == other.apply(&self.apply(x))`.
    pub fn compose(&self, other: &Permutation) -> Result<Permutation> {
        if other.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(Permutation(other.0.iter().map(|&i| self.0[i]).collect()))
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(j, &v)| j == v)
    }
}

impl Index<usize> for Permutation {
    type Output = usize;

    fn index(&self, j: usize) -> &usize {
        &self.0[j]
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Permutation::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Vec<usize> {
        p.0
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "]")
    }
}

/// One scalar narrative value per track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EssenceSeries(Vec<f64>);

impl EssenceSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("essence value {i}")));
        }
        Ok(EssenceSeries(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn reordered(&self, p: &Permutation) -> Result<EssenceSeries> {
        Ok(EssenceSeries(p.apply(&self.0)?))
    }
}
