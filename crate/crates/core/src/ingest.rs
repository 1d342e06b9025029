//! Corpus loading, synthetic corpus generation and album-level splits.
//!
//! The on-disk format is a CSV with header
//! `album_id,track_id,track_position,title,f0,...,f{D-1}`, or a JSON array
//! of rows with the same fields (features as an array) when the file has a
//! `.json` extension.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{seeded_rng, Album, TrackFeatures};
use crate::error::{Error, Result};

pub const DEFAULT_DIMENSION: usize = 525;
pub const DEFAULT_MIN_TRACKS: usize = 3;
pub const DEFAULT_MAX_TRACKS: usize = 20;

const FIXED_COLUMNS: [&str; 4] = ["album_id", "track_id", "track_position", "title"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub dimension: usize,
    pub albums: Vec<Album>,
    pub provenance: String,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.albums.len()
    }

    pub fn is_empty(&self) -> bool {
        self.albums.is_empty()
    }

    pub fn max_album_len(&self) -> usize {
        self.albums.iter().map(Album::len).max().unwrap_or(0)
    }

    pub fn album(&self, album_id: &str) -> Option<&Album> {
        self.albums.iter().find(|a| a.album_id == album_id)
    }
}

/// Album filter and expected dimension applied while loading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadConfig {
    /// When set, the file's feature count must equal this.
    pub dimension: Option<usize>,
    pub min_tracks: usize,
    pub max_tracks: usize,
}

impl Default for LoadConfig {
    fn default() -> Self {
        LoadConfig {
            dimension: None,
            min_tracks: DEFAULT_MIN_TRACKS,
            max_tracks: DEFAULT_MAX_TRACKS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub kept: usize,
    /// Album ids outside the configured size bounds.
    pub dropped: Vec<String>,
}

/// One flat row of the corpus format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRow {
    pub album_id: String,
    pub track_id: String,
    pub track_position: i64,
    #[serde(default)]
    pub title: Option<String>,
    pub features: Vec<f64>,
}

pub fn load_corpus(path: impl AsRef<Path>, config: &LoadConfig) -> Result<LoadedCorpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        parse_corpus_json(&text, &source, config)
    } else {
        parse_corpus_csv(&text, &source, config)
    }
}

pub fn parse_corpus_csv(text: &str, source: &str, config: &LoadConfig) -> Result<LoadedCorpus> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let columns: Vec<&str> = header.iter().map(str::trim).collect();
    if columns.len() < FIXED_COLUMNS.len() || columns[..4] != FIXED_COLUMNS {
        return Err(parse_err(
            1,
            format!("header must start with {}", FIXED_COLUMNS.join(",")),
        ));
    }
    let dimension = columns.len() - FIXED_COLUMNS.len();
    for (i, name) in columns[4..].iter().enumerate() {
        if *name != format!("f{i}") {
            return Err(parse_err(
                1,
                format!("expected column f{i}, found {name:?}"),
            ));
        }
    }
    check_dimension(dimension, config, source)?;

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != columns.len() {
            return Err(parse_err(
                line,
                format!(
                    "expected {} columns ({} features), found {}",
                    columns.len(),
                    dimension,
                    record.len()
                ),
            ));
        }
        let track_position = record[2]
            .trim()
            .parse::<i64>()
            .map_err(|e| parse_err(line, format!("bad track_position {:?}: {e}", &record[2])))?;
        let features = record
            .iter()
            .skip(4)
            .enumerate()
            .map(|(i, cell)| {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|e| parse_err(line, format!("bad value {cell:?} in f{i}: {e}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_err(line, format!("non-finite value in f{i}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((
            line,
            CorpusRow {
                album_id: record[0].to_string(),
                track_id: record[1].to_string(),
                track_position,
                title: (!record[3].is_empty()).then(|| record[3].to_string()),
                features,
            },
        ));
    }
    assemble(rows, dimension, source, config)
}

pub fn parse_corpus_json(text: &str, source: &str, config: &LoadConfig) -> Result<LoadedCorpus> {
    let rows: Vec<CorpusRow> = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: source.to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    // JSON rows have no line numbers of their own; report the 1-based row index.
    let dimension = match (config.dimension, rows.first()) {
        (Some(d), _) => d,
        (None, Some(r)) => r.features.len(),
        (None, None) => 0,
    };
    check_dimension(dimension, config, source)?;
    let mut numbered = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        let line = i + 1;
        if row.features.len() != dimension {
            return Err(Error::Parse {
                path: source.to_string(),
                line,
                message: format!(
                    "row has {} features, expected {dimension}",
                    row.features.len()
                ),
            });
        }
        if row.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: source.to_string(),
                line,
                message: "non-finite feature value".into(),
            });
        }
        numbered.push((line, row));
    }
    assemble(numbered, dimension, source, config)
}

fn check_dimension(dimension: usize, config: &LoadConfig, source: &str) -> Result<()> {
    if dimension == 0 {
        return Err(Error::Parse {
            path: source.to_string(),
            line: 1,
            message: "no feature columns".into(),
        });
    }
    match config.dimension {
        Some(d) if d != dimension => Err(Error::DimensionMismatch {
            expected: d,
            actual: dimension,
        }),
        _ => Ok(()),
    }
}

fn assemble(
    rows: Vec<(usize, CorpusRow)>,
    dimension: usize,
    source: &str,
    config: &LoadConfig,
) -> Result<LoadedCorpus> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(usize, CorpusRow)>> = HashMap::new();
    for (line, row) in rows {
        let group = groups.entry(row.album_id.clone()).or_insert_with(|| {
            order.push(row.album_id.clone());
            Vec::new()
        });
        if let Some((first, _)) = group
            .iter()
            .find(|(_, r)| r.track_position == row.track_position)
        {
            return Err(Error::Parse {
                path: source.to_string(),
                line,
                message: format!(
                    "duplicate track_position {} in album {:?} (first seen on line {first})",
                    row.track_position, row.album_id
                ),
            });
        }
        if let Some((first, _)) = group.iter().find(|(_, r)| r.track_id == row.track_id) {
            return Err(Error::Parse {
                path: source.to_string(),
                line,
                message: format!(
                    "duplicate track_id {:?} in album {:?} (first seen on line {first})",
                    row.track_id, row.album_id
                ),
            });
        }
        group.push((line, row));
    }

    let mut albums = Vec::new();
    let mut dropped = Vec::new();
    for album_id in order {
        let mut group = groups.remove(&album_id).unwrap_or_default();
        if group.len() < config.min_tracks || group.len() > config.max_tracks {
            dropped.push(album_id);
            continue;
        }
        group.sort_by_key(|(_, r)| r.track_position);
        let tracks = group
            .into_iter()
            .map(|(_, r)| TrackFeatures {
                track_id: r.track_id,
                features: r.features,
                display_title: r.title.filter(|t| !t.is_empty()),
            })
            .collect();
        albums.push(Album::new(album_id, tracks)?);
    }
    Ok(LoadedCorpus {
        kept: albums.len(),
        corpus: Corpus {
            dimension,
            albums,
            provenance: source.to_string(),
        },
        dropped,
    })
}

/// Flatten a corpus into rows; track positions are 1-based.
pub fn corpus_rows(corpus: &Corpus) -> Vec<CorpusRow> {
    corpus
        .albums
        .iter()
        .flat_map(|a| {
            a.tracks.iter().enumerate().map(|(i, t)| CorpusRow {
                album_id: a.album_id.clone(),
                track_id: t.track_id.clone(),
                track_position: i as i64 + 1,
                title: t.display_title.clone(),
                features: t.features.clone(),
            })
        })
        .collect()
}

pub fn corpus_to_csv(corpus: &Corpus) -> Result<String> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..corpus.dimension).map(|i| format!("f{i}")));
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv write: {e}"));
    writer.write_record(&header).map_err(csv_err)?;
    for row in corpus_rows(corpus) {
        let mut record = vec![
            row.album_id,
            row.track_id,
            row.track_position.to_string(),
            row.title.unwrap_or_default(),
        ];
        // `Display` for f64 is the shortest representation that round-trips.
        record.extend(row.features.iter().map(|v| v.to_string()));
        writer.write_record(&record).map_err(csv_err)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv write: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn corpus_to_json(corpus: &Corpus) -> Result<String> {
    Ok(serde_json::to_string(&corpus_rows(corpus))?)
}

/// Write CSV, or JSON when the extension is `.json`.
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
    {
        corpus_to_json(corpus)?
    } else {
        corpus_to_csv(corpus)?
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_albums: usize,
    pub min_tracks: usize,
    pub max_tracks: usize,
    pub dimension: usize,
    /// In [0, 1]; scales the position-dependent shift.
    pub signal_strength: f64,
    pub noise_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            n_albums: 200,
            min_tracks: 3,
            max_tracks: 8,
            dimension: 32,
            signal_strength: 1.0,
            noise_scale: 0.1,
        }
    }
}

/// Peak-to-peak length of the shift along the latent direction at full signal.
pub const SYNTHETIC_SHIFT_SPAN: f64 = 6.0;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_albums == 0 {
            return bad("n_albums must be positive".into());
        }
        if self.min_tracks < 1 || self.min_tracks > self.max_tracks {
            return bad(format!(
                "track range [{}, {}] is empty",
                self.min_tracks, self.max_tracks
            ));
        }
        if self.dimension < 2 {
            return bad("dimension must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return bad(format!(
                "signal_strength {} outside [0, 1]",
                self.signal_strength
            ));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale {} must be >= 0", self.noise_scale));
        }
        Ok(())
    }

    /// Fixed random unit direction along which the order signal is planted.
    pub fn latent_direction(&self) -> Vec<f64> {
        let mut rng = seeded_rng(self.seed);
        unit_direction(self.dimension, &mut rng)
    }
}

fn unit_direction<R: Rng>(dimension: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dimension).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Each track gets a Gaussian base vector orthogonal to the latent
/// direction `u`, plus `signal_strength * SPAN * (t - 0.5) * u` for a sorted
/// uniform latent position `t`, plus isotropic noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let direction = unit_direction(spec.dimension, &mut rng);
    let mut albums = Vec::with_capacity(spec.n_albums);
    for a in 0..spec.n_albums {
        let m = rng.gen_range(spec.min_tracks..=spec.max_tracks);
        let mut latent: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
        latent.sort_by(f64::total_cmp);
        let tracks = latent
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let mut base: Vec<f64> = (0..spec.dimension)
                    .map(|_| rng.sample(StandardNormal))
                    .collect();
                let along: f64 = base.iter().zip(&direction).map(|(b, u)| b * u).sum();
                let shift = spec.signal_strength * SYNTHETIC_SHIFT_SPAN * (t - 0.5);
                for (b, u) in base.iter_mut().zip(&direction) {
                    *b += (shift - along) * u;
                }
                for b in base.iter_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *b += spec.noise_scale * n;
                }
                TrackFeatures {
                    track_id: format!("a{a:04}-t{i:02}"),
                    features: base,
                    display_title: Some(format!("Album {a} track {}", i + 1)),
                }
            })
            .collect();
        albums.push(Album::new(format!("a{a:04}"), tracks)?);
    }
    Ok(Corpus {
        dimension: spec.dimension,
        albums,
        provenance: format!("synthetic:{}", spec.seed),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Corpus,
    pub validation: Corpus,
    pub test: Corpus,
}

/// Album-level shuffled split. Sizes are `round(f * n)` for train and
/// validation; test takes the remainder. A part may be empty only when its
/// fraction is zero.
pub fn split_corpus(corpus: &Corpus, fractions: SplitFractions, seed: u64) -> Result<CorpusSplit> {
    let SplitFractions {
        train,
        validation,
        test,
    } = fractions;
    if [train, validation, test]
        .iter()
        .any(|f| !(0.0..=1.0).contains(f))
        || (train + validation + test - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidArgument(format!(
            "split fractions {train}, {validation}, {test} must be in [0,1] and sum to 1"
        )));
    }
    let n = corpus.len();
    let n_train = (train * n as f64).round() as usize;
    let n_val = ((validation * n as f64).round() as usize).min(n - n_train.min(n));
    let n_test = n.saturating_sub(n_train + n_val);
    if n_train == 0 || (n_val == 0 && validation > 0.0) || (n_test == 0 && test > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "corpus of {n} albums is too small for split {n_train}/{n_val}/{n_test}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed));
    let take = |range: std::ops::Range<usize>, tag: &str| Corpus {
        dimension: corpus.dimension,
        albums: idx[range]
            .iter()
            .map(|&i| corpus.albums[i].clone())
            .collect(),
        provenance: format!("{}#{tag}", corpus.provenance),
    };
    Ok(CorpusSplit {
        train: take(0..n_train, "train"),
        validation: take(n_train..n_train + n_val, "validation"),
        test: take(n_train + n_val..n, "test"),
    })
}

/// Per-dimension z-scoring statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn identity(dimension: usize) -> Self {
        FeatureScaler {
            mean: vec![0.0; dimension],
            std: vec![1.0; dimension],
        }
    }

    /// Population statistics over every track in the corpus. Dimensions
    /// with (near-)zero spread keep unit scale.
    pub fn fit(corpus: &Corpus) -> Result<Self> {
        let d = corpus.dimension;
        let rows: Vec<&[f64]> = corpus
            .albums
            .iter()
            .flat_map(|a| a.tracks.iter().map(|t| t.features.as_slice()))
            .collect();
        if rows.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot fit scaler on an empty corpus".into(),
            ));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(FeatureScaler { mean, std })
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                actual: features.len(),
            });
        }
        Ok(features
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }
}
