//! Scoring proposed orders against ground truth.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{derive_seed, seeded_rng, Album, Permutation};
use crate::error::{Error, Result};
use crate::ingest::Corpus;
use crate::nn::OrderingModel;
use crate::sequencer::{
    builtin_templates, default_sample_count, extract_essence, fit_to_template, sample_orders,
    top_n_orders, Sampling,
};

/// Unit-cost edit distance (insertions, deletions, substitutions).
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// `max over proposals of 1 - levenshtein(p, truth) / |truth|`.
pub fn edit_score<T: PartialEq, P: AsRef<[T]>>(proposals: &[P], truth: &[T]) -> Result<f64> {
    if proposals.is_empty() {
        return Err(Error::InvalidArgument("no proposed orders".into()));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("empty ground-truth order".into()));
    }
    let m = truth.len();
    let mut best = f64::NEG_INFINITY;
    for p in proposals {
        let p = p.as_ref();
        if p.len() != m {
            return Err(Error::LengthMismatch {
                expected: m,
                actual: p.len(),
            });
        }
        best = best.max(1.0 - levenshtein(p, truth) as f64 / m as f64);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    /// Sample mean and standard error (n − 1 denominator).
    pub fn from_samples(xs: &[f64]) -> Estimate {
        let n = xs.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                stderr: f64::NAN,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Estimate { mean, stderr: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Estimate {
            mean,
            stderr: (var / n as f64).sqrt(),
        }
    }
}

impl fmt::Display for Estimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.stderr)
    }
}

/// Monte Carlo expectation of the edit score of `k` uniform random orders
/// against the identity order of length `m`.
pub fn random_baseline<R: Rng>(m: usize, k: usize, rng: &mut R, trials: usize) -> Result<Estimate> {
    if k == 0 || trials == 0 || m == 0 {
        return Err(Error::InvalidArgument(
            "random baseline needs m, k and trials >= 1".into(),
        ));
    }
    let truth: Vec<usize> = (0..m).collect();
    let scores = (0..trials)
        .map(|_| {
            let proposals = (0..k)
                .map(|_| Permutation::random(m, rng).map(Permutation::into_vec))
                .collect::<Result<Vec<_>>>()?;
            edit_score(&proposals, &truth)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&scores))
}

pub fn log2_factorial(m: usize) -> f64 {
    (1..=m).map(|k| (k as f64).log2()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlbumInformation {
    pub album_id: String,
    pub m: usize,
    /// `log2(M!) - mean total cross-entropy in bits`; may be negative.
    pub bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformationEstimate {
    /// Over albums, using the raw (unclipped) per-album values.
    pub bits: Estimate,
    /// Over albums after clipping each value below at 0.
    pub bits_clipped: Estimate,
    pub per_album: Vec<AlbumInformation>,
}

/// Per-step cross-entropies (nats) of the true order `sigma⁻¹` for an album
/// presented as `sigma.apply(tracks)`.
pub trait StepScorer {
    fn step_nats(&self, album: &Album, sigma: &Permutation) -> Result<Vec<f64>>;
}

impl StepScorer for OrderingModel {
    fn step_nats(&self, album: &Album, sigma: &Permutation) -> Result<Vec<f64>> {
        Ok(self.sequence_loss_detailed(album, sigma, true)?.step_nats)
    }
}

/// Bits of order information the model recovers from the track set, per
/// album, averaged over `n_shuffles` fresh presentations of each album.
pub fn mutual_information_estimate<S: StepScorer + ?Sized, R: Rng>(
    model: &S,
    corpus: &Corpus,
    n_shuffles: usize,
    rng: &mut R,
) -> Result<InformationEstimate> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("corpus is empty".into()));
    }
    if n_shuffles == 0 {
        return Err(Error::InvalidArgument("need at least one shuffle".into()));
    }
    let mut per_album = Vec::with_capacity(corpus.len());
    for album in &corpus.albums {
        let mut ce_bits = 0.0;
        for _ in 0..n_shuffles {
            let sigma = Permutation::random(album.len(), rng)?;
            let nats: f64 = model.step_nats(album, &sigma)?.iter().sum();
            ce_bits += nats / std::f64::consts::LN_2;
        }
        ce_bits /= n_shuffles as f64;
        let bits = log2_factorial(album.len()) - ce_bits;
        if !bits.is_finite() {
            return Err(Error::NonFinite(format!(
                "information estimate for album {:?}",
                album.album_id
            )));
        }
        per_album.push(AlbumInformation {
            album_id: album.album_id.clone(),
            m: album.len(),
            bits,
        });
    }
    let raw: Vec<f64> = per_album.iter().map(|a| a.bits).collect();
    let clipped: Vec<f64> = raw.iter().map(|b| b.max(0.0)).collect();
    Ok(InformationEstimate {
        bits: Estimate::from_samples(&raw),
        bits_clipped: Estimate::from_samples(&clipped),
        per_album,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Direct,
    Template,
    Random,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Direct, Method::Template, Method::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Template => "template",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k_values: Vec<usize>,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// Orders sampled per album for the direct method; defaults to
    /// `max(10 * max_k, 100)`.
    pub direct_samples: Option<usize>,
    /// Monte Carlo trials per album for the random baseline.
    pub random_trials: usize,
    /// Shuffles per album for the information estimate; 0 skips it.
    pub information_shuffles: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_values: vec![1, 2, 3, 4, 5],
            methods: Method::ALL.to_vec(),
            seed: 0,
            direct_samples: None,
            random_trials: 64,
            information_shuffles: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlbumRecord {
    pub album_id: String,
    pub m: usize,
    pub k: usize,
    pub method: Method,
    pub edit_score: f64,
    /// Fewer than `k` distinct proposals were available.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub k: usize,
    pub albums: usize,
    pub edit_score: Estimate,
    pub truncated_albums: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub k_values: Vec<usize>,
    pub records: Vec<AlbumRecord>,
    pub aggregates: Vec<AggregateRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub information: Option<InformationEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub method: Method,
    pub k: Vec<usize>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl EvalReport {
    pub fn aggregate(&self, method: Method, k: usize) -> Option<&AggregateRow> {
        self.aggregates
            .iter()
            .find(|r| r.method == method && r.k == k)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("album_id,m,k,method,edit_score,truncated\n");
        for r in &self.records {
            let id = if r.album_id.contains([',', '"', '\n']) {
                format!("\"{}\"", r.album_id.replace('"', "\"\""))
            } else {
                r.album_id.clone()
            };
            out.push_str(&format!(
                "{id},{},{},{},{},{}\n",
                r.m, r.k, r.method, r.edit_score, r.truncated
            ));
        }
        out
    }

    /// k against mean ± standard error, one series per method.
    pub fn plot_data(&self) -> Vec<PlotSeries> {
        let mut by_method: BTreeMap<Method, PlotSeries> = BTreeMap::new();
        for row in &self.aggregates {
            let s = by_method.entry(row.method).or_insert_with(|| PlotSeries {
                method: row.method,
                k: Vec::new(),
                mean: Vec::new(),
                stderr: Vec::new(),
            });
            s.k.push(row.k);
            s.mean.push(row.edit_score.mean);
            s.stderr.push(row.edit_score.stderr);
        }
        by_method.into_values().collect()
    }
}

/// Direct-method proposals for one album, mapped back to the album's own
/// indexing. The model sees a random shuffle so the true order is hidden.
fn direct_proposals(
    model: &OrderingModel,
    album: &Album,
    k: usize,
    samples: usize,
    seed: u64,
) -> Result<(Vec<Vec<usize>>, bool)> {
    let mut rng = seeded_rng(seed);
    let sigma = Permutation::random(album.len(), &mut rng)?;
    let shuffled = album.permuted(&sigma)?;
    let drawn = sample_orders(
        model,
        &shuffled,
        samples,
        Sampling::Temperature(1.0),
        &mut rng,
    )?;
    let top = top_n_orders(&drawn, k)?;
    let proposals = top
        .orders
        .iter()
        .map(|o| o.order.as_slice().iter().map(|&slot| sigma[slot]).collect())
        .collect();
    Ok((proposals, top.shortfall))
}

/// Score every album of `corpus` for each k and method. Per-album seeds are
/// derived from `config.seed`, so results do not depend on album order.
pub fn run_evaluation(
    model: &OrderingModel,
    corpus: &Corpus,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("evaluation corpus is empty".into()));
    }
    if config.k_values.is_empty() || config.k_values.contains(&0) {
        return Err(Error::InvalidArgument("k values must be >= 1".into()));
    }
    let max_k = *config.k_values.iter().max().expect("non-empty");
    let samples = config
        .direct_samples
        .unwrap_or_else(|| default_sample_count(max_k));
    let templates = builtin_templates();
    let mut records = Vec::new();

    for (ai, album) in corpus.albums.iter().enumerate() {
        let m = album.len();
        let truth: Vec<usize> = (0..m).collect();
        let album_seed = derive_seed(config.seed, ai as u64);
        for &method in &config.methods {
            match method {
                Method::Direct => {
                    // One sample pool per album; each k takes its top-k prefix.
                    let (proposals, _) =
                        direct_proposals(model, album, max_k, samples, derive_seed(album_seed, 1))?;
                    for &k in &config.k_values {
                        let take = k.min(proposals.len());
                        records.push(AlbumRecord {
                            album_id: album.album_id.clone(),
                            m,
                            k,
                            method,
                            edit_score: edit_score(&proposals[..take], &truth)?,
                            truncated: take < k,
                        });
                    }
                }
                Method::Template => {
                    let essence = extract_essence(model, album)?;
                    let fits: Vec<Vec<usize>> = templates
                        .iter()
                        .map(|t| fit_to_template(&essence, t, m).map(|f| f.order.into_vec()))
                        .collect::<Result<_>>()?;
                    for &k in &config.k_values {
                        let take = k.min(fits.len());
                        records.push(AlbumRecord {
                            album_id: album.album_id.clone(),
                            m,
                            k,
                            method,
                            edit_score: edit_score(&fits[..take], &truth)?,
                            truncated: take < k,
                        });
                    }
                }
                Method::Random => {
                    for &k in &config.k_values {
                        let mut rng = seeded_rng(derive_seed(album_seed, 1000 + k as u64));
                        let est = random_baseline(m, k, &mut rng, config.random_trials)?;
                        records.push(AlbumRecord {
                            album_id: album.album_id.clone(),
                            m,
                            k,
                            method,
                            edit_score: est.mean,
                            truncated: false,
                        });
                    }
                }
            }
        }
    }

    let mut aggregates = Vec::new();
    for &method in &config.methods {
        for &k in &config.k_values {
            let rows: Vec<&AlbumRecord> = records
                .iter()
                .filter(|r| r.method == method && r.k == k)
                .collect();
            let scores: Vec<f64> = rows.iter().map(|r| r.edit_score).collect();
            aggregates.push(AggregateRow {
                method,
                k,
                albums: rows.len(),
                edit_score: Estimate::from_samples(&scores),
                truncated_albums: rows.iter().filter(|r| r.truncated).count(),
            });
        }
    }

    let information = if config.information_shuffles > 0 {
        let mut rng = seeded_rng(derive_seed(config.seed, u64::MAX - 1));
        Some(mutual_information_estimate(
            model,
            corpus,
            config.information_shuffles,
            &mut rng,
        )?)
    } else {
        None
    };

    Ok(EvalReport {
        seed: config.seed,
        k_values: config.k_values.clone(),
        records,
        aggregates,
        information,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive search over edit scripts, by plain recursion.
    fn edit_oracle(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = edit_oracle(ra, rb) + usize::from(x != y);
                let del = edit_oracle(ra, b) + 1;
                let ins = edit_oracle(a, rb) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(levenshtein(&[2, 1, 3], &[1, 2, 3]), 2);
        assert_eq!(levenshtein(&[1, 2, 3], &[3, 1, 2]), 2);
        assert_eq!(levenshtein::<u8>(&[], &[1, 2]), 2);
        assert_eq!(levenshtein(&[1, 2], &[]), 2);
        assert_eq!(edit_oracle(&[2, 1, 3], &[1, 2, 3]), 2);
    }

    #[test]
    fn levenshtein_matches_recursive_oracle() {
        let mut rng = seeded_rng(1);
        for _ in 0..2000 {
            let la = rng.gen_range(0..=5);
            let lb = rng.gen_range(0..=5);
            let a: Vec<u8> = (0..la).map(|_| rng.gen_range(0..4)).collect();
            let b: Vec<u8> = (0..lb).map(|_| rng.gen_range(0..4)).collect();
            assert_eq!(levenshtein(&a, &b), edit_oracle(&a, &b), "{a:?} {b:?}");
        }
    }

    #[test]
    fn edit_score_examples() {
        let truth = [1, 2, 3];
        assert_eq!(edit_score(&[[3, 1, 2], [1, 2, 3]], &truth).unwrap(), 1.0);
        let s = edit_score(&[[2, 1, 3], [3, 1, 2]], &truth).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-15);
        assert!(edit_score::<i32, [i32; 3]>(&[], &truth).is_err());
        assert!(edit_score(&[vec![1, 2]], &truth).is_err());
    }

    #[test]
    fn edit_score_is_monotone_in_the_set() {
        let mut rng = seeded_rng(2);
        for _ in 0..200 {
            let m = rng.gen_range(1..=7);
            let truth: Vec<usize> = (0..m).collect();
            let mut set = vec![Permutation::random(m, &mut rng).unwrap().into_vec()];
            let mut prev = edit_score(&set, &truth).unwrap();
            for _ in 0..4 {
                set.push(Permutation::random(m, &mut rng).unwrap().into_vec());
                let s = edit_score(&set, &truth).unwrap();
                assert!((0.0..=1.0).contains(&s));
                assert!(s >= prev);
                prev = s;
            }
        }
    }

    #[test]
    fn random_baseline_edge_cases() {
        let mut rng = seeded_rng(0);
        assert_eq!(random_baseline(1, 3, &mut rng, 10).unwrap().mean, 1.0);
        assert!(random_baseline(3, 0, &mut rng, 10).is_err());
        let a = random_baseline(5, 2, &mut seeded_rng(4), 50).unwrap();
        let b = random_baseline(5, 2, &mut seeded_rng(4), 50).unwrap();
        assert_eq!(a, b);
    }

    /// Expected k=1 score for M=3 by enumerating all 6 equally likely orders.
    #[test]
    fn random_baseline_matches_enumeration() {
        let truth = [0usize, 1, 2];
        let perms = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let exact: f64 = perms
            .iter()
            .map(|p| 1.0 - edit_oracle_usize(p, &truth) as f64 / 3.0)
            .sum::<f64>()
            / 6.0;
        let est = random_baseline(3, 1, &mut seeded_rng(8), 40_000).unwrap();
        assert!(
            (est.mean - exact).abs() < 4.0 * est.stderr,
            "{est} vs {exact}"
        );
        let all: Vec<Vec<usize>> = perms.iter().map(|p| p.to_vec()).collect();
        assert_eq!(edit_score(&all, &truth).unwrap(), 1.0);
    }

    fn edit_oracle_usize(a: &[usize], b: &[usize]) -> usize {
        let a: Vec<u8> = a.iter().map(|&x| x as u8).collect();
        let b: Vec<u8> = b.iter().map(|&x| x as u8).collect();
        edit_oracle(&a, &b)
    }

    #[test]
    fn log2_factorial_values() {
        assert_eq!(log2_factorial(1), 0.0);
        assert!((log2_factorial(3) - 6f64.log2()).abs() < 1e-15);
    }

    #[test]
    fn estimate_stats() {
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        assert!((e.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }
}
