//! Proposing track orders.
//!
//! The direct method samples orders autoregressively from the ordering
//! model and keeps the most likely distinct ones. The template method
//! rescales each track's scalar narrative value to `[0, 1]` and assigns
//! tracks to positions so the resulting arc follows a template curve as
//! closely as possible in L1.
//!
//! In a [`ProposedOrder`], `order[t]` is the index (in the album as given)
//! of the track played at position `t`.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Album, EssenceSeries, Permutation};
use crate::error::{Error, Result};
use crate::nn::OrderingModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposedOrder {
    pub order: Permutation,
    /// Natural-log likelihood under the model at temperature 1 (direct method).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_likelihood: Option<f64>,
    /// Minimal L1 distance to the template (template method).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_cost: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    /// Narrative value of each track, listed in proposed playing order.
    pub narrative_values: EssenceSeries,
}

impl ProposedOrder {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    /// Stepwise argmax; lowest index wins ties.
    Greedy,
    Temperature(f64),
}

/// Per-track narrative values for the album as given. Requires a model
/// with scalar codes.
pub fn extract_essence(model: &OrderingModel, album: &Album) -> Result<EssenceSeries> {
    if model.hyper().essence_dim != 1 {
        return Err(Error::InvalidArgument(format!(
            "narrative values need a checkpoint with essence_dim = 1 (this one has {})",
            model.hyper().essence_dim
        )));
    }
    let z = model.encode_tracks(&model.standardize(album)?)?;
    EssenceSeries::new(z.data)
}

/// First code component per track, used for display when codes are wider than 1.
fn display_values(codes: &crate::nn::Matrix) -> Vec<f64> {
    codes.column(0)
}

/// Draw `count` orders autoregressively with used slots masked. The
/// recorded log-likelihood is always at temperature 1.
pub fn sample_orders<R: Rng>(
    model: &OrderingModel,
    album: &Album,
    count: usize,
    sampling: Sampling,
    rng: &mut R,
) -> Result<Vec<ProposedOrder>> {
    if count == 0 {
        return Err(Error::InvalidArgument(
            "sample count must be at least 1".into(),
        ));
    }
    if let Sampling::Temperature(t) = sampling {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature {t} must be > 0"
            )));
        }
    }
    let m = album.len();
    let prepared = model.prepare(&model.standardize(album)?)?;
    let values = display_values(&prepared.codes);
    let mut cache: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut prefix = Vec::with_capacity(m);
        let mut log_likelihood = 0.0;
        for _ in 0..m {
            let lp = match cache.get(&prefix) {
                Some(lp) => lp.clone(),
                None => {
                    let lp = model.next_step_log_probs(&prepared, &prefix)?;
                    cache.insert(prefix.clone(), lp.clone());
                    lp
                }
            };
            let choice = match sampling {
                Sampling::Greedy => argmax(&lp),
                Sampling::Temperature(t) => sample_index(&lp, t, rng),
            };
            log_likelihood += lp[choice];
            prefix.push(choice);
        }
        let order = Permutation::new(prefix)?;
        out.push(ProposedOrder {
            narrative_values: EssenceSeries::new(order.apply(&values)?)?,
            order,
            log_likelihood: Some(log_likelihood),
            fit_cost: None,
            template: None,
        });
    }
    Ok(out)
}

fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

fn sample_index<R: Rng>(lp: &[f64], temperature: f64, rng: &mut R) -> usize {
    let max = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = lp
        .iter()
        .map(|&l| {
            if l == f64::NEG_INFINITY {
                0.0
            } else {
                ((l - max) / temperature).exp()
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        last = i;
        if u < *w {
            return i;
        }
        u -= w;
    }
    last
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopOrders {
    pub orders: Vec<ProposedOrder>,
    /// True when fewer than the requested number of distinct orders existed.
    pub shortfall: bool,
}

/// Distinct orders by descending likelihood; ties go to the
/// lexicographically smaller order.
pub fn top_n_orders(samples: &[ProposedOrder], n: usize) -> Result<TopOrders> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to rank".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let mut seen = HashSet::new();
    let mut unique: Vec<&ProposedOrder> = samples
        .iter()
        .filter(|s| seen.insert(s.order.clone()))
        .collect();
    let ll = |p: &ProposedOrder| p.log_likelihood.unwrap_or(f64::NEG_INFINITY);
    unique.sort_by(|a, b| ll(b).total_cmp(&ll(a)).then_with(|| a.order.cmp(&b.order)));
    let shortfall = unique.len() < n;
    Ok(TopOrders {
        orders: unique.into_iter().take(n).cloned().collect(),
        shortfall,
    })
}

/// Default number of samples drawn to pick the top `n`.
pub fn default_sample_count(n: usize) -> usize {
    (10 * n).max(100)
}

/// Piecewise-linear target arc over playing position in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateCurve {
    pub name: String,
    /// `(position_fraction, value)`, fractions strictly increasing from 0 to 1.
    pub control_points: Vec<(f64, f64)>,
}

impl TemplateCurve {
    pub fn new(name: impl Into<String>, control_points: Vec<(f64, f64)>) -> Result<Self> {
        let curve = TemplateCurve {
            name: name.into(),
            control_points,
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| {
            Err(Error::InvalidArgument(format!(
                "template {:?}: {m}",
                self.name
            )))
        };
        let pts = &self.control_points;
        if pts.len() < 2 {
            return bad("needs at least two control points".into());
        }
        if pts[0].0 != 0.0 || pts[pts.len() - 1].0 != 1.0 {
            return bad("fractions must start at 0 and end at 1".into());
        }
        if pts
            .windows(2)
            .any(|w| w[0].0.partial_cmp(&w[1].0) != Some(std::cmp::Ordering::Less))
        {
            return bad("fractions must be strictly increasing".into());
        }
        if pts
            .iter()
            .any(|(_, v)| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            return bad("values must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Linear interpolation; fractions outside `[0, 1]` are clamped.
    pub fn value_at(&self, fraction: f64) -> f64 {
        let x = fraction.clamp(0.0, 1.0);
        let pts = &self.control_points;
        let i = pts
            .windows(2)
            .position(|w| x <= w[1].0)
            .unwrap_or(pts.len() - 2);
        let ((x0, y0), (x1, y1)) = (pts[i], pts[i + 1]);
        let t = (x - x0) / (x1 - x0);
        y0 * (1.0 - t) + y1 * t
    }

    /// Values at the midpoints `(i + 0.5) / m`.
    pub fn sample_positions(&self, m: usize) -> Vec<f64> {
        (0..m)
            .map(|i| self.value_at((i as f64 + 0.5) / m as f64))
            .collect()
    }

    /// `points` evenly spaced samples including both endpoints, with each
    /// interior control point moved onto its nearest sample so corners
    /// such as the arch apex are drawn exactly.
    pub fn polyline(&self, points: usize) -> Vec<(f64, f64)> {
        let last = points.saturating_sub(1).max(1) as f64;
        let mut xs: Vec<f64> = (0..points).map(|i| i as f64 / last).collect();
        if points > 2 {
            for &(cx, _) in &self.control_points[1..self.control_points.len() - 1] {
                let i = ((cx * last).round() as usize).clamp(1, points - 2);
                if xs[i - 1] < cx && cx < xs[i + 1] {
                    xs[i] = cx;
                }
            }
        }
        xs.into_iter().map(|x| (x, self.value_at(x))).collect()
    }
}

pub fn builtin_templates() -> Vec<TemplateCurve> {
    let t = |name: &str, pts: &[(f64, f64)]| {
        TemplateCurve::new(name, pts.to_vec()).expect("built-in template is valid")
    };
    vec![
        t("rising", &[(0.0, 0.0), (1.0, 1.0)]),
        t("falling", &[(0.0, 1.0), (1.0, 0.0)]),
        t("arch", &[(0.0, 0.0), (0.5, 1.0), (1.0, 0.0)]),
        t("valley", &[(0.0, 1.0), (0.5, 0.0), (1.0, 1.0)]),
        t("late-peak", &[(0.0, 0.2), (0.8, 1.0), (1.0, 0.6)]),
        t("early-peak", &[(0.0, 0.6), (0.2, 1.0), (1.0, 0.0)]),
        t(
            "wave",
            &[(0.0, 0.2), (0.25, 0.8), (0.5, 0.3), (0.75, 1.0), (1.0, 0.5)],
        ),
    ]
}

pub fn find_template(name: &str) -> Option<TemplateCurve> {
    builtin_templates().into_iter().find(|t| t.name == name)
}

/// Min-max rescaling to `[0, 1]`; a constant series maps to 0.5.
pub fn rescale_unit(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Exact L1 fit by monotone matching: the k-th smallest rescaled value goes
/// to the position with the k-th smallest template sample. Within a group
/// of positions sharing one template value the tracks are laid out in input
/// order, so a flat template returns the album unchanged.
pub fn fit_to_template(
    essence: &EssenceSeries,
    template: &TemplateCurve,
    m: usize,
) -> Result<ProposedOrder> {
    if essence.len() != m {
        return Err(Error::LengthMismatch {
            expected: m,
            actual: essence.len(),
        });
    }
    if m == 0 {
        return Err(Error::InvalidArgument("cannot fit an empty album".into()));
    }
    let scaled = rescale_unit(essence.values());
    let targets = template.sample_positions(m);

    let mut tracks: Vec<usize> = (0..m).collect();
    tracks.sort_by(|&a, &b| scaled[a].total_cmp(&scaled[b]).then(a.cmp(&b)));
    let mut positions: Vec<usize> = (0..m).collect();
    positions.sort_by(|&a, &b| targets[a].total_cmp(&targets[b]).then(a.cmp(&b)));

    let mut order = vec![0; m];
    let mut start = 0;
    while start < m {
        let mut end = start + 1;
        while end < m && targets[positions[end]] == targets[positions[start]] {
            end += 1;
        }
        let mut group_tracks = tracks[start..end].to_vec();
        group_tracks.sort_unstable();
        let mut group_positions = positions[start..end].to_vec();
        group_positions.sort_unstable();
        for (p, t) in group_positions.into_iter().zip(group_tracks) {
            order[p] = t;
        }
        start = end;
    }

    let fit_cost = order
        .iter()
        .enumerate()
        .map(|(p, &t)| (scaled[t] - targets[p]).abs())
        .sum();
    let order = Permutation::new(order)?;
    Ok(ProposedOrder {
        narrative_values: essence.reordered(&order)?,
        order,
        log_likelihood: None,
        fit_cost: Some(fit_cost),
        template: Some(template.name.clone()),
    })
}

/// Sample and rank with the default sample count.
pub fn direct_orders<R: Rng>(
    model: &OrderingModel,
    album: &Album,
    n: usize,
    rng: &mut R,
) -> Result<TopOrders> {
    let samples = sample_orders(
        model,
        album,
        default_sample_count(n),
        Sampling::Temperature(1.0),
        rng,
    )?;
    top_n_orders(&samples, n)
}
