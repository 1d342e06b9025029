//! The joint ordering model: a two-layer track encoder producing a
//! low-dimensional code per track, followed by a two-layer pre-norm
//! encoder-decoder transformer that predicts, step by step, which input
//! slot comes next in the original order.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{sinusoidal_positions, Matrix};
use super::params::{GradientSet, Init, ParamStore};
use super::tape::{masked_log_softmax_rows, NodeId, Tape};
use crate::domain::{seeded_rng, Album, Permutation, SeededRng};
use crate::error::{Error, Result};
use crate::ingest::FeatureScaler;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Feature dimension D.
    pub input_dim: usize,
    /// Hidden width of the track encoder.
    pub hidden_dim: usize,
    /// Width of the per-track code; 1 gives a scalar narrative value.
    pub essence_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Size of the output position vocabulary and the longest album accepted.
    pub max_len: usize,
    pub dropout: f64,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            input_dim: crate::ingest::DEFAULT_DIMENSION,
            hidden_dim: 256,
            essence_dim: 1,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            max_len: 20,
            dropout: 0.1,
            encoder_layers: 2,
            decoder_layers: 2,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.encoder_layers != 2 || self.decoder_layers != 2 {
            return bad(
                "the ordering transformer has exactly 2 encoder and 2 decoder layers".into(),
            );
        }
        if [
            self.input_dim,
            self.hidden_dim,
            self.essence_dim,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.max_len,
        ]
        .contains(&0)
        {
            return bad("all widths must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    norm_attn: Norm,
    attn: Attn,
    norm_ff: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Debug, Clone, Copy)]
struct DecoderBlock {
    norm_self: Norm,
    self_attn: Attn,
    norm_cross: Norm,
    cross_attn: Attn,
    norm_ff: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Parameter indices into the store; rebuilt from the hyperparameters.
#[derive(Debug, Clone)]
struct Layout {
    track_hidden: Linear,
    track_out: Linear,
    embed: Linear,
    start: usize,
    encoder: Vec<EncoderBlock>,
    encoder_norm: Norm,
    decoder: Vec<DecoderBlock>,
    decoder_norm: Norm,
    head: Linear,
}

struct Declarer<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Declarer<'_, R> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.store.push(
                format!("{name}.weight"),
                fan_in,
                fan_out,
                Init::Xavier,
                self.rng,
            ),
            b: self
                .store
                .push(format!("{name}.bias"), 1, fan_out, Init::Zeros, self.rng),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            gain: self
                .store
                .push(format!("{name}.gain"), 1, width, Init::Ones, self.rng),
            bias: self
                .store
                .push(format!("{name}.bias"), 1, width, Init::Zeros, self.rng),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.query"), d, d),
            k: self.linear(&format!("{name}.key"), d, d),
            v: self.linear(&format!("{name}.value"), d, d),
            o: self.linear(&format!("{name}.out"), d, d),
        }
    }
}

fn declare<R: Rng>(hp: &Hyperparams, rng: &mut R) -> (Layout, ParamStore) {
    let mut store = ParamStore::default();
    let mut dec = Declarer {
        store: &mut store,
        rng,
    };
    let d = hp.d_model;
    let track_hidden = dec.linear("track_encoder.hidden", hp.input_dim, hp.hidden_dim);
    let track_out = dec.linear("track_encoder.out", hp.hidden_dim, hp.essence_dim);
    let embed = dec.linear("orderer.embed", hp.essence_dim, d);
    let start = dec
        .store
        .push("orderer.start_token".into(), 1, d, Init::Xavier, dec.rng);
    let encoder = (0..hp.encoder_layers)
        .map(|i| {
            let p = format!("orderer.encoder.{i}");
            EncoderBlock {
                norm_attn: dec.norm(&format!("{p}.norm_attn"), d),
                attn: dec.attn(&format!("{p}.self_attn"), d),
                norm_ff: dec.norm(&format!("{p}.norm_ff"), d),
                ff_in: dec.linear(&format!("{p}.ff_in"), d, hp.d_ff),
                ff_out: dec.linear(&format!("{p}.ff_out"), hp.d_ff, d),
            }
        })
        .collect();
    let encoder_norm = dec.norm("orderer.encoder.norm", d);
    let decoder = (0..hp.decoder_layers)
        .map(|i| {
            let p = format!("orderer.decoder.{i}");
            DecoderBlock {
                norm_self: dec.norm(&format!("{p}.norm_self"), d),
                self_attn: dec.attn(&format!("{p}.self_attn"), d),
                norm_cross: dec.norm(&format!("{p}.norm_cross"), d),
                cross_attn: dec.attn(&format!("{p}.cross_attn"), d),
                norm_ff: dec.norm(&format!("{p}.norm_ff"), d),
                ff_in: dec.linear(&format!("{p}.ff_in"), d, hp.d_ff),
                ff_out: dec.linear(&format!("{p}.ff_out"), hp.d_ff, d),
            }
        })
        .collect();
    let decoder_norm = dec.norm("orderer.decoder.norm", d);
    let head = dec.linear("orderer.head", d, hp.max_len);
    (
        Layout {
            track_hidden,
            track_out,
            embed,
            start,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            head,
        },
        store,
    )
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub train_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
}

/// Encoder, transformer and input scaling, ready for training or inference.
#[derive(Debug, Clone)]
pub struct OrderingModel {
    hyper: Hyperparams,
    layout: Layout,
    pub params: ParamStore,
    pub scaler: FeatureScaler,
    pub meta: TrainingMeta,
    positions: Matrix,
}

/// Per-step result of a teacher-forced pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// `-ln p(target_t)` for each decoding step, in nats.
    pub step_nats: Vec<f64>,
    /// Mean of `step_nats`.
    pub mean_nats: f64,
}

impl LossBreakdown {
    pub fn total_bits(&self) -> f64 {
        self.step_nats.iter().sum::<f64>() / std::f64::consts::LN_2
    }
}

struct Dropout<'r> {
    rate: f64,
    rng: &'r mut SeededRng,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape<'_>, x: NodeId) -> NodeId {
        let n = tape.value(x).data.len();
        let keep = 1.0 - self.rate;
        let mask = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        tape.dropout(x, mask)
    }
}

fn maybe_dropout(drop: &mut Option<Dropout<'_>>, tape: &mut Tape<'_>, x: NodeId) -> NodeId {
    match drop {
        Some(d) if d.rate > 0.0 => d.apply(tape, x),
        _ => x,
    }
}

impl OrderingModel {
    /// Fresh Xavier-initialized model, values snapped to f32 precision.
    pub fn new(hyper: Hyperparams, scaler: FeatureScaler, seed: u64) -> Result<Self> {
        hyper.validate()?;
        if scaler.dimension() != hyper.input_dim {
            return Err(Error::DimensionMismatch {
                expected: hyper.input_dim,
                actual: scaler.dimension(),
            });
        }
        let (layout, mut params) = declare(&hyper, &mut seeded_rng(seed));
        params.round_to_f32();
        Ok(OrderingModel {
            positions: sinusoidal_positions(hyper.max_len, hyper.d_model),
            hyper,
            layout,
            params,
            scaler,
            meta: TrainingMeta {
                seed,
                ..TrainingMeta::default()
            },
        })
    }

    /// Reassemble from stored parts, checking every block's name and shape.
    pub fn from_parts(
        hyper: Hyperparams,
        params: ParamStore,
        scaler: FeatureScaler,
        meta: TrainingMeta,
    ) -> Result<Self> {
        hyper.validate()?;
        let mut model = OrderingModel::new(hyper, scaler, 0)?;
        if params.blocks.len() != model.params.blocks.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter blocks, found {}",
                model.params.blocks.len(),
                params.blocks.len()
            )));
        }
        for (want, got) in model.params.blocks.iter().zip(&params.blocks) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "block {:?} {:?} does not match expected {:?} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        model.params = params;
        model.meta = meta;
        Ok(model)
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn max_len(&self) -> usize {
        self.hyper.max_len
    }

    /// Zero the output projection so every admissible position is equally likely.
    pub fn zero_output_head(&mut self) {
        for id in [self.layout.head.w, self.layout.head.b] {
            self.params.blocks[id].value.data.fill(0.0);
        }
    }

    #[cfg(test)]
    pub(crate) fn head_blocks(&self) -> (usize, usize) {
        (self.layout.head.w, self.layout.head.b)
    }

    /// Standardized M×D feature matrix for the album's tracks, in order.
    pub fn standardize(&self, album: &Album) -> Result<Matrix> {
        let rows = album
            .tracks
            .iter()
            .map(|t| self.scaler.transform(&t.features))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "album {:?} has no tracks",
                album.album_id
            )));
        }
        Ok(Matrix::from_rows(&rows))
    }

    fn check_album_len(&self, m: usize) -> Result<()> {
        if m == 0 || m > self.hyper.max_len {
            return Err(Error::InvalidArgument(format!(
                "album of {m} tracks outside 1..={}",
                self.hyper.max_len
            )));
        }
        Ok(())
    }

    fn track_codes(&self, tape: &mut Tape<'_>, x: NodeId) -> NodeId {
        let l = &self.layout;
        let (w1, b1, w2, b2) = (
            tape.param(l.track_hidden.w),
            tape.param(l.track_hidden.b),
            tape.param(l.track_out.w),
            tape.param(l.track_out.b),
        );
        let h = tape.linear(x, w1, b1);
        let h = tape.relu(h);
        tape.linear(h, w2, b2)
    }

    fn attention_block(
        &self,
        tape: &mut Tape<'_>,
        a: &Attn,
        query_src: NodeId,
        kv_src: NodeId,
        causal: bool,
    ) -> NodeId {
        let proj = |tape: &mut Tape<'_>, lin: &Linear, x: NodeId| {
            let (w, b) = (tape.param(lin.w), tape.param(lin.b));
            tape.linear(x, w, b)
        };
        let q = proj(tape, &a.q, query_src);
        let k = proj(tape, &a.k, kv_src);
        let v = proj(tape, &a.v, kv_src);
        let ctx = tape.attention(q, k, v, self.hyper.n_heads, causal);
        proj(tape, &a.o, ctx)
    }

    fn norm(&self, tape: &mut Tape<'_>, n: &Norm, x: NodeId) -> NodeId {
        let (g, b) = (tape.param(n.gain), tape.param(n.bias));
        tape.layer_norm(x, g, b)
    }

    fn feed_forward(
        &self,
        tape: &mut Tape<'_>,
        ff_in: &Linear,
        ff_out: &Linear,
        x: NodeId,
    ) -> NodeId {
        let (w1, b1, w2, b2) = (
            tape.param(ff_in.w),
            tape.param(ff_in.b),
            tape.param(ff_out.w),
            tape.param(ff_out.b),
        );
        let h = tape.linear(x, w1, b1);
        let h = tape.relu(h);
        tape.linear(h, w2, b2)
    }

    fn add_positions(&self, tape: &mut Tape<'_>, x: NodeId) -> NodeId {
        let rows = tape.value(x).rows;
        let pe = Matrix::from_vec(
            rows,
            self.hyper.d_model,
            self.positions.data[..rows * self.hyper.d_model].to_vec(),
        );
        let pe = tape.input(pe);
        tape.add(x, pe)
    }

    /// Encoder memory (M × d_model) for codes `z` given in input-slot order.
    fn memory(&self, tape: &mut Tape<'_>, z: NodeId, drop: &mut Option<Dropout<'_>>) -> NodeId {
        let l = &self.layout;
        let (w, b) = (tape.param(l.embed.w), tape.param(l.embed.b));
        let e = tape.linear(z, w, b);
        let e = self.add_positions(tape, e);
        let mut x = maybe_dropout(drop, tape, e);
        for blk in &l.encoder {
            let h = self.norm(tape, &blk.norm_attn, x);
            let a = self.attention_block(tape, &blk.attn, h, h, false);
            let a = maybe_dropout(drop, tape, a);
            x = tape.add(x, a);
            let h = self.norm(tape, &blk.norm_ff, x);
            let f = self.feed_forward(tape, &blk.ff_in, &blk.ff_out, h);
            let f = maybe_dropout(drop, tape, f);
            x = tape.add(x, f);
        }
        self.norm(tape, &l.encoder_norm, x)
    }

    /// Raw (unmasked) logits, one row per decoding step `0..=prefix.len()`.
    /// The step-`s` input token is the start embedding for `s == 0` and the
    /// memory row of the slot chosen at step `s - 1` afterwards.
    fn decode(
        &self,
        tape: &mut Tape<'_>,
        memory: NodeId,
        prefix: &[usize],
        drop: &mut Option<Dropout<'_>>,
    ) -> NodeId {
        let l = &self.layout;
        let start = tape.param(l.start);
        let tokens = if prefix.is_empty() {
            start
        } else {
            let chosen = tape.gather_rows(memory, prefix);
            tape.concat_rows(start, chosen)
        };
        let t = self.add_positions(tape, tokens);
        let mut x = maybe_dropout(drop, tape, t);
        for blk in &l.decoder {
            let h = self.norm(tape, &blk.norm_self, x);
            let a = self.attention_block(tape, &blk.self_attn, h, h, true);
            let a = maybe_dropout(drop, tape, a);
            x = tape.add(x, a);
            let h = self.norm(tape, &blk.norm_cross, x);
            let c = self.attention_block(tape, &blk.cross_attn, h, memory, false);
            let c = maybe_dropout(drop, tape, c);
            x = tape.add(x, c);
            let h = self.norm(tape, &blk.norm_ff, x);
            let f = self.feed_forward(tape, &blk.ff_in, &blk.ff_out, h);
            let f = maybe_dropout(drop, tape, f);
            x = tape.add(x, f);
        }
        let x = self.norm(tape, &l.decoder_norm, x);
        let (w, b) = (tape.param(l.head.w), tape.param(l.head.b));
        tape.linear(x, w, b)
    }

    /// Entries excluded at each step: positions `>= m`, and, when
    /// `mask_used`, the slots already chosen by earlier steps.
    fn step_masks(
        &self,
        m: usize,
        prefix: &[usize],
        steps: usize,
        mask_used: bool,
    ) -> Vec<(usize, usize)> {
        let mut masked = Vec::new();
        for t in 0..steps {
            masked.extend((m..self.hyper.max_len).map(|c| (t, c)));
            if mask_used {
                masked.extend(prefix[..t.min(prefix.len())].iter().map(|&c| (t, c)));
            }
        }
        masked
    }

    /// Per-track codes (M × essence_dim) for standardized features.
    pub fn encode_tracks(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols != self.hyper.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.hyper.input_dim,
                actual: features.cols,
            });
        }
        self.check_album_len(features.rows)?;
        let mut tape = Tape::new(&self.params);
        let x = tape.input(features.clone());
        let z = self.track_codes(&mut tape, x);
        let z = tape.value(z).clone();
        if !z.is_finite() {
            return Err(Error::NonFinite("track encoder output".into()));
        }
        Ok(z)
    }

    fn check_prefix(&self, m: usize, prefix: &[usize]) -> Result<()> {
        if prefix.len() >= m {
            return Err(Error::InvalidArgument(format!(
                "prefix of length {} for an album of {m} tracks",
                prefix.len()
            )));
        }
        let mut seen = HashSet::new();
        for &p in prefix {
            if p >= m {
                return Err(Error::InvalidArgument(format!(
                    "prefix index {p} out of range for {m} tracks"
                )));
            }
            if !seen.insert(p) {
                return Err(Error::InvalidArgument(format!("prefix repeats index {p}")));
            }
        }
        Ok(())
    }

    /// Masked logits ((t+1) × max_len) for codes `z` (M × essence_dim, in
    /// input-slot order) under teacher forcing with `prefix` (length t).
    /// Excluded entries are `-inf`.
    pub fn forward_logits(&self, z: &Matrix, prefix: &[usize], mask_used: bool) -> Result<Matrix> {
        if z.cols != self.hyper.essence_dim {
            return Err(Error::DimensionMismatch {
                expected: self.hyper.essence_dim,
                actual: z.cols,
            });
        }
        let m = z.rows;
        self.check_album_len(m)?;
        self.check_prefix(m, prefix)?;
        let mut tape = Tape::new(&self.params);
        let zn = tape.input(z.clone());
        let memory = self.memory(&mut tape, zn, &mut None);
        let logits = self.decode(&mut tape, memory, prefix, &mut None);
        let masks = self.step_masks(m, prefix, prefix.len() + 1, mask_used);
        let logits = tape.mask(logits, &masks);
        Ok(tape.value(logits).clone())
    }

    /// Encoder memory for one album presentation, reused across decoding steps.
    pub fn prepare(&self, shuffled_features: &Matrix) -> Result<PreparedAlbum> {
        let z = self.encode_tracks(shuffled_features)?;
        let mut tape = Tape::new(&self.params);
        let zn = tape.input(z.clone());
        let memory = self.memory(&mut tape, zn, &mut None);
        Ok(PreparedAlbum {
            memory: tape.value(memory).clone(),
            codes: z,
        })
    }

    /// Log-probabilities over slots for the step following `prefix`;
    /// used slots and positions `>= M` are `-inf`.
    pub fn next_step_log_probs(
        &self,
        prepared: &PreparedAlbum,
        prefix: &[usize],
    ) -> Result<Vec<f64>> {
        let m = prepared.memory.rows;
        self.check_prefix(m, prefix)?;
        let mut tape = Tape::new(&self.params);
        let memory = tape.input(prepared.memory.clone());
        let logits = self.decode(&mut tape, memory, prefix, &mut None);
        let all = tape.value(logits);
        let last = prefix.len();
        let mut row = all.row(last).to_vec();
        for (c, v) in row.iter_mut().enumerate() {
            if c >= m || prefix.contains(&c) {
                *v = f64::NEG_INFINITY;
            }
        }
        let lp = masked_log_softmax_rows(&Matrix::from_vec(1, row.len(), row));
        Ok(lp.data[..m].to_vec())
    }

    fn loss_graph<'t>(
        &'t self,
        album: &Album,
        sigma: &Permutation,
        mask_used: bool,
        weight: f64,
        dropout_rng: Option<&mut SeededRng>,
    ) -> Result<(Tape<'t>, NodeId, NodeId, Vec<usize>)> {
        let m = album.len();
        self.check_album_len(m)?;
        if sigma.len() != m {
            return Err(Error::LengthMismatch {
                expected: m,
                actual: sigma.len(),
            });
        }
        let features = self.standardize(album)?;
        let rows: Vec<&[f64]> = (0..m).map(|i| features.row(i)).collect();
        let shuffled = Matrix::from_rows(&sigma.apply(&rows)?);
        let target = sigma.inverse().into_vec();
        let mut drop = dropout_rng.map(|rng| Dropout {
            rate: self.hyper.dropout,
            rng,
        });
        let mut tape = Tape::new(&self.params);
        let x = tape.input(shuffled);
        let z = self.track_codes(&mut tape, x);
        let memory = self.memory(&mut tape, z, &mut drop);
        let logits = self.decode(&mut tape, memory, &target[..m - 1], &mut drop);
        let masks = self.step_masks(m, &target, m, mask_used);
        let logits = tape.mask(logits, &masks);
        let loss = tape.cross_entropy(logits, &target, weight);
        Ok((tape, logits, loss, target))
    }

    /// Mean per-step cross-entropy (nats) of the target `sigma⁻¹` when the
    /// model is shown `sigma.apply(tracks)`, with used-slot masking.
    pub fn sequence_loss(&self, album: &Album, sigma: &Permutation) -> Result<f64> {
        Ok(self.sequence_loss_detailed(album, sigma, true)?.mean_nats)
    }

    pub fn sequence_loss_detailed(
        &self,
        album: &Album,
        sigma: &Permutation,
        mask_used: bool,
    ) -> Result<LossBreakdown> {
        let (tape, logits, loss, target) = self.loss_graph(album, sigma, mask_used, 1.0, None)?;
        let lp = masked_log_softmax_rows(tape.value(logits));
        let step_nats: Vec<f64> = target
            .iter()
            .enumerate()
            .map(|(t, &y)| -lp.get(t, y))
            .collect();
        let mean_nats = tape.value(loss).data[0];
        if !mean_nats.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss on album {:?}",
                album.album_id
            )));
        }
        Ok(LossBreakdown {
            step_nats,
            mean_nats,
        })
    }

    /// Loss and exact gradients for every parameter block.
    pub fn backward(&self, album: &Album, sigma: &Permutation) -> Result<(f64, GradientSet)> {
        self.backward_with(album, sigma, 1.0, None)
    }

    /// As [`backward`](Self::backward) with the objective scaled by `weight`
    /// and optional dropout driven by `dropout_rng`.
    pub fn backward_with(
        &self,
        album: &Album,
        sigma: &Permutation,
        weight: f64,
        dropout_rng: Option<&mut SeededRng>,
    ) -> Result<(f64, GradientSet)> {
        let (tape, _, loss, _) = self.loss_graph(album, sigma, true, weight, dropout_rng)?;
        let value = tape.value(loss).data[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss on album {:?}",
                album.album_id
            )));
        }
        let grads = tape.backward(loss);
        let set = tape.param_gradients(&grads);
        set.check_finite(&self.params)?;
        Ok((value, set))
    }
}

/// Cached encoder output for one presentation of an album.
#[derive(Debug, Clone)]
pub struct PreparedAlbum {
    pub memory: Matrix,
    /// Per-slot codes, M × essence_dim.
    pub codes: Matrix,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TrackFeatures;

    pub(crate) fn tiny_hyper() -> Hyperparams {
        Hyperparams {
            input_dim: 6,
            hidden_dim: 4,
            essence_dim: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_len: 5,
            dropout: 0.0,
            ..Hyperparams::default()
        }
    }

    fn album(m: usize, d: usize, seed: u64) -> Album {
        let mut rng = seeded_rng(seed);
        let tracks = (0..m)
            .map(|i| {
                TrackFeatures::new(
                    format!("t{i}"),
                    (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect(),
                )
                .unwrap()
            })
            .collect();
        Album::new("x", tracks).unwrap()
    }

    #[test]
    fn zero_encoder_gives_zero_codes() {
        let mut model = OrderingModel::new(tiny_hyper(), FeatureScaler::identity(6), 1).unwrap();
        for name in [
            "track_encoder.hidden.weight",
            "track_encoder.hidden.bias",
            "track_encoder.out.weight",
            "track_encoder.out.bias",
        ] {
            model.params.get_mut(name).unwrap().data.fill(0.0);
        }
        let z = model
            .encode_tracks(&model.standardize(&album(3, 6, 0)).unwrap())
            .unwrap();
        assert!(z.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_track_encoder() {
        let hp = Hyperparams {
            input_dim: 1,
            hidden_dim: 1,
            essence_dim: 1,
            ..tiny_hyper()
        };
        let mut model = OrderingModel::new(hp, FeatureScaler::identity(1), 0).unwrap();
        model
            .params
            .get_mut("track_encoder.hidden.weight")
            .unwrap()
            .data = vec![1.0];
        model
            .params
            .get_mut("track_encoder.hidden.bias")
            .unwrap()
            .data = vec![0.0];
        model
            .params
            .get_mut("track_encoder.out.weight")
            .unwrap()
            .data = vec![1.0];
        model.params.get_mut("track_encoder.out.bias").unwrap().data = vec![0.0];
        let z = model
            .encode_tracks(&Matrix::from_vec(1, 1, vec![2.0]))
            .unwrap();
        assert_eq!(z.data, vec![2.0]);
    }

    /// Jacobian of the codes with respect to the standardized inputs
    /// against central differences.
    #[test]
    fn track_codes_input_gradient() {
        let model = OrderingModel::new(tiny_hyper(), FeatureScaler::identity(6), 4).unwrap();
        let x0 = model.standardize(&album(3, 6, 2)).unwrap();
        for out in 0..3 {
            let mut tape = Tape::new(&model.params);
            let x = tape.input(x0.clone());
            let z = model.track_codes(&mut tape, x);
            // select z[out] as a scalar via a one-hot cross term
            let sel = tape.input(Matrix::from_vec(
                1,
                3,
                (0..3).map(|i| if i == out { 1.0 } else { 0.0 }).collect(),
            ));
            let s = tape.matmul(sel, z);
            let grads = tape.backward(s);
            let analytic = grads.get(x).unwrap().clone();
            let eps = 1e-6;
            for e in 0..x0.data.len() {
                let mut xp = x0.clone();
                xp.data[e] += eps;
                let mut xm = x0.clone();
                xm.data[e] -= eps;
                let fp = model.encode_tracks(&xp).unwrap().data[out];
                let fm = model.encode_tracks(&xm).unwrap().data[out];
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic.data[e];
                assert!(
                    (a - numeric).abs() <= 1e-4 * numeric.abs().max(1e-3),
                    "z[{out}] d/dx[{e}]: {a} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn uniform_head_gives_uniform_probabilities() {
        let mut model = OrderingModel::new(
            Hyperparams {
                max_len: 20,
                ..tiny_hyper()
            },
            FeatureScaler::identity(6),
            3,
        )
        .unwrap();
        model.zero_output_head();
        let z = Matrix::from_vec(4, 1, vec![0.1, -0.4, 0.9, 0.3]);
        let logits = model.forward_logits(&z, &[2], true).unwrap();
        let probs = crate::nn::tape::masked_softmax_rows(&logits);
        for t in 0..2 {
            let sum: f64 = probs.row(t).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        for c in 0..4 {
            assert!((probs.get(0, c) - 0.25).abs() < 1e-12);
        }
        assert_eq!(probs.get(1, 2), 0.0);
        for c in [0, 1, 3] {
            assert!((probs.get(1, c) - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(probs.row(0)[4..].iter().all(|p| *p == 0.0));
    }

    #[test]
    fn forward_rejects_bad_prefix() {
        let model = OrderingModel::new(tiny_hyper(), FeatureScaler::identity(6), 3).unwrap();
        let z = Matrix::from_vec(3, 1, vec![0.1, 0.2, 0.3]);
        assert!(model.forward_logits(&z, &[1, 1], true).is_err());
        assert!(model.forward_logits(&z, &[0, 1, 2], true).is_err());
        assert!(model.forward_logits(&z, &[3], true).is_err());
        let long = Matrix::from_vec(6, 1, vec![0.0; 6]);
        assert!(model.forward_logits(&long, &[], true).is_err());
    }

    #[test]
    fn uniform_loss_is_log_of_choices() {
        let mut model = OrderingModel::new(tiny_hyper(), FeatureScaler::identity(6), 0).unwrap();
        model.zero_output_head();
        let a = album(4, 6, 1);
        let sigma = Permutation::new(vec![2, 0, 3, 1]).unwrap();
        let off_only = model.sequence_loss_detailed(&a, &sigma, false).unwrap();
        assert!((off_only.mean_nats - 4f64.ln()).abs() < 1e-12);
        let used = model.sequence_loss_detailed(&a, &sigma, true).unwrap();
        for (t, nats) in used.step_nats.iter().enumerate() {
            assert!((nats - ((4 - t) as f64).ln()).abs() < 1e-12);
        }
    }

    /// The loss equals −mean log p recomputed from step-by-step probabilities
    /// obtained through the incremental decoding path.
    #[test]
    fn loss_matches_stepwise_recomputation() {
        let model = OrderingModel::new(tiny_hyper(), FeatureScaler::identity(6), 9).unwrap();
        let mut rng = seeded_rng(5);
        for _ in 0..10 {
            let m = rng.gen_range(2..=5);
            let a = album(m, 6, rng.gen());
            let sigma = Permutation::random(m, &mut rng).unwrap();
            let loss = model.sequence_loss(&a, &sigma).unwrap();
            let shuffled = a.permuted(&sigma).unwrap();
            let prepared = model
                .prepare(&model.standardize(&shuffled).unwrap())
                .unwrap();
            let target = sigma.inverse().into_vec();
            let mut total = 0.0;
            for t in 0..m {
                let lp = model.next_step_log_probs(&prepared, &target[..t]).unwrap();
                let p: f64 = lp[target[t]].exp();
                total -= p.ln();
            }
            assert!(
                (loss - total / m as f64).abs() < 1e-10,
                "{loss} vs {}",
                total / m as f64
            );
        }
    }

    #[test]
    fn scaled_objective_scales_gradients() {
        let model = OrderingModel::new(tiny_hyper(), FeatureScaler::identity(6), 2).unwrap();
        let a = album(3, 6, 8);
        let sigma = Permutation::new(vec![1, 2, 0]).unwrap();
        let (_, g1) = model.backward(&a, &sigma).unwrap();
        let (_, g2) = model.backward_with(&a, &sigma, 2.0, None).unwrap();
        for (x, y) in g1.blocks.iter().zip(&g2.blocks) {
            for (u, v) in x.data.iter().zip(&y.data) {
                assert!((2.0 * u - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn unused_vocabulary_rows_get_zero_gradient() {
        let model = OrderingModel::new(tiny_hyper(), FeatureScaler::identity(6), 2).unwrap();
        let a = album(3, 6, 8);
        let (_, g) = model
            .backward(&a, &Permutation::new(vec![2, 0, 1]).unwrap())
            .unwrap();
        let (w, b) = model.head_blocks();
        let gw = &g.blocks[w];
        for r in 0..gw.rows {
            assert!(gw.row(r)[3..].iter().all(|v| *v == 0.0));
        }
        assert!(g.blocks[b].data[3..].iter().all(|v| *v == 0.0));
        assert!(g.blocks[b].data[..3].iter().any(|v| *v != 0.0));
    }
}
