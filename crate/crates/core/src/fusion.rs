//! Layer-wise representation fusion.
//!
//! A fuse-attention sublayer lets layer `l` attend, separately at every
//! position `t`, over that position's outputs from all earlier layers
//! `H^0[t], ..., H^{l-1}[t]` (the embedding output included). Keys never mix
//! positions: the memory at `t` is the `[l, d]` stack of its own history.
//!
//! The module also hosts the ablations: summing previous outputs instead of
//! attending (`accu`), fusing only in the topmost layer (`onlytop`), and
//! restricting fusion to one side of the model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMask, MhaWeights};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::Seq2Seq;
use crate::tensor::{Tape, Tensor, Var};
use crate::training::Pair;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Encoder,
    Decoder,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Encoder => "encoder",
            Side::Decoder => "decoder",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Plain Transformer; no fusion anywhere.
    Vanilla,
    /// Fuse-attention in every layer of the selected sides.
    Lrf,
    /// Layer input replaced by the sum of all previous layer outputs.
    Accu,
    /// Fuse-attention only in the topmost layer of the selected sides.
    OnlyTop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sides {
    EncoderOnly,
    DecoderOnly,
    Both,
}

/// Which fusion mechanism a model uses and where.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LrfVariant {
    pub mode: FusionMode,
    pub sides: Sides,
}

impl Default for LrfVariant {
    fn default() -> Self {
        Self::LRF
    }
}

impl LrfVariant {
    pub const VANILLA: Self = Self::new(FusionMode::Vanilla, Sides::Both);
    pub const LRF: Self = Self::new(FusionMode::Lrf, Sides::Both);
    pub const ACCU: Self = Self::new(FusionMode::Accu, Sides::Both);
    pub const ONLY_TOP: Self = Self::new(FusionMode::OnlyTop, Sides::Both);
    pub const ENCODER_ONLY: Self = Self::new(FusionMode::Lrf, Sides::EncoderOnly);
    pub const DECODER_ONLY: Self = Self::new(FusionMode::Lrf, Sides::DecoderOnly);

    pub const fn new(mode: FusionMode, sides: Sides) -> Self {
        Self { mode, sides }
    }

    pub fn covers(&self, side: Side) -> bool {
        if self.mode == FusionMode::Vanilla {
            return false;
        }
        matches!(
            (self.sides, side),
            (Sides::Both, _) | (Sides::EncoderOnly, Side::Encoder) | (Sides::DecoderOnly, Side::Decoder)
        )
    }

    /// Whether layer `layer` (0-based, of `n_layers`) on `side` carries a
    /// fuse-attention sublayer.
    pub fn has_fuse_attention(&self, side: Side, layer: usize, n_layers: usize) -> bool {
        self.covers(side)
            && match self.mode {
                FusionMode::Lrf => true,
                FusionMode::OnlyTop => layer + 1 == n_layers,
                FusionMode::Vanilla | FusionMode::Accu => false,
            }
    }

    pub fn accumulates(&self, side: Side) -> bool {
        self.mode == FusionMode::Accu && self.covers(side)
    }

    pub fn uses_fuse_attention(&self) -> bool {
        matches!(self.mode, FusionMode::Lrf | FusionMode::OnlyTop)
    }
}

impl fmt::Display for LrfVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            FusionMode::Vanilla => return f.write_str("vanilla"),
            FusionMode::Lrf => "lrf",
            FusionMode::Accu => "accu",
            FusionMode::OnlyTop => "onlytop",
        };
        match (self.mode, self.sides) {
            (_, Sides::Both) => f.write_str(mode),
            (FusionMode::Lrf, Sides::EncoderOnly) => f.write_str("encoder_only"),
            (FusionMode::Lrf, Sides::DecoderOnly) => f.write_str("decoder_only"),
            (_, Sides::EncoderOnly) => write!(f, "{mode}:encoder_only"),
            (_, Sides::DecoderOnly) => write!(f, "{mode}:decoder_only"),
        }
    }
}

impl FromStr for LrfVariant {
    type Err = Error;

    /// Accepts `vanilla`, `lrf`, `accu`, `onlytop`, `encoder_only`,
    /// `decoder_only`, or `<mode>:<sides>` with sides one of `both`,
    /// `encoder_only`, `decoder_only`.
    fn from_str(s: &str) -> Result<Self> {
        let (mode, sides) = match s.split_once(':') {
            Some((m, side)) => (m, Some(side)),
            None => (s, None),
        };
        let mut variant = match mode.trim() {
            "vanilla" | "transformer" => Self::VANILLA,
            "lrf" => Self::LRF,
            "accu" => Self::ACCU,
            "onlytop" | "only_top" => Self::ONLY_TOP,
            "encoder_only" if sides.is_none() => Self::ENCODER_ONLY,
            "decoder_only" if sides.is_none() => Self::DECODER_ONLY,
            other => return Err(Error::config(format!("unknown variant mode `{other}`"))),
        };
        if let Some(side) = sides {
            variant.sides = match side.trim() {
                "both" => Sides::Both,
                "encoder_only" | "encoder" => Sides::EncoderOnly,
                "decoder_only" | "decoder" => Sides::DecoderOnly,
                other => return Err(Error::config(format!("unknown variant sides `{other}`"))),
            };
        }
        Ok(variant)
    }
}

impl Serialize for LrfVariant {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LrfVariant {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Outputs `H^0, H^1, ...` of the layers run so far, each `[seq, d]`.
/// Entry 0 is always the embedding output.
#[derive(Clone, Debug, Default)]
pub struct LayerCache {
    entries: Vec<Var>,
}

impl LayerCache {
    pub fn new(embedding: Var) -> Self {
        Self {
            entries: vec![embedding],
        }
    }

    pub fn push(&mut self, output: Var) {
        self.entries.push(output);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, layer: usize) -> Option<Var> {
        self.entries.get(layer).copied()
    }

    pub fn entries(&self) -> &[Var] {
        &self.entries
    }

    pub fn last(&self) -> Var {
        *self.entries.last().expect("cache holds the embedding output")
    }

    fn prefix(&self, count: usize) -> Result<&[Var]> {
        if count == 0 || count > self.entries.len() {
            return Err(Error::contract(format!(
                "need {count} previous layer outputs, cache holds {}",
                self.entries.len()
            )));
        }
        Ok(&self.entries[..count])
    }
}

/// `[count, d]` matrix whose row `j` is `cache[j]` at `position`.
pub fn stack_previous_outputs(tape: &Tape, cache: &LayerCache, count: usize, position: usize) -> Result<Var> {
    let rows = cache
        .prefix(count)?
        .iter()
        .map(|&h| tape.gather_rows(h, &[position]))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

/// Elementwise `cache[0] + cache[1] + ... + cache[count-1]`, summed left to right.
pub fn accumulate_previous(tape: &Tape, cache: &LayerCache, count: usize) -> Result<Var> {
    let prev = cache.prefix(count)?;
    prev[1..].iter().try_fold(prev[0], |acc, &h| tape.add(acc, h))
}

#[derive(Clone, Debug)]
pub struct FuseOutput {
    /// Multi-head output before the residual connection and norm.
    pub output: Var,
    /// Per-head `[seq, count]` distributions over the previous layers.
    pub head_probs: Vec<Var>,
}

/// Fuse-attention for one layer: position `t` of `query` attends over the
/// `count` stacked previous-layer vectors at `t`.
///
/// `layer_mask`, when given, has one entry per previous layer and marks the
/// attendable ones; at least one must be set.
pub fn fuse_attention(
    tape: &Tape,
    query: Var,
    cache: &LayerCache,
    count: usize,
    weights: &MhaWeights,
    heads: usize,
    layer_mask: Option<&[bool]>,
) -> Result<FuseOutput> {
    let prev = cache.prefix(count)?;
    let seq = tape.shape(query)[0];
    let additive = match layer_mask {
        Some(m) if m.len() != count => {
            return Err(Error::contract(format!(
                "layer mask has {} entries for {count} layers",
                m.len()
            )))
        }
        Some(m) if !m.iter().any(|&a| a) => return Err(Error::contract("fuse-attention has no attendable layer")),
        Some(m) if m.iter().all(|&a| a) => None,
        Some(m) => {
            let allowed = (0..seq).flat_map(|_| m.iter().copied()).collect();
            Some(tape.constant(AttentionMask::new(seq, count, allowed)?.additive()))
        }
        None => None,
    };

    let q = tape.matmul(query, weights.w_q)?;
    let keys = prev
        .iter()
        .map(|&h| tape.matmul(h, weights.w_k))
        .collect::<Result<Vec<_>>>()?;
    let values = prev
        .iter()
        .map(|&h| tape.matmul(h, weights.w_v))
        .collect::<Result<Vec<_>>>()?;
    let (dq, dv) = (tape.shape(q)[1], tape.shape(values[0])[1]);
    if heads == 0 || dq % heads != 0 || dv % heads != 0 {
        return Err(Error::contract(format!("{heads} heads do not divide {dq}/{dv}")));
    }
    let (d_k, d_v) = (dq / heads, dv / heads);
    let inv_sqrt = 1.0 / (d_k as f64).sqrt();

    let mut head_outputs = Vec::with_capacity(heads);
    let mut head_probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d_k, d_k)?;
        let mut scores = Vec::with_capacity(count);
        for &k in &keys {
            let kh = tape.slice_cols(k, h * d_k, d_k)?;
            let dot = tape.sum_last_axis(tape.mul(qh, kh)?)?;
            scores.push(tape.scale(dot, inv_sqrt));
        }
        let mut scores = tape.concat_cols(&scores)?;
        if let Some(mask) = additive {
            scores = tape.add(scores, mask)?;
        }
        let probs = tape.softmax(scores, 1)?;
        let mut mixed: Option<Var> = None;
        for (j, &v) in values.iter().enumerate() {
            let vh = tape.slice_cols(v, h * d_v, d_v)?;
            let weight = tape.slice_cols(probs, j, 1)?;
            let term = tape.mul_col(vh, weight)?;
            mixed = Some(match mixed {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        head_outputs.push(mixed.expect("count >= 1"));
        head_probs.push(probs);
    }
    let concat = tape.concat_cols(&head_outputs)?;
    let output = tape.matmul(concat, weights.w_o)?;
    Ok(FuseOutput { output, head_probs })
}

/// Mean fuse-attention distribution of one fused layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuseProbRow {
    pub side: Side,
    /// 1-based layer index; `probs` has one entry per previous layer
    /// (`probs[0]` is the embedding output).
    pub layer: usize,
    pub probs: Vec<f64>,
}

/// Raw fuse-attention probabilities of one example: per fused layer, per
/// head, a `[positions, layer]` row-major matrix.
pub fn fuse_prob_samples(model: &Seq2Seq, pair: &Pair) -> Result<Vec<(Side, usize, Vec<Tensor>)>> {
    let s = model.eval_session();
    let enc = s.encode(&pair.src, pair.src.len())?;
    let (input, _) = pair.teacher_forcing();
    let dec = s.decode(&input, &enc)?;
    let tape = s.tape();
    Ok(enc
        .fuse
        .iter()
        .chain(&dec.fuse)
        .map(|r| {
            (
                r.side,
                r.layer,
                r.head_probs.iter().map(|&v| tape.value(v).clone()).collect(),
            )
        })
        .collect())
}

/// Teacher-forced fuse-attention probabilities averaged over every
/// (example, position, head) triple, one row per fused layer.
pub fn extract_fuse_probs(model: &Seq2Seq, pairs: &[Pair], exec: Execution) -> Result<Vec<FuseProbRow>> {
    if !model.config().variant.uses_fuse_attention() {
        return Err(Error::contract(format!(
            "variant `{}` has no fuse-attention modules to inspect",
            model.config().variant
        )));
    }
    if pairs.is_empty() {
        return Err(Error::contract("no examples to average over"));
    }
    let per_example = exec.map(pairs, |_, pair| -> Result<Vec<(Side, usize, Vec<f64>, usize)>> {
        Ok(fuse_prob_samples(model, pair)?
            .into_iter()
            .map(|(side, layer, heads)| {
                let mut sum = vec![0.0; layer];
                let mut count = 0;
                for h in &heads {
                    for row in h.data().chunks_exact(layer) {
                        sum.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        count += 1;
                    }
                }
                (side, layer, sum, count)
            })
            .collect())
    });
    let mut acc: Vec<(Side, usize, Vec<f64>, usize)> = Vec::new();
    for r in per_example {
        let r = r?;
        if acc.is_empty() {
            acc = r;
            continue;
        }
        for (a, b) in acc.iter_mut().zip(r) {
            a.2.iter_mut().zip(&b.2).for_each(|(x, y)| *x += y);
            a.3 += b.3;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(side, layer, sum, count)| FuseProbRow {
            side,
            layer,
            probs: sum.into_iter().map(|v| v / count as f64).collect(),
        })
        .collect())
}
