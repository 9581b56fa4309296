//! Scaled dot-product and multi-head attention with boolean masks.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Additive score for masked positions. After max-subtraction `exp` of this
/// underflows to exactly zero in `f64`.
pub const MASK_VALUE: f64 = -1e9;

/// `[queries × keys]` boolean matrix; `true` marks an attendable key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(queries: usize, keys: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != queries * keys {
            return Err(Error::Shape {
                op: "attention mask",
                left: vec![queries, keys],
                right: vec![allowed.len()],
            });
        }
        if let Some(q) = (0..queries).find(|q| !allowed[q * keys..(q + 1) * keys].iter().any(|&a| a)) {
            return Err(Error::contract(format!("query row {q} has no attendable key")));
        }
        Ok(Self { queries, keys, allowed })
    }

    pub fn full(queries: usize, keys: usize) -> Self {
        Self {
            queries,
            keys,
            allowed: vec![true; queries * keys],
        }
    }

    /// Query `i` may attend keys `0..=i`.
    pub fn causal(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::contract("causal mask needs length >= 1"));
        }
        let allowed = (0..len).flat_map(|q| (0..len).map(move |k| k <= q)).collect();
        Self::new(len, len, allowed)
    }

    /// Every query may attend the first `valid_keys` keys only.
    pub fn key_padding(queries: usize, keys: usize, valid_keys: usize) -> Result<Self> {
        if valid_keys == 0 || valid_keys > keys {
            return Err(Error::contract(format!(
                "padding length {valid_keys} must be in 1..={keys}"
            )));
        }
        let allowed = (0..queries).flat_map(|_| (0..keys).map(|k| k < valid_keys)).collect();
        Self::new(queries, keys, allowed)
    }

    pub fn and(&self, other: &AttentionMask) -> Result<Self> {
        if (self.queries, self.keys) != (other.queries, other.keys) {
            return Err(Error::Shape {
                op: "mask and",
                left: vec![self.queries, self.keys],
                right: vec![other.queries, other.keys],
            });
        }
        let allowed = self.allowed.iter().zip(&other.allowed).map(|(a, b)| *a && *b).collect();
        Self::new(self.queries, self.keys, allowed)
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.keys + key]
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    /// 0 for attendable entries, [`MASK_VALUE`] otherwise.
    pub fn additive(&self) -> Tensor {
        let data = self.allowed.iter().map(|&a| if a { 0.0 } else { MASK_VALUE }).collect();
        Tensor::new(vec![self.queries, self.keys], data).expect("mask shape")
    }
}

pub fn make_causal_mask(len: usize) -> Result<AttentionMask> {
    AttentionMask::causal(len)
}

/// One `[max_len × max_len]` self-attention mask per sequence, with key
/// positions at or beyond the sequence length masked off.
pub fn make_padding_mask(lengths: &[usize], max_len: usize) -> Result<Vec<AttentionMask>> {
    lengths
        .iter()
        .map(|&len| AttentionMask::key_padding(max_len, max_len, len))
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    /// `[n_q, n_k]` attention probabilities.
    pub probs: Var,
}

/// `softmax(Q Kᵀ / √d_k) V` with masked scores pushed to [`MASK_VALUE`].
pub fn scaled_dot_attention(
    tape: &Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<AttentionOutput> {
    let (qs, ks, vs) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::Shape {
            op: "scaled_dot_attention",
            left: qs,
            right: ks,
        });
    }
    let k_t = tape.transpose(k)?;
    let raw = tape.matmul(q, k_t)?;
    let mut scores = tape.scale(raw, 1.0 / (qs[1] as f64).sqrt());
    if let Some(mask) = mask {
        if (mask.queries(), mask.keys()) != (qs[0], ks[0]) {
            return Err(Error::Shape {
                op: "attention mask",
                left: vec![mask.queries(), mask.keys()],
                right: vec![qs[0], ks[0]],
            });
        }
        if !mask.is_full() {
            let additive = tape.constant(mask.additive());
            scores = tape.add(scores, additive)?;
        }
    }
    let probs = tape.softmax(scores, 1)?;
    let output = tape.matmul(probs, v)?;
    Ok(AttentionOutput { output, probs })
}

/// Projection matrices of one multi-head attention block, already on a tape.
///
/// Head `i` uses columns `i*d_k..(i+1)*d_k` of `w_q`/`w_k` (and the matching
/// `d_v` slice of `w_v`); `w_o` maps the concatenated heads back to `d`.
#[derive(Clone, Copy, Debug)]
pub struct MhaWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

#[derive(Clone, Debug)]
pub struct MhaOutput {
    pub output: Var,
    pub head_probs: Vec<Var>,
}

pub fn multi_head_attention(
    tape: &Tape,
    query: Var,
    key: Var,
    value: Var,
    mask: Option<&AttentionMask>,
    weights: &MhaWeights,
    heads: usize,
) -> Result<MhaOutput> {
    let q = tape.matmul(query, weights.w_q)?;
    let k = tape.matmul(key, weights.w_k)?;
    let v = tape.matmul(value, weights.w_v)?;
    let (dq, dv) = (tape.shape(q)[1], tape.shape(v)[1]);
    if heads == 0 || dq % heads != 0 || dv % heads != 0 {
        return Err(Error::contract(format!(
            "{heads} heads do not divide projection widths {dq}/{dv}"
        )));
    }
    let (d_k, d_v) = (dq / heads, dv / heads);
    let mut outputs = Vec::with_capacity(heads);
    let mut head_probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * d_k, d_k)?,
                tape.slice_cols(k, h * d_k, d_k)?,
                tape.slice_cols(v, h * d_v, d_v)?,
            )
        };
        let att = scaled_dot_attention(tape, qh, kh, vh, mask)?;
        outputs.push(att.output);
        head_probs.push(att.probs);
    }
    let concat = if heads == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)?
    };
    let output = tape.matmul(concat, weights.w_o)?;
    Ok(MhaOutput { output, head_probs })
}
