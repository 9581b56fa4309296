//! Encoder-decoder Transformer with learned absolute positions, post-norm
//! residual sublayers, and optional fusion sublayers.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_attention, AttentionMask, MhaWeights};
use crate::error::{Error, Result};
use crate::fusion::{accumulate_previous, fuse_attention, LayerCache, LrfVariant, Side};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub variant: LrfVariant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_layers: 3,
            dec_layers: 3,
            d_model: 32,
            heads: 4,
            d_ffn: 64,
            src_vocab: 0,
            tgt_vocab: 0,
            max_len: 64,
            dropout: 0.1,
            variant: LrfVariant::LRF,
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// Layer counts of zero are accepted (an empty stack is the identity).
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ffn", self.d_ffn),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be >= 1")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn layers(&self, side: Side) -> usize {
        match side {
            Side::Encoder => self.enc_layers,
            Side::Decoder => self.dec_layers,
        }
    }

    /// Scalar count of one bias-free multi-head attention block.
    pub fn mha_size(&self) -> usize {
        4 * self.d_model * self.d_model
    }
}

/// Projection ids of one multi-head attention block (`[d, d]` each; head `i`
/// owns the `i`-th column slice of the query/key/value projections).
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub self_attn: AttentionParams,
    pub self_norm: NormParams,
    pub fuse: Option<AttentionParams>,
    pub ffn: FeedForwardParams,
    pub ffn_norm: NormParams,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub self_norm: NormParams,
    pub cross_attn: AttentionParams,
    pub cross_norm: NormParams,
    pub fuse: Option<AttentionParams>,
    pub ffn: FeedForwardParams,
    pub ffn_norm: NormParams,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub src_embed: ParamId,
    pub src_pos: ParamId,
    pub tgt_embed: ParamId,
    pub tgt_pos: ParamId,
    pub encoder: Vec<EncoderLayerParams>,
    pub decoder: Vec<DecoderLayerParams>,
    pub output: ParamId,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    d: usize,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.store.register(name, shape, init, self.seed)
    }

    fn attention(&mut self, prefix: &str) -> AttentionParams {
        let d = self.d;
        AttentionParams {
            w_q: self.add(format!("{prefix}.w_q"), &[d, d], Init::Xavier),
            w_k: self.add(format!("{prefix}.w_k"), &[d, d], Init::Xavier),
            w_v: self.add(format!("{prefix}.w_v"), &[d, d], Init::Xavier),
            w_o: self.add(format!("{prefix}.w_o"), &[d, d], Init::Xavier),
        }
    }

    fn norm(&mut self, prefix: &str) -> NormParams {
        let d = self.d;
        NormParams {
            gamma: self.add(format!("{prefix}.gamma"), &[d], Init::Ones),
            beta: self.add(format!("{prefix}.beta"), &[d], Init::Zeros),
        }
    }

    fn ffn(&mut self, prefix: &str, d_ffn: usize) -> FeedForwardParams {
        let d = self.d;
        FeedForwardParams {
            w1: self.add(format!("{prefix}.w1"), &[d, d_ffn], Init::Xavier),
            b1: self.add(format!("{prefix}.b1"), &[d_ffn], Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), &[d_ffn, d], Init::Xavier),
            b2: self.add(format!("{prefix}.b2"), &[d], Init::Zeros),
        }
    }
}

/// Sequence-to-sequence model: configuration, parameters, and their layout.
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Seq2Seq {
    /// Builds and initializes a model. Each parameter draws from an RNG
    /// stream keyed by its name, so two variants with the same seed agree on
    /// every parameter they have in common.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.d_model;
        let embed_std = (d as f64).powf(-0.5);
        let mut b = Builder {
            store: &mut store,
            seed: config.seed,
            d,
        };
        let src_embed = b.add(
            "src_embed".into(),
            &[config.src_vocab, d],
            Init::Uniform { std: embed_std },
        );
        let src_pos = b.add("src_pos".into(), &[config.max_len, d], Init::Uniform { std: embed_std });
        let tgt_embed = b.add(
            "tgt_embed".into(),
            &[config.tgt_vocab, d],
            Init::Uniform { std: embed_std },
        );
        let tgt_pos = b.add("tgt_pos".into(), &[config.max_len, d], Init::Uniform { std: embed_std });

        let encoder = (0..config.enc_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncoderLayerParams {
                    self_attn: b.attention(&format!("{p}.self")),
                    self_norm: b.norm(&format!("{p}.self_norm")),
                    fuse: config
                        .variant
                        .has_fuse_attention(Side::Encoder, l, config.enc_layers)
                        .then(|| b.attention(&format!("{p}.fuse"))),
                    ffn: b.ffn(&format!("{p}.ffn"), config.d_ffn),
                    ffn_norm: b.norm(&format!("{p}.ffn_norm")),
                }
            })
            .collect();
        let decoder = (0..config.dec_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecoderLayerParams {
                    self_attn: b.attention(&format!("{p}.self")),
                    self_norm: b.norm(&format!("{p}.self_norm")),
                    cross_attn: b.attention(&format!("{p}.cross")),
                    cross_norm: b.norm(&format!("{p}.cross_norm")),
                    fuse: config
                        .variant
                        .has_fuse_attention(Side::Decoder, l, config.dec_layers)
                        .then(|| b.attention(&format!("{p}.fuse"))),
                    ffn: b.ffn(&format!("{p}.ffn"), config.d_ffn),
                    ffn_norm: b.norm(&format!("{p}.ffn_norm")),
                }
            })
            .collect();
        // Logits start near uniform: with unit-variance inputs their variance is 1/4.
        let output = b.add(
            "output".into(),
            &[d, config.tgt_vocab],
            Init::Uniform { std: 0.5 * embed_std },
        );
        let layout = Layout {
            src_embed,
            src_pos,
            tgt_embed,
            tgt_pos,
            encoder,
            decoder,
            output,
        };
        Ok(Self {
            config,
            params: store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Scalars belonging to fuse-attention blocks.
    pub fn fuse_params(&self) -> usize {
        let enc = self.layout.encoder.iter().filter_map(|l| l.fuse);
        let dec = self.layout.decoder.iter().filter_map(|l| l.fuse);
        enc.chain(dec)
            .map(|a| {
                [a.w_q, a.w_k, a.w_v, a.w_o]
                    .iter()
                    .map(|&id| self.params.get(id).len())
                    .sum::<usize>()
            })
            .sum()
    }

    /// Inference session: parameters are constants, no dropout.
    pub fn eval_session(&self) -> Session<'_> {
        Session::new(self, false, None)
    }

    /// Gradient-tracking session without dropout.
    pub fn grad_session(&self) -> Session<'_> {
        Session::new(self, true, None)
    }

    /// Gradient-tracking session; dropout masks are drawn from `dropout_seed`.
    pub fn train_session(&self, dropout_seed: u64) -> Session<'_> {
        Session::new(self, true, Some(dropout_seed))
    }
}

/// `sqrt(d) * table[tokens] + positions[0..len]`.
pub fn embed(tape: &Tape, tokens: &[usize], table: Var, positions: Var) -> Result<Var> {
    let max_len = tape.shape(positions)[0];
    if tokens.is_empty() || tokens.len() > max_len {
        return Err(Error::contract(format!(
            "sequence length {} outside 1..={max_len}",
            tokens.len()
        )));
    }
    let d = tape.shape(table)[1];
    let rows = tape.gather_rows(table, tokens)?;
    let scaled = tape.scale(rows, (d as f64).sqrt());
    let idx: Vec<usize> = (0..tokens.len()).collect();
    let pos = tape.gather_rows(positions, &idx)?;
    tape.add(scaled, pos)
}

#[derive(Clone, Copy, Debug)]
pub struct FfnWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `ReLU(x W1 + b1) W2 + b2`, before the residual connection.
pub fn feed_forward(tape: &Tape, x: Var, w: &FfnWeights) -> Result<Var> {
    let hidden = tape.add_row(tape.matmul(x, w.w1)?, w.b1)?;
    let act = tape.relu(hidden);
    tape.add_row(tape.matmul(act, w.w2)?, w.b2)
}

/// Fuse-attention recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct FuseRecord {
    pub side: Side,
    /// 1-based layer number; the layer attends over `layer` previous outputs.
    pub layer: usize,
    pub head_probs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub output: Var,
    pub cache: LayerCache,
    /// The tensor each layer consumed as its input, in layer order.
    pub layer_inputs: Vec<Var>,
    pub fuse: Vec<FuseRecord>,
    pub src_len: usize,
    pub positions: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[T, |V_tgt|]`.
    pub logits: Var,
    pub cache: LayerCache,
    pub layer_inputs: Vec<Var>,
    pub fuse: Vec<FuseRecord>,
}

/// One forward computation over a model: owns the tape, binds parameters to
/// it on first use, and optionally draws dropout masks.
pub struct Session<'m> {
    model: &'m Seq2Seq,
    tape: Tape,
    trainable: bool,
    bound: RefCell<Vec<Option<Var>>>,
    dropout: Option<RefCell<ChaCha8Rng>>,
}

impl<'m> Session<'m> {
    fn new(model: &'m Seq2Seq, trainable: bool, dropout_seed: Option<u64>) -> Self {
        let dropout = dropout_seed
            .filter(|_| model.config.dropout > 0.0)
            .map(|s| RefCell::new(ChaCha8Rng::seed_from_u64(s)));
        Self {
            model,
            tape: Tape::new(),
            trainable,
            bound: RefCell::new(vec![None; model.params.len()]),
            dropout,
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn model(&self) -> &'m Seq2Seq {
        self.model
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let t = self.model.params.get(id).detached();
        let v = if self.trainable {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients for every parameter, aligned with the model's store;
    /// `None` where the parameter did not take part in the loss.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        self.bound
            .borrow()
            .iter()
            .map(|b| b.and_then(|v| grads.get(v).map(<[f64]>::to_vec)))
            .collect()
    }

    pub fn attention_weights(&self, p: &AttentionParams) -> MhaWeights {
        MhaWeights {
            w_q: self.param(p.w_q),
            w_k: self.param(p.w_k),
            w_v: self.param(p.w_v),
            w_o: self.param(p.w_o),
        }
    }

    pub fn ffn_weights(&self, p: &FeedForwardParams) -> FfnWeights {
        FfnWeights {
            w1: self.param(p.w1),
            b1: self.param(p.b1),
            w2: self.param(p.w2),
            b2: self.param(p.b2),
        }
    }

    fn dropout(&self, x: Var) -> Result<Var> {
        let Some(rng) = &self.dropout else {
            return Ok(x);
        };
        let rate = self.model.config.dropout;
        let keep = 1.0 / (1.0 - rate);
        let shape = self.tape.shape(x);
        let mut mask = Tensor::zeros(&shape);
        {
            let mut rng = rng.borrow_mut();
            for m in mask.data_mut() {
                *m = if rng.random::<f64>() < rate { 0.0 } else { keep };
            }
        }
        let mask = self.tape.constant(mask);
        self.tape.mul(x, mask)
    }

    /// `LayerNorm(x + dropout(sub))`; a `None` norm is the non-affine variant.
    pub fn add_and_norm(&self, x: Var, sub: Var, norm: Option<&NormParams>) -> Result<Var> {
        let sub = self.dropout(sub)?;
        let sum = self.tape.add(x, sub)?;
        let affine = norm.map(|n| (self.param(n.gamma), self.param(n.beta)));
        self.tape.layer_norm(sum, affine, LAYER_NORM_EPS)
    }

    pub fn embed(&self, tokens: &[usize], side: Side) -> Result<Var> {
        let l = &self.model.layout;
        let (table, pos) = match side {
            Side::Encoder => (l.src_embed, l.src_pos),
            Side::Decoder => (l.tgt_embed, l.tgt_pos),
        };
        embed(&self.tape, tokens, self.param(table), self.param(pos))
    }

    /// `H_a = Norm(x + MHA(x, x, x))` with the source padding mask.
    pub fn encoder_self_attention(&self, x: Var, p: &EncoderLayerParams, mask: Option<&AttentionMask>) -> Result<Var> {
        let w = self.attention_weights(&p.self_attn);
        let att = multi_head_attention(&self.tape, x, x, x, mask, &w, self.model.config.heads)?;
        self.add_and_norm(x, att.output, Some(&p.self_norm))
    }

    /// Masked decoder self-attention; `mask` should be causal (and padded).
    pub fn decoder_self_attention(&self, x: Var, p: &DecoderLayerParams, mask: &AttentionMask) -> Result<Var> {
        let w = self.attention_weights(&p.self_attn);
        let att = multi_head_attention(&self.tape, x, x, x, Some(mask), &w, self.model.config.heads)?;
        self.add_and_norm(x, att.output, Some(&p.self_norm))
    }

    /// Query from the decoder, keys and values from the final encoder output.
    pub fn cross_attention(
        &self,
        x: Var,
        memory: Var,
        p: &DecoderLayerParams,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let w = self.attention_weights(&p.cross_attn);
        let att = multi_head_attention(&self.tape, x, memory, memory, mask, &w, self.model.config.heads)?;
        self.add_and_norm(x, att.output, Some(&p.cross_norm))
    }

    /// Fuse-attention sublayer with residual and (non-affine) post-norm.
    pub fn fuse_sublayer(&self, x: Var, cache: &LayerCache, p: &AttentionParams) -> Result<(Var, Vec<Var>)> {
        let w = self.attention_weights(p);
        let fused = fuse_attention(&self.tape, x, cache, cache.len(), &w, self.model.config.heads, None)?;
        Ok((self.add_and_norm(x, fused.output, None)?, fused.head_probs))
    }

    pub fn feed_forward(&self, x: Var, ffn: &FeedForwardParams, norm: &NormParams) -> Result<Var> {
        let inner = feed_forward(&self.tape, x, &self.ffn_weights(ffn))?;
        self.add_and_norm(x, inner, Some(norm))
    }

    fn layer_input(&self, cache: &LayerCache, side: Side) -> Result<Var> {
        if self.model.config.variant.accumulates(side) {
            accumulate_previous(&self.tape, cache, cache.len())
        } else {
            Ok(cache.last())
        }
    }

    /// Runs the encoder on `src`, whose first `src_len` tokens are real and
    /// the rest padding.
    pub fn encode(&self, src: &[usize], src_len: usize) -> Result<EncoderOutput> {
        let positions = src.len();
        let mask = if src_len < positions {
            Some(AttentionMask::key_padding(positions, positions, src_len)?)
        } else if src_len == positions && src_len > 0 {
            None
        } else {
            return Err(Error::contract(format!(
                "source length {src_len} for {positions} positions"
            )));
        };
        let h0 = self.embed(src, Side::Encoder)?;
        let mut cache = LayerCache::new(h0);
        let mut layer_inputs = Vec::new();
        let mut fuse = Vec::new();
        for (l, p) in self.model.layout.encoder.iter().enumerate() {
            let x = self.layer_input(&cache, Side::Encoder)?;
            layer_inputs.push(x);
            let mut h = self.encoder_self_attention(x, p, mask.as_ref())?;
            if let Some(fp) = &p.fuse {
                let (out, head_probs) = self.fuse_sublayer(h, &cache, fp)?;
                fuse.push(FuseRecord {
                    side: Side::Encoder,
                    layer: l + 1,
                    head_probs,
                });
                h = out;
            }
            let out = self.feed_forward(h, &p.ffn, &p.ffn_norm)?;
            cache.push(out);
        }
        Ok(EncoderOutput {
            output: cache.last(),
            cache,
            layer_inputs,
            fuse,
            src_len,
            positions,
        })
    }

    /// Teacher-forced decoder pass over `tgt_in` (BOS followed by a prefix).
    pub fn decode(&self, tgt_in: &[usize], enc: &EncoderOutput) -> Result<DecoderOutput> {
        let t = tgt_in.len();
        let self_mask = AttentionMask::causal(t)?;
        let cross_mask = if enc.src_len < enc.positions {
            Some(AttentionMask::key_padding(t, enc.positions, enc.src_len)?)
        } else {
            None
        };
        let h0 = self.embed(tgt_in, Side::Decoder)?;
        let mut cache = LayerCache::new(h0);
        let mut layer_inputs = Vec::new();
        let mut fuse = Vec::new();
        for (l, p) in self.model.layout.decoder.iter().enumerate() {
            let x = self.layer_input(&cache, Side::Decoder)?;
            layer_inputs.push(x);
            let a = self.decoder_self_attention(x, p, &self_mask)?;
            let mut h = self.cross_attention(a, enc.output, p, cross_mask.as_ref())?;
            if let Some(fp) = &p.fuse {
                let (out, head_probs) = self.fuse_sublayer(h, &cache, fp)?;
                fuse.push(FuseRecord {
                    side: Side::Decoder,
                    layer: l + 1,
                    head_probs,
                });
                h = out;
            }
            let out = self.feed_forward(h, &p.ffn, &p.ffn_norm)?;
            cache.push(out);
        }
        let logits = self.tape.matmul(cache.last(), self.param(self.model.layout.output))?;
        Ok(DecoderOutput {
            logits,
            cache,
            layer_inputs,
            fuse,
        })
    }
}
