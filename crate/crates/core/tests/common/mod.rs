#![allow(dead_code)]

use lrf_core::training::Pair;
use lrf_core::{LrfVariant, ModelConfig, Seq2Seq, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn config(variant: LrfVariant, layers: usize, d: usize, heads: usize, vocab: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        enc_layers: layers,
        dec_layers: layers,
        d_model: d,
        heads,
        d_ffn: 2 * d,
        src_vocab: vocab,
        tgt_vocab: vocab,
        max_len: 12,
        dropout: 0.0,
        variant,
        seed,
    }
}

pub fn model(variant: LrfVariant, layers: usize, d: usize, heads: usize, seed: u64) -> Seq2Seq {
    Seq2Seq::new(config(variant, layers, d, heads, 11, seed)).unwrap()
}

/// Ids in `4..vocab` (clear of the special tokens).
pub fn tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(4..vocab)).collect()
}

pub fn pair(rng: &mut ChaCha8Rng, max_len: usize, vocab: usize) -> Pair {
    let s = rng.random_range(1..=max_len);
    let t = rng.random_range(1..=max_len);
    Pair::new(tokens(rng, s, vocab), tokens(rng, t, vocab))
}

pub const ALL_VARIANTS: [LrfVariant; 6] = [
    LrfVariant::VANILLA,
    LrfVariant::LRF,
    LrfVariant::ACCU,
    LrfVariant::ONLY_TOP,
    LrfVariant::ENCODER_ONLY,
    LrfVariant::DECODER_ONLY,
];
