use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::Seq2Seq;
use crate::vocab::{BOS, EOS};

/// Greedy output without BOS/EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    /// `true` when the length limit was hit before EOS.
    pub truncated: bool,
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding until EOS or `max_len` output tokens. The limit is also
/// capped by the model's positional table (one slot goes to BOS).
pub fn greedy_decode(model: &Seq2Seq, src: &[usize], max_len: usize) -> Result<Decoded> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be >= 1"));
    }
    let limit = max_len.min(model.config().max_len - 1);
    let session = model.eval_session();
    let enc = session.encode(src, src.len())?;
    let mut prefix = vec![BOS];
    while prefix.len() <= limit {
        let dec = session.decode(&prefix, &enc)?;
        let logits = session.tape().value(dec.logits);
        let next = argmax(logits.row(prefix.len() - 1));
        if next == EOS {
            prefix.remove(0);
            return Ok(Decoded {
                tokens: prefix,
                truncated: false,
            });
        }
        prefix.push(next);
    }
    prefix.remove(0);
    Ok(Decoded {
        tokens: prefix,
        truncated: true,
    })
}

pub fn greedy_decode_batch(
    model: &Seq2Seq,
    sources: &[Vec<usize>],
    max_len: usize,
    exec: Execution,
) -> Result<Vec<Decoded>> {
    exec.map(sources, |_, src| greedy_decode(model, src, max_len))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[-1.0]), 0);
    }

    #[test]
    fn respects_length_limit() {
        let model = Seq2Seq::new(ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 8,
            heads: 2,
            d_ffn: 8,
            src_vocab: 10,
            tgt_vocab: 10,
            max_len: 6,
            dropout: 0.0,
            seed: 4,
            ..ModelConfig::default()
        })
        .unwrap();
        let one = greedy_decode(&model, &[4, 5], 1).unwrap();
        assert!(one.tokens.len() <= 1);
        assert_eq!(one.truncated, one.tokens.len() == 1);
        let long = greedy_decode(&model, &[4, 5], 100).unwrap();
        assert!(long.tokens.len() <= 5);
        assert!(long.tokens.iter().all(|&t| t != EOS));
        let batch = greedy_decode_batch(&model, &[vec![4, 5], vec![6]], 3, Execution::Sequential).unwrap();
        assert_eq!(batch[0], greedy_decode(&model, &[4, 5], 3).unwrap());
        assert!(greedy_decode(&model, &[4], 0).is_err());
    }
}
