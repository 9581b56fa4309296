mod common;
mod reference;

use common::{config, rng, tokens, ALL_VARIANTS};
use lrf_core::attention::{scaled_dot_attention, AttentionMask, MhaWeights};
use lrf_core::exec::Execution;
use lrf_core::fusion::{extract_fuse_probs, fuse_attention, LayerCache, Side};
use lrf_core::training::Pair;
use lrf_core::vocab::PAD;
use lrf_core::{LrfVariant, Seq2Seq, Tape};
use proptest::prelude::*;
use rand::Rng;

fn logits(model: &Seq2Seq, src: &[usize], src_len: usize, tgt_in: &[usize]) -> Vec<f64> {
    let s = model.eval_session();
    let enc = s.encode(src, src_len).unwrap();
    let dec = s.decode(tgt_in, &enc).unwrap();
    let v = s.tape().value(dec.logits).data().to_vec();
    v
}

fn flat(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// A padded batch: every source is padded to the longest one.
fn random_batch(r: &mut rand_chacha::ChaCha8Rng, vocab: usize) -> Vec<(Vec<usize>, usize, Vec<usize>)> {
    let n = r.random_range(1..=4);
    let lens: Vec<usize> = (0..n).map(|_| r.random_range(1..=6)).collect();
    let width = *lens.iter().max().unwrap();
    lens.into_iter()
        .map(|len| {
            let mut src = tokens(r, len, vocab);
            src.resize(width, PAD);
            let tgt_len = r.random_range(1..=6);
            let mut tgt = vec![lrf_core::vocab::BOS];
            tgt.extend(tokens(r, tgt_len - 1, vocab));
            (src, len, tgt)
        })
        .collect()
}

#[test]
fn every_variant_matches_the_plain_reference_bitwise() {
    let mut r = rng(21);
    for variant in ALL_VARIANTS {
        let model = Seq2Seq::new(config(variant, 3, 8, 2, 13, 4)).unwrap();
        for _ in 0..20 {
            for (src, len, tgt) in random_batch(&mut r, 13) {
                let ours = logits(&model, &src, len, &tgt);
                let theirs = flat(&reference::forward(&model, &src, len, &tgt).logits);
                assert_eq!(bits(&ours), bits(&theirs), "{variant}");
            }
        }
    }
}

#[test]
fn fuse_probabilities_match_the_reference() {
    let model = Seq2Seq::new(config(LrfVariant::LRF, 3, 8, 2, 13, 4)).unwrap();
    let mut r = rng(3);
    let pairs: Vec<Pair> = (0..6).map(|_| common::pair(&mut r, 6, 13)).collect();
    let rows = extract_fuse_probs(&model, &pairs, Execution::Sequential).unwrap();
    // Oracle: token-weighted mean of the reference's per-head rows.
    let mut sums: Vec<(Side, usize, Vec<f64>, usize)> = Vec::new();
    for p in &pairs {
        let (input, _) = p.teacher_forcing();
        let fwd = reference::forward(&model, &p.src, p.src.len(), &input);
        for (i, (side, layer, heads)) in fwd.fuse.iter().enumerate() {
            if sums.len() <= i {
                sums.push((*side, *layer, vec![0.0; *layer], 0));
            }
            for head in heads {
                for row in head {
                    for (a, b) in sums[i].2.iter_mut().zip(row) {
                        *a += b;
                    }
                    sums[i].3 += 1;
                }
            }
        }
    }
    assert_eq!(rows.len(), 6);
    for (row, (side, layer, sum, n)) in rows.iter().zip(&sums) {
        assert_eq!((row.side, row.layer), (*side, *layer));
        assert_eq!(row.probs.len(), *layer);
        for (p, s) in row.probs.iter().zip(sum) {
            assert!((p - s / *n as f64).abs() < 1e-12);
        }
        assert!((row.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let vanilla = Seq2Seq::new(config(LrfVariant::VANILLA, 3, 8, 2, 13, 4)).unwrap();
    assert!(extract_fuse_probs(&vanilla, &pairs, Execution::Sequential).is_err());
}

#[test]
fn attention_rows_normalize_and_masked_entries_vanish() {
    let mut r = rng(8);
    for _ in 0..500 {
        let tape = Tape::new();
        let (nq, nk, d) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..5));
        let q = tape.constant(common::uniform(&mut r, &[nq, d], 3.0));
        let k = tape.constant(common::uniform(&mut r, &[nk, d], 3.0));
        let v = tape.constant(common::uniform(&mut r, &[nk, 2], 1.0));
        let mut allowed: Vec<bool> = (0..nq * nk).map(|_| r.random_bool(0.6)).collect();
        for i in 0..nq {
            allowed[i * nk + r.random_range(0..nk)] = true;
        }
        let mask = AttentionMask::new(nq, nk, allowed.clone()).unwrap();
        let out = scaled_dot_attention(&tape, q, k, v, Some(&mask)).unwrap();
        let probs = tape.value(out.probs);
        for i in 0..nq {
            let row = probs.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for j in 0..nk {
                if !allowed[i * nk + j] {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
    }
    for _ in 0..500 {
        let tape = Tape::new();
        let (seq, count) = (r.random_range(1..5), r.random_range(1..5));
        let mut cache = LayerCache::new(tape.constant(common::uniform(&mut r, &[seq, 4], 2.0)));
        for _ in 1..count {
            cache.push(tape.constant(common::uniform(&mut r, &[seq, 4], 2.0)));
        }
        let query = tape.constant(common::uniform(&mut r, &[seq, 4], 2.0));
        let w: Vec<_> = (0..4)
            .map(|_| tape.constant(common::uniform(&mut r, &[4, 4], 1.0)))
            .collect();
        let weights = MhaWeights {
            w_q: w[0],
            w_k: w[1],
            w_v: w[2],
            w_o: w[3],
        };
        let mut layer_mask: Vec<bool> = (0..count).map(|_| r.random_bool(0.7)).collect();
        layer_mask[r.random_range(0..count)] = true;
        let out = fuse_attention(&tape, query, &cache, count, &weights, 2, Some(&layer_mask)).unwrap();
        for &h in &out.head_probs {
            let probs = tape.value(h);
            for t in 0..seq {
                let row = probs.row(t);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (j, &ok) in layer_mask.iter().enumerate() {
                    if !ok {
                        assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn accu_layer_inputs_are_left_fold_sums() {
    let model = Seq2Seq::new(config(LrfVariant::ACCU, 4, 8, 2, 13, 2)).unwrap();
    let s = model.eval_session();
    let enc = s.encode(&[4, 5, 6, 7], 4).unwrap();
    let dec = s.decode(&[1, 8, 9], &enc).unwrap();
    let t = s.tape();
    for (inputs, cache) in [(&enc.layer_inputs, &enc.cache), (&dec.layer_inputs, &dec.cache)] {
        for (i, &x) in inputs.iter().enumerate() {
            let entries = &cache.entries()[..=i];
            let mut expect = t.value(entries[0]).data().to_vec();
            for &h in &entries[1..] {
                for (a, b) in expect.iter_mut().zip(t.value(h).data()) {
                    *a += b;
                }
            }
            assert_eq!(bits(t.value(x).data()), bits(&expect), "layer {i}");
        }
    }
}

#[test]
fn parameter_accounting() {
    for (le, ld, d) in [(3, 3, 8), (2, 4, 16), (1, 1, 4), (4, 2, 12)] {
        let count = |variant| {
            let mut c = config(variant, 1, d, 2, 17, 1);
            c.enc_layers = le;
            c.dec_layers = ld;
            Seq2Seq::new(c).unwrap()
        };
        let vanilla = count(LrfVariant::VANILLA).num_params();
        let mha = 4 * d * d;
        assert_eq!(count(LrfVariant::LRF).num_params() - vanilla, (le + ld) * mha);
        assert_eq!(count(LrfVariant::ONLY_TOP).num_params() - vanilla, 2 * mha);
        assert_eq!(count(LrfVariant::ACCU).num_params(), vanilla);
        assert_eq!(count(LrfVariant::ENCODER_ONLY).num_params() - vanilla, le * mha);
        assert_eq!(count(LrfVariant::DECODER_ONLY).num_params() - vanilla, ld * mha);
        assert_eq!(count(LrfVariant::LRF).fuse_params(), (le + ld) * mha);
        assert_eq!(count(LrfVariant::VANILLA).fuse_params(), 0);
    }
}

#[test]
fn one_sided_variants_leave_the_other_side_vanilla() {
    let vanilla = Seq2Seq::new(config(LrfVariant::VANILLA, 3, 8, 2, 13, 6)).unwrap();
    let enc_only = Seq2Seq::new(config(LrfVariant::ENCODER_ONLY, 3, 8, 2, 13, 6)).unwrap();
    let dec_only = Seq2Seq::new(config(LrfVariant::DECODER_ONLY, 3, 8, 2, 13, 6)).unwrap();
    let src = [4, 9, 6, 5];
    let out = |m: &Seq2Seq| {
        let s = m.eval_session();
        let e = s.encode(&src, 4).unwrap();
        let v = s.tape().value(e.output).data().to_vec();
        v
    };
    assert_eq!(bits(&out(&vanilla)), bits(&out(&dec_only)));
    assert_ne!(bits(&out(&vanilla)), bits(&out(&enc_only)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    /// Perturbing target tokens after position t leaves logits at positions
    /// up to t unchanged, bit for bit.
    #[test]
    fn causality(seed in any::<u64>(), v in 0usize..6, t in 1usize..6, cut in 0usize..6) {
        let cut = cut.min(t - 1);
        let model = Seq2Seq::new(config(ALL_VARIANTS[v], 2, 8, 2, 13, seed % 5)).unwrap();
        let mut r = rng(seed);
        let src = tokens(&mut r, 4, 13);
        let a = tokens(&mut r, t, 13);
        let mut b = a.clone();
        for x in &mut b[cut + 1..] {
            *x = 4 + (*x + 1 + r.random_range(0..8)) % 9;
        }
        let (la, lb) = (logits(&model, &src, 4, &a), logits(&model, &src, 4, &b));
        let keep = (cut + 1) * 13;
        prop_assert_eq!(bits(&la[..keep]), bits(&lb[..keep]));
    }

    /// Fuse-attention sees only its own position's layer history.
    #[test]
    fn fuse_attention_commutes_with_position_permutation(seed in any::<u64>(), seq in 2usize..5) {
        let mut r = rng(seed);
        let make = |tape: &Tape, rows: &[Vec<f64>]| tape.constant(lrf_core::Tensor::from_rows(rows).unwrap());
        let layers: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| (0..seq).map(|_| common::uniform(&mut r, &[4], 1.0).into_data()).collect())
            .collect();
        let query: Vec<Vec<f64>> = (0..seq).map(|_| common::uniform(&mut r, &[4], 1.0).into_data()).collect();
        let w: Vec<lrf_core::Tensor> = (0..4).map(|_| common::uniform(&mut r, &[4, 4], 1.0)).collect();
        let perm: Vec<usize> = (0..seq).rev().collect();
        let run = |order: &[usize]| {
            let tape = Tape::new();
            let pick = |m: &Vec<Vec<f64>>| order.iter().map(|&i| m[i].clone()).collect::<Vec<_>>();
            let mut cache = LayerCache::new(make(&tape, &pick(&layers[0])));
            cache.push(make(&tape, &pick(&layers[1])));
            cache.push(make(&tape, &pick(&layers[2])));
            let ws: Vec<_> = w.iter().map(|t| tape.constant(t.clone())).collect();
            let weights = MhaWeights { w_q: ws[0], w_k: ws[1], w_v: ws[2], w_o: ws[3] };
            let out = fuse_attention(&tape, make(&tape, &pick(&query)), &cache, 3, &weights, 2, None).unwrap();
            let v = tape.value(out.output).clone();
            v
        };
        let base = run(&(0..seq).collect::<Vec<_>>());
        let permuted = run(&perm);
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in permuted.row(i).iter().zip(base.row(p)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
