//! Plain nested-`Vec` forward pass of the encoder-decoder, written without
//! the tape. It reads weights from a model by parameter name and follows
//! the same floating-point operation order, so its logits can be compared
//! bit for bit.
#![allow(dead_code)]

use lrf_core::fusion::Side;
use lrf_core::Seq2Seq;

type Mat = Vec<Vec<f64>>;

pub struct Forward {
    pub logits: Mat,
    /// `(side, 1-based layer, per-head [position][previous layer])`.
    pub fuse: Vec<(Side, usize, Vec<Mat>)>,
    pub enc_inputs: Vec<Mat>,
    pub enc_outputs: Vec<Mat>,
}

struct W<'a>(&'a Seq2Seq);

impl W<'_> {
    fn has(&self, name: &str) -> bool {
        self.0.params().by_name(name).is_some()
    }

    fn mat(&self, name: &str) -> Mat {
        let t = self
            .0
            .params()
            .by_name(name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        let cols = t.shape()[1];
        t.data().chunks(cols).map(<[f64]>::to_vec).collect()
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.0.params().by_name(name).unwrap().data().to_vec()
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let mut acc = 0.0;
                    for (p, x) in row.iter().enumerate() {
                        acc += x * b[p][j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

fn norm(x: &Mat, affine: Option<(&[f64], &[f64])>) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| {
                    let o = (v - mean) * s;
                    match affine {
                        Some((g, b)) => g[i] * o + b[i],
                        None => o,
                    }
                })
                .collect()
        })
        .collect()
}

/// Softmax over the allowed entries of `scores`; disallowed entries get 0.
fn masked_softmax(scores: &[f64], allowed: impl Fn(usize) -> bool) -> Vec<f64> {
    let max = (0..scores.len())
        .filter(|&k| allowed(k))
        .map(|k| scores[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = (0..scores.len())
        .map(|k| if allowed(k) { (scores[k] - max).exp() } else { 0.0 })
        .collect();
    let mut sum = 0.0;
    for &v in &e {
        sum += v;
    }
    for v in &mut e {
        *v /= sum;
    }
    e
}

/// Multi-head attention; `allowed(q, k)` marks attendable keys.
fn mha(w: &W, prefix: &str, heads: usize, x: &Mat, mem: &Mat, allowed: &dyn Fn(usize, usize) -> bool) -> Mat {
    let q = matmul(x, &w.mat(&format!("{prefix}.w_q")));
    let k = matmul(mem, &w.mat(&format!("{prefix}.w_k")));
    let v = matmul(mem, &w.mat(&format!("{prefix}.w_v")));
    let d = q[0].len();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut concat = vec![vec![0.0; d]; x.len()];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| {
                    let mut acc = 0.0;
                    for c in cols.clone() {
                        acc += qi[c] * kj[c];
                    }
                    acc * scale
                })
                .collect();
            let p = masked_softmax(&scores, |j| allowed(i, j));
            for c in cols.clone() {
                let mut acc = 0.0;
                for (j, vj) in v.iter().enumerate() {
                    acc += p[j] * vj[c];
                }
                concat[i][c] = acc;
            }
        }
    }
    matmul(&concat, &w.mat(&format!("{prefix}.w_o")))
}

/// Fuse-attention of `x` over `cache`; returns the output and per-head
/// `[position][layer]` probabilities.
fn fuse(w: &W, prefix: &str, heads: usize, x: &Mat, cache: &[Mat]) -> (Mat, Vec<Mat>) {
    let q = matmul(x, &w.mat(&format!("{prefix}.w_q")));
    let wk = w.mat(&format!("{prefix}.w_k"));
    let wv = w.mat(&format!("{prefix}.w_v"));
    let ks: Vec<Mat> = cache.iter().map(|h| matmul(h, &wk)).collect();
    let vs: Vec<Mat> = cache.iter().map(|h| matmul(h, &wv)).collect();
    let d = q[0].len();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut concat = vec![vec![0.0; d]; x.len()];
    let mut probs = Vec::new();
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let mut head = Vec::new();
        for t in 0..x.len() {
            let scores: Vec<f64> = ks
                .iter()
                .map(|k| cols.clone().map(|c| q[t][c] * k[t][c]).sum::<f64>() * scale)
                .collect();
            let p = masked_softmax(&scores, |_| true);
            for c in cols.clone() {
                let mut acc = vs[0][t][c] * p[0];
                for j in 1..vs.len() {
                    acc += vs[j][t][c] * p[j];
                }
                concat[t][c] = acc;
            }
            head.push(p);
        }
        probs.push(head);
    }
    (matmul(&concat, &w.mat(&format!("{prefix}.w_o"))), probs)
}

fn ffn(w: &W, prefix: &str, x: &Mat) -> Mat {
    let b1 = w.vec(&format!("{prefix}.b1"));
    let b2 = w.vec(&format!("{prefix}.b2"));
    let mut h = matmul(x, &w.mat(&format!("{prefix}.w1")));
    for row in &mut h {
        for (v, b) in row.iter_mut().zip(&b1) {
            *v += b;
            *v = if *v > 0.0 { *v } else { 0.0 };
        }
    }
    let mut o = matmul(&h, &w.mat(&format!("{prefix}.w2")));
    for row in &mut o {
        for (v, b) in row.iter_mut().zip(&b2) {
            *v += b;
        }
    }
    o
}

fn add_norm(w: &W, x: &Mat, sub: &Mat, name: Option<&str>) -> Mat {
    let s = add(x, sub);
    match name {
        Some(n) => {
            let (g, b) = (w.vec(&format!("{n}.gamma")), w.vec(&format!("{n}.beta")));
            norm(&s, Some((&g, &b)))
        }
        None => norm(&s, None),
    }
}

fn embed(w: &W, table: &str, pos: &str, tokens: &[usize]) -> Mat {
    let t = w.mat(table);
    let p = w.mat(pos);
    let scale = (t[0].len() as f64).sqrt();
    tokens
        .iter()
        .enumerate()
        .map(|(i, &id)| t[id].iter().zip(&p[i]).map(|(x, y)| x * scale + y).collect())
        .collect()
}

fn layer_input(cache: &[Mat], accumulate: bool) -> Mat {
    if !accumulate {
        return cache.last().unwrap().clone();
    }
    let mut acc = cache[0].clone();
    for h in &cache[1..] {
        acc = add(&acc, h);
    }
    acc
}

pub fn forward(model: &Seq2Seq, src: &[usize], src_len: usize, tgt_in: &[usize]) -> Forward {
    let w = W(model);
    let cfg = model.config();
    let heads = cfg.heads;
    let mut fuse_probs = Vec::new();

    let mut cache = vec![embed(&w, "src_embed", "src_pos", src)];
    let mut enc_inputs = Vec::new();
    for l in 0..cfg.enc_layers {
        let p = format!("enc.{l}");
        let x = layer_input(&cache, cfg.variant.accumulates(Side::Encoder));
        enc_inputs.push(x.clone());
        let a = mha(&w, &format!("{p}.self"), heads, &x, &x, &|_, k| k < src_len);
        let mut h = add_norm(&w, &x, &a, Some(&format!("{p}.self_norm")));
        if w.has(&format!("{p}.fuse.w_q")) {
            let (f, probs) = fuse(&w, &format!("{p}.fuse"), heads, &h, &cache);
            fuse_probs.push((Side::Encoder, l + 1, probs));
            h = add_norm(&w, &h, &f, None);
        }
        let f = ffn(&w, &format!("{p}.ffn"), &h);
        cache.push(add_norm(&w, &h, &f, Some(&format!("{p}.ffn_norm"))));
    }
    let memory = cache.last().unwrap().clone();
    let enc_outputs = cache;

    let mut cache = vec![embed(&w, "tgt_embed", "tgt_pos", tgt_in)];
    for l in 0..cfg.dec_layers {
        let p = format!("dec.{l}");
        let x = layer_input(&cache, cfg.variant.accumulates(Side::Decoder));
        let a = mha(&w, &format!("{p}.self"), heads, &x, &x, &|q, k| k <= q);
        let h = add_norm(&w, &x, &a, Some(&format!("{p}.self_norm")));
        let c = mha(&w, &format!("{p}.cross"), heads, &h, &memory, &|_, k| k < src_len);
        let mut h = add_norm(&w, &h, &c, Some(&format!("{p}.cross_norm")));
        if w.has(&format!("{p}.fuse.w_q")) {
            let (f, probs) = fuse(&w, &format!("{p}.fuse"), heads, &h, &cache);
            fuse_probs.push((Side::Decoder, l + 1, probs));
            h = add_norm(&w, &h, &f, None);
        }
        let f = ffn(&w, &format!("{p}.ffn"), &h);
        cache.push(add_norm(&w, &h, &f, Some(&format!("{p}.ffn_norm"))));
    }
    Forward {
        logits: matmul(cache.last().unwrap(), &w.mat("output")),
        fuse: fuse_probs,
        enc_inputs,
        enc_outputs,
    }
}
