//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use qdsum::model::ParameterSet;

fn t<'a>(p: &'a ParameterSet<f64>, name: &str) -> &'a [f64] {
    p.tensor(name)
        .unwrap_or_else(|| panic!("missing tensor {name}"))
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(g)
        .zip(b)
        .map(|((v, g), b)| (v - mean) * r * g + b)
        .collect()
}

/// `x[in] · W[in × out]`
fn vecmat(x: &[f64], w: &[f64], out_dim: usize) -> Vec<f64> {
    let mut y = vec![0.0; out_dim];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..out_dim {
            y[j] += xi * w[i * out_dim + j];
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Straightforward per-position decoder evaluation reading tensors by name.
/// Returns logits for every position.
pub fn naive_logits(p: &ParameterSet<f64>, tokens: &[u32]) -> Vec<Vec<f64>> {
    let c = *p.config();
    let (d, f, nh) = (c.hidden_size, c.ffn_hidden, c.n_heads);
    let hd = d / nh;
    let te = t(p, "tok_emb");
    let pe = t(p, "pos_emb");
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &tok)| {
            (0..d)
                .map(|e| te[tok as usize * d + e] + pe[i * d + e])
                .collect()
        })
        .collect();
    for l in 0..c.n_layers {
        let g = |s: &str| t(p, &format!("layer{l}.{s}"));
        let h: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| layer_norm(x, g("ln1.gain"), g("ln1.bias")))
            .collect();
        let q: Vec<Vec<f64>> = h.iter().map(|x| vecmat(x, g("attn.wq"), d)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|x| vecmat(x, g("attn.wk"), d)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|x| vecmat(x, g("attn.wv"), d)).collect();
        for i in 0..xs.len() {
            let mut att = vec![0.0; d];
            for head in 0..nh {
                let r = head * hd..(head + 1) * hd;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        q[i][r.clone()]
                            .iter()
                            .zip(&k[j][r.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..=i {
                    let w = (scores[j] - m).exp() / z;
                    for e in r.clone() {
                        att[e] += w * v[j][e];
                    }
                }
            }
            let o = vecmat(&att, g("attn.wo"), d);
            for e in 0..d {
                xs[i][e] += o[e];
            }
        }
        for x in xs.iter_mut() {
            let h = layer_norm(x, g("ln2.gain"), g("ln2.bias"));
            let mut u = vecmat(&h, g("ffn.w1"), f);
            for (e, ue) in u.iter_mut().enumerate() {
                *ue = gelu(*ue + g("ffn.b1")[e]);
            }
            let y = vecmat(&u, g("ffn.w2"), d);
            for e in 0..d {
                x[e] += y[e] + g("ffn.b2")[e];
            }
        }
    }
    let v = c.vocab_size;
    xs.iter()
        .map(|x| {
            let h = layer_norm(x, t(p, "lnf.gain"), t(p, "lnf.bias"));
            match p.tensor("head") {
                Some(w) => vecmat(&h, w, v),
                None => (0..v)
                    .map(|j| (0..d).map(|e| h[e] * te[j * d + e]).sum())
                    .collect(),
            }
        })
        .collect()
}

/// Sum of log-softmax probabilities of `completion`, evaluating the naive
/// forward once per completion token on the growing prefix.
pub fn naive_logprob(p: &ParameterSet<f64>, prompt: &[u32], completion: &[u32]) -> f64 {
    let mut ctx = prompt.to_vec();
    let mut total = 0.0;
    for &y in completion {
        let logits = naive_logits(p, &ctx);
        let row = logits.last().unwrap();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += row[y as usize] - lse;
        ctx.push(y);
    }
    total
}

/// Worst relative error between an analytic gradient and central finite
/// differences over every coordinate. Returns `(worst, index, analytic, numeric)`.
pub fn finite_difference_check(
    params: &ParameterSet<f64>,
    analytic: &[f64],
    h: f64,
    floor: f64,
    mut loss: impl FnMut(&ParameterSet<f64>) -> f64,
) -> (f64, usize, f64, f64) {
    let mut p = params.clone();
    let mut worst = (0.0, 0, 0.0, 0.0);
    for i in 0..p.len() {
        let orig = p.as_slice()[i];
        p.as_mut_slice()[i] = orig + h;
        let up = loss(&p);
        p.as_mut_slice()[i] = orig - h;
        let down = loss(&p);
        p.as_mut_slice()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel = if denom == 0.0 {
            0.0
        } else {
            (a - numeric).abs() / denom
        };
        if rel > worst.0 {
            worst = (rel, i, a, numeric);
        }
    }
    worst
}
