//! Training forward pass with stored activations and its reverse-mode
//! gradient, written out by hand for the fixed decoder topology.
//!
//! Everything is generic over [`Scalar`] so the same code runs in f32 for
//! training and in f64 for finite-difference checks.

use crate::error::{Error, Result};
use crate::kernels::{gelu, gelu_grad, layer_norm_row, matmul, matmul_at_acc, matmul_bt, Scalar};
use crate::model::params::ParameterSet;

struct LayerActs<F> {
    x_in: Vec<F>,
    h1: Vec<F>,
    stats1: Vec<(F, F)>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// `[head][i][j]` attention weights, zero for `j > i`.
    probs: Vec<F>,
    att: Vec<F>,
    x_mid: Vec<F>,
    h2: Vec<F>,
    stats2: Vec<(F, F)>,
    u: Vec<F>,
    a: Vec<F>,
}

/// Log-probability of `completion` given `prompt` and, when `grad` is
/// given as `(upstream, buffer)`, accumulates `upstream · ∂logp/∂θ` into
/// the buffer.
pub(crate) fn completion_logprob<F: Scalar>(
    p: &ParameterSet<F>,
    prompt: &[u32],
    completion: &[u32],
    grad: Option<(F, &mut ParameterSet<F>)>,
) -> Result<F> {
    if completion.is_empty() {
        return Ok(F::zero());
    }
    let c = *p.config();
    if prompt.is_empty() {
        return Err(Error::Length(
            "a completion needs at least one prompt token".into(),
        ));
    }
    let n_tok = prompt.len() + completion.len();
    if n_tok > c.max_seq_len {
        return Err(Error::Length(format!(
            "prompt {} + completion {} exceeds max_seq_len {}",
            prompt.len(),
            completion.len(),
            c.max_seq_len
        )));
    }
    let tokens: Vec<u32> = prompt.iter().chain(completion).copied().collect();
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(Error::Vocabulary(format!(
            "token id {t} out of range for vocab {}",
            c.vocab_size
        )));
    }

    let t_len = n_tok;
    let (d, f, nh, hd, vocab) = (
        c.hidden_size,
        c.ffn_hidden,
        c.n_heads,
        c.head_dim(),
        c.vocab_size,
    );
    let scale = F::one() / F::of_f64(hd as f64).sqrt();
    let lay = p.layout().clone();

    let mut x = vec![F::zero(); t_len * d];
    {
        let te = p.get(&lay.tok_emb);
        let pe = p.get(&lay.pos_emb);
        for (t, &tok) in tokens.iter().enumerate() {
            let tok = tok as usize;
            for e in 0..d {
                x[t * d + e] = te[tok * d + e] + pe[t * d + e];
            }
        }
    }

    let mut acts: Vec<LayerActs<F>> = Vec::with_capacity(c.n_layers);
    for l in &lay.layers {
        let x_in = x.clone();
        let mut h1 = vec![F::zero(); t_len * d];
        let mut stats1 = Vec::with_capacity(t_len);
        for t in 0..t_len {
            stats1.push(layer_norm_row(
                &x[t * d..(t + 1) * d],
                p.get(&l.ln1_gain),
                p.get(&l.ln1_bias),
                &mut h1[t * d..(t + 1) * d],
            ));
        }
        let mut q = vec![F::zero(); t_len * d];
        let mut k = vec![F::zero(); t_len * d];
        let mut v = vec![F::zero(); t_len * d];
        matmul(&h1, p.get(&l.wq), &mut q, t_len, d, d);
        matmul(&h1, p.get(&l.wk), &mut k, t_len, d, d);
        matmul(&h1, p.get(&l.wv), &mut v, t_len, d, d);

        let mut probs = vec![F::zero(); nh * t_len * t_len];
        let mut att = vec![F::zero(); t_len * d];
        for h in 0..nh {
            for i in 0..t_len {
                let row = &mut probs[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
                let qi = &q[i * d + h * hd..i * d + (h + 1) * hd];
                let mut m = F::neg_infinity();
                for j in 0..=i {
                    let kj = &k[j * d + h * hd..j * d + (h + 1) * hd];
                    let mut s = F::zero();
                    for e in 0..hd {
                        s += qi[e] * kj[e];
                    }
                    row[j] = s * scale;
                    m = m.max(row[j]);
                }
                let mut sum = F::zero();
                for r in row[..=i].iter_mut() {
                    *r = (*r - m).exp();
                    sum += *r;
                }
                for r in row[..=i].iter_mut() {
                    *r /= sum;
                }
                for j in 0..=i {
                    let pj = row[j];
                    for e in 0..hd {
                        att[i * d + h * hd + e] += pj * v[j * d + h * hd + e];
                    }
                }
            }
        }
        let mut proj = vec![F::zero(); t_len * d];
        matmul(&att, p.get(&l.wo), &mut proj, t_len, d, d);
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv += *pv;
        }
        let x_mid = x.clone();

        let mut h2 = vec![F::zero(); t_len * d];
        let mut stats2 = Vec::with_capacity(t_len);
        for t in 0..t_len {
            stats2.push(layer_norm_row(
                &x[t * d..(t + 1) * d],
                p.get(&l.ln2_gain),
                p.get(&l.ln2_bias),
                &mut h2[t * d..(t + 1) * d],
            ));
        }
        let mut u = vec![F::zero(); t_len * f];
        matmul(&h2, p.get(&l.w1), &mut u, t_len, d, f);
        let b1 = p.get(&l.b1);
        for t in 0..t_len {
            for e in 0..f {
                u[t * f + e] += b1[e];
            }
        }
        let a: Vec<F> = u.iter().map(|&z| gelu(z)).collect();
        let mut down = vec![F::zero(); t_len * d];
        matmul(&a, p.get(&l.w2), &mut down, t_len, f, d);
        let b2 = p.get(&l.b2);
        for t in 0..t_len {
            for e in 0..d {
                x[t * d + e] += down[t * d + e] + b2[e];
            }
        }
        acts.push(LayerActs {
            x_in,
            h1,
            stats1,
            q,
            k,
            v,
            probs,
            att,
            x_mid,
            h2,
            stats2,
            u,
            a,
        });
    }

    // logits only where a completion token is predicted
    let first = prompt.len() - 1;
    let n_rows = completion.len();
    let mut hf = vec![F::zero(); n_rows * d];
    let mut statsf = Vec::with_capacity(n_rows);
    for r in 0..n_rows {
        let t = first + r;
        statsf.push(layer_norm_row(
            &x[t * d..(t + 1) * d],
            p.get(&lay.lnf_gain),
            p.get(&lay.lnf_bias),
            &mut hf[r * d..(r + 1) * d],
        ));
    }
    let mut logits = vec![F::zero(); n_rows * vocab];
    match &lay.head {
        Some(h) => matmul(&hf, p.get(h), &mut logits, n_rows, d, vocab),
        None => matmul_bt(&hf, p.get(&lay.tok_emb), &mut logits, n_rows, d, vocab),
    }
    let mut total = F::zero();
    let mut probs_out = vec![F::zero(); n_rows * vocab];
    for r in 0..n_rows {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (o, &z) in probs_out[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
            *o = (z - m).exp();
            sum += *o;
        }
        let target = tokens[first + r + 1] as usize;
        total += row[target] - m - sum.ln();
        for o in probs_out[r * vocab..(r + 1) * vocab].iter_mut() {
            *o /= sum;
        }
    }
    if !total.is_finite() {
        return Err(Error::Numeric("non-finite sequence log-probability".into()));
    }

    let Some((upstream, g)) = grad else {
        return Ok(total);
    };

    // d logp / d logits = onehot - softmax
    let mut dlogits = probs_out;
    for r in 0..n_rows {
        let target = tokens[first + r + 1] as usize;
        let row = &mut dlogits[r * vocab..(r + 1) * vocab];
        for z in row.iter_mut() {
            *z = -*z * upstream;
        }
        row[target] += upstream;
    }
    let mut dhf = vec![F::zero(); n_rows * d];
    match &lay.head {
        Some(h) => {
            matmul_bt(&dlogits, p.get(h), &mut dhf, n_rows, vocab, d);
            matmul_at_acc(&hf, &dlogits, g.get_mut(h), n_rows, d, vocab);
        }
        None => {
            matmul(&dlogits, p.get(&lay.tok_emb), &mut dhf, n_rows, vocab, d);
            matmul_at_acc(&dlogits, &hf, g.get_mut(&lay.tok_emb), n_rows, vocab, d);
        }
    }
    let mut dx = vec![F::zero(); t_len * d];
    for r in 0..n_rows {
        let t = first + r;
        ln_backward(
            &x[t * d..(t + 1) * d],
            statsf[r],
            p.get(&lay.lnf_gain),
            &dhf[r * d..(r + 1) * d],
            &mut dx[t * d..(t + 1) * d],
            g,
            &lay.lnf_gain,
            &lay.lnf_bias,
        );
    }

    for (li, l) in lay.layers.iter().enumerate().rev() {
        let ac = &acts[li];
        // feed-forward
        {
            let db2 = g.get_mut(&l.b2);
            for t in 0..t_len {
                for e in 0..d {
                    db2[e] += dx[t * d + e];
                }
            }
        }
        let mut da = vec![F::zero(); t_len * f];
        matmul_bt(&dx, p.get(&l.w2), &mut da, t_len, d, f);
        matmul_at_acc(&ac.a, &dx, g.get_mut(&l.w2), t_len, f, d);
        for (dz, &z) in da.iter_mut().zip(&ac.u) {
            *dz *= gelu_grad(z);
        }
        {
            let db1 = g.get_mut(&l.b1);
            for t in 0..t_len {
                for e in 0..f {
                    db1[e] += da[t * f + e];
                }
            }
        }
        let mut dh2 = vec![F::zero(); t_len * d];
        matmul_bt(&da, p.get(&l.w1), &mut dh2, t_len, f, d);
        matmul_at_acc(&ac.h2, &da, g.get_mut(&l.w1), t_len, d, f);
        for t in 0..t_len {
            ln_backward(
                &ac.x_mid[t * d..(t + 1) * d],
                ac.stats2[t],
                p.get(&l.ln2_gain),
                &dh2[t * d..(t + 1) * d],
                &mut dx[t * d..(t + 1) * d],
                g,
                &l.ln2_gain,
                &l.ln2_bias,
            );
        }

        // attention
        let mut datt = vec![F::zero(); t_len * d];
        matmul_bt(&dx, p.get(&l.wo), &mut datt, t_len, d, d);
        matmul_at_acc(&ac.att, &dx, g.get_mut(&l.wo), t_len, d, d);
        let mut dq = vec![F::zero(); t_len * d];
        let mut dk = vec![F::zero(); t_len * d];
        let mut dv = vec![F::zero(); t_len * d];
        let mut dp = vec![F::zero(); t_len];
        for h in 0..nh {
            for i in 0..t_len {
                let row = &ac.probs[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
                let dai = &datt[i * d + h * hd..i * d + (h + 1) * hd];
                let mut weighted = F::zero();
                for j in 0..=i {
                    let vj = &ac.v[j * d + h * hd..j * d + (h + 1) * hd];
                    let mut s = F::zero();
                    for e in 0..hd {
                        s += dai[e] * vj[e];
                        dv[j * d + h * hd + e] += row[j] * dai[e];
                    }
                    dp[j] = s;
                    weighted += row[j] * s;
                }
                for j in 0..=i {
                    let ds = row[j] * (dp[j] - weighted) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    for e in 0..hd {
                        dq[i * d + h * hd + e] += ds * ac.k[j * d + h * hd + e];
                        dk[j * d + h * hd + e] += ds * ac.q[i * d + h * hd + e];
                    }
                }
            }
        }
        let mut dh1 = vec![F::zero(); t_len * d];
        let mut tmp = vec![F::zero(); t_len * d];
        for (dy, w) in [(&dq, &l.wq), (&dk, &l.wk), (&dv, &l.wv)] {
            matmul_bt(dy, p.get(w), &mut tmp, t_len, d, d);
            for (a, b) in dh1.iter_mut().zip(&tmp) {
                *a += *b;
            }
            matmul_at_acc(&ac.h1, dy, g.get_mut(w), t_len, d, d);
        }
        for t in 0..t_len {
            ln_backward(
                &ac.x_in[t * d..(t + 1) * d],
                ac.stats1[t],
                p.get(&l.ln1_gain),
                &dh1[t * d..(t + 1) * d],
                &mut dx[t * d..(t + 1) * d],
                g,
                &l.ln1_gain,
                &l.ln1_bias,
            );
        }
    }

    let dte = lay.tok_emb.clone();
    let dpe = lay.pos_emb.clone();
    for (t, &tok) in tokens.iter().enumerate() {
        let tok = tok as usize;
        {
            let te = g.get_mut(&dte);
            for e in 0..d {
                te[tok * d + e] += dx[t * d + e];
            }
        }
        let pe = g.get_mut(&dpe);
        for e in 0..d {
            pe[t * d + e] += dx[t * d + e];
        }
    }
    Ok(total)
}

/// Backward of `y = xhat·gain + bias` for one row: accumulates into `dx`
/// and into the gain/bias gradients.
#[allow(clippy::too_many_arguments)]
fn ln_backward<F: Scalar>(
    x: &[F],
    (mean, rstd): (F, F),
    gain: &[F],
    dy: &[F],
    dx: &mut [F],
    g: &mut ParameterSet<F>,
    gain_range: &std::ops::Range<usize>,
    bias_range: &std::ops::Range<usize>,
) {
    let n = x.len();
    let nf = F::of_f64(n as f64);
    let mut m1 = F::zero();
    let mut m2 = F::zero();
    {
        let dg = g.get_mut(gain_range);
        for i in 0..n {
            let xhat = (x[i] - mean) * rstd;
            dg[i] += dy[i] * xhat;
            let gx = dy[i] * gain[i];
            m1 += gx;
            m2 += gx * xhat;
        }
    }
    {
        let db = g.get_mut(bias_range);
        for i in 0..n {
            db[i] += dy[i];
        }
    }
    m1 /= nf;
    m2 /= nf;
    for i in 0..n {
        let xhat = (x[i] - mean) * rstd;
        dx[i] += rstd * (dy[i] * gain[i] - m1 - xhat * m2);
    }
}
