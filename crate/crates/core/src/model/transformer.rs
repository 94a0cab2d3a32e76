//! Forward pass with activation trace, and the matching manual backward pass.

use super::math::{gelu, gelu_grad, gemm, layernorm_backward, layernorm_forward, matmul, matmul_nt, matmul_tn, Real, View, ViewMut};
use super::Params;
use crate::adapters::{LoraLayer, LoraWeights};
use crate::text::TokenId;

/// Per-layer dense FFN deltas, borrowed. `None` entries mean "no delta".
#[derive(Clone, Debug)]
pub struct DenseDelta<'a, T> {
    pub up: Vec<Option<&'a [T]>>,
    pub down: Vec<Option<&'a [T]>>,
}

/// What, if anything, perturbs the FFN matrices during evaluation.
#[derive(Clone, Debug)]
pub enum FfnDelta<'a, T> {
    None,
    /// `W + dW` with `dW` materialized per matrix.
    Dense(DenseDelta<'a, T>),
    /// `W + s * A * B^T` evaluated through the low-rank factors.
    LowRank(&'a LoraWeights<T>),
}

/// Which rows of the output head to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogitRows {
    All,
    Last,
}

#[derive(Clone, Debug, Default)]
pub struct LayerTrace<T> {
    x_in: Vec<T>,
    ln1: Vec<T>,
    ln1_mean: Vec<T>,
    ln1_rstd: Vec<T>,
    qkv: Vec<T>,
    att: Vec<T>,
    att_out: Vec<T>,
    x_mid: Vec<T>,
    ln2: Vec<T>,
    ln2_mean: Vec<T>,
    ln2_rstd: Vec<T>,
    up_u: Vec<T>,
    z: Vec<T>,
    g: Vec<T>,
    down_u: Vec<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    tokens: Vec<TokenId>,
    layers: Vec<LayerTrace<T>>,
    x_final: Vec<T>,
    lnf: Vec<T>,
    lnf_mean: Vec<T>,
    lnf_rstd: Vec<T>,
    rows: LogitRows,
    /// `seq_len x vocab`, or `1 x vocab` for [`LogitRows::Last`].
    pub logits: Vec<T>,
}

impl<T> Trace<T> {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }
}

fn effective<'b, T: Real>(base: &'b [T], delta: Option<&[T]>, scratch: &'b mut Vec<T>) -> &'b [T] {
    match delta {
        None => base,
        Some(d) => {
            scratch.clear();
            scratch.extend(base.iter().zip(d).map(|(&w, &dw)| w + dw));
            scratch
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn accumulate_colsum<T: Real>(dbias: &mut [T], dout: &[T]) {
    for row in dout.chunks_exact(dbias.len()) {
        for (d, &g) in dbias.iter_mut().zip(row) {
            *d += g;
        }
    }
}

/// Runs the model over `tokens`, recording activations.
///
/// Callers validate `tokens` (length and id range) beforehand.
pub fn forward_trace<T: Real>(params: &Params<T>, delta: &FfnDelta<'_, T>, tokens: &[TokenId], rows: LogitRows) -> Trace<T> {
    let cfg = &params.config;
    let (h, l, nh, v) = (cfg.hidden, cfg.ffn_intermediate, cfg.n_heads, cfg.vocab);
    let d = cfg.head_dim();
    let t = tokens.len();
    let lay = &params.layout;
    let w = &params.data;

    let mut x = vec![T::zero(); t * h];
    let tok_emb = &w[lay.tok_emb.clone()];
    let pos_emb = &w[lay.pos_emb.clone()];
    for (i, &tok) in tokens.iter().enumerate() {
        let te = &tok_emb[tok as usize * h..(tok as usize + 1) * h];
        let pe = &pos_emb[i * h..(i + 1) * h];
        for j in 0..h {
            x[i * h + j] = te[j] + pe[j];
        }
    }

    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut scratch = Vec::new();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, ll) in lay.layers.iter().enumerate() {
        let mut tr = LayerTrace { x_in: x.clone(), ..Default::default() };

        tr.ln1 = vec![T::zero(); t * h];
        tr.ln1_mean = vec![T::zero(); t];
        tr.ln1_rstd = vec![T::zero(); t];
        layernorm_forward(&mut tr.ln1, &mut tr.ln1_mean, &mut tr.ln1_rstd, &x, &w[ll.ln1_g.clone()], &w[ll.ln1_b.clone()], h);

        tr.qkv = vec![T::zero(); t * 3 * h];
        matmul(&mut tr.qkv, &tr.ln1, &w[ll.w_qkv.clone()], t, h, 3 * h, false);
        add_bias(&mut tr.qkv, &w[ll.b_qkv.clone()]);

        tr.att = vec![T::zero(); nh * t * t];
        tr.att_out = vec![T::zero(); t * h];
        for hd in 0..nh {
            let q = View::strided(&tr.qkv[hd * d..], t, d, 3 * h, 1);
            let k = View::strided(&tr.qkv[h + hd * d..], t, d, 3 * h, 1);
            let vv = View::strided(&tr.qkv[2 * h + hd * d..], t, d, 3 * h, 1);
            let p = &mut tr.att[hd * t * t..(hd + 1) * t * t];
            gemm(scale, q, k.t(), T::zero(), ViewMut::new(p, t, t));
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                super::math::softmax_in_place(&mut row[..=i]);
                row[i + 1..].fill(T::zero());
            }
            gemm(T::one(), View::new(p, t, t), vv, T::zero(), ViewMut::strided(&mut tr.att_out[hd * d..], t, d, h, 1));
        }

        let mut o = vec![T::zero(); t * h];
        matmul(&mut o, &tr.att_out, &w[ll.w_o.clone()], t, h, h, false);
        add_bias(&mut o, &w[ll.b_o.clone()]);
        for (xi, oi) in x.iter_mut().zip(&o) {
            *xi += *oi;
        }
        tr.x_mid = x.clone();

        tr.ln2 = vec![T::zero(); t * h];
        tr.ln2_mean = vec![T::zero(); t];
        tr.ln2_rstd = vec![T::zero(); t];
        layernorm_forward(&mut tr.ln2, &mut tr.ln2_mean, &mut tr.ln2_rstd, &x, &w[ll.ln2_g.clone()], &w[ll.ln2_b.clone()], h);

        let (dense_up, dense_down) = match delta {
            FfnDelta::Dense(dd) => (dd.up[li], dd.down[li]),
            _ => (None, None),
        };

        tr.z = vec![T::zero(); t * l];
        {
            let w_up = effective(&w[ll.w_up.clone()], dense_up, &mut scratch);
            matmul(&mut tr.z, &tr.ln2, w_up, t, h, l, false);
        }
        add_bias(&mut tr.z, &w[ll.b_up.clone()]);
        if let FfnDelta::LowRank(lora) = delta {
            let r = lora.rank;
            let lr = &lora.layers[li];
            tr.up_u = vec![T::zero(); t * r];
            matmul(&mut tr.up_u, &tr.ln2, &lr.up_a, t, h, r, false);
            gemm(lora.scale, View::new(&tr.up_u, t, r), View::new(&lr.up_b, l, r).t(), T::one(), ViewMut::new(&mut tr.z, t, l));
        }

        tr.g = tr.z.iter().map(|&zv| gelu(zv)).collect();

        let mut y = vec![T::zero(); t * h];
        {
            let w_down = effective(&w[ll.w_down.clone()], dense_down, &mut scratch);
            matmul(&mut y, &tr.g, w_down, t, l, h, false);
        }
        add_bias(&mut y, &w[ll.b_down.clone()]);
        if let FfnDelta::LowRank(lora) = delta {
            let r = lora.rank;
            let lr = &lora.layers[li];
            tr.down_u = vec![T::zero(); t * r];
            matmul(&mut tr.down_u, &tr.g, &lr.down_a, t, l, r, false);
            gemm(lora.scale, View::new(&tr.down_u, t, r), View::new(&lr.down_b, h, r).t(), T::one(), ViewMut::new(&mut y, t, h));
        }
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi += *yi;
        }
        layers.push(tr);
    }

    let mut lnf = vec![T::zero(); t * h];
    let mut lnf_mean = vec![T::zero(); t];
    let mut lnf_rstd = vec![T::zero(); t];
    layernorm_forward(&mut lnf, &mut lnf_mean, &mut lnf_rstd, &x, &w[lay.lnf_g.clone()], &w[lay.lnf_b.clone()], h);

    let head = &w[lay.head.clone()];
    let logits = match rows {
        LogitRows::All => {
            let mut out = vec![T::zero(); t * v];
            matmul(&mut out, &lnf, head, t, h, v, false);
            out
        }
        LogitRows::Last => {
            let mut out = vec![T::zero(); v];
            matmul(&mut out, &lnf[(t - 1) * h..], head, 1, h, v, false);
            out
        }
    };

    Trace { tokens: tokens.to_vec(), layers, x_final: x, lnf, lnf_mean, lnf_rstd, rows, logits }
}

/// Which gradients the backward pass should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradRequest {
    pub base: bool,
    pub lora: bool,
}

#[derive(Clone, Debug)]
pub struct Grads<T> {
    /// Same layout as [`Params::data`].
    pub base: Option<Vec<T>>,
    pub lora: Option<Vec<LoraLayer<T>>>,
}

/// Backpropagates `dlogits` (shape of `trace.logits`, which must cover all rows).
pub fn backward<T: Real>(params: &Params<T>, delta: &FfnDelta<'_, T>, trace: &Trace<T>, dlogits: &[T], want: GradRequest) -> Grads<T> {
    assert_eq!(trace.rows, LogitRows::All, "backward needs logits for every position");
    let cfg = &params.config;
    let (h, l, nh, v) = (cfg.hidden, cfg.ffn_intermediate, cfg.n_heads, cfg.vocab);
    let d = cfg.head_dim();
    let t = trace.seq_len();
    let lay = &params.layout;
    let w = &params.data;
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();

    let lowrank = match delta {
        FfnDelta::LowRank(lora) if want.lora => Some(*lora),
        _ => None,
    };
    let mut dbase = want.base.then(|| vec![T::zero(); w.len()]);
    let mut dlora: Option<Vec<LoraLayer<T>>> = lowrank.map(|lora| lora.layers.iter().map(LoraLayer::zeros_like).collect());

    // Output head.
    let head = &w[lay.head.clone()];
    if let Some(g) = dbase.as_mut() {
        matmul_tn(&mut g[lay.head.clone()], &trace.lnf, dlogits, h, t, v, true);
    }
    let mut dlnf = vec![T::zero(); t * h];
    matmul_nt(&mut dlnf, dlogits, head, t, v, h, false);

    let mut dx = vec![T::zero(); t * h];
    {
        let (dg, db) = split_pair(dbase.as_mut(), lay.lnf_g.clone(), lay.lnf_b.clone());
        let dparams = dg.zip(db);
        layernorm_backward(&mut dx, dparams, &dlnf, &trace.x_final, &w[lay.lnf_g.clone()], &trace.lnf_mean, &trace.lnf_rstd, h);
    }

    let mut scratch = Vec::new();
    for li in (0..cfg.n_layers).rev() {
        let ll = &lay.layers[li];
        let tr = &trace.layers[li];
        let (dense_up, dense_down) = match delta {
            FfnDelta::Dense(dd) => (dd.up[li], dd.down[li]),
            _ => (None, None),
        };

        // FFN down projection: y = g W_down + b_down (+ s (g A) B^T).
        let dy = &dx;
        let mut dg = vec![T::zero(); t * l];
        if let Some(g) = dbase.as_mut() {
            accumulate_colsum(&mut g[ll.b_down.clone()], dy);
            matmul_tn(&mut g[ll.w_down.clone()], &tr.g, dy, l, t, h, true);
        }
        {
            let w_down = effective(&w[ll.w_down.clone()], dense_down, &mut scratch);
            matmul_nt(&mut dg, dy, w_down, t, h, l, false);
        }
        if let (Some(lora), Some(dl)) = (lowrank, dlora.as_mut()) {
            let r = lora.rank;
            let lr = &lora.layers[li];
            let dlr = &mut dl[li];
            let mut du = vec![T::zero(); t * r];
            gemm(lora.scale, View::new(dy, t, h), View::new(&lr.down_b, h, r), T::zero(), ViewMut::new(&mut du, t, r));
            gemm(lora.scale, View::new(dy, t, h).t(), View::new(&tr.down_u, t, r), T::one(), ViewMut::new(&mut dlr.down_b, h, r));
            matmul_tn(&mut dlr.down_a, &tr.g, &du, l, t, r, true);
            matmul_nt(&mut dg, &du, &lr.down_a, t, r, l, true);
        }

        let dz: Vec<T> = dg.iter().zip(&tr.z).map(|(&gv, &zv)| gv * gelu_grad(zv)).collect();

        // FFN up projection.
        let mut dln2 = vec![T::zero(); t * h];
        if let Some(g) = dbase.as_mut() {
            accumulate_colsum(&mut g[ll.b_up.clone()], &dz);
            matmul_tn(&mut g[ll.w_up.clone()], &tr.ln2, &dz, h, t, l, true);
        }
        {
            let w_up = effective(&w[ll.w_up.clone()], dense_up, &mut scratch);
            matmul_nt(&mut dln2, &dz, w_up, t, l, h, false);
        }
        if let (Some(lora), Some(dl)) = (lowrank, dlora.as_mut()) {
            let r = lora.rank;
            let lr = &lora.layers[li];
            let dlr = &mut dl[li];
            let mut du = vec![T::zero(); t * r];
            gemm(lora.scale, View::new(&dz, t, l), View::new(&lr.up_b, l, r), T::zero(), ViewMut::new(&mut du, t, r));
            gemm(lora.scale, View::new(&dz, t, l).t(), View::new(&tr.up_u, t, r), T::one(), ViewMut::new(&mut dlr.up_b, l, r));
            matmul_tn(&mut dlr.up_a, &tr.ln2, &du, h, t, r, true);
            matmul_nt(&mut dln2, &du, &lr.up_a, t, r, h, true);
        }

        {
            let (dgam, dbet) = split_pair(dbase.as_mut(), ll.ln2_g.clone(), ll.ln2_b.clone());
            layernorm_backward(&mut dx, dgam.zip(dbet), &dln2, &tr.x_mid, &w[ll.ln2_g.clone()], &tr.ln2_mean, &tr.ln2_rstd, h);
        }

        // Attention output projection; dx now holds d(x_mid).
        let mut datt_out = vec![T::zero(); t * h];
        if let Some(g) = dbase.as_mut() {
            accumulate_colsum(&mut g[ll.b_o.clone()], &dx);
            matmul_tn(&mut g[ll.w_o.clone()], &tr.att_out, &dx, h, t, h, true);
        }
        matmul_nt(&mut datt_out, &dx, &w[ll.w_o.clone()], t, h, h, false);

        let mut dqkv = vec![T::zero(); t * 3 * h];
        let mut dp = vec![T::zero(); t * t];
        for hd in 0..nh {
            let p = &tr.att[hd * t * t..(hd + 1) * t * t];
            let q = View::strided(&tr.qkv[hd * d..], t, d, 3 * h, 1);
            let k = View::strided(&tr.qkv[h + hd * d..], t, d, 3 * h, 1);
            let vv = View::strided(&tr.qkv[2 * h + hd * d..], t, d, 3 * h, 1);
            let dout = View::strided(&datt_out[hd * d..], t, d, h, 1);

            gemm(T::one(), dout, vv.t(), T::zero(), ViewMut::new(&mut dp, t, t));
            gemm(T::one(), View::new(p, t, t).t(), dout, T::zero(), ViewMut::strided(&mut dqkv[2 * h + hd * d..], t, d, 3 * h, 1));

            // Softmax backward, restricted to the causal triangle.
            for i in 0..t {
                let prow = &p[i * t..(i + 1) * t];
                let drow = &mut dp[i * t..(i + 1) * t];
                let dot: T = (0..=i).map(|j| prow[j] * drow[j]).sum();
                for j in 0..=i {
                    drow[j] = prow[j] * (drow[j] - dot);
                }
                drow[i + 1..].fill(T::zero());
            }
            gemm(scale, View::new(&dp, t, t), k, T::zero(), ViewMut::strided(&mut dqkv[hd * d..], t, d, 3 * h, 1));
            gemm(scale, View::new(&dp, t, t).t(), q, T::zero(), ViewMut::strided(&mut dqkv[h + hd * d..], t, d, 3 * h, 1));
        }

        let mut dln1 = vec![T::zero(); t * h];
        if let Some(g) = dbase.as_mut() {
            accumulate_colsum(&mut g[ll.b_qkv.clone()], &dqkv);
            matmul_tn(&mut g[ll.w_qkv.clone()], &tr.ln1, &dqkv, h, t, 3 * h, true);
        }
        matmul_nt(&mut dln1, &dqkv, &w[ll.w_qkv.clone()], t, 3 * h, h, false);
        {
            let (dgam, dbet) = split_pair(dbase.as_mut(), ll.ln1_g.clone(), ll.ln1_b.clone());
            layernorm_backward(&mut dx, dgam.zip(dbet), &dln1, &tr.x_in, &w[ll.ln1_g.clone()], &tr.ln1_mean, &tr.ln1_rstd, h);
        }
    }

    if let Some(g) = dbase.as_mut() {
        let (tok_range, pos_range) = (lay.tok_emb.clone(), lay.pos_emb.clone());
        for (i, &tok) in trace.tokens.iter().enumerate() {
            let row = &dx[i * h..(i + 1) * h];
            let te = &mut g[tok_range.clone()][tok as usize * h..(tok as usize + 1) * h];
            for (a, &b) in te.iter_mut().zip(row) {
                *a += b;
            }
            let pe = &mut g[pos_range.clone()][i * h..(i + 1) * h];
            for (a, &b) in pe.iter_mut().zip(row) {
                *a += b;
            }
        }
    }

    Grads { base: dbase, lora: dlora }
}

/// Borrows two disjoint ranges of an optional gradient buffer. Ranges must be
/// ordered, `a` before `b`.
fn split_pair<T>(buf: Option<&mut Vec<T>>, a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (Option<&mut [T]>, Option<&mut [T]>) {
    match buf {
        None => (None, None),
        Some(buf) => {
            assert!(a.end <= b.start);
            let (lo, hi) = buf.split_at_mut(b.start);
            (Some(&mut lo[a]), Some(&mut hi[..b.end - b.start]))
        }
    }
}
