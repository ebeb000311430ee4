//! Toy causal language model: a two-layer, single-head, pre-LN transformer
//! decoder over frozen word embeddings, conditioned on a soft-token prefix.
//!
//! The output head is tied to the frozen embedding table and multiplied by a
//! fixed logit scale so confident predictions are reachable despite the small
//! embedding norm. Forward passes compute each position's attention with an
//! explicit key loop in index order, so per-token log-probabilities are
//! bitwise identical between incremental sampling and full-sequence rescoring.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, VoxError};
use crate::linalg::{dot, log_sum_exp, softmax_backward, vec_mat_backward, vec_mat_into, Mat};
use crate::rng::{derive_rng, salt};
use crate::text::{reserved, EmbeddingTable, TokenId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub ff: usize,
    /// Bound on prefix length + token count; the position table has one
    /// extra row for the internal start-of-sequence position.
    pub t_max: usize,
    pub prefix_len: usize,
    pub logit_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            dim: 32,
            n_layers: 2,
            ff: 128,
            t_max: 96,
            prefix_len: 8,
            logit_scale: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

/// Trainable decoder parameters. The same shape doubles as the gradient
/// accumulator type.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub pos: Mat,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerParams {
    fn zeros(dim: usize, ff: usize) -> LayerParams {
        LayerParams {
            ln1_g: vec![0.0; dim],
            ln1_b: vec![0.0; dim],
            wq: Mat::zeros(dim, dim),
            wk: Mat::zeros(dim, dim),
            wv: Mat::zeros(dim, dim),
            wo: Mat::zeros(dim, dim),
            ln2_g: vec![0.0; dim],
            ln2_b: vec![0.0; dim],
            w1: Mat::zeros(dim, ff),
            b1: vec![0.0; ff],
            w2: Mat::zeros(ff, dim),
            b2: vec![0.0; dim],
        }
    }
}

impl PolicyParams {
    pub fn zeros(config: PolicyConfig) -> PolicyParams {
        let d = config.dim;
        PolicyParams {
            config,
            pos: Mat::zeros(config.t_max + 1, d),
            layers: (0..config.n_layers).map(|_| LayerParams::zeros(d, config.ff)).collect(),
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
        }
    }

    /// Seeded init: weight matrices N(0, 1/sqrt(fan_in)), gains 1, biases 0,
    /// position rows N(0, 0.02).
    pub fn init(config: PolicyConfig, seed: u64) -> PolicyParams {
        let mut rng = derive_rng(seed, &[salt::POLICY_INIT]);
        let mut p = PolicyParams::zeros(config);
        let d = config.dim;
        let f = config.ff;
        let pos_dist = Normal::new(0.0, 0.02).expect("valid");
        for v in p.pos.data_mut() {
            *v = pos_dist.sample(&mut rng);
        }
        let wd = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid");
        let wf = Normal::new(0.0, 1.0 / (f as f64).sqrt()).expect("valid");
        for layer in p.layers.iter_mut() {
            layer.ln1_g.fill(1.0);
            layer.ln2_g.fill(1.0);
            for v in layer.wq.data_mut() {
                *v = wd.sample(&mut rng);
            }
            for v in layer.wk.data_mut() {
                *v = wd.sample(&mut rng);
            }
            for v in layer.wv.data_mut() {
                *v = wd.sample(&mut rng);
            }
            for v in layer.wo.data_mut() {
                *v = wd.sample(&mut rng);
            }
            for v in layer.w1.data_mut() {
                *v = wd.sample(&mut rng);
            }
            for v in layer.w2.data_mut() {
                *v = wf.sample(&mut rng);
            }
        }
        p.lnf_g.fill(1.0);
        p
    }

    /// Parameters flattened in a fixed order; `set_flat` is the inverse.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(|s| out.extend_from_slice(s));
        out
    }

    pub fn flat_len(&self) -> usize {
        let mut n = 0;
        self.visit(|s| n += s.len());
        n
    }

    pub fn set_flat(&mut self, data: &[f64]) {
        let mut off = 0;
        self.visit_mut(|s| {
            s.copy_from_slice(&data[off..off + s.len()]);
            off += s.len();
        });
        debug_assert_eq!(off, data.len());
    }

    fn visit(&self, mut f: impl FnMut(&[f64])) {
        f(self.pos.data());
        for l in &self.layers {
            f(&l.ln1_g);
            f(&l.ln1_b);
            f(l.wq.data());
            f(l.wk.data());
            f(l.wv.data());
            f(l.wo.data());
            f(&l.ln2_g);
            f(&l.ln2_b);
            f(l.w1.data());
            f(&l.b1);
            f(l.w2.data());
            f(&l.b2);
        }
        f(&self.lnf_g);
        f(&self.lnf_b);
    }

    fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(self.pos.data_mut());
        for l in self.layers.iter_mut() {
            f(&mut l.ln1_g);
            f(&mut l.ln1_b);
            f(l.wq.data_mut());
            f(l.wk.data_mut());
            f(l.wv.data_mut());
            f(l.wo.data_mut());
            f(&mut l.ln2_g);
            f(&mut l.ln2_b);
            f(l.w1.data_mut());
            f(&mut l.b1);
            f(l.w2.data_mut());
            f(&mut l.b2);
        }
        f(&mut self.lnf_g);
        f(&mut self.lnf_b);
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], xhat: &mut [f64], out: &mut [f64]) -> f64 {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = xhat[i] * g[i] + b[i];
    }
    rstd
}

/// dx for one row; accumulates dg/db.
fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: f64,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let d = dy.len() as f64;
    let mut sum_dxhat = 0.0;
    let mut sum_dxhat_xhat = 0.0;
    for i in 0..dy.len() {
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
        let dxhat = dy[i] * g[i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat[i];
    }
    let m1 = sum_dxhat / d;
    let m2 = sum_dxhat_xhat / d;
    for i in 0..dy.len() {
        let dxhat = dy[i] * g[i];
        dx[i] = rstd * (dxhat - m1 - xhat[i] * m2);
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct LayerCache {
    xhat1: Mat,
    rstd1: Vec<f64>,
    ln1: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn: Vec<Vec<f64>>,
    ctx: Mat,
    xhat2: Mat,
    rstd2: Vec<f64>,
    ln2: Mat,
    ff_pre: Mat,
    ff_h: Mat,
}

pub struct ForwardCache {
    layers: Vec<LayerCache>,
    xhatf: Mat,
    rstdf: Vec<f64>,
    /// Final hidden rows after the last layer norm.
    pub hfin: Mat,
}

/// Input rows: `<bos>` embedding, then the soft prefix, then token
/// embeddings, each with its position row added.
fn build_rows(
    params: &PolicyParams,
    table: &EmbeddingTable,
    prefix: Option<&Mat>,
    tokens: &[TokenId],
) -> Result<Mat> {
    let d = params.config.dim;
    let m = prefix.map_or(0, |p| p.rows());
    if let Some(p) = prefix {
        if p.cols() != d {
            return Err(VoxError::DimensionMismatch("prefix width != model dim"));
        }
        if p.rows() != params.config.prefix_len {
            return Err(VoxError::DimensionMismatch("prefix length != configured slots"));
        }
    }
    if m + tokens.len() > params.config.t_max {
        return Err(VoxError::SequenceTooLong {
            len: tokens.len(),
            prefix: m,
            max: params.config.t_max,
        });
    }
    let l = 1 + m + tokens.len();
    let mut rows = Mat::zeros(l, d);
    for (j, val) in rows.row_mut(0).iter_mut().enumerate() {
        *val = table.row(reserved::BOS)[j] + params.pos.get(0, j);
    }
    if let Some(p) = prefix {
        for i in 0..m {
            for (j, val) in rows.row_mut(1 + i).iter_mut().enumerate() {
                *val = p.get(i, j) + params.pos.get(1 + i, j);
            }
        }
    }
    for (t, &tok) in tokens.iter().enumerate() {
        if tok >= table.vocab_size() {
            return Err(VoxError::TokenOutOfRange {
                id: tok,
                vocab: table.vocab_size(),
            });
        }
        let r = 1 + m + t;
        for (j, val) in rows.row_mut(r).iter_mut().enumerate() {
            *val = table.row(tok)[j] + params.pos.get(r, j);
        }
    }
    Ok(rows)
}

/// Full forward pass over prepared input rows.
fn run_forward(params: &PolicyParams, rows: Mat) -> ForwardCache {
    let l = rows.rows();
    let d = params.config.dim;
    let f = params.config.ff;
    let scale = 1.0 / (d as f64).sqrt();
    let mut x = rows;
    let mut layers = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let x_in = x.clone();
        let mut xhat1 = Mat::zeros(l, d);
        let mut ln1 = Mat::zeros(l, d);
        let mut rstd1 = vec![0.0; l];
        for i in 0..l {
            rstd1[i] = layer_norm(x_in.row(i), &lp.ln1_g, &lp.ln1_b, xhat1.row_mut(i), ln1.row_mut(i));
        }
        let mut q = Mat::zeros(l, d);
        let mut k = Mat::zeros(l, d);
        let mut v = Mat::zeros(l, d);
        for i in 0..l {
            vec_mat_into(ln1.row(i), &lp.wq, q.row_mut(i));
            vec_mat_into(ln1.row(i), &lp.wk, k.row_mut(i));
            vec_mat_into(ln1.row(i), &lp.wv, v.row_mut(i));
        }
        let mut attn = Vec::with_capacity(l);
        let mut ctx = Mat::zeros(l, d);
        for i in 0..l {
            // Keys iterated in index order over 0..=i only: the attention row
            // for position i never depends on sequence length, which keeps
            // sampling and rescoring bitwise identical.
            let mut scores = Vec::with_capacity(i + 1);
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let s = dot(q.row(i), k.row(j)) * scale;
                if s > max {
                    max = s;
                }
                scores.push(s);
            }
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            for s in scores.iter_mut() {
                *s /= denom;
            }
            let ctx_i = ctx.row_mut(i);
            for j in 0..=i {
                let a = scores[j];
                for (c, &vv) in ctx_i.iter_mut().zip(v.row(j)) {
                    *c += a * vv;
                }
            }
            attn.push(scores);
        }
        let mut x2 = Mat::zeros(l, d);
        let mut att_out = vec![0.0; d];
        for i in 0..l {
            vec_mat_into(ctx.row(i), &lp.wo, &mut att_out);
            for j in 0..d {
                x2.row_mut(i)[j] = x_in.get(i, j) + att_out[j];
            }
        }
        let mut xhat2 = Mat::zeros(l, d);
        let mut ln2 = Mat::zeros(l, d);
        let mut rstd2 = vec![0.0; l];
        for i in 0..l {
            rstd2[i] = layer_norm(x2.row(i), &lp.ln2_g, &lp.ln2_b, xhat2.row_mut(i), ln2.row_mut(i));
        }
        let mut ff_pre = Mat::zeros(l, f);
        let mut ff_h = Mat::zeros(l, f);
        let mut x_out = Mat::zeros(l, d);
        let mut ff_out = vec![0.0; d];
        for i in 0..l {
            vec_mat_into(ln2.row(i), &lp.w1, ff_pre.row_mut(i));
            for j in 0..f {
                let pre = ff_pre.get(i, j) + lp.b1[j];
                ff_pre.row_mut(i)[j] = pre;
                ff_h.row_mut(i)[j] = gelu(pre);
            }
            vec_mat_into(ff_h.row(i), &lp.w2, &mut ff_out);
            for j in 0..d {
                x_out.row_mut(i)[j] = x2.get(i, j) + ff_out[j] + lp.b2[j];
            }
        }
        layers.push(LayerCache {
            xhat1,
            rstd1,
            ln1,
            q,
            k,
            v,
            attn,
            ctx,
            xhat2,
            rstd2,
            ln2,
            ff_pre,
            ff_h,
        });
        x = x_out;
    }
    let mut xhatf = Mat::zeros(l, d);
    let mut hfin = Mat::zeros(l, d);
    let mut rstdf = vec![0.0; l];
    for i in 0..l {
        rstdf[i] = layer_norm(x.row(i), &params.lnf_g, &params.lnf_b, xhatf.row_mut(i), hfin.row_mut(i));
    }
    ForwardCache {
        layers,
        xhatf,
        rstdf,
        hfin,
    }
}

pub(crate) fn logits_for_row(params: &PolicyParams, table: &EmbeddingTable, h: &[f64]) -> Vec<f64> {
    let v = table.vocab_size();
    let mut logits = Vec::with_capacity(v);
    for id in 0..v {
        logits.push(params.config.logit_scale * dot(h, table.row(id)));
    }
    logits
}

/// Teacher-forced pass. `logprobs[t]` is log P(tokens[t] | prefix,
/// tokens[..t]); gradients flow from a weight on each of those terms.
pub struct DecodeOut {
    pub logprobs: Vec<f64>,
    pub(crate) cache: ForwardCache,
}

pub fn decode_forward(
    params: &PolicyParams,
    table: &EmbeddingTable,
    prefix: Option<&Mat>,
    tokens: &[TokenId],
) -> Result<DecodeOut> {
    if tokens.is_empty() {
        return Err(VoxError::EmptyInput("token sequence"));
    }
    let m = prefix.map_or(0, |p| p.rows());
    let rows = build_rows(params, table, prefix, tokens)?;
    let cache = run_forward(params, rows);
    let mut logprobs = Vec::with_capacity(tokens.len());
    for (t, &tok) in tokens.iter().enumerate() {
        let h = cache.hfin.row(m + t);
        let logits = logits_for_row(params, table, h);
        logprobs.push(logits[tok] - log_sum_exp(&logits));
    }
    Ok(DecodeOut { logprobs, cache })
}

/// Gradients of sum_t dlogp[t] * logprobs[t] with respect to the trainable
/// parameters and the prefix rows. The embedding table is frozen.
pub fn decode_backward(
    params: &PolicyParams,
    table: &EmbeddingTable,
    tokens: &[TokenId],
    out: &DecodeOut,
    dlogp: &[f64],
) -> Result<(PolicyParams, Mat)> {
    if dlogp.len() != tokens.len() {
        return Err(VoxError::DimensionMismatch("dlogp length != token count"));
    }
    let cache = &out.cache;
    let l = cache.hfin.rows();
    let d = params.config.dim;
    let f = params.config.ff;
    let m = l - 1 - tokens.len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut grads = PolicyParams::zeros(params.config);

    // Head: dh = logit_scale * g_t * (E[y] - sum_j p_j E[j]) at predictor rows.
    let mut dh = Mat::zeros(l, d);
    for (t, &tok) in tokens.iter().enumerate() {
        let g = dlogp[t];
        if g == 0.0 {
            continue;
        }
        let r = m + t;
        let h = cache.hfin.row(r);
        let mut logits = logits_for_row(params, table, h);
        let lse = log_sum_exp(&logits);
        for (id, logit) in logits.iter_mut().enumerate() {
            let p = (*logit - lse).exp();
            let coeff = params.config.logit_scale * g * (f64::from(id == tok) - p);
            for (a, &e) in dh.row_mut(r).iter_mut().zip(table.row(id)) {
                *a += coeff * e;
            }
        }
    }

    // Final layer norm.
    let mut dx = Mat::zeros(l, d);
    for i in 0..l {
        let mut dxi = vec![0.0; d];
        layer_norm_backward(
            dh.row(i),
            cache.xhatf.row(i),
            cache.rstdf[i],
            &params.lnf_g,
            &mut grads.lnf_g,
            &mut grads.lnf_b,
            &mut dxi,
        );
        dx.row_mut(i).copy_from_slice(&dxi);
    }

    for (li, lp) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let lg = &mut grads.layers[li];
        // FF block: x_out = x2 + ff_h . w2 + b2
        let mut dln2 = Mat::zeros(l, d);
        let mut dx2 = dx.clone();
        for i in 0..l {
            let dxo = dx.row(i);
            for j in 0..d {
                lg.b2[j] += dxo[j];
            }
            let mut dhh = vec_mat_backward(lc.ff_h.row(i), &lp.w2, dxo, &mut lg.w2);
            for j in 0..f {
                dhh[j] *= gelu_grad(lc.ff_pre.get(i, j));
                lg.b1[j] += dhh[j];
            }
            let dl2 = vec_mat_backward(lc.ln2.row(i), &lp.w1, &dhh, &mut lg.w1);
            dln2.row_mut(i).copy_from_slice(&dl2);
        }
        for i in 0..l {
            let mut dxi = vec![0.0; d];
            layer_norm_backward(
                dln2.row(i),
                lc.xhat2.row(i),
                lc.rstd2[i],
                &lp.ln2_g,
                &mut lg.ln2_g,
                &mut lg.ln2_b,
                &mut dxi,
            );
            for j in 0..d {
                dx2.row_mut(i)[j] += dxi[j];
            }
        }
        // Attention block: x2 = x_in + ctx . wo
        let mut dq = Mat::zeros(l, d);
        let mut dk = Mat::zeros(l, d);
        let mut dv = Mat::zeros(l, d);
        for i in 0..l {
            let dctx = vec_mat_backward(lc.ctx.row(i), &lp.wo, dx2.row(i), &mut lg.wo);
            let a = &lc.attn[i];
            let mut da = vec![0.0; i + 1];
            for j in 0..=i {
                da[j] = dot(&dctx, lc.v.row(j));
                for (dvj, &c) in dv.row_mut(j).iter_mut().zip(&dctx) {
                    *dvj += a[j] * c;
                }
            }
            let ds = softmax_backward(a, &da);
            for j in 0..=i {
                let s = ds[j] * scale;
                for (dqi, &kk) in dq.row_mut(i).iter_mut().zip(lc.k.row(j)) {
                    *dqi += s * kk;
                }
                for (dkj, &qq) in dk.row_mut(j).iter_mut().zip(lc.q.row(i)) {
                    *dkj += s * qq;
                }
            }
        }
        let mut dln1 = Mat::zeros(l, d);
        for i in 0..l {
            let mut acc = vec_mat_backward(lc.ln1.row(i), &lp.wq, dq.row(i), &mut lg.wq);
            let dk_part = vec_mat_backward(lc.ln1.row(i), &lp.wk, dk.row(i), &mut lg.wk);
            let dv_part = vec_mat_backward(lc.ln1.row(i), &lp.wv, dv.row(i), &mut lg.wv);
            for j in 0..d {
                acc[j] += dk_part[j] + dv_part[j];
            }
            dln1.row_mut(i).copy_from_slice(&acc);
        }
        let mut dx_in = dx2.clone();
        for i in 0..l {
            let mut dxi = vec![0.0; d];
            layer_norm_backward(
                dln1.row(i),
                lc.xhat1.row(i),
                lc.rstd1[i],
                &lp.ln1_g,
                &mut lg.ln1_g,
                &mut lg.ln1_b,
                &mut dxi,
            );
            for j in 0..d {
                dx_in.row_mut(i)[j] += dxi[j];
            }
        }
        dx = dx_in;
    }

    // Input rows: position table gets every row's gradient; prefix rows get
    // their slice. Token and <bos> embeddings are frozen.
    for i in 0..l {
        for j in 0..d {
            let g = dx.get(i, j);
            grads.pos.row_mut(i)[j] += g;
        }
    }
    let mut dprefix = Mat::zeros(m, d);
    for i in 0..m {
        dprefix.row_mut(i).copy_from_slice(dx.row(1 + i));
    }
    Ok((grads, dprefix))
}

/// How the next token is chosen during generation.
#[derive(Debug, Clone, Copy)]
pub enum Sampler {
    /// Argmax over logits; ties resolve to the lowest token id.
    Greedy,
    /// Sample from softmax(logits / temperature).
    Temperature(f64),
}

pub struct SampledResponse {
    pub tokens: Vec<TokenId>,
    /// Temperature-1 log-probabilities of each sampled token.
    pub logprobs: Vec<f64>,
    pub hit_eos: bool,
}

/// Autoregressive generation. Stops after `<eos>` (included in the output)
/// or at `max_new` tokens. Recorded log-probabilities are always at
/// temperature 1 so they can be compared against rescoring passes.
pub fn sample_response(
    params: &PolicyParams,
    table: &EmbeddingTable,
    prefix: Option<&Mat>,
    prompt: &[TokenId],
    max_new: usize,
    sampler: Sampler,
    rng: &mut impl Rng,
) -> Result<SampledResponse> {
    // An empty prompt is legal: generation then starts from <bos> plus the
    // prefix alone, which is exactly the report-generation mode.
    let m = prefix.map_or(0, |p| p.rows());
    let mut tokens: Vec<TokenId> = prompt.to_vec();
    let mut out = Vec::new();
    let mut logprobs = Vec::new();
    let mut hit_eos = false;
    for _ in 0..max_new {
        if m + tokens.len() + 1 > params.config.t_max {
            break;
        }
        let rows = build_rows(params, table, prefix, &tokens)?;
        let cache = run_forward(params, rows);
        // rows: <bos>, m prefix slots, then tokens; the next token's
        // predictor is the final row, index m + tokens.len().
        let h = cache.hfin.row(m + tokens.len());
        let logits = logits_for_row(params, table, h);
        let lse = log_sum_exp(&logits);
        let next = match sampler {
            Sampler::Greedy => {
                let mut best = 0;
                for (id, &lg) in logits.iter().enumerate() {
                    if lg > logits[best] {
                        best = id;
                    }
                }
                best
            }
            Sampler::Temperature(temp) => {
                if !(temp > 0.0) {
                    return Err(VoxError::invalid("sampling temperature must be positive"));
                }
                let scaled: Vec<f64> = logits.iter().map(|&x| x / temp).collect();
                let slse = log_sum_exp(&scaled);
                let u: f64 = rng.gen::<f64>();
                let mut acc = 0.0;
                let mut chosen = logits.len() - 1;
                for (id, &s) in scaled.iter().enumerate() {
                    acc += (s - slse).exp();
                    if u < acc {
                        chosen = id;
                        break;
                    }
                }
                chosen
            }
        };
        logprobs.push(logits[next] - lse);
        tokens.push(next);
        out.push(next);
        if next == reserved::EOS {
            hit_eos = true;
            break;
        }
    }
    Ok(SampledResponse {
        tokens: out,
        logprobs,
        hit_eos,
    })
}

/// Per-token log-probabilities of an existing response under the model.
pub fn response_logprobs(
    params: &PolicyParams,
    table: &EmbeddingTable,
    prefix: Option<&Mat>,
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<Vec<f64>> {
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(response);
    let out = decode_forward(params, table, prefix, &tokens)?;
    Ok(out.logprobs[prompt.len()..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn tiny_setup() -> (PolicyParams, EmbeddingTable) {
        let config = PolicyConfig {
            dim: 8,
            n_layers: 2,
            ff: 16,
            t_max: 24,
            prefix_len: 2,
            logit_scale: 8.0,
        };
        (PolicyParams::init(config, 3), EmbeddingTable::init(13, 8, 3))
    }

    fn tiny_prefix() -> Mat {
        Mat::from_fn(2, 8, |i, j| 0.05 * (i as f64 + 1.0) * ((j as f64) - 3.5))
    }

    #[test]
    fn logprobs_are_normalized() {
        let (p, e) = tiny_setup();
        let prefix = tiny_prefix();
        let out = decode_forward(&p, &e, Some(&prefix), &[4, 5, 6, 7]).unwrap();
        assert_eq!(out.logprobs.len(), 4);
        assert!(out.logprobs.iter().all(|&lp| lp < 0.0 && lp.is_finite()));
        // full distribution at the first predictor row sums to 1
        let h = out.cache.hfin.row(2);
        let logits = logits_for_row(&p, &e, h);
        let lse = log_sum_exp(&logits);
        let total: f64 = logits.iter().map(|&x| (x - lse).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sequence_too_long_rejected() {
        let (p, e) = tiny_setup();
        let prefix = tiny_prefix();
        let tokens: Vec<usize> = (0..23).map(|i| i % 10).collect();
        let r = decode_forward(&p, &e, Some(&prefix), &tokens);
        assert!(matches!(r, Err(VoxError::SequenceTooLong { .. })));
    }

    #[test]
    fn token_out_of_range_rejected() {
        let (p, e) = tiny_setup();
        let r = decode_forward(&p, &e, None, &[99]);
        assert!(matches!(r, Err(VoxError::TokenOutOfRange { .. })));
    }

    #[test]
    fn sampling_matches_rescoring_bitwise() {
        let (p, e) = tiny_setup();
        let prefix = tiny_prefix();
        let mut rng = derive_rng(5, &[99]);
        let s = sample_response(&p, &e, Some(&prefix), &[4, 5], 8, Sampler::Temperature(1.0), &mut rng)
            .unwrap();
        assert!(!s.tokens.is_empty());
        let rescored = response_logprobs(&p, &e, Some(&prefix), &[4, 5], &s.tokens).unwrap();
        assert_eq!(s.logprobs.len(), rescored.len());
        for (a, b) in s.logprobs.iter().zip(&rescored) {
            assert_eq!(a.to_bits(), b.to_bits(), "sampled {a} vs rescored {b}");
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let (p, e) = tiny_setup();
        let mut r1 = derive_rng(1, &[1]);
        let mut r2 = derive_rng(2, &[2]);
        let a = sample_response(&p, &e, None, &[4, 5], 6, Sampler::Greedy, &mut r1).unwrap();
        let b = sample_response(&p, &e, None, &[4, 5], 6, Sampler::Greedy, &mut r2).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn causality_keeps_early_logprobs_stable() {
        let (p, e) = tiny_setup();
        // log-probabilities of early tokens must not change when the
        // sequence is extended
        let short = decode_forward(&p, &e, None, &[4, 5, 6]).unwrap();
        let long = decode_forward(&p, &e, None, &[4, 5, 6, 7, 8]).unwrap();
        for t in 0..3 {
            assert_eq!(short.logprobs[t].to_bits(), long.logprobs[t].to_bits());
        }
    }

    #[test]
    fn backward_rejects_mismatched_weights() {
        let (p, e) = tiny_setup();
        let out = decode_forward(&p, &e, None, &[4, 5]).unwrap();
        assert!(decode_backward(&p, &e, &[4, 5], &out, &[1.0]).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let (p, _) = tiny_setup();
        let flat = p.flat();
        assert_eq!(flat.len(), p.flat_len());
        let mut q = PolicyParams::zeros(p.config);
        q.set_flat(&flat);
        assert_eq!(p, q);
    }

    #[test]
    fn init_is_deterministic() {
        let config = PolicyConfig::default();
        let a = PolicyParams::init(config, 11);
        let b = PolicyParams::init(config, 11);
        assert_eq!(a, b);
    }

    #[test]
    fn eos_stops_generation() {
        let (p, e) = tiny_setup();
        // force eos to be overwhelmingly likely by a huge bias toward it:
        // greedy from a model can't be forced directly, so just check the
        // contract on whatever greedy produces
        let s = sample_response(&p, &e, None, &[4], 10, Sampler::Greedy, &mut derive_rng(0, &[0]))
            .unwrap();
        if s.hit_eos {
            assert_eq!(*s.tokens.last().unwrap(), reserved::EOS);
        } else {
            assert!(s.tokens.len() <= 10);
        }
    }
}
