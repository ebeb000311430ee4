//! Vision bridge: frozen volume encoder, gated fusion of visual tokens
//! toward the text anchor, and adaptive attention pooling down to a fixed
//! number of soft prefix tokens.
//!
//! Fusion computes, per visual token x_i, a scalar gate
//! sigma_i = sigmoid(MLP([x_i; anchor])) and emits
//! z_i = sigma_i * anchor + (1 - sigma_i) * x_i, pulling uninformative
//! tokens toward the text embedding mean while letting salient ones pass.

use rand_distr::{Distribution, Normal};

use crate::corpus::SynthVolume;
use crate::error::{Result, VoxError};
use crate::linalg::{dot, softmax_backward, vec_mat_backward, vec_mat_into, Mat};
use crate::rng::{derive_rng, salt};
use crate::text::TextAnchor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeConfig {
    /// Visual token and model width.
    pub dim: usize,
    /// Gate MLP hidden width.
    pub hidden: usize,
    /// Pooled prefix slots.
    pub slots: usize,
    /// Cubic patch edge for the frozen encoder.
    pub patch: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            dim: 32,
            hidden: 32,
            slots: 8,
            patch: 4,
        }
    }
}

/// Patch voxels through a frozen random projection, plus a frozen random
/// embedding per patch index so pooled summaries can tell regions apart.
/// One row per patch, in lexicographic patch order.
pub fn encode_volume(
    volume: &SynthVolume,
    config: &BridgeConfig,
    seed: u64,
) -> Result<Mat> {
    let p = config.patch;
    if p == 0 || volume.dims.iter().any(|&d| d % p != 0) {
        return Err(VoxError::invalid("grid dims must be divisible by the patch edge"));
    }
    let pdims = [volume.dims[0] / p, volume.dims[1] / p, volume.dims[2] / p];
    let n_patches = pdims[0] * pdims[1] * pdims[2];
    let pvox = p * p * p;

    let mut rng = derive_rng(seed, &[salt::ENCODER]);
    let proj_dist = Normal::new(0.0, 1.0 / (pvox as f64).sqrt()).expect("valid");
    let proj = Mat::from_fn(pvox, config.dim, |_, _| proj_dist.sample(&mut rng));
    let pos_dist = Normal::new(0.0, 0.3).expect("valid");
    let pos = Mat::from_fn(n_patches, config.dim, |_, _| pos_dist.sample(&mut rng));

    let mut out = Mat::zeros(n_patches, config.dim);
    let mut patch_buf = vec![0.0; pvox];
    let mut row_buf = vec![0.0; config.dim];
    let mut idx = 0;
    for px in 0..pdims[0] {
        for py in 0..pdims[1] {
            for pz in 0..pdims[2] {
                let mut w = 0;
                for x in px * p..(px + 1) * p {
                    for y in py * p..(py + 1) * p {
                        for z in pz * p..(pz + 1) * p {
                            patch_buf[w] = volume.voxel(x, y, z);
                            w += 1;
                        }
                    }
                }
                vec_mat_into(&patch_buf, &proj, &mut row_buf);
                for (o, (r, q)) in out
                    .row_mut(idx)
                    .iter_mut()
                    .zip(row_buf.iter().zip(pos.row(idx)))
                {
                    *o = r + q;
                }
                idx += 1;
            }
        }
    }
    Ok(out)
}

/// Trainable bridge parameters; the same shape doubles as the gradient
/// accumulator type.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeParams {
    pub config: BridgeConfig,
    /// Gate MLP: [x; anchor] (2*dim) -> hidden, tanh, -> scalar.
    pub gate_w1: Mat,
    pub gate_b1: Vec<f64>,
    pub gate_w2: Vec<f64>,
    pub gate_b2: f64,
    /// Pooling queries, one per prefix slot.
    pub queries: Mat,
    /// Softmax temperature for pooling scores; kept positive.
    pub temperature: f64,
}

pub const MIN_TEMPERATURE: f64 = 1e-3;

impl BridgeParams {
    pub fn zeros(config: BridgeConfig) -> BridgeParams {
        BridgeParams {
            config,
            gate_w1: Mat::zeros(2 * config.dim, config.hidden),
            gate_b1: vec![0.0; config.hidden],
            gate_w2: vec![0.0; config.hidden],
            gate_b2: 0.0,
            queries: Mat::zeros(config.slots, config.dim),
            temperature: 0.0,
        }
    }

    pub fn init(config: BridgeConfig, seed: u64) -> BridgeParams {
        let mut rng = derive_rng(seed, &[salt::BRIDGE_INIT]);
        let mut p = BridgeParams::zeros(config);
        let w1 = Normal::new(0.0, 1.0 / (2.0 * config.dim as f64).sqrt()).expect("valid");
        for v in p.gate_w1.data_mut() {
            *v = w1.sample(&mut rng);
        }
        let w2 = Normal::new(0.0, 1.0 / (config.hidden as f64).sqrt()).expect("valid");
        for v in p.gate_w2.iter_mut() {
            *v = w2.sample(&mut rng);
        }
        let q = Normal::new(0.0, 0.3).expect("valid");
        for v in p.queries.data_mut() {
            *v = q.sample(&mut rng);
        }
        p.temperature = 1.0;
        p
    }

    /// Restore the positivity invariant after an optimizer step.
    pub fn clamp_temperature(&mut self) {
        if self.temperature < MIN_TEMPERATURE {
            self.temperature = MIN_TEMPERATURE;
        }
    }

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
        let n = self.gate_w1.data().len();
        self.gate_w1.data_mut().copy_from_slice(&data[off..off + n]);
        off += n;
        let n = self.gate_b1.len();
        self.gate_b1.copy_from_slice(&data[off..off + n]);
        off += n;
        let n = self.gate_w2.len();
        self.gate_w2.copy_from_slice(&data[off..off + n]);
        off += n;
        self.gate_b2 = data[off];
        off += 1;
        let n = self.queries.data().len();
        self.queries.data_mut().copy_from_slice(&data[off..off + n]);
        off += n;
        self.temperature = data[off];
        off += 1;
        debug_assert_eq!(off, data.len());
    }

    fn visit(&self, mut f: impl FnMut(&[f64])) {
        f(self.gate_w1.data());
        f(&self.gate_b1);
        f(&self.gate_w2);
        f(std::slice::from_ref(&self.gate_b2));
        f(self.queries.data());
        f(std::slice::from_ref(&self.temperature));
    }
}

pub struct BridgeCache {
    x: Mat,
    anchor: Vec<f64>,
    hidden: Mat,
    pub sigma: Vec<f64>,
    z: Mat,
    scores: Mat,
    pub attn: Mat,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gate + fuse every visual token toward the anchor.
/// Returns per-token gates and fused tokens.
pub fn ram_fuse(
    x: &Mat,
    anchor: &TextAnchor,
    params: &BridgeParams,
) -> Result<(Vec<f64>, Mat)> {
    let (sigma, z, _) = fuse_with_hidden(x, anchor, params)?;
    Ok((sigma, z))
}

fn fuse_with_hidden(
    x: &Mat,
    anchor: &TextAnchor,
    params: &BridgeParams,
) -> Result<(Vec<f64>, Mat, Mat)> {
    let d = params.config.dim;
    if x.rows() == 0 {
        return Err(VoxError::EmptyInput("visual tokens"));
    }
    if x.cols() != d || anchor.dim() != d {
        return Err(VoxError::DimensionMismatch("visual token width != bridge dim"));
    }
    let n = x.rows();
    let h = params.config.hidden;
    let mut hidden = Mat::zeros(n, h);
    let mut sigma = Vec::with_capacity(n);
    let mut z = Mat::zeros(n, d);
    let mut cat = vec![0.0; 2 * d];
    for i in 0..n {
        cat[..d].copy_from_slice(x.row(i));
        cat[d..].copy_from_slice(anchor.as_slice());
        vec_mat_into(&cat, &params.gate_w1, hidden.row_mut(i));
        for (v, b) in hidden.row_mut(i).iter_mut().zip(&params.gate_b1) {
            *v = (*v + b).tanh();
        }
        let u = dot(hidden.row(i), &params.gate_w2) + params.gate_b2;
        let s = sigmoid(u);
        sigma.push(s);
        for (zz, (&xx, &aa)) in z.row_mut(i).iter_mut().zip(x.row(i).iter().zip(anchor.as_slice()))
        {
            *zz = s * aa + (1.0 - s) * xx;
        }
    }
    Ok((sigma, z, hidden))
}

/// Attention-pool fused tokens into one row per learned query:
/// prefix_m = sum_i softmax_i(q_m . z_i / temperature) z_i.
pub fn pool_adaptive(z: &Mat, params: &BridgeParams) -> Result<(Mat, Mat)> {
    if z.rows() == 0 {
        return Err(VoxError::EmptyInput("fused tokens"));
    }
    if !(params.temperature > 0.0) {
        return Err(VoxError::invalid("pooling temperature must be positive"));
    }
    let m = params.config.slots;
    let n = z.rows();
    let d = params.config.dim;
    let mut attn = Mat::zeros(m, n);
    let mut prefix = Mat::zeros(m, d);
    for s in 0..m {
        let arow = attn.row_mut(s);
        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            let sc = dot(params.queries.row(s), z.row(i)) / params.temperature;
            arow[i] = sc;
            if sc > max {
                max = sc;
            }
        }
        let mut denom = 0.0;
        for a in arow.iter_mut() {
            *a = (*a - max).exp();
            denom += *a;
        }
        for a in arow.iter_mut() {
            *a /= denom;
        }
        let prow = prefix.row_mut(s);
        for i in 0..n {
            let a = attn.get(s, i);
            for (pp, &zz) in prow.iter_mut().zip(z.row(i)) {
                *pp += a * zz;
            }
        }
    }
    Ok((prefix, attn))
}

/// Encoded volume -> fused tokens -> pooled prefix, with everything the
/// backward pass needs.
pub fn bridge_forward(
    x: &Mat,
    anchor: &TextAnchor,
    params: &BridgeParams,
) -> Result<(Mat, BridgeCache)> {
    let (sigma, z, hidden) = fuse_with_hidden(x, anchor, params)?;
    let n = x.rows();
    let m = params.config.slots;
    // recompute raw scores for the cache (pool_adaptive normalizes in place)
    let mut scores = Mat::zeros(m, n);
    for s in 0..m {
        for i in 0..n {
            scores.row_mut(s)[i] = dot(params.queries.row(s), z.row(i)) / params.temperature;
        }
    }
    let (prefix, attn) = pool_adaptive(&z, params)?;
    let cache = BridgeCache {
        x: x.clone(),
        anchor: anchor.as_slice().to_vec(),
        hidden,
        sigma,
        z,
        scores,
        attn,
    };
    Ok((prefix, cache))
}

/// Gradients of a scalar loss with respect to bridge parameters, given the
/// loss gradient at each prefix row.
pub fn bridge_backward(
    params: &BridgeParams,
    cache: &BridgeCache,
    dprefix: &Mat,
) -> Result<BridgeParams> {
    let m = params.config.slots;
    let n = cache.z.rows();
    let d = params.config.dim;
    if dprefix.rows() != m || dprefix.cols() != d {
        return Err(VoxError::DimensionMismatch("dprefix shape != prefix shape"));
    }
    let mut grads = BridgeParams::zeros(params.config);
    let mut dz = Mat::zeros(n, d);

    for s in 0..m {
        let dp = dprefix.row(s);
        let a = cache.attn.row(s);
        // direct term: prefix_s = sum_i a_i z_i
        let mut da = vec![0.0; n];
        for i in 0..n {
            da[i] = dot(dp, cache.z.row(i));
            for (g, &p) in dz.row_mut(i).iter_mut().zip(dp) {
                *g += a[i] * p;
            }
        }
        let ds = softmax_backward(a, &da);
        for i in 0..n {
            let c = ds[i] / params.temperature;
            // score = q_s . z_i / temperature
            for (gq, &zz) in grads.queries.row_mut(s).iter_mut().zip(cache.z.row(i)) {
                *gq += c * zz;
            }
            for (gz, &qq) in dz.row_mut(i).iter_mut().zip(params.queries.row(s)) {
                *gz += c * qq;
            }
            grads.temperature -= ds[i] * cache.scores.get(s, i) / params.temperature;
        }
    }

    // z_i = sigma_i anchor + (1 - sigma_i) x_i
    let mut cat = vec![0.0; 2 * d];
    for i in 0..n {
        let s = cache.sigma[i];
        let mut dsig = 0.0;
        for j in 0..d {
            dsig += dz.get(i, j) * (cache.anchor[j] - cache.x.get(i, j));
        }
        let du = dsig * s * (1.0 - s);
        let h = cache.hidden.row(i);
        let mut dh = vec![0.0; h.len()];
        for j in 0..h.len() {
            grads.gate_w2[j] += du * h[j];
            dh[j] = du * params.gate_w2[j] * (1.0 - h[j] * h[j]);
            grads.gate_b1[j] += dh[j];
        }
        grads.gate_b2 += du;
        cat[..d].copy_from_slice(cache.x.row(i));
        cat[d..].copy_from_slice(&cache.anchor);
        let _ = vec_mat_backward(&cat, &params.gate_w1, &dh, &mut grads.gate_w1);
    }
    Ok(grads)
}
