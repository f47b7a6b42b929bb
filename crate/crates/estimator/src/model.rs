//! Residual temporal convolutional network with an MLP power decoder.
//!
//! Each residual block is two dilated causal convolutions with weight
//! normalization, ReLU and channel dropout, plus an identity or 1×1
//! projection shortcut. The decoder reads the last time step of the final
//! block concatenated with the invariant force input.
//!
//! Activations are `[batch][time][channel]` row-major. Convolutions run as
//! im2col followed by one GEMM, and only the time steps that reach the
//! requested outputs are computed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at sample {sample} of the batch")]
    NonFinite { sample: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

/// Floor on `|y|` in the percentage-error denominator (normalized units).
pub const MAPE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcnConfig {
    pub input_channels: usize,
    pub invariant_dim: usize,
    pub filters: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub dropout: f64,
    pub decoder_hidden: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            input_channels: 12,
            invariant_dim: 6,
            filters: 64,
            kernel: 4,
            dilations: vec![1, 2, 4],
            dropout: 0.05,
            decoder_hidden: 64,
        }
    }
}

impl TcnConfig {
    pub fn receptive_field(&self) -> usize {
        1 + 2 * (self.kernel - 1) * self.dilations.iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            self.input_channels,
            self.filters,
            self.kernel,
            self.decoder_hidden,
            self.dilations.len(),
        ];
        if positive.contains(&0) || self.dilations.contains(&0) {
            return Err(ModelError::Config("sizes and dilations must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvIdx {
    v: usize,
    g: usize,
    b: usize,
    c_in: usize,
    c_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DenseIdx {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BlockIdx {
    conv1: ConvIdx,
    conv2: ConvIdx,
    /// 1×1 shortcut, stored like a kernel-1 convolution `[c_out, c_in]`.
    proj: Option<DenseIdx>,
    dilation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcnModel {
    cfg: TcnConfig,
    tensors: Vec<TensorSpec>,
    params: Vec<f64>,
    blocks: Vec<BlockIdx>,
    dense1: DenseIdx,
    dense2: DenseIdx,
}

/// Channel dropout masks for one batch, already scaled by `1/(1−p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    /// Per block, per convolution: `[batch][channel]`.
    masks: Vec<[Vec<f64>; 2]>,
}

impl DropoutMasks {
    pub fn sample<R: Rng>(cfg: &TcnConfig, batch: usize, rng: &mut R) -> Self {
        let keep = 1.0 - cfg.dropout;
        let mut draw = || -> Vec<f64> {
            (0..batch * cfg.filters)
                .map(|_| if rng.random::<f64>() < cfg.dropout { 0.0 } else { 1.0 / keep })
                .collect()
        };
        let masks = cfg.dilations.iter().map(|_| [draw(), draw()]).collect();
        Self { masks }
    }
}

/// `c = a·b` for row-major `c` (`m × n`); `a` and `b` given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Causal im2col: row `(b, t)` holds taps `i = 0..k` at `t − (k−1−i)·d`,
/// with inputs right-aligned so that the last input and output coincide.
/// Positions before the first input are zero padding.
fn im2col(input: &[f64], batch: usize, l_in: usize, c_in: usize, l_out: usize, k: usize, d: usize) -> Vec<f64> {
    let kc = k * c_in;
    let mut col = vec![0.0; batch * l_out * kc];
    let shift = l_in as isize - l_out as isize;
    for b in 0..batch {
        for t in 0..l_out {
            let row = &mut col[(b * l_out + t) * kc..(b * l_out + t + 1) * kc];
            for i in 0..k {
                let src = shift + t as isize - ((k - 1 - i) * d) as isize;
                if src >= 0 {
                    let s = (b * l_in + src as usize) * c_in;
                    row[i * c_in..(i + 1) * c_in].copy_from_slice(&input[s..s + c_in]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im(dcol: &[f64], batch: usize, l_in: usize, c_in: usize, l_out: usize, k: usize, d: usize) -> Vec<f64> {
    let kc = k * c_in;
    let mut din = vec![0.0; batch * l_in * c_in];
    let shift = l_in as isize - l_out as isize;
    for b in 0..batch {
        for t in 0..l_out {
            let row = &dcol[(b * l_out + t) * kc..(b * l_out + t + 1) * kc];
            for i in 0..k {
                let src = shift + t as isize - ((k - 1 - i) * d) as isize;
                if src >= 0 {
                    let s = (b * l_in + src as usize) * c_in;
                    for (dst, v) in din[s..s + c_in].iter_mut().zip(&row[i * c_in..(i + 1) * c_in]) {
                        *dst += v;
                    }
                }
            }
        }
    }
    din
}

/// Affine map of `rows × c_in` by a weight stored as `[c_out][c_in]`.
fn affine_rows_out_major(col: &[f64], rows: usize, c_in: usize, w: &[f64], bias: &[f64], c_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * c_out];
    gemm(rows, c_in, c_out, col, c_in, 1, w, 1, c_in, &mut out);
    for r in out.chunks_exact_mut(c_out) {
        for (v, b) in r.iter_mut().zip(bias) {
            *v += b;
        }
    }
    out
}

/// Gradients of [`affine_rows_out_major`]: `(d_in, d_w [c_out][c_in], d_bias)`.
fn affine_rows_out_major_back(
    col: &[f64],
    rows: usize,
    c_in: usize,
    w: &[f64],
    c_out: usize,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dbias = vec![0.0; c_out];
    for r in dout.chunks_exact(c_out) {
        for (g, v) in dbias.iter_mut().zip(r) {
            *g += v;
        }
    }
    let mut dw = vec![0.0; c_out * c_in];
    gemm(c_out, rows, c_in, dout, 1, c_out, col, c_in, 1, &mut dw);
    let mut dcol = vec![0.0; rows * c_in];
    gemm(rows, c_out, c_in, dout, c_out, 1, w, c_in, 1, &mut dcol);
    (dcol, dw, dbias)
}

/// `g · v / ‖v‖` per output row.
fn weight_norm(v: &[f64], g: &[f64], row: usize) -> (Vec<f64>, Vec<f64>) {
    let mut w = vec![0.0; v.len()];
    let mut norms = Vec::with_capacity(g.len());
    for (o, (vr, wr)) in v.chunks_exact(row).zip(w.chunks_exact_mut(row)).enumerate() {
        let n = vr.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for (wi, vi) in wr.iter_mut().zip(vr) {
            *wi = g[o] * vi / n;
        }
        norms.push(n);
    }
    (w, norms)
}

/// Chain rule through [`weight_norm`]: `(dv, dg)`.
fn weight_norm_back(v: &[f64], g: &[f64], norms: &[f64], dw: &[f64], row: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dv = vec![0.0; v.len()];
    let mut dg = vec![0.0; g.len()];
    for o in 0..g.len() {
        let vr = &v[o * row..(o + 1) * row];
        let dwr = &dw[o * row..(o + 1) * row];
        let n = norms[o];
        let proj: f64 = dwr.iter().zip(vr).map(|(a, b)| a * b).sum::<f64>() / n;
        dg[o] = proj;
        for ((d, a), b) in dv[o * row..(o + 1) * row].iter_mut().zip(dwr).zip(vr) {
            *d = g[o] / n * (a - proj * b / n);
        }
    }
    (dv, dg)
}

#[derive(Debug, Clone)]
struct ConvCache {
    l_in: usize,
    l_out: usize,
    col: Vec<f64>,
    w: Vec<f64>,
    norms: Vec<f64>,
    pre: Vec<f64>,
    out: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    l_in: usize,
    l_out: usize,
    proj_col: Vec<f64>,
    c1: ConvCache,
    c2: ConvCache,
    sum: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Cache {
    batch: usize,
    /// Decoder rows per sample (time steps decoded).
    steps: usize,
    blocks: Vec<BlockCache>,
    dec_in: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

impl TcnModel {
    /// Seeded He-normal convolutions and Glorot-uniform dense layers.
    pub fn new(cfg: TcnConfig, seed: u64) -> Result<Self, ModelError> {
        let mut model = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = model.cfg.kernel;
        for bi in 0..model.blocks.len() {
            let blk = model.blocks[bi];
            for conv in [blk.conv1, blk.conv2] {
                let fan_in = k * conv.c_in;
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                let row = fan_in;
                for o in 0..conv.c_out {
                    let v = &mut model.params[conv.v + o * row..conv.v + (o + 1) * row];
                    v.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    model.params[conv.g + o] = n;
                }
            }
            if let Some(p) = blk.proj {
                let normal = Normal::new(0.0, (2.0 / p.n_in as f64).sqrt()).expect("finite std");
                for x in &mut model.params[p.w..p.w + p.n_in * p.n_out] {
                    *x = normal.sample(&mut rng);
                }
            }
        }
        for d in [model.dense1, model.dense2] {
            let limit = (6.0 / (d.n_in + d.n_out) as f64).sqrt();
            let uni = Uniform::new_inclusive(-limit, limit).expect("valid range");
            for x in &mut model.params[d.w..d.w + d.n_in * d.n_out] {
                *x = uni.sample(&mut rng);
            }
        }
        Ok(model)
    }

    /// Every parameter zero.
    pub fn zeros(cfg: TcnConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, shape: Vec<usize>| -> usize {
            let spec = TensorSpec { name, shape, offset };
            let at = offset;
            offset += spec.len();
            tensors.push(spec);
            at
        };
        let (k, f) = (cfg.kernel, cfg.filters);
        let mut blocks = Vec::new();
        let mut c_in = cfg.input_channels;
        for (bi, &d) in cfg.dilations.iter().enumerate() {
            let mut conv = |j: usize, c_in: usize| ConvIdx {
                v: add(format!("block{bi}.conv{j}.v"), vec![f, k, c_in]),
                g: add(format!("block{bi}.conv{j}.g"), vec![f]),
                b: add(format!("block{bi}.conv{j}.bias"), vec![f]),
                c_in,
                c_out: f,
            };
            let conv1 = conv(1, c_in);
            let conv2 = conv(2, f);
            let proj = (c_in != f).then(|| DenseIdx {
                w: add(format!("block{bi}.proj.w"), vec![f, c_in]),
                b: add(format!("block{bi}.proj.bias"), vec![f]),
                n_in: c_in,
                n_out: f,
            });
            blocks.push(BlockIdx {
                conv1,
                conv2,
                proj,
                dilation: d,
            });
            c_in = f;
        }
        let n_dec = f + cfg.invariant_dim;
        let dense1 = DenseIdx {
            w: add("decoder.dense1.w".into(), vec![n_dec, cfg.decoder_hidden]),
            b: add("decoder.dense1.bias".into(), vec![cfg.decoder_hidden]),
            n_in: n_dec,
            n_out: cfg.decoder_hidden,
        };
        let dense2 = DenseIdx {
            w: add("decoder.dense2.w".into(), vec![cfg.decoder_hidden, 1]),
            b: add("decoder.dense2.bias".into(), vec![1]),
            n_in: cfg.decoder_hidden,
            n_out: 1,
        };
        Ok(Self {
            cfg,
            tensors,
            params: vec![0.0; offset],
            blocks,
            dense1,
            dense2,
        })
    }

    pub fn config(&self) -> &TcnConfig {
        &self.cfg
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.params[t.offset..t.offset + t.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let t = self.tensors.iter().find(|t| t.name == name)?.clone();
        Some(&mut self.params[t.offset..t.offset + t.len()])
    }

    /// Sets the decoder output bias, e.g. to the mean training target.
    pub fn set_output_bias(&mut self, b: f64) {
        self.params[self.dense2.b] = b;
    }

    fn p(&self, at: usize, len: usize) -> &[f64] {
        &self.params[at..at + len]
    }

    fn check(&self, x: &[f64], inv: &[f64], batch: usize) -> Result<usize, ModelError> {
        let c = self.cfg.input_channels;
        if batch == 0 || x.is_empty() || x.len() % (batch * c) != 0 {
            return Err(ModelError::Shape(format!(
                "input of {} values is not batch {batch} × steps × {c} channels",
                x.len()
            )));
        }
        if inv.len() != batch * self.cfg.invariant_dim {
            return Err(ModelError::Shape(format!(
                "invariant input has {} values, expected {}",
                inv.len(),
                batch * self.cfg.invariant_dim
            )));
        }
        Ok(x.len() / (batch * c))
    }

    fn conv_forward(&self, idx: ConvIdx, input: &[f64], batch: usize, l_in: usize, l_out: usize, d: usize, mask: Option<&[f64]>) -> ConvCache {
        let k = self.cfg.kernel;
        let kc = k * idx.c_in;
        let col = im2col(input, batch, l_in, idx.c_in, l_out, k, d);
        let (w, norms) = weight_norm(self.p(idx.v, idx.c_out * kc), self.p(idx.g, idx.c_out), kc);
        let pre = affine_rows_out_major(&col, batch * l_out, kc, &w, self.p(idx.b, idx.c_out), idx.c_out);
        let mut out = pre.clone();
        for (r, row) in out.chunks_exact_mut(idx.c_out).enumerate() {
            let b = r / l_out;
            for (c, v) in row.iter_mut().enumerate() {
                let m = mask.map_or(1.0, |m| m[b * idx.c_out + c]);
                *v = relu(*v) * m;
            }
        }
        ConvCache {
            l_in,
            l_out,
            col,
            w,
            norms,
            pre,
            out,
        }
    }

    /// Backward through ReLU, dropout, affine map and weight norm; returns
    /// the input gradient and accumulates parameter gradients into `grad`.
    fn conv_backward(&self, idx: ConvIdx, cache: &ConvCache, batch: usize, d: usize, mask: Option<&[f64]>, dout: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let k = self.cfg.kernel;
        let kc = k * idx.c_in;
        let mut dpre = dout.to_vec();
        for (r, row) in dpre.chunks_exact_mut(idx.c_out).enumerate() {
            let b = r / cache.l_out;
            for (c, v) in row.iter_mut().enumerate() {
                let m = mask.map_or(1.0, |m| m[b * idx.c_out + c]);
                let active = cache.pre[r * idx.c_out + c] > 0.0;
                *v = if active { *v * m } else { 0.0 };
            }
        }
        let (dcol, dw, dbias) = affine_rows_out_major_back(&cache.col, batch * cache.l_out, kc, &cache.w, idx.c_out, &dpre);
        let (dv, dg) = weight_norm_back(self.p(idx.v, idx.c_out * kc), self.p(idx.g, idx.c_out), &cache.norms, &dw, kc);
        add_into(&mut grad[idx.v..idx.v + dv.len()], &dv);
        add_into(&mut grad[idx.g..idx.g + dg.len()], &dg);
        add_into(&mut grad[idx.b..idx.b + dbias.len()], &dbias);
        col2im(&dcol, batch, cache.l_in, idx.c_in, cache.l_out, k, d)
    }

    /// Runs the encoder for the last `steps` time steps and the decoder on each.
    fn forward_cache(&self, x: &[f64], inv: &[f64], batch: usize, t: usize, steps: usize, masks: Option<&DropoutMasks>) -> Cache {
        let k = self.cfg.kernel;
        // Lengths needed per block, from the output back to the input.
        let mut lens = vec![(0, 0, 0); self.blocks.len()];
        let mut l = steps;
        for (bi, blk) in self.blocks.iter().enumerate().rev() {
            let l_mid = t.min(l + (k - 1) * blk.dilation);
            let l_in = t.min(l_mid + (k - 1) * blk.dilation);
            lens[bi] = (l_in, l_mid, l);
            l = l_in;
        }
        let c0 = self.cfg.input_channels;
        let l0 = lens[0].0;
        let mut input = Vec::with_capacity(batch * l0 * c0);
        for b in 0..batch {
            input.extend_from_slice(&x[(b * t + t - l0) * c0..(b + 1) * t * c0]);
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (bi, blk) in self.blocks.iter().enumerate() {
            let (l_in, l_mid, l_out) = lens[bi];
            let d = blk.dilation;
            let m = masks.map(|m| &m.masks[bi]);
            let c1 = self.conv_forward(blk.conv1, &input, batch, l_in, l_mid, d, m.map(|m| m[0].as_slice()));
            let c2 = self.conv_forward(blk.conv2, &c1.out, batch, l_mid, l_out, d, m.map(|m| m[1].as_slice()));
            let c_in = blk.conv1.c_in;
            let f = blk.conv2.c_out;
            // Shortcut over the last `l_out` input steps.
            let proj_col = im2col(&input, batch, l_in, c_in, l_out, 1, 1);
            let res = match blk.proj {
                Some(p) => affine_rows_out_major(&proj_col, batch * l_out, c_in, self.p(p.w, f * c_in), self.p(p.b, f), f),
                None => proj_col.clone(),
            };
            let sum: Vec<f64> = c2.out.iter().zip(&res).map(|(a, b)| a + b).collect();
            input = sum.iter().map(|v| relu(*v)).collect();
            blocks.push(BlockCache {
                l_in,
                l_out,
                proj_col,
                c1,
                c2,
                sum,
            });
        }
        let f = self.cfg.filters;
        let nd = self.dense1.n_in;
        let rows = batch * steps;
        let mut dec_in = vec![0.0; rows * nd];
        for r in 0..rows {
            let b = r / steps;
            dec_in[r * nd..r * nd + f].copy_from_slice(&input[r * f..(r + 1) * f]);
            dec_in[r * nd + f..(r + 1) * nd].copy_from_slice(&inv[b * self.cfg.invariant_dim..(b + 1) * self.cfg.invariant_dim]);
        }
        let (d1, d2) = (self.dense1, self.dense2);
        let mut hidden_pre = vec![0.0; rows * d1.n_out];
        gemm(rows, nd, d1.n_out, &dec_in, nd, 1, self.p(d1.w, nd * d1.n_out), d1.n_out, 1, &mut hidden_pre);
        for row in hidden_pre.chunks_exact_mut(d1.n_out) {
            add_into(row, self.p(d1.b, d1.n_out));
        }
        let hidden: Vec<f64> = hidden_pre.iter().map(|v| relu(*v)).collect();
        let mut out = vec![0.0; rows];
        gemm(rows, d2.n_in, 1, &hidden, d2.n_in, 1, self.p(d2.w, d2.n_in), 1, 1, &mut out);
        let b2 = self.params[d2.b];
        out.iter_mut().for_each(|v| *v += b2);
        Cache {
            batch,
            steps,
            blocks,
            dec_in,
            hidden_pre,
            hidden,
            out,
        }
    }

    /// One prediction per window: `x` is `batch × steps × channels`,
    /// `inv` is `batch × invariant_dim`. Dropout is applied only when masks
    /// are given.
    pub fn forward(&self, x: &[f64], inv: &[f64], batch: usize, masks: Option<&DropoutMasks>) -> Result<Vec<f64>, ModelError> {
        let t = self.check(x, inv, batch)?;
        Ok(self.forward_cache(x, inv, batch, t, 1, masks).out)
    }

    /// Deterministic inference.
    pub fn predict(&self, x: &[f64], inv: &[f64], batch: usize) -> Result<Vec<f64>, ModelError> {
        self.forward(x, inv, batch, None)
    }

    /// Decoder output at every time step of a single sequence `steps × channels`.
    pub fn forward_all_steps(&self, x: &[f64], inv: &[f64]) -> Result<Vec<f64>, ModelError> {
        let t = self.check(x, inv, 1)?;
        Ok(self.forward_cache(x, inv, 1, t, t, None).out)
    }

    /// Mean absolute percentage error of `pred` against `y` (fraction, not %).
    pub fn mape(pred: &[f64], y: &[f64]) -> f64 {
        pred.iter()
            .zip(y)
            .map(|(p, t)| (p - t).abs() / t.abs().max(MAPE_FLOOR))
            .sum::<f64>()
            / y.len() as f64
    }

    pub fn loss(&self, x: &[f64], inv: &[f64], y: &[f64], batch: usize, masks: Option<&DropoutMasks>) -> Result<f64, ModelError> {
        let pred = self.forward(x, inv, batch, masks)?;
        Ok(Self::mape(&pred, y))
    }

    /// Batch-mean MAPE and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, x: &[f64], inv: &[f64], y: &[f64], batch: usize, masks: Option<&DropoutMasks>) -> Result<(f64, Vec<f64>), ModelError> {
        let t = self.check(x, inv, batch)?;
        if y.len() != batch {
            return Err(ModelError::Shape(format!("{} labels for batch {batch}", y.len())));
        }
        let cache = self.forward_cache(x, inv, batch, t, 1, masks);
        if let Some(sample) = cache.out.iter().position(|p| !p.is_finite()) {
            return Err(ModelError::NonFinite { sample });
        }
        let loss = Self::mape(&cache.out, y);
        if !loss.is_finite() {
            let sample = y.iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(ModelError::NonFinite { sample });
        }
        let dout: Vec<f64> = cache
            .out
            .iter()
            .zip(y)
            .map(|(p, t)| {
                let s = if p > t { 1.0 } else if p < t { -1.0 } else { 0.0 };
                s / t.abs().max(MAPE_FLOOR) / batch as f64
            })
            .collect();
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&cache, &dout, masks, &mut grad);
        Ok((loss, grad))
    }

    fn backward(&self, cache: &Cache, dout: &[f64], masks: Option<&DropoutMasks>, grad: &mut [f64]) {
        let (d1, d2) = (self.dense1, self.dense2);
        let rows = cache.batch * cache.steps;
        // Output layer.
        grad[d2.b] += dout.iter().sum::<f64>();
        let mut dw2 = vec![0.0; d2.n_in];
        gemm(d2.n_in, rows, 1, &cache.hidden, 1, d2.n_in, dout, 1, 1, &mut dw2);
        add_into(&mut grad[d2.w..d2.w + d2.n_in], &dw2);
        let mut dhidden = vec![0.0; rows * d2.n_in];
        gemm(rows, 1, d2.n_in, dout, 1, 1, self.p(d2.w, d2.n_in), 1, 1, &mut dhidden);
        for (g, pre) in dhidden.iter_mut().zip(&cache.hidden_pre) {
            if *pre <= 0.0 {
                *g = 0.0;
            }
        }
        // Hidden layer.
        let nd = d1.n_in;
        let mut db1 = vec![0.0; d1.n_out];
        for row in dhidden.chunks_exact(d1.n_out) {
            add_into(&mut db1, row);
        }
        add_into(&mut grad[d1.b..d1.b + d1.n_out], &db1);
        let mut dw1 = vec![0.0; nd * d1.n_out];
        gemm(nd, rows, d1.n_out, &cache.dec_in, 1, nd, &dhidden, d1.n_out, 1, &mut dw1);
        add_into(&mut grad[d1.w..d1.w + nd * d1.n_out], &dw1);
        let mut ddec = vec![0.0; rows * nd];
        gemm(rows, d1.n_out, nd, &dhidden, d1.n_out, 1, self.p(d1.w, nd * d1.n_out), 1, d1.n_out, &mut ddec);
        // Encoder output gradient; the invariant input has no parameters upstream.
        let f = self.cfg.filters;
        let mut dx: Vec<f64> = ddec.chunks_exact(nd).flat_map(|r| r[..f].iter().copied()).collect();

        for (bi, blk) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[bi];
            let d = blk.dilation;
            let m = masks.map(|m| &m.masks[bi]);
            let dsum: Vec<f64> = dx.iter().zip(&bc.sum).map(|(g, s)| if *s > 0.0 { *g } else { 0.0 }).collect();
            let dh1 = self.conv_backward(blk.conv2, &bc.c2, cache.batch, d, m.map(|m| m[1].as_slice()), &dsum, grad);
            let mut dinput = self.conv_backward(blk.conv1, &bc.c1, cache.batch, d, m.map(|m| m[0].as_slice()), &dh1, grad);
            let c_in = blk.conv1.c_in;
            let dres_col = match blk.proj {
                Some(p) => {
                    let (dcol, dw, db) = affine_rows_out_major_back(&bc.proj_col, cache.batch * bc.l_out, c_in, self.p(p.w, f * c_in), f, &dsum);
                    add_into(&mut grad[p.w..p.w + dw.len()], &dw);
                    add_into(&mut grad[p.b..p.b + db.len()], &db);
                    dcol
                }
                None => dsum,
            };
            let dres = col2im(&dres_col, cache.batch, bc.l_in, c_in, bc.l_out, 1, 1);
            add_into(&mut dinput, &dres);
            dx = dinput;
        }
    }
}

/// ReLU that lets NaN through so non-finite inputs surface in the loss.
fn relu(v: f64) -> f64 {
    if v < 0.0 { 0.0 } else { v }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
