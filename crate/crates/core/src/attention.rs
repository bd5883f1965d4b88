//! Windowed local attention, pooled global attention, and the closed-form
//! cost model that motivates the two-stage design.
//!
//! A block applies local attention inside non-overlapping space-time windows
//! (the classification token passes through untouched), then global
//! attention in which every token queries a window-pooled key/value set with
//! the classification token appended, followed by an MLP. Both stages are
//! pre-norm residual updates.

use crate::embedding::TokenGrid;
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-10;

/// Window extents along frames, height, and width. Each extent must divide
/// the corresponding grid extent; no padding is performed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub f: usize,
    pub h: usize,
    pub w: usize,
}

impl WindowSpec {
    pub fn new(f: usize, h: usize, w: usize) -> Self {
        WindowSpec { f, h, w }
    }

    pub fn volume(&self) -> usize {
        self.f * self.h * self.w
    }

    pub fn validate(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        for (axis, extent, window) in [
            ("frames", frames, self.f),
            ("height", height, self.h),
            ("width", width, self.w),
        ] {
            if window == 0 {
                return Err(Error::config(format!("window extent on {axis} must be positive")));
            }
            if extent % window != 0 {
                return Err(Error::Window { axis, extent, window });
            }
        }
        Ok(())
    }

    /// Number of windows in an `frames x height x width` grid.
    pub fn count(&self, frames: usize, height: usize, width: usize) -> usize {
        (frames / self.f) * (height / self.h) * (width / self.w)
    }
}

/// One attention stage: per-head query/key/value projections
/// (`[embed_dim, head_dim]` each), the output projection applied to the
/// concatenated heads, and the layer norm in front of the stage.
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub query: Vec<Tensor>,
    pub key: Vec<Tensor>,
    pub value: Vec<Tensor>,
    pub output: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

impl AttnParams {
    pub fn heads(&self) -> usize {
        self.query.len()
    }

    pub fn head_dim(&self) -> usize {
        self.query[0].shape()[1]
    }
}

/// How a window is reduced to one token for the global key/value set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Average,
    Learned,
}

/// Pooling parameters; the learned mode maps the concatenation of a
/// window's tokens (`[window_volume * embed_dim]`) through an affine layer.
#[derive(Debug, Clone)]
pub enum PoolParams {
    Average,
    Learned { weight: Tensor, bias: Tensor },
}

impl PoolParams {
    pub fn mode(&self) -> PoolMode {
        match self {
            PoolParams::Average => PoolMode::Average,
            PoolParams::Learned { .. } => PoolMode::Learned,
        }
    }
}

/// Two-layer MLP with its own pre-norm.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

/// Parameters of one local-global block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub local: AttnParams,
    pub global: AttnParams,
    pub pool: PoolParams,
    pub mlp: MlpParams,
}

/// Grid-row indices (0-based, classification token excluded) of every
/// window, in window order: temporal windows outermost, then the spatial
/// window raster; rows inside a window are ordered (frame, y, x).
pub(crate) fn window_rows(
    frames: usize,
    height: usize,
    width: usize,
    spec: &WindowSpec,
) -> Vec<Vec<usize>> {
    let mut windows = Vec::with_capacity(spec.count(frames, height, width));
    for tf in 0..frames / spec.f {
        for ty in 0..height / spec.h {
            for tx in 0..width / spec.w {
                let mut rows = Vec::with_capacity(spec.volume());
                for df in 0..spec.f {
                    for dy in 0..spec.h {
                        for dx in 0..spec.w {
                            let t = tf * spec.f + df;
                            let y = ty * spec.h + dy;
                            let x = tx * spec.w + dx;
                            rows.push(t * height * width + y * width + x);
                        }
                    }
                }
                windows.push(rows);
            }
        }
    }
    windows
}

/// Splits the grid tokens of `x` (classification token excluded) into
/// window blocks of shape `[window_volume, embed_dim]`.
pub fn partition(x: &TokenGrid, spec: &WindowSpec) -> Result<Vec<Tensor>> {
    spec.validate(x.frames(), x.height(), x.width())?;
    let d = x.embed_dim();
    let windows = window_rows(x.frames(), x.height(), x.width(), spec);
    let mut blocks = Vec::with_capacity(windows.len());
    for rows in &windows {
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(x.tokens.row(r + 1));
        }
        blocks.push(Tensor::new(vec![rows.len(), d], data)?);
    }
    Ok(blocks)
}

/// Inverse of [`partition`]: reassembles window blocks into the grid-token
/// matrix `[frames * height * width, embed_dim]`.
pub fn merge(
    blocks: &[Tensor],
    frames: usize,
    height: usize,
    width: usize,
    spec: &WindowSpec,
) -> Result<Tensor> {
    spec.validate(frames, height, width)?;
    let windows = window_rows(frames, height, width, spec);
    if blocks.len() != windows.len() {
        return Err(Error::contract(format!(
            "merge got {} blocks for {} windows",
            blocks.len(),
            windows.len()
        )));
    }
    let d = blocks
        .first()
        .ok_or_else(|| Error::contract("merge needs at least one block"))?
        .shape()[1];
    let mut data = vec![0.0; frames * height * width * d];
    for (block, rows) in blocks.iter().zip(&windows) {
        if block.shape() != [rows.len(), d] {
            return Err(Error::Dimension {
                op: "merge",
                lhs: block.shape().to_vec(),
                rhs: vec![rows.len(), d],
            });
        }
        for (local, &grid_row) in rows.iter().enumerate() {
            data[grid_row * d..(grid_row + 1) * d].copy_from_slice(block.row(local));
        }
    }
    Tensor::new(vec![frames * height * width, d], data)
}

/// Multi-head scaled dot-product attention: queries from `q_src`, keys and
/// values from `kv_src` (both already normalized), heads concatenated and
/// passed through the output projection. No residual, no pair accounting.
fn multi_head_attention(
    tape: &mut Tape,
    q_src: &Tensor,
    kv_src: &Tensor,
    params: &AttnParams,
) -> Result<Tensor> {
    let scale = 1.0 / (params.head_dim() as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads());
    for h in 0..params.heads() {
        let q = tape.matmul(q_src, &params.query[h])?;
        let k = tape.matmul(kv_src, &params.key[h])?;
        let v = tape.matmul(kv_src, &params.value[h])?;
        let kt = tape.transpose(&k)?;
        let raw = tape.matmul(&q, &kt)?;
        let scores = tape.scale(&raw, scale)?;
        let attn = tape.softmax(&scores, 1)?;
        heads.push(tape.matmul(&attn, &v)?);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let cat = tape.concat_cols(&refs)?;
    tape.matmul(&cat, &params.output)
}

/// Local stage: per-window multi-head self-attention over the normalized
/// window tokens, added back onto the raw tokens. The classification token
/// is returned unchanged. Adds `window_volume^2` grid pairs per window.
pub fn mhla(
    tape: &mut Tape,
    x: &TokenGrid,
    params: &BlockParams,
    spec: &WindowSpec,
) -> Result<TokenGrid> {
    spec.validate(x.frames(), x.height(), x.width())?;
    let n = x.grid_len();
    let cls = tape.select_rows(&x.tokens, &[TokenGrid::CLS_INDEX])?;
    let grid_idx: Vec<usize> = (1..=n).collect();
    let grid = tape.select_rows(&x.tokens, &grid_idx)?;
    let normed = tape.layer_norm(&grid, &params.local.ln_gain, &params.local.ln_bias, LN_EPS)?;

    let windows = window_rows(x.frames(), x.height(), x.width(), spec);
    let mut outputs = Vec::with_capacity(windows.len());
    for rows in &windows {
        let xw = tape.select_rows(&normed, rows)?;
        tape.add_pair_count((rows.len() * rows.len()) as u64);
        outputs.push(multi_head_attention(tape, &xw, &xw, &params.local)?);
    }
    let refs: Vec<&Tensor> = outputs.iter().collect();
    let stacked = tape.concat_rows(&refs)?;

    // Row i of `stacked` holds grid row flatten(windows)[i]; invert that.
    let mut unpermute = vec![0usize; n];
    for (stacked_row, &grid_row) in windows.iter().flatten().enumerate() {
        unpermute[grid_row] = stacked_row;
    }
    let attn = tape.select_rows(&stacked, &unpermute)?;
    let grid_out = tape.add(&grid, &attn)?;
    let tokens = tape.concat_rows(&[&cls, &grid_out])?;
    TokenGrid::new(tokens, x.frames(), x.height(), x.width())
}

/// Reduces each window to one token. Average mode takes the arithmetic
/// mean; learned mode maps the concatenated window tokens through an affine
/// layer. Returns `[window_count, embed_dim]` in window order.
pub fn window_pool(
    tape: &mut Tape,
    y: &TokenGrid,
    spec: &WindowSpec,
    pool: &PoolParams,
) -> Result<Tensor> {
    spec.validate(y.frames(), y.height(), y.width())?;
    let d = y.embed_dim();
    let windows = window_rows(y.frames(), y.height(), y.width(), spec);
    let order: Vec<usize> = windows.iter().flatten().map(|&r| r + 1).collect();
    let grouped = tape.select_rows(&y.tokens, &order)?;
    match pool {
        PoolParams::Average => tape.mean_pool_rows(&grouped, spec.volume()),
        PoolParams::Learned { weight, bias } => {
            if weight.shape() != [spec.volume() * d, d] {
                return Err(Error::Dimension {
                    op: "window_pool",
                    lhs: weight.shape().to_vec(),
                    rhs: vec![spec.volume() * d, d],
                });
            }
            let flat = tape.reshape(&grouped, vec![windows.len(), spec.volume() * d])?;
            let pooled = tape.matmul(&flat, weight)?;
            tape.add_row_vec(&pooled, bias)
        }
    }
}

/// Global stage: every token (classification token included) queries the
/// pooled windows plus the classification token, residual-added, then the
/// MLP with its own pre-norm, residual-added again.
///
/// Adds `grid_len * window_count` grid pairs and `grid_len + window_count + 1`
/// classification-token pairs.
pub fn mhga(
    tape: &mut Tape,
    y: &TokenGrid,
    params: &BlockParams,
    spec: &WindowSpec,
) -> Result<TokenGrid> {
    spec.validate(y.frames(), y.height(), y.width())?;
    let n = y.grid_len();
    let windows = spec.count(y.frames(), y.height(), y.width());

    let q_src = tape.layer_norm(&y.tokens, &params.global.ln_gain, &params.global.ln_bias, LN_EPS)?;
    let pooled = window_pool(tape, y, spec, &params.pool)?;
    let cls = tape.select_rows(&y.tokens, &[TokenGrid::CLS_INDEX])?;
    let kv_raw = tape.concat_rows(&[&pooled, &cls])?;
    let kv_src = tape.layer_norm(&kv_raw, &params.global.ln_gain, &params.global.ln_bias, LN_EPS)?;

    tape.add_pair_count((n * windows) as u64);
    tape.add_cls_pair_count((n + windows + 1) as u64);
    let attn = multi_head_attention(tape, &q_src, &kv_src, &params.global)?;
    let z = tape.add(&y.tokens, &attn)?;

    let normed = tape.layer_norm(&z, &params.mlp.ln_gain, &params.mlp.ln_bias, LN_EPS)?;
    let h1 = tape.matmul(&normed, &params.mlp.w1)?;
    let h1 = tape.add_row_vec(&h1, &params.mlp.b1)?;
    let h2 = tape.gelu(&h1)?;
    let h3 = tape.matmul(&h2, &params.mlp.w2)?;
    let h3 = tape.add_row_vec(&h3, &params.mlp.b2)?;
    let out = tape.add(&z, &h3)?;
    TokenGrid::new(out, y.frames(), y.height(), y.width())
}

/// Dense reference attention: every token attends to every token in one
/// scaled dot-product, `x + MSA(LN(x))` with the given stage parameters.
/// Implemented with direct loops rather than tape operations; the output is
/// untraced. Used as a comparison baseline; adds `n^2` grid pairs.
pub fn full_space_time_attention(
    tape: &mut Tape,
    tokens: &Tensor,
    params: &AttnParams,
) -> Result<Tensor> {
    if tokens.rank() != 2 {
        return Err(Error::Dimension {
            op: "full_space_time_attention",
            lhs: tokens.shape().to_vec(),
            rhs: vec![],
        });
    }
    let n = tokens.rows();
    let d = tokens.cols();
    tape.add_pair_count((n * n) as u64);

    // LN
    let mut normed = vec![0.0; n * d];
    for r in 0..n {
        let lane = tokens.row(r);
        let mean = lane.iter().sum::<f64>() / d as f64;
        let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..d {
            normed[r * d + c] =
                params.ln_gain.data()[c] * (lane[c] - mean) * inv + params.ln_bias.data()[c];
        }
    }

    let heads = params.heads();
    let hd = params.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut concat = vec![0.0; n * d];
    for h in 0..heads {
        let wq = params.query[h].data();
        let wk = params.key[h].data();
        let wv = params.value[h].data();
        let mut q = vec![0.0; n * hd];
        let mut k = vec![0.0; n * hd];
        let mut v = vec![0.0; n * hd];
        for r in 0..n {
            for c in 0..hd {
                let mut sq = 0.0;
                let mut sk = 0.0;
                let mut sv = 0.0;
                for e in 0..d {
                    let x = normed[r * d + e];
                    sq += x * wq[e * hd + c];
                    sk += x * wk[e * hd + c];
                    sv += x * wv[e * hd + c];
                }
                q[r * hd + c] = sq;
                k[r * hd + c] = sk;
                v[r * hd + c] = sv;
            }
        }
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for j in 0..n {
                let mut s = 0.0;
                for c in 0..hd {
                    s += q[i * hd + c] * k[j * hd + c];
                }
                scores[j] = s * scale;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for c in 0..hd {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += scores[j] * v[j * hd + c];
                }
                concat[i * d + h * hd + c] = acc / sum;
            }
        }
    }

    // Output projection and residual.
    let wo = params.output.data();
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        for c in 0..d {
            let mut s = 0.0;
            for e in 0..d {
                s += concat[r * d + e] * wo[e * d + c];
            }
            out[r * d + c] = tokens.row(r)[c] + s;
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Closed-form attention-pair costs of one block at a given geometry,
/// alongside the dense baselines the design is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub win_f: usize,
    pub win_h: usize,
    pub win_w: usize,
    /// Local stage: `n * window_volume` where `n = frames * height * width`.
    pub cost_local: u64,
    /// Global stage: `n^2 / window_volume`.
    pub cost_global: u64,
    pub cost_logo_total: u64,
    /// Dense joint space-time attention: `n^2`.
    pub cost_full: u64,
    /// Per-frame spatial attention only: `frames * (height * width)^2`.
    pub cost_spatial_only: u64,
    /// Divided space-time attention: spatial pass plus a temporal pass,
    /// `frames * (height * width)^2 + frames^2 * height * width`.
    pub cost_divided: u64,
    /// Spatial attention with a token-mixing temporal stage.
    pub cost_mixing: u64,
}

impl CostReport {
    /// Whether the two-stage cost undercuts divided attention, which in turn
    /// undercuts dense attention, at this geometry.
    pub fn ordering_ok(&self) -> bool {
        self.cost_logo_total < self.cost_divided && self.cost_divided < self.cost_full
    }
}

/// Computes the closed-form cost table for one geometry.
pub fn cost_report(
    frames: usize,
    height: usize,
    width: usize,
    spec: &WindowSpec,
) -> Result<CostReport> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::config("grid extents must be positive"));
    }
    spec.validate(frames, height, width)?;
    let n = (frames * height * width) as u64;
    let volume = spec.volume() as u64;
    let s = (height * width) as u64;
    let f = frames as u64;
    Ok(CostReport {
        frames,
        height,
        width,
        win_f: spec.f,
        win_h: spec.h,
        win_w: spec.w,
        cost_local: n * volume,
        cost_global: n * n / volume,
        cost_logo_total: n * volume + n * n / volume,
        cost_full: n * n,
        cost_spatial_only: f * s * s,
        cost_divided: f * s * s + f * f * s,
        cost_mixing: f * s * s,
    })
}
