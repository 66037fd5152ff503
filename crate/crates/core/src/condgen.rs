//! Conditional generator: the multi-scale pyramid producing the condition
//! vector `c`, and the dual-branch gated denoiser predicting noise from
//! `(P^t, c, t)`.
//!
//! Parameter names: `h2.*` and `dip.{block}.*`, `dip.out`.

use crate::geometry::knn;
use crate::model::ModelConfig;
use crate::nn::{self, Init};
use crate::tensorcore::{Array, Axis, ParamStore, Tape, TensorError, Var};

pub const PYRAMID_KERNELS: [usize; 3] = [1, 3, 5];

pub fn init_h2(init: &mut Init<'_>, cfg: &ModelConfig) {
    let c = cfg.embed_dim;
    for k in PYRAMID_KERNELS {
        init.linear(&format!("h2.conv{k}"), k * c, c);
    }
    init.mlp("h2.score", c, cfg.h2_hidden, 1, false);
    init.mlp("h2.proj", c, cfg.cond_dim, cfg.cond_dim, false);
    init.linear("h2.pool", cfg.cond_dim, 1);
}

pub fn init_dip(init: &mut Init<'_>, cfg: &ModelConfig) {
    let ct = cfg.cond_dim + cfg.te_dim;
    for (i, (w_in, w_out)) in cfg.dip_block_widths().into_iter().enumerate() {
        let b = format!("dip.{i}");
        let half = w_out / 2;
        init.linear(&format!("{b}.high"), w_in, half);
        init.linear(&format!("{b}.low"), 2 * w_in, half);
        if cfg.dip_gate {
            init.linear(&format!("{b}.gate"), w_out, half);
        }
        init.linear(&format!("{b}.fuse"), w_out, w_out);
        init.mlp(&format!("{b}.mod_g"), ct, w_out, w_out, cfg.zero_init_modulation);
        init.mlp(&format!("{b}.mod_b"), ct, w_out, w_out, cfg.zero_init_modulation);
    }
    let last = cfg.dip_block_widths().last().map_or(3, |w| w.1);
    init.linear("dip.out", last, 3);
}

/// Pyramid outputs for inspection and testing.
pub struct H2Output {
    /// `[1, C_cond]`.
    pub c: Var,
    /// `[1, 3]` scale weights.
    pub alpha: Var,
    pub scales: Vec<Var>,
}

/// Condition vector from the serialized full token sequence `[g, C]`.
pub fn h2_condition(t: &mut Tape, p: &ParamStore, full: Var) -> Result<H2Output, TensorError> {
    let g = t.shape(full).0;
    if g < 5 {
        return Err(TensorError::InvalidArray(format!("pyramid needs at least 5 tokens, got {g}")));
    }
    let mut scales = Vec::with_capacity(PYRAMID_KERNELS.len());
    let mut scores = Vec::with_capacity(PYRAMID_KERNELS.len());
    for k in PYRAMID_KERNELS {
        let windows = if k == 1 { full } else { t.im2col(full, k)? };
        let f = nn::linear(t, p, &format!("h2.conv{k}"), windows)?;
        let pooled = t.mean_rows(f)?;
        scores.push(nn::mlp(t, p, "h2.score", pooled)?);
        scales.push(f);
    }
    let h = t.concat(&scores, Axis::Cols)?;
    let alpha = t.softmax(h, Axis::Cols)?;
    let mut combined = None;
    for (k, &f) in scales.iter().enumerate() {
        let a = t.slice_cols(alpha, k, k + 1)?;
        let term = t.mul(f, a)?;
        combined = Some(match combined {
            None => term,
            Some(acc) => t.add(acc, term)?,
        });
    }
    let combined = combined.expect("three scales");
    let feats = nn::mlp(t, p, "h2.proj", combined)?;
    let logits = nn::linear(t, p, "h2.pool", feats)?;
    let weights = t.softmax(logits, Axis::Rows)?;
    let c = t.matmul_t(weights, true, feats, false)?;
    Ok(H2Output { c, alpha, scales })
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
#[error("timestep embedding dimension {0} must be even and positive")]
pub struct OddDimension(pub usize);

/// Sinusoidal embedding `[1, dim]`: `sin` at even entries, `cos` at odd.
pub fn timestep_embed(t: usize, dim: usize) -> Result<Array, OddDimension> {
    if dim == 0 || dim % 2 != 0 {
        return Err(OddDimension(dim));
    }
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 10000f64.powf((2 * i) as f64 / dim as f64);
        let arg = t as f64 / freq;
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    Ok(Array::matrix(1, dim, out).expect("bounded values"))
}

/// Neighbor table for the local branch: the `k` nearest other points of
/// every point, flattened row-major. Returns `(indices, k_eff)`.
pub fn neighbor_table(points: &Array, k: usize) -> (Vec<usize>, usize) {
    let n = points.rows();
    let pts: Vec<[f64; 3]> = points.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let k_eff = k.min(n.saturating_sub(1));
    let mut table = Vec::with_capacity(n * k_eff);
    for (i, q) in pts.iter().enumerate() {
        let near = knn(&pts, q, k_eff + 1);
        table.extend(near.into_iter().filter(|&j| j != i).take(k_eff));
    }
    (table, k_eff)
}

/// One denoiser block: `[n, w_in] -> [n, w_out]`, modulated by `ct`
/// (condition concatenated with timestep embedding, `[1, C_cond + TE]`).
pub fn dip_block(
    t: &mut Tape,
    p: &ParamStore,
    cfg: &ModelConfig,
    block: usize,
    f: Var,
    neighbors: &[usize],
    k: usize,
    ct: Var,
) -> Result<Var, TensorError> {
    let b = format!("dip.{block}");
    let n = t.shape(f).0;
    let local = if k == 0 {
        f
    } else {
        let gathered = t.gather(f, neighbors)?;
        t.group_mean(gathered, k)?
    };
    let diff = t.sub(f, local)?;
    let high = nn::linear(t, p, &format!("{b}.high"), diff)?;
    let high = t.gelu(high)?;

    let global = t.mean_rows(f)?;
    let global = t.broadcast_rows(global, n)?;
    let ctx = t.concat(&[f, global], Axis::Cols)?;
    let low = nn::linear(t, p, &format!("{b}.low"), ctx)?;
    let low = t.gelu(low)?;

    let concat = if cfg.dip_gate {
        let both = t.concat(&[high, low], Axis::Cols)?;
        let gate = nn::linear(t, p, &format!("{b}.gate"), both)?;
        let gate = t.sigmoid(gate)?;
        let high_g = t.mul(high, gate)?;
        let low_g = t.mul(low, gate)?;
        let low_g = t.sub(low, low_g)?;
        t.concat(&[high_g, low_g], Axis::Cols)?
    } else {
        t.concat(&[high, low], Axis::Cols)?
    };

    let (gate, bias) = modulation(t, p, block, ct)?;
    let fused = nn::linear(t, p, &format!("{b}.fuse"), concat)?;
    let fused = t.mul(fused, gate)?;
    t.add(fused, bias)
}

/// Gate `G = sigmoid(MLP(ct))` and bias `B = MLP(ct)`, each `[1, w_out]`.
pub fn modulation(t: &mut Tape, p: &ParamStore, block: usize, ct: Var) -> Result<(Var, Var), TensorError> {
    let g = nn::mlp(t, p, &format!("dip.{block}.mod_g"), ct)?;
    let g = t.sigmoid(g)?;
    let b = nn::mlp(t, p, &format!("dip.{block}.mod_b"), ct)?;
    Ok((g, b))
}

/// Noise estimate `[n, 3]` for noisy points `pt` with condition `c`
/// (`[1, C_cond]`) and timestep embedding `te` (`[1, TE]`).
pub fn dip_denoise_embedded(
    t: &mut Tape,
    p: &ParamStore,
    cfg: &ModelConfig,
    pt: Var,
    c: Var,
    te: Var,
    neighbors: &[usize],
    k: usize,
) -> Result<Var, TensorError> {
    let ct = t.concat(&[c, te], Axis::Cols)?;
    let mut f = pt;
    for block in 0..cfg.dip_block_widths().len() {
        f = dip_block(t, p, cfg, block, f, neighbors, k, ct)?;
    }
    nn::linear(t, p, "dip.out", f)
}

/// [`dip_denoise_embedded`] with the sinusoidal embedding of step `step`
/// and the neighbor table computed from the noisy coordinates.
pub fn dip_denoise(
    t: &mut Tape,
    p: &ParamStore,
    cfg: &ModelConfig,
    pt: &Array,
    c: Var,
    step: usize,
) -> Result<Var, TensorError> {
    let (neighbors, k) = neighbor_table(pt, cfg.dip_knn);
    let te = timestep_embed(step, cfg.te_dim).map_err(|e| TensorError::InvalidArray(e.to_string()))?;
    let te = t.constant(te)?;
    let x = t.constant(pt.clone())?;
    dip_denoise_embedded(t, p, cfg, x, c, te, &neighbors, k)
}
