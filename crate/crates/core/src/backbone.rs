//! Patch tokenizer, transformer encoder over visible patches, full-sequence
//! assembly with mask tokens, and the stop-gradient decoder producing the
//! global point-cloud feature.
//!
//! Parameter names: `encoder.*` (patch embed, positional MLP, mask token,
//! blocks) and `decoder.*`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{MaskPlan, PatchSet};
use crate::model::{GlobalPool, ModelConfig};
use crate::nn::{self, Init};
use crate::tensorcore::{Axis, ParamStore, Tape, TensorError, Var};

pub fn init_encoder(init: &mut Init<'_>, cfg: &ModelConfig) {
    let c = cfg.embed_dim;
    init.mlp("encoder.patch", 3, cfg.patch_hidden, c, false);
    init.mlp("encoder.pos", 3, cfg.pos_hidden, c, false);
    init.normal("encoder.mask_token", &[1, c], 0.02);
    for i in 0..cfg.depth {
        let b = format!("encoder.blocks.{i}");
        init.layer_norm(&format!("{b}.ln1"), c);
        init.attention(&format!("{b}.attn"), c);
        init.layer_norm(&format!("{b}.ln2"), c);
        init.mlp(&format!("{b}.mlp"), c, c * cfg.mlp_ratio, c, false);
    }
}

pub fn init_decoder(init: &mut Init<'_>, cfg: &ModelConfig) {
    let c = cfg.embed_dim;
    init.normal("decoder.query", &[1, c], 0.02);
    for i in 0..cfg.decoder_depth {
        let b = format!("decoder.blocks.{i}");
        init.layer_norm(&format!("{b}.ln_q"), c);
        init.layer_norm(&format!("{b}.ln_kv"), c);
        init.attention(&format!("{b}.attn"), c);
        init.layer_norm(&format!("{b}.ln2"), c);
        init.mlp(&format!("{b}.mlp"), c, c * cfg.mlp_ratio, c, false);
    }
    init.layer_norm("decoder.head_ln", c);
    init.linear("decoder.head", c, cfg.feat_dim);
}

/// Stochastic depth on residual branches, rate ramping linearly with depth.
pub struct DropPath {
    rate: f64,
    rng: ChaCha8Rng,
}

impl DropPath {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self { rate, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// `None` drops the branch, `Some(scale)` keeps it rescaled.
    fn sample(&mut self, block: usize, depth: usize) -> Option<f64> {
        let rate = if depth > 1 { self.rate * block as f64 / (depth - 1) as f64 } else { self.rate };
        if rate <= 0.0 {
            return Some(1.0);
        }
        if self.rng.random::<f64>() < rate {
            None
        } else {
            Some(1.0 / (1.0 - rate))
        }
    }
}

/// Shared per-point MLP then max over each patch: `[g*s, 3] -> [g, C]`.
pub fn patch_embed(t: &mut Tape, p: &ParamStore, patches: Var, group_size: usize) -> Result<Var, TensorError> {
    let h = nn::mlp(t, p, "encoder.patch", patches)?;
    t.group_max(h, group_size)
}

/// Positional embedding of patch centers: `[g, 3] -> [g, C]`.
pub fn pos_embed(t: &mut Tape, p: &ParamStore, centers: Var) -> Result<Var, TensorError> {
    nn::mlp(t, p, "encoder.pos", centers)
}

fn residual(t: &mut Tape, x: Var, branch: Var, keep: Option<f64>) -> Result<Var, TensorError> {
    match keep {
        None => Ok(x),
        Some(s) if s == 1.0 => t.add(x, branch),
        Some(s) => {
            let b = t.scale(branch, s)?;
            t.add(x, b)
        }
    }
}

/// Pre-norm transformer over the visible tokens with positions added at input.
pub fn encode_visible(
    t: &mut Tape,
    p: &ParamStore,
    cfg: &ModelConfig,
    tokens: Var,
    positions: Var,
    mut drop: Option<&mut DropPath>,
) -> Result<Var, TensorError> {
    if t.shape(tokens).0 == 0 {
        return Err(TensorError::InvalidArray("no visible tokens to encode".into()));
    }
    let mut x = t.add(tokens, positions)?;
    for i in 0..cfg.depth {
        let b = format!("encoder.blocks.{i}");
        let keep = drop.as_deref_mut().map_or(Some(1.0), |d| d.sample(i, cfg.depth));
        let h = nn::layer_norm(t, p, &format!("{b}.ln1"), x)?;
        let h = nn::attention(t, p, &format!("{b}.attn"), h, h, cfg.heads)?;
        x = residual(t, x, h, keep)?;
        let keep = drop.as_deref_mut().map_or(Some(1.0), |d| d.sample(i, cfg.depth));
        let h = nn::layer_norm(t, p, &format!("{b}.ln2"), x)?;
        let h = nn::mlp(t, p, &format!("{b}.mlp"), h)?;
        x = residual(t, x, h, keep)?;
    }
    Ok(x)
}

/// Places encoded visible tokens and `mask_token + position` rows into the
/// serialized slot order: slot `j` holds patch `order[j]`.
pub fn assemble_full(
    t: &mut Tape,
    encoded: Var,
    mask_token: Var,
    positions: Var,
    mask: &MaskPlan,
    order: &[usize],
) -> Result<Var, TensorError> {
    let g = mask.masked.len();
    let visible = mask.visible_indices();
    let masked = mask.masked_indices();
    if t.shape(encoded).0 != visible.len() || t.shape(positions).0 != g || order.len() != g {
        return Err(TensorError::InvalidArray(format!(
            "assemble: {} encoded rows for {} visible, {} positions, {} order entries, {} patches",
            t.shape(encoded).0,
            visible.len(),
            t.shape(positions).0,
            order.len(),
            g
        )));
    }
    let mut slot_of = vec![0usize; g];
    for (k, &i) in visible.iter().enumerate() {
        slot_of[i] = k;
    }
    for (k, &i) in masked.iter().enumerate() {
        slot_of[i] = visible.len() + k;
    }
    let stacked = if masked.is_empty() {
        encoded
    } else {
        let pos_m = t.gather(positions, &masked)?;
        let tok = t.broadcast_rows(mask_token, masked.len())?;
        let fill = t.add(tok, pos_m)?;
        t.concat(&[encoded, fill], Axis::Rows)?
    };
    let index: Vec<usize> = order.iter().map(|&i| slot_of[i]).collect();
    t.gather(stacked, &index)
}

/// Output of the encoder side for one cloud.
pub struct EncodedCloud {
    /// `[g, C]` in serialized order.
    pub full: Var,
    pub visible: Var,
}

/// Patch embedding, encoding of the visible patches and assembly.
pub fn encode_cloud(
    t: &mut Tape,
    p: &ParamStore,
    cfg: &ModelConfig,
    patches: &PatchSet,
    mask: &MaskPlan,
    drop: Option<&mut DropPath>,
) -> Result<EncodedCloud, TensorError> {
    let local = t.constant(patches.patches_array())?;
    let centers = t.constant(patches.centers_array())?;
    let tokens = patch_embed(t, p, local, patches.group_size())?;
    let positions = pos_embed(t, p, centers)?;
    let visible_idx = mask.visible_indices();
    let tok_v = t.gather(tokens, &visible_idx)?;
    let pos_v = t.gather(positions, &visible_idx)?;
    let visible = encode_visible(t, p, cfg, tok_v, pos_v, drop)?;
    let mask_token = t.param(p, "encoder.mask_token")?;
    let full = assemble_full(t, visible, mask_token, positions, mask, &patches.order)?;
    Ok(EncodedCloud { full, visible })
}

/// Global feature `[1, D]` read from the sequence behind a gradient barrier.
pub fn decode_global(t: &mut Tape, p: &ParamStore, cfg: &ModelConfig, full: Var) -> Result<Var, TensorError> {
    let barred = t.stop_gradient(full)?;
    decode_global_unbarred(t, p, cfg, barred)
}

/// Same decoder without the barrier; used by the stop-gradient ablation.
pub fn decode_global_unbarred(t: &mut Tape, p: &ParamStore, cfg: &ModelConfig, seq: Var) -> Result<Var, TensorError> {
    if t.shape(seq).0 == 0 {
        return Err(TensorError::InvalidArray("empty token sequence".into()));
    }
    let mut q = match cfg.global_pool {
        GlobalPool::Query => {
            let mut q = t.param(p, "decoder.query")?;
            for i in 0..cfg.decoder_depth {
                let b = format!("decoder.blocks.{i}");
                let qn = nn::layer_norm(t, p, &format!("{b}.ln_q"), q)?;
                let kv = nn::layer_norm(t, p, &format!("{b}.ln_kv"), seq)?;
                let a = nn::attention(t, p, &format!("{b}.attn"), qn, kv, cfg.heads)?;
                q = t.add(q, a)?;
                let h = nn::layer_norm(t, p, &format!("{b}.ln2"), q)?;
                let h = nn::mlp(t, p, &format!("{b}.mlp"), h)?;
                q = t.add(q, h)?;
            }
            q
        }
        GlobalPool::Mean => t.mean_rows(seq)?,
    };
    q = nn::layer_norm(t, p, "decoder.head_ln", q)?;
    nn::linear(t, p, "decoder.head", q)
}
