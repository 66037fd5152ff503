//! Layer helpers shared by the backbone, generator and projection heads.
//!
//! Parameters live in a [`ParamStore`] under dotted names; a layer called
//! `"enc.fc"` owns `"enc.fc.w"` (`[in, out]`) and `"enc.fc.b"` (`[1, out]`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensorcore::{Array, Axis, ParamStore, Tape, TensorError, Var};

/// Seeded parameter initializer writing into a store.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let len = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..len).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.insert(name, Array::new(shape.to_vec(), data).expect("finite init"));
    }

    pub fn insert(&mut self, name: &str, value: Array) {
        self.store.insert(name, value);
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.store.insert(name, Array::full(shape, value));
    }

    /// Weight `N(0, 1/in)`, zero bias.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.normal(&format!("{name}.w"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt());
        self.constant(&format!("{name}.b"), &[1, fan_out], 0.0);
    }

    pub fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.constant(&format!("{name}.w"), &[fan_in, fan_out], 0.0);
        self.constant(&format!("{name}.b"), &[1, fan_out], 0.0);
    }

    /// Two linear layers `name.0`, `name.1`; the second optionally zeroed.
    pub fn mlp(&mut self, name: &str, fan_in: usize, hidden: usize, fan_out: usize, zero_last: bool) {
        self.linear(&format!("{name}.0"), fan_in, hidden);
        if zero_last {
            self.zero_linear(&format!("{name}.1"), hidden, fan_out);
        } else {
            self.linear(&format!("{name}.1"), hidden, fan_out);
        }
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) {
        self.constant(&format!("{name}.g"), &[1, dim], 1.0);
        self.constant(&format!("{name}.b"), &[1, dim], 0.0);
    }

    /// Query/key/value/output projections for `dim`-wide attention.
    pub fn attention(&mut self, name: &str, dim: usize) {
        for part in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{part}"), dim, dim);
        }
    }
}

pub fn linear(t: &mut Tape, p: &ParamStore, name: &str, x: Var) -> Result<Var, TensorError> {
    let w = t.param(p, &format!("{name}.w"))?;
    let b = t.param(p, &format!("{name}.b"))?;
    let y = t.matmul(x, w)?;
    t.add(y, b)
}

/// `linear(name.1, gelu(linear(name.0, x)))`.
pub fn mlp(t: &mut Tape, p: &ParamStore, name: &str, x: Var) -> Result<Var, TensorError> {
    let h = linear(t, p, &format!("{name}.0"), x)?;
    let h = t.gelu(h)?;
    linear(t, p, &format!("{name}.1"), h)
}

pub fn layer_norm(t: &mut Tape, p: &ParamStore, name: &str, x: Var) -> Result<Var, TensorError> {
    let g = t.param(p, &format!("{name}.g"))?;
    let b = t.param(p, &format!("{name}.b"))?;
    t.layer_norm(x, g, b, 1e-5)
}

/// Multi-head scaled dot-product attention of `q_in` rows over `kv_in` rows.
pub fn attention(
    t: &mut Tape,
    p: &ParamStore,
    name: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
) -> Result<Var, TensorError> {
    let q = linear(t, p, &format!("{name}.q"), q_in)?;
    let k = linear(t, p, &format!("{name}.k"), kv_in)?;
    let v = linear(t, p, &format!("{name}.v"), kv_in)?;
    let dim = t.shape(q).1;
    if heads == 0 || dim % heads != 0 {
        return Err(TensorError::InvalidArray(format!("{dim} channels do not split into {heads} heads")));
    }
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = t.slice_cols(q, lo, hi)?;
        let kh = t.slice_cols(k, lo, hi)?;
        let vh = t.slice_cols(v, lo, hi)?;
        let s = t.matmul_t(qh, false, kh, true)?;
        let s = t.scale(s, scale)?;
        let a = t.softmax(s, Axis::Cols)?;
        outs.push(t.matmul(a, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { t.concat(&outs, Axis::Cols)? };
    linear(t, p, &format!("{name}.o"), cat)
}
