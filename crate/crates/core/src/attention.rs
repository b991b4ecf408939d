//! Patch embedding and the shifted linear-window ViT.
//!
//! Attention runs over the flattened patch sequence split into contiguous
//! 1D windows of `S` tokens (LW-MSA). The shifted variant (SLW-MSA) cyclically
//! rolls the sequence by `⌊S/2⌋` before the windowed attention and rolls it
//! back afterwards. Blocks alternate LW, SLW, LW, SLW, ...

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::derive_seed;
use crate::tape::{Tape, Var};
use crate::tensor::{xavier_uniform, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub n_heads: usize,
    /// Window length `S`, in tokens.
    pub window: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { dim: 64, n_heads: 4, window: 16, depth: 4, mlp_ratio: 4 }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(contract(format!("dim {} not divisible by {} heads", self.dim, self.n_heads)));
        }
        if self.depth % 2 != 0 {
            return Err(contract(format!("depth {} must be even (LW/SLW pairs)", self.depth)));
        }
        if self.window < 2 {
            return Err(contract(format!("window {} must be at least 2", self.window)));
        }
        if self.mlp_ratio == 0 {
            return Err(contract("mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn shift(&self) -> usize {
        self.window / 2
    }
}

/// Affine map `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        let w = store.add(format!("{name}.w"), xavier_uniform(&[d_in, d_out], seed)?);
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![d_out]));
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(vec![dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Linear projection of flattened patches to tokens.
pub fn patch_embed(tape: &mut Tape, store: &ParamStore, patches: Var, embed: &Linear) -> Result<Var> {
    let s = tape.shape(patches);
    if s.len() != 2 || s[1] != embed.d_in {
        return Err(contract(format!("patch embedding expects [N, {}], got {s:?}", embed.d_in)));
    }
    Ok(embed.forward(tape, store, patches))
}

#[derive(Debug, Clone, Copy)]
pub struct MsaWeights {
    pub qkv: Linear,
    pub proj: Linear,
}

impl MsaWeights {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, derive_seed(seed, &[0]))?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, derive_seed(seed, &[1]))?,
        })
    }
}

fn check_tokens(tape: &Tape, x: Var, cfg: &AttentionConfig) -> Result<usize> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != cfg.dim {
        return Err(contract(format!("token sequence must be [L, {}], got {s:?}", cfg.dim)));
    }
    let len = s[0];
    if len % cfg.window != 0 {
        return Err(contract(format!("sequence length {len} is not a multiple of window {}", cfg.window)));
    }
    Ok(len)
}

/// Windowed attention returning the per-window, per-head attention maps too.
pub fn lw_msa_with_maps(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    cfg: &AttentionConfig,
    w: &MsaWeights,
    pad: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let len = check_tokens(tape, x, cfg)?;
    if let Some(p) = pad {
        if p.len() != len {
            return Err(contract("pad mask length differs from sequence length"));
        }
    }
    let (d, s, dh) = (cfg.dim, cfg.window, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = w.qkv.forward(tape, store, x);
    let mut windows = Vec::with_capacity(len / s);
    let mut maps = Vec::new();
    for start in (0..len).step_by(s) {
        let rows: Vec<usize> = (start..start + s).collect();
        let qkv_w = tape.gather_rows(qkv, &rows);
        let key_mask = pad
            .filter(|p| p[start..start + s].iter().any(|&b| b))
            .map(|p| {
                let cols = &p[start..start + s];
                let data = (0..s * s)
                    .map(|k| if cols[k % s] { f64::NEG_INFINITY } else { 0.0 })
                    .collect();
                tape.constant(Tensor::new(vec![s, s], data))
            });
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let q = tape.slice_cols(qkv_w, h * dh, dh);
            let k = tape.slice_cols(qkv_w, d + h * dh, dh);
            let v = tape.slice_cols(qkv_w, 2 * d + h * dh, dh);
            let kt = tape.transpose(k);
            let mut scores = tape.matmul(q, kt);
            scores = tape.scale(scores, scale);
            if let Some(m) = key_mask {
                scores = tape.add(scores, m);
            }
            let attn = tape.softmax(scores, 1);
            maps.push(attn);
            heads.push(tape.matmul(attn, v));
        }
        windows.push(tape.concat_cols(&heads));
    }
    let merged = tape.concat0(&windows);
    Ok((w.proj.forward(tape, store, merged), maps))
}

/// Multi-head self-attention applied independently within each window of
/// `cfg.window` consecutive tokens. `pad` marks positions excluded as keys.
pub fn lw_msa(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    cfg: &AttentionConfig,
    w: &MsaWeights,
    pad: Option<&[bool]>,
) -> Result<Var> {
    lw_msa_with_maps(tape, store, x, cfg, w, pad).map(|(y, _)| y)
}

/// Row permutation with `out[i] = x[(i + shift) mod L]`.
pub fn roll_indices(len: usize, shift: usize) -> Vec<usize> {
    (0..len).map(|i| (i + shift) % len).collect()
}

/// Inverse of [`roll_indices`].
pub fn unroll_indices(len: usize, shift: usize) -> Vec<usize> {
    (0..len).map(|i| (i + len - shift % len) % len).collect()
}

/// `unroll(lw_msa(roll(x, ⌊S/2⌋)), ⌊S/2⌋)`.
pub fn slw_msa(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    cfg: &AttentionConfig,
    w: &MsaWeights,
    pad: Option<&[bool]>,
) -> Result<Var> {
    let len = check_tokens(tape, x, cfg)?;
    let fwd = roll_indices(len, cfg.shift());
    let rolled = tape.gather_rows(x, &fwd);
    let rolled_pad: Option<Vec<bool>> = pad.map(|p| fwd.iter().map(|&i| p[i]).collect());
    let y = lw_msa(tape, store, rolled, cfg, w, rolled_pad.as_deref())?;
    Ok(tape.gather_rows(y, &unroll_indices(len, cfg.shift())))
}

#[derive(Debug, Clone, Copy)]
pub struct BlockWeights {
    pub norm1: LayerNorm,
    pub attn: MsaWeights,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BlockWeights {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, seed: u64) -> Result<Self> {
        let hidden = cfg.mlp_ratio * cfg.dim;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.dim),
            attn: MsaWeights::new(store, &format!("{name}.attn"), cfg.dim, derive_seed(seed, &[0]))?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), cfg.dim, hidden, derive_seed(seed, &[1]))?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, cfg.dim, derive_seed(seed, &[2]))?,
        })
    }
}

/// Pre-norm residual block: `x + MSA(LN(x))`, then `+ MLP(LN(·))` with GELU.
pub fn transformer_block(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    cfg: &AttentionConfig,
    w: &BlockWeights,
    shifted: bool,
    pad: Option<&[bool]>,
) -> Result<Var> {
    let h = w.norm1.forward(tape, store, x);
    let a = if shifted {
        slw_msa(tape, store, h, cfg, &w.attn, pad)?
    } else {
        lw_msa(tape, store, h, cfg, &w.attn, pad)?
    };
    let x1 = tape.add(x, a);
    let h2 = w.norm2.forward(tape, store, x1);
    let m = w.fc1.forward(tape, store, h2);
    let m = tape.gelu(m);
    let m = w.fc2.forward(tape, store, m);
    Ok(tape.add(x1, m))
}

/// Alternating LW/SLW blocks followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct SwVit {
    pub cfg: AttentionConfig,
    pub blocks: Vec<BlockWeights>,
    pub norm: LayerNorm,
}

/// Output of [`SwVit::forward_with_taps`].
#[derive(Debug, Clone)]
pub struct SwVitOutput {
    /// Final normalized tokens.
    pub tokens: Var,
    /// Raw output of every block, pads stripped.
    pub block_outputs: Vec<Var>,
}

impl SwVit {
    pub fn new(store: &mut ParamStore, name: &str, cfg: AttentionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|i| BlockWeights::new(store, &format!("{name}.blocks.{i}"), &cfg, derive_seed(seed, &[i as u64])))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), cfg.dim);
        Ok(Self { cfg, blocks, norm })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward_with_taps(tape, store, x).map(|o| o.tokens)
    }

    /// Sequences whose length is not a multiple of the window are padded with
    /// zero tokens that are masked out as attention keys and stripped again
    /// after the final norm.
    pub fn forward_with_taps(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<SwVitOutput> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.cfg.dim {
            return Err(contract(format!("SW-ViT expects [L, {}], got {s:?}", self.cfg.dim)));
        }
        let len = s[0];
        let extra = (self.cfg.window - len % self.cfg.window) % self.cfg.window;
        let (mut h, pad) = if extra > 0 {
            let zeros = tape.constant(Tensor::zeros(vec![extra, self.cfg.dim]));
            let padded = tape.concat0(&[x, zeros]);
            let mask: Vec<bool> = (0..len + extra).map(|i| i >= len).collect();
            (padded, Some(mask))
        } else {
            (x, None)
        };
        let keep: Vec<usize> = (0..len).collect();
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            h = transformer_block(tape, store, h, &self.cfg, block, i % 2 == 1, pad.as_deref())?;
            block_outputs.push(if extra > 0 { tape.gather_rows(h, &keep) } else { h });
        }
        let mut tokens = self.norm.forward(tape, store, h);
        if extra > 0 {
            tokens = tape.gather_rows(tokens, &keep);
        }
        Ok(SwVitOutput { tokens, block_outputs })
    }
}
