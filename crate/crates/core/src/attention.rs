//! Multi-head self-attention, global and windowed.
//!
//! Both forms share one kernel over a batch of token sets `[B, T, C]`:
//! a fused `qkv` projection, per-head scaled dot products, an optional
//! additive logit bias, a row softmax and the output projection.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{NomError, Result};
use crate::frequency::{merge_var, partition_var, BlockLayout};
use crate::params::{init_linear, linear, ParamStore, INIT_STD};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
            return Err(NomError::InvalidArgument(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(AttentionConfig { dim, heads })
    }

    pub fn key_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Registers `{prefix}.qkv` (`C → 3C`) and `{prefix}.proj` (`C → C`).
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        init_linear(store, &format!("{prefix}.qkv"), self.dim, 3 * self.dim, rng);
        init_linear(store, &format!("{prefix}.proj"), self.dim, self.dim, rng);
    }

    pub fn param_count(&self) -> usize {
        4 * self.dim * self.dim + 4 * self.dim
    }
}

/// Output tokens plus the attention weights `[B, h, T, T]`.
pub struct Attended {
    pub output: Var,
    pub weights: Tensor,
}

fn attend(
    x: &Var,
    cfg: &AttentionConfig,
    store: &ParamStore,
    prefix: &str,
    bias: Option<&Var>,
) -> Result<Attended> {
    let s = x.shape().to_vec();
    if s.len() != 3 || s[2] != cfg.dim {
        return Err(NomError::invalid_shape(
            "mhsa",
            format!("expected [B, T, {}], got {s:?}", cfg.dim),
        ));
    }
    let (b, t, c) = (s[0], s[1], s[2]);
    let (h, dk) = (cfg.heads, cfg.key_dim());

    let qkv = linear(&x.reshape(&[b * t, c])?, store, &format!("{prefix}.qkv"))?
        .reshape(&[b, t, 3, h, dk])?
        .permute(&[2, 0, 3, 1, 4])?;
    let part = |i| -> Result<Var> { qkv.slice(0, i, 1)?.reshape(&[b * h, t, dk]) };
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);

    let mut logits = q.bmm_nt(&k)?.scale(1.0 / (dk as f64).sqrt());
    if let Some(bias) = bias {
        logits = logits.add(bias)?;
    }
    let attn = logits.softmax(2)?;
    let weights = attn.value().reshape(&[b, h, t, t])?;
    let heads = attn
        .bmm(&v)?
        .reshape(&[b, h, t, dk])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * t, c])?;
    let output = linear(&heads, store, &format!("{prefix}.proj"))?.reshape(&[b, t, c])?;
    Ok(Attended { output, weights })
}

/// Global self-attention over a `[T, C]` token matrix.
pub fn mhsa(x: &Var, cfg: &AttentionConfig, store: &ParamStore, prefix: &str) -> Result<Var> {
    Ok(mhsa_with_weights(x, cfg, store, prefix)?.output)
}

pub fn mhsa_with_weights(
    x: &Var,
    cfg: &AttentionConfig,
    store: &ParamStore,
    prefix: &str,
) -> Result<Attended> {
    let s = x.shape().to_vec();
    if s.len() != 2 {
        return Err(NomError::invalid_shape(
            "mhsa",
            format!("expected [T, {}], got {s:?}", cfg.dim),
        ));
    }
    let a = attend(&x.reshape(&[1, s[0], s[1]])?, cfg, store, prefix, None)?;
    Ok(Attended {
        output: a.output.reshape(&s)?,
        weights: a.weights,
    })
}

/// A map cut into `M × M` windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub window: usize,
    pub grid: BlockLayout,
}

impl WindowLayout {
    pub fn new(height: usize, width: usize, window: usize) -> Result<Self> {
        Ok(WindowLayout {
            window,
            grid: BlockLayout::new(height, width, window)?,
        })
    }

    pub fn num_windows(&self) -> usize {
        self.grid.num_blocks()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    /// Shape of the relative position bias table.
    pub fn bias_table_shape(&self, heads: usize) -> [usize; 2] {
        let span = 2 * self.window - 1;
        [span * span, heads]
    }
}

/// Table row for every ordered token pair of an `M × M` window, flattened
/// `[M², M²]`. Tokens are numbered row-major inside the window.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let t = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / window, i % window);
        for j in 0..t {
            let (yj, xj) = (j / window, j % window);
            let dy = yi + window - 1 - yj;
            let dx = xi + window - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// `[H, W, C]` → `[windows, M², C]`, reflect-padding to a multiple of `M`.
pub fn window_partition(x: &Var, window: usize) -> Result<(Var, WindowLayout)> {
    let (blocks, grid) = partition_var(x, window)?;
    let c = blocks.shape()[3];
    let tokens = blocks.reshape(&[grid.num_blocks(), window * window, c])?;
    Ok((tokens, WindowLayout { window, grid }))
}

/// Inverse of [`window_partition`], cropping any padding.
pub fn window_reverse(windows: &Var, layout: &WindowLayout) -> Result<Var> {
    let s = windows.shape().to_vec();
    if s.len() != 3 || s[0] != layout.num_windows() || s[1] != layout.tokens_per_window() {
        return Err(NomError::invalid_shape(
            "window_reverse",
            format!(
                "expected [{}, {}, C], got {s:?}",
                layout.num_windows(),
                layout.tokens_per_window()
            ),
        ));
    }
    let m = layout.window;
    merge_var(&windows.reshape(&[s[0], m, m, s[2]])?, &layout.grid)
}

/// Registers the attention projections and `{prefix}.rel_bias`.
pub fn init_wmsa<R: Rng + ?Sized>(
    cfg: &AttentionConfig,
    window: usize,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut R,
) {
    cfg.init(store, prefix, rng);
    let span = 2 * window - 1;
    store.insert(
        format!("{prefix}.rel_bias"),
        Tensor::trunc_normal(&[span * span, cfg.heads], INIT_STD, rng),
    );
}

pub fn wmsa_param_count(cfg: &AttentionConfig, window: usize) -> usize {
    let span = 2 * window - 1;
    cfg.param_count() + span * span * cfg.heads
}

fn window_bias(table: &Var, window: usize, windows: usize, heads: usize) -> Result<Var> {
    let t = window * window;
    let rel = relative_position_index(window);
    let mut idx = Vec::with_capacity(windows * heads * t * t);
    for _ in 0..windows {
        for head in 0..heads {
            idx.extend(rel.iter().map(|&r| r * heads + head));
        }
    }
    let idx: Rc<[usize]> = idx.into();
    table.gather(idx, &[windows * heads, t, t])
}

/// Window attention on a `[H, W, C]` map with relative position bias.
pub fn wmsa(
    x: &Var,
    cfg: &AttentionConfig,
    window: usize,
    store: &ParamStore,
    prefix: &str,
) -> Result<Var> {
    Ok(wmsa_with_weights(x, cfg, window, store, prefix)?.output)
}

pub fn wmsa_with_weights(
    x: &Var,
    cfg: &AttentionConfig,
    window: usize,
    store: &ParamStore,
    prefix: &str,
) -> Result<Attended> {
    let (tokens, layout) = window_partition(x, window)?;
    let table = store.get(&format!("{prefix}.rel_bias"))?;
    let expect = layout.bias_table_shape(cfg.heads);
    if table.shape() != expect {
        return Err(NomError::shape("wmsa bias table", table.shape(), &expect));
    }
    let bias = window_bias(table, window, layout.num_windows(), cfg.heads)?;
    let a = attend(&tokens, cfg, store, prefix, Some(&bias))?;
    Ok(Attended {
        output: window_reverse(&a.output, &layout)?,
        weights: a.weights,
    })
}
