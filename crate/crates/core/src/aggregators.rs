//! The three candidate-context producers of an S-NomMer layer.
//!
//! * [`cgca_forward`]: compressed global context through the block DCT.
//! * [`lca_cnn_forward`]: a `1×1 → 3×3 → 1×1` convolutional bottleneck.
//! * [`lca_wmsa_forward`]: window attention.
//!
//! Each maps `[D, D, C]` to `[D, D, C]`.

use rand::Rng;

use crate::attention::{self, AttentionConfig};
use crate::autograd::Var;
use crate::error::{NomError, Result};
use crate::frequency::{
    dct2_blocks, idct2_blocks, merge_var, partition_var, truncate_var, truncated_size, DctBasis,
};
use crate::params::{init_conv, init_linear, linear, ParamStore};

#[derive(Clone, Debug)]
pub struct CgcaConfig {
    pub dim: usize,
    /// DCT block size `N`.
    pub block: usize,
    pub alpha: f64,
    pub heads: usize,
    /// Width of the compressed tokens; the model uses `dim`.
    pub compressed_dim: usize,
    /// Skips G-MHSA (identity on the compressed grid). Test mode only.
    pub bypass_attention: bool,
}

impl CgcaConfig {
    pub fn new(dim: usize, block: usize, alpha: f64, heads: usize) -> Result<Self> {
        let cfg = CgcaConfig {
            dim,
            block,
            alpha,
            heads,
            compressed_dim: dim,
            bypass_attention: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block == 0 {
            return Err(NomError::config("ksize", "DCT block size must be >= 1"));
        }
        truncated_size(self.block, self.alpha)
            .map_err(|e| NomError::config("alpha", e.to_string()))?;
        AttentionConfig::new(self.compressed_dim, self.heads)
            .map_err(|e| NomError::config("heads", e.to_string()))?;
        Ok(())
    }

    /// Kept frequencies per block side, `l`.
    pub fn keep(&self) -> usize {
        truncated_size(self.block, self.alpha).expect("validated")
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            dim: self.compressed_dim,
            heads: self.heads,
        }
    }

    fn flat_in(&self) -> usize {
        self.keep() * self.keep() * self.dim
    }

    fn flat_out(&self) -> usize {
        self.block * self.block * self.dim
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        init_linear(
            store,
            &format!("{prefix}.compress"),
            self.flat_in(),
            self.compressed_dim,
            rng,
        );
        if !self.bypass_attention {
            self.attention().init(store, &format!("{prefix}.attn"), rng);
        }
        init_linear(
            store,
            &format!("{prefix}.expand"),
            self.compressed_dim,
            self.flat_out(),
            rng,
        );
    }

    pub fn param_count(&self) -> usize {
        let cc = self.compressed_dim;
        let attn = if self.bypass_attention {
            0
        } else {
            self.attention().param_count()
        };
        self.flat_in() * cc + cc + attn + cc * self.flat_out() + self.flat_out()
    }
}

fn check_channels(x: &Var, dim: usize, op: &'static str) -> Result<()> {
    let s = x.shape();
    if s.len() != 3 || s[2] != dim {
        return Err(NomError::invalid_shape(
            op,
            format!("expected [H, W, {dim}], got {s:?}"),
        ));
    }
    Ok(())
}

/// Compressed global context aggregation, returning `F^(G)`.
pub fn cgca_forward(x: &Var, cfg: &CgcaConfig, store: &ParamStore, prefix: &str) -> Result<Var> {
    check_channels(x, cfg.dim, "cgca")?;
    let basis = DctBasis::new(cfg.block)?;
    let (n, l, c) = (cfg.block, cfg.keep(), cfg.dim);

    let (blocks, layout) = partition_var(x, n)?;
    let nb = layout.num_blocks();
    let low = truncate_var(&dct2_blocks(&blocks, &basis)?, l)?.reshape(&[nb, l * l * c])?;
    let compressed = linear(&low, store, &format!("{prefix}.compress"))?;
    let mixed = if cfg.bypass_attention {
        compressed
    } else {
        attention::mhsa(
            &compressed,
            &cfg.attention(),
            store,
            &format!("{prefix}.attn"),
        )?
    };
    let expanded = linear(&mixed, store, &format!("{prefix}.expand"))?.reshape(&[nb, n, n, c])?;
    merge_var(&idct2_blocks(&expanded, &basis)?, &layout)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    /// Linear pass-through, for identity-composition tests.
    Identity,
}

#[derive(Clone, Copy, Debug)]
pub struct BottleneckConfig {
    pub dim: usize,
    pub reduction: usize,
    pub activation: Activation,
}

impl BottleneckConfig {
    pub fn new(dim: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !dim.is_multiple_of(reduction) {
            return Err(NomError::config(
                "bottleneck",
                format!("dim {dim} is not divisible by reduction {reduction}"),
            ));
        }
        Ok(BottleneckConfig {
            dim,
            reduction,
            activation: Activation::Gelu,
        })
    }

    pub fn hidden(&self) -> usize {
        self.dim / self.reduction
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        let (c, h) = (self.dim, self.hidden());
        init_conv(store, &format!("{prefix}.reduce"), 1, c, h, rng);
        init_conv(store, &format!("{prefix}.spatial"), 3, h, h, rng);
        init_conv(store, &format!("{prefix}.restore"), 1, h, c, rng);
    }

    pub fn param_count(&self) -> usize {
        let (c, h) = (self.dim, self.hidden());
        (c * h + h) + (9 * h * h + h) + (h * c + c)
    }
}

fn conv(x: &Var, store: &ParamStore, prefix: &str, padding: usize) -> Result<Var> {
    x.conv2d(
        store.get(&format!("{prefix}.weight"))?,
        Some(store.get(&format!("{prefix}.bias"))?),
        1,
        padding,
    )
}

/// Convolutional bottleneck, returning `F^(C)`.
pub fn lca_cnn_forward(
    x: &Var,
    cfg: &BottleneckConfig,
    store: &ParamStore,
    prefix: &str,
) -> Result<Var> {
    check_channels(x, cfg.dim, "bottleneck")?;
    let act = |v: Var| match cfg.activation {
        Activation::Gelu => v.gelu(),
        Activation::Identity => v,
    };
    let h = act(conv(x, store, &format!("{prefix}.reduce"), 0)?);
    let h = act(conv(&h, store, &format!("{prefix}.spatial"), 1)?);
    conv(&h, store, &format!("{prefix}.restore"), 0)
}

/// Window attention, returning `F^(L)`.
pub fn lca_wmsa_forward(
    x: &Var,
    cfg: &AttentionConfig,
    window: usize,
    store: &ParamStore,
    prefix: &str,
) -> Result<Var> {
    check_channels(x, cfg.dim, "lca_wmsa")?;
    attention::wmsa(x, cfg, window, store, prefix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_map(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
    }

    #[test]
    fn cgca_shapes_and_finiteness() {
        let cfg = CgcaConfig::new(4, 4, 0.5, 2).unwrap();
        assert_eq!(cfg.keep(), 2);
        let mut store = ParamStore::new();
        cfg.init(&mut store, "g", &mut rng(1));
        assert_eq!(store.num_scalars(), cfg.param_count());
        let x = Var::constant(rand_map(&[8, 8, 4], 2));
        let y = cgca_forward(&x, &cfg, &store, "g").unwrap();
        assert_eq!(y.shape(), &[8, 8, 4]);
        assert!(y.value().is_finite());

        let odd = Var::constant(rand_map(&[7, 7, 4], 3));
        assert_eq!(
            cgca_forward(&odd, &cfg, &store, "g").unwrap().shape(),
            &[7, 7, 4]
        );
    }

    #[test]
    fn cgca_zero_in_zero_out() {
        let cfg = CgcaConfig::new(4, 4, 0.5, 2).unwrap();
        let mut store = ParamStore::new();
        cfg.init(&mut store, "g", &mut rng(4));
        let y = cgca_forward(&Var::constant(Tensor::zeros(&[8, 8, 4])), &cfg, &store, "g").unwrap();
        assert_eq!(y.value().max_abs(), 0.0);
    }

    #[test]
    fn cgca_with_isometries_is_identity() {
        let mut cfg = CgcaConfig::new(3, 4, 1.0, 1).unwrap();
        cfg.compressed_dim = 48;
        cfg.bypass_attention = true;
        cfg.validate().unwrap();
        let mut store = ParamStore::new();
        cfg.init(&mut store, "g", &mut rng(5));
        store
            .set_value("g.compress.weight", Tensor::eye(48))
            .unwrap();
        store.set_value("g.expand.weight", Tensor::eye(48)).unwrap();
        let x = rand_map(&[8, 12, 3], 6);
        let y = cgca_forward(&Var::constant(x.clone()), &cfg, &store, "g").unwrap();
        assert!(y.value().max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn cgca_gradient() {
        let cfg = CgcaConfig::new(4, 4, 0.5, 2).unwrap();
        let mut store = ParamStore::new();
        cfg.init(&mut store, "g", &mut rng(7));
        let w = Var::constant(rand_map(&[8, 8, 4], 8));
        let mut inputs = vec![rand_map(&[8, 8, 4], 9)];
        inputs.extend(store.values());
        let check = GradCheckConfig {
            max_coords: Some(40),
            ..Default::default()
        };
        let r = grad_check(
            |v| {
                let s = store.rebind(&v[1..])?;
                Ok(cgca_forward(&v[0], &cfg, &s, "g")?.mul(&w)?.sum())
            },
            &inputs,
            &check,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    fn identity_bottleneck(c: usize) -> (BottleneckConfig, ParamStore) {
        let mut cfg = BottleneckConfig::new(c, 1).unwrap();
        cfg.activation = Activation::Identity;
        let mut store = ParamStore::new();
        cfg.init(&mut store, "b", &mut rng(10));
        let id1 = Tensor::eye(c).reshape(&[1, 1, c, c]).unwrap();
        let mut id3 = Tensor::zeros(&[3, 3, c, c]);
        for i in 0..c {
            id3.set(&[1, 1, i, i], 1.0);
        }
        store.set_value("b.reduce.weight", id1.clone()).unwrap();
        store.set_value("b.spatial.weight", id3).unwrap();
        store.set_value("b.restore.weight", id1).unwrap();
        (cfg, store)
    }

    #[test]
    fn bottleneck_identity_composition() {
        let (cfg, store) = identity_bottleneck(3);
        let x = rand_map(&[5, 6, 3], 11);
        let y = lca_cnn_forward(&Var::constant(x.clone()), &cfg, &store, "b").unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn bottleneck_shapes_and_receptive_field() {
        let cfg = BottleneckConfig::new(8, 4).unwrap();
        assert_eq!(cfg.hidden(), 2);
        let mut store = ParamStore::new();
        cfg.init(&mut store, "b", &mut rng(12));
        assert_eq!(store.num_scalars(), cfg.param_count());
        for d in [7, 8, 14] {
            let x = Var::constant(rand_map(&[d, d, 8], d as u64));
            assert_eq!(
                lca_cnn_forward(&x, &cfg, &store, "b").unwrap().shape(),
                &[d, d, 8]
            );
        }

        let x = rand_map(&[8, 8, 8], 13);
        let mut bumped = x.clone();
        let (pr, pc): (usize, usize) = (3, 5);
        bumped.set(&[pr, pc, 2], x.at(&[pr, pc, 2]) + 1.0);
        let y0 = lca_cnn_forward(&Var::constant(x), &cfg, &store, "b").unwrap();
        let y1 = lca_cnn_forward(&Var::constant(bumped), &cfg, &store, "b").unwrap();
        for r in 0usize..8 {
            for c in 0usize..8 {
                let near = r.abs_diff(pr) <= 1 && c.abs_diff(pc) <= 1;
                let moved =
                    (0..8).any(|ch| y0.value().at(&[r, c, ch]) != y1.value().at(&[r, c, ch]));
                assert_eq!(moved, near, "({r}, {c})");
            }
        }
    }

    #[test]
    fn bottleneck_channel_mismatch() {
        let cfg = BottleneckConfig::new(8, 4).unwrap();
        let mut store = ParamStore::new();
        cfg.init(&mut store, "b", &mut rng(14));
        let x = Var::constant(Tensor::zeros(&[4, 4, 6]));
        assert!(lca_cnn_forward(&x, &cfg, &store, "b").is_err());
        assert!(BottleneckConfig::new(6, 4).is_err());
    }

    #[test]
    fn candidates_share_shape_and_single_window_is_global() {
        let att = AttentionConfig::new(4, 2).unwrap();
        let mut store = ParamStore::new();
        attention::init_wmsa(&att, 4, &mut store, "l", &mut rng(15));
        store
            .set_value("l.rel_bias", Tensor::zeros(&[49, 2]))
            .unwrap();
        let cg = CgcaConfig::new(4, 2, 0.5, 2).unwrap();
        cg.init(&mut store, "g", &mut rng(16));
        let bn = BottleneckConfig::new(4, 4).unwrap();
        bn.init(&mut store, "c", &mut rng(17));

        let x = rand_map(&[4, 4, 4], 18);
        let xv = Var::constant(x.clone());
        let fl = lca_wmsa_forward(&xv, &att, 4, &store, "l").unwrap();
        let fc = lca_cnn_forward(&xv, &bn, &store, "c").unwrap();
        let fg = cgca_forward(&xv, &cg, &store, "g").unwrap();
        assert_eq!(fl.shape(), fc.shape());
        assert_eq!(fc.shape(), fg.shape());

        let tokens = Var::constant(x.reshape(&[16, 4]).unwrap());
        let global = attention::mhsa(&tokens, &att, &store, "l").unwrap();
        assert_eq!(fl.value().data(), global.value().data());
    }

    #[test]
    fn bottleneck_gradient() {
        let cfg = BottleneckConfig::new(4, 2).unwrap();
        let mut store = ParamStore::new();
        cfg.init(&mut store, "b", &mut rng(19));
        let w = Var::constant(rand_map(&[5, 5, 4], 20));
        let mut inputs = vec![rand_map(&[5, 5, 4], 21)];
        inputs.extend(store.values());
        let r = grad_check(
            |v| {
                let s = store.rebind(&v[1..])?;
                Ok(lca_cnn_forward(&v[0], &cfg, &s, "b")?.mul(&w)?.sum())
            },
            &inputs,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
