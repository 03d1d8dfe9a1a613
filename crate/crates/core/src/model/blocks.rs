use rand::{Rng, RngCore};

use crate::aggregators::{
    cgca_forward, lca_cnn_forward, lca_wmsa_forward, BottleneckConfig, CgcaConfig,
};
use crate::attention::{self, AttentionConfig};
use crate::autograd::Var;
use crate::error::{NomError, Result};
use crate::model::config::{Fusion, ModelConfig, StageConfig};
use crate::nominator::{
    gumbel_noise, init_scn, scn_forward, CandidateSet, GumbelParams, NominationMap, NominationMode,
};
use crate::params::{init_conv, init_linear, init_norm, linear, norm, ParamStore};

/// Applies a token-wise op to a `[H, W, C]` map through its `[H·W, C]` view.
fn tokenwise(x: &Var, f: impl FnOnce(&Var) -> Result<Var>) -> Result<Var> {
    let s = x.shape().to_vec();
    f(&x.reshape(&[s[0] * s[1], s[2]])?)?.reshape(&s)
}

#[derive(Clone, Copy, Debug)]
pub struct FfnConfig {
    pub dim: usize,
    pub hidden: usize,
}

impl FfnConfig {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        init_linear(store, &format!("{prefix}.fc1"), self.dim, self.hidden, rng);
        init_linear(store, &format!("{prefix}.fc2"), self.hidden, self.dim, rng);
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim * self.hidden + self.hidden + self.dim
    }

    /// `fc2(gelu(fc1(x)))` on `[T, C]` tokens.
    pub fn forward(&self, x: &Var, store: &ParamStore, prefix: &str) -> Result<Var> {
        let h = linear(x, store, &format!("{prefix}.fc1"))?.gelu();
        linear(&h, store, &format!("{prefix}.fc2"))
    }
}

#[derive(Clone, Debug)]
pub struct SBlockConfig {
    pub dim: usize,
    pub local: AttentionConfig,
    pub window: usize,
    pub cnn: BottleneckConfig,
    pub global: CgcaConfig,
    pub ffn: FfnConfig,
    pub fusion: Fusion,
    pub gumbel: GumbelParams,
}

impl SBlockConfig {
    pub fn from_stage(model: &ModelConfig, stage: &StageConfig) -> Result<Self> {
        let dim = stage.dim;
        let missing = |f: &str| NomError::config(f, "S-NomMer stage without it");
        Ok(SBlockConfig {
            dim,
            local: AttentionConfig::new(dim, stage.heads)?,
            window: stage.window.ok_or_else(|| missing("window"))?,
            cnn: BottleneckConfig::new(dim, model.bottleneck_reduction)?,
            global: CgcaConfig::new(
                dim,
                stage.ksize.ok_or_else(|| missing("ksize"))?,
                model.alpha,
                stage.heads,
            )?,
            ffn: FfnConfig {
                dim,
                hidden: stage.ffn_hidden(),
            },
            fusion: model.fusion,
            gumbel: GumbelParams::new(model.gumbel_temperature)?,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        init_norm(store, &format!("{prefix}.norm1"), self.dim);
        attention::init_wmsa(
            &self.local,
            self.window,
            store,
            &format!("{prefix}.local"),
            rng,
        );
        self.cnn.init(store, &format!("{prefix}.cnn"), rng);
        self.global.init(store, &format!("{prefix}.global"), rng);
        if self.fusion == Fusion::Nominate {
            init_scn(self.dim, store, &format!("{prefix}.scn"), rng);
        }
        init_norm(store, &format!("{prefix}.norm2"), self.dim);
        self.ffn.init(store, &format!("{prefix}.ffn"), rng);
    }

    pub fn param_count(&self) -> usize {
        let scn = match self.fusion {
            Fusion::Nominate => crate::nominator::scn_param_count(self.dim),
            Fusion::Add => 0,
        };
        4 * self.dim
            + attention::wmsa_param_count(&self.local, self.window)
            + self.cnn.param_count()
            + self.global.param_count()
            + scn
            + self.ffn.param_count()
    }
}

/// Output of one S-NomMer block.
pub struct SBlockOutput {
    pub output: Var,
    /// `None` under additive fusion.
    pub nomination: Option<NominationMap>,
}

/// `y = x + F^(S)(LN(x))`, then `y + FFN(LN(y))`.
pub fn s_nommer_block(
    x: &Var,
    cfg: &SBlockConfig,
    store: &ParamStore,
    prefix: &str,
    mode: NominationMode,
    rng: Option<&mut dyn RngCore>,
) -> Result<SBlockOutput> {
    let s = x.shape().to_vec();
    if s.len() != 3 || s[2] != cfg.dim {
        return Err(NomError::invalid_shape(
            "s_nommer_block",
            format!("expected [D, D, {}], got {s:?}", cfg.dim),
        ));
    }
    let n1 = tokenwise(x, |t| norm(t, store, &format!("{prefix}.norm1")))?;
    let local = lca_wmsa_forward(
        &n1,
        &cfg.local,
        cfg.window,
        store,
        &format!("{prefix}.local"),
    )?;
    let cnn = lca_cnn_forward(&n1, &cfg.cnn, store, &format!("{prefix}.cnn"))?;
    let global = cgca_forward(&n1, &cfg.global, store, &format!("{prefix}.global"))?;
    let cands = CandidateSet::new(local, cnn, global)?;

    let (fused, nomination) = match cfg.fusion {
        Fusion::Add => (cands.local.add(&cands.cnn)?.add(&cands.global)?, None),
        Fusion::Nominate => {
            let noise = match (mode, rng) {
                (NominationMode::Hard, _) | (_, None) => None,
                (_, Some(r)) => Some(gumbel_noise(&[s[0], s[1], 3], r)),
            };
            let (f, map) = scn_forward(
                &cands,
                store,
                &format!("{prefix}.scn"),
                &cfg.gumbel,
                mode,
                noise.as_ref(),
            )?;
            (f, Some(map))
        }
    };
    let y = x.add(&fused)?;
    let output = tokenwise(&y, |t| {
        let h = norm(t, store, &format!("{prefix}.norm2"))?;
        t.add(&cfg.ffn.forward(&h, store, &format!("{prefix}.ffn"))?)
    })?;
    Ok(SBlockOutput { output, nomination })
}

#[derive(Clone, Copy, Debug)]
pub struct GBlockConfig {
    pub dim: usize,
    pub attn: AttentionConfig,
    pub ffn: FfnConfig,
}

impl GBlockConfig {
    pub fn from_stage(stage: &StageConfig) -> Result<Self> {
        Ok(GBlockConfig {
            dim: stage.dim,
            attn: AttentionConfig::new(stage.dim, stage.heads)?,
            ffn: FfnConfig {
                dim: stage.dim,
                hidden: stage.ffn_hidden(),
            },
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        init_norm(store, &format!("{prefix}.norm1"), self.dim);
        self.attn.init(store, &format!("{prefix}.attn"), rng);
        init_norm(store, &format!("{prefix}.norm2"), self.dim);
        self.ffn.init(store, &format!("{prefix}.ffn"), rng);
    }

    pub fn param_count(&self) -> usize {
        4 * self.dim + self.attn.param_count() + self.ffn.param_count()
    }
}

/// Pre-LN global attention block.
pub fn g_nommer_block(
    x: &Var,
    cfg: &GBlockConfig,
    store: &ParamStore,
    prefix: &str,
) -> Result<Var> {
    let s = x.shape();
    if s.len() != 3 || s[2] != cfg.dim {
        return Err(NomError::invalid_shape(
            "g_nommer_block",
            format!("expected [D, D, {}], got {s:?}", cfg.dim),
        ));
    }
    tokenwise(x, |t| {
        let h = norm(t, store, &format!("{prefix}.norm1"))?;
        let y = t.add(&attention::mhsa(
            &h,
            &cfg.attn,
            store,
            &format!("{prefix}.attn"),
        )?)?;
        let h = norm(&y, store, &format!("{prefix}.norm2"))?;
        y.add(&cfg.ffn.forward(&h, store, &format!("{prefix}.ffn"))?)
    })
}

pub fn init_patch_embed<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut R,
) {
    init_conv(
        store,
        prefix,
        cfg.patch_size,
        cfg.in_channels,
        cfg.embed_dim(),
        rng,
    );
}

/// Non-overlapping `p × p` conv with stride `p`.
pub fn patch_embed(image: &Var, patch: usize, store: &ParamStore, prefix: &str) -> Result<Var> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(NomError::invalid_shape(
            "patch_embed",
            format!("expected an [H, W, 3] image, got {s:?}"),
        ));
    }
    if !s[0].is_multiple_of(patch) || !s[1].is_multiple_of(patch) {
        return Err(NomError::invalid_shape(
            "patch_embed",
            format!("image {}x{} is not divisible by patch {patch}", s[0], s[1]),
        ));
    }
    image.conv2d(
        store.get(&format!("{prefix}.weight"))?,
        Some(store.get(&format!("{prefix}.bias"))?),
        patch,
        0,
    )
}

pub fn init_reduction<R: Rng + ?Sized>(
    dim: usize,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut R,
) {
    init_conv(store, prefix, 3, dim, 2 * dim, rng);
}

/// `3×3` conv doubling channels, then `2×2` max pooling with stride 2.
pub fn reduction_module(x: &Var, store: &ParamStore, prefix: &str) -> Result<Var> {
    let s = x.shape();
    if s.len() != 3 || s[0] < 2 || s[1] < 2 {
        return Err(NomError::invalid_shape(
            "reduction",
            format!("need a map of at least 2x2, got {s:?}"),
        ));
    }
    x.conv2d(
        store.get(&format!("{prefix}.weight"))?,
        Some(store.get(&format!("{prefix}.bias"))?),
        1,
        1,
    )?
    .max_pool2d(2, 2)
}
