//! Model and run configuration, presets and the config-file grammar.
//!
//! A config file is TOML with three optional sections:
//!
//! ```toml
//! preset = "micro"            # nommer-t | nommer-s | nommer-b | micro
//!
//! [model]                     # overrides on top of the preset
//! image_size = 32
//! num_classes = 2
//! alpha = 0.5
//! fusion = "nominate"         # or "add"
//!
//! [stages]                    # one entry per stage
//! depths = [1, 1, 1, 1]
//! dims = [16, 32, 64, 128]
//! heads = [2, 2, 4, 8]
//! windows = [4, 4]            # S-NomMer stages only
//! ksize = [4, 2]              # S-NomMer stages only
//! ffn_ratio = [4.0, 4.0, 4.0, 4.0]
//!
//! [train]
//! task = "stripes"            # or "quadrants"
//! steps = 500
//! ```
//!
//! Without a `preset` key every `[model]` and `[stages]` field falls back
//! to the micro configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NomError, Result};
use crate::frequency::truncated_size;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// Three aggregators plus the nominator.
    S,
    /// Global self-attention only.
    G,
}

/// How an S-NomMer layer combines its candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Nominate,
    /// Plain sum of the three candidates (ablation arm).
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub kind: BlockKind,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub window: Option<usize>,
    pub ksize: Option<usize>,
    pub ffn_ratio: f64,
}

impl StageConfig {
    pub fn ffn_hidden(&self) -> usize {
        ((self.dim as f64 * self.ffn_ratio).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    pub alpha: f64,
    pub bottleneck_reduction: usize,
    pub gumbel_temperature: f64,
    pub fusion: Fusion,
    /// Accepted and validated, not applied.
    pub drop_path: f64,
    pub stages: Vec<StageConfig>,
}

fn stages(
    depths: [usize; 4],
    dims: [usize; 4],
    heads: [usize; 4],
    window: usize,
    ksize: [usize; 2],
    ffn_ratio: f64,
) -> Vec<StageConfig> {
    (0..4)
        .map(|s| StageConfig {
            kind: if s < 2 { BlockKind::S } else { BlockKind::G },
            depth: depths[s],
            dim: dims[s],
            heads: heads[s],
            window: (s < 2).then_some(window),
            ksize: (s < 2).then(|| ksize[s]),
            ffn_ratio,
        })
        .collect()
}

impl ModelConfig {
    fn imagenet(name: &str, depths: [usize; 4], dims: [usize; 4], drop_path: f64) -> Self {
        ModelConfig {
            name: name.into(),
            image_size: 224,
            in_channels: 3,
            patch_size: 4,
            num_classes: 1000,
            alpha: 0.5,
            bottleneck_reduction: 4,
            gumbel_temperature: 1.0,
            fusion: Fusion::Nominate,
            drop_path,
            stages: stages(depths, dims, [2, 2, 4, 8], 7, [8, 4], 1.0),
        }
    }

    pub fn nommer_t() -> Self {
        Self::imagenet("nommer-t", [2, 2, 8, 2], [96, 192, 384, 768], 0.1)
    }

    pub fn nommer_s() -> Self {
        Self::imagenet("nommer-s", [6, 6, 16, 4], [96, 192, 384, 768], 0.3)
    }

    pub fn nommer_b() -> Self {
        Self::imagenet("nommer-b", [6, 6, 16, 4], [128, 256, 512, 1024], 0.5)
    }

    /// Scaled-down instance for tests and toy training on 32×32 inputs.
    pub fn micro() -> Self {
        ModelConfig {
            name: "micro".into(),
            image_size: 32,
            in_channels: 3,
            patch_size: 4,
            num_classes: 2,
            alpha: 0.5,
            bottleneck_reduction: 4,
            gumbel_temperature: 1.0,
            fusion: Fusion::Nominate,
            drop_path: 0.0,
            stages: stages(
                [1, 1, 1, 1],
                [16, 32, 64, 128],
                [2, 2, 4, 8],
                4,
                [4, 2],
                4.0,
            ),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "nommer-t" | "tiny" => Ok(Self::nommer_t()),
            "nommer-s" | "small" => Ok(Self::nommer_s()),
            "nommer-b" | "base" => Ok(Self::nommer_b()),
            "micro" | "nommer-micro" => Ok(Self::micro()),
            other => Err(NomError::config(
                "preset",
                format!("unknown preset `{other}` (nommer-t, nommer-s, nommer-b, micro)"),
            )),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.stages[0].dim
    }

    /// Token grid side after patch embedding.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Grid side of each stage.
    pub fn stage_grids(&self) -> Vec<usize> {
        (0..self.stages.len()).map(|s| self.grid() >> s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: String, msg: String| Err(NomError::config(field, msg));
        if self.stages.len() != 4 {
            return err(
                "stages".into(),
                format!("expected 4 stages, got {}", self.stages.len()),
            );
        }
        if self.in_channels != 3 {
            return err("in_channels".into(), "images must have 3 channels".into());
        }
        if self.patch_size == 0 {
            return err("patch_size".into(), "must be >= 1".into());
        }
        let stride = self.patch_size << (self.stages.len() - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(stride) {
            return err(
                "image_size".into(),
                format!("{} is not a multiple of {stride}", self.image_size),
            );
        }
        if self.num_classes == 0 {
            return err("num_classes".into(), "must be >= 1".into());
        }
        if let Err(e) = truncated_size(8, self.alpha) {
            return err("alpha".into(), e.to_string());
        }
        if !(self.gumbel_temperature > 0.0 && self.gumbel_temperature.is_finite()) {
            return err("gumbel_temperature".into(), "must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return err("drop_path".into(), "must lie in [0, 1)".into());
        }
        if self.bottleneck_reduction == 0 {
            return err("bottleneck_reduction".into(), "must be >= 1".into());
        }
        for (s, st) in self.stages.iter().enumerate() {
            let field = |name: &str| format!("stages[{s}].{name}");
            let expect_kind = if s < 2 { BlockKind::S } else { BlockKind::G };
            if st.kind != expect_kind {
                return err(
                    field("kind"),
                    "stages 1-2 must be S-NomMer and stages 3-4 G-NomMer".into(),
                );
            }
            if st.depth == 0 {
                return err(field("depth"), "must be >= 1".into());
            }
            if s > 0 && st.dim != 2 * self.stages[s - 1].dim {
                return err(
                    field("dim"),
                    format!(
                        "must double the previous stage ({})",
                        self.stages[s - 1].dim
                    ),
                );
            }
            if st.dim == 0 || st.heads == 0 || st.dim % st.heads != 0 {
                return err(
                    field("heads"),
                    format!("dim {} is not divisible by {} heads", st.dim, st.heads),
                );
            }
            if !(st.ffn_ratio > 0.0 && st.ffn_ratio.is_finite()) {
                return err(field("ffn_ratio"), "must be > 0".into());
            }
            match st.kind {
                BlockKind::S => {
                    match st.window {
                        Some(m) if m > 0 => {}
                        _ => return err(field("window"), "S-NomMer stages need a window".into()),
                    }
                    match st.ksize {
                        Some(n) if n > 0 => {}
                        _ => return err(field("ksize"), "S-NomMer stages need a DCT size".into()),
                    }
                    if st.dim % self.bottleneck_reduction != 0 {
                        return err(
                            "bottleneck_reduction".into(),
                            format!("does not divide stage dim {}", st.dim),
                        );
                    }
                }
                BlockKind::G => {
                    if st.window.is_some() || st.ksize.is_some() {
                        return err(
                            field("window"),
                            "G-NomMer stages take no window or DCT size".into(),
                        );
                    }
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML serialisation.
    pub fn digest(&self) -> [u8; 32] {
        let text = toml::to_string(self).expect("config serialises");
        Sha256::digest(text.as_bytes()).into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Horizontal vs vertical stripes, 2 classes.
    #[default]
    Stripes,
    /// Brightest quadrant, 4 classes.
    Quadrants,
}

impl Task {
    pub fn num_classes(&self) -> usize {
        match self {
            Task::Stripes => 2,
            Task::Quadrants => 4,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(Task::Stripes),
            "quadrants" | "quadrant" => Ok(Task::Quadrants),
            other => Err(NomError::config(
                "task",
                format!("unknown task `{other}` (stripes, quadrants)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Probe images for the CKA command.
    pub probes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Stripes,
            steps: 500,
            batch_size: 8,
            lr: 2e-3,
            grad_clip: 1.0,
            probes: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawFile {
    preset: Option<String>,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    stages: RawStages,
    #[serde(default)]
    train: RawTrain,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: Option<String>,
    image_size: Option<usize>,
    patch_size: Option<usize>,
    num_classes: Option<usize>,
    alpha: Option<f64>,
    bottleneck_reduction: Option<usize>,
    gumbel_temperature: Option<f64>,
    fusion: Option<Fusion>,
    drop_path: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawStages {
    depths: Option<Vec<usize>>,
    dims: Option<Vec<usize>>,
    heads: Option<Vec<usize>>,
    windows: Option<Vec<usize>>,
    ksize: Option<Vec<usize>>,
    ffn_ratio: Option<Vec<f64>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    task: Option<Task>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    grad_clip: Option<f64>,
    probes: Option<usize>,
}

fn per_stage<T: Copy>(
    name: &str,
    values: Option<Vec<T>>,
    expect: usize,
    mut apply: impl FnMut(usize, T),
) -> Result<()> {
    if let Some(v) = values {
        if v.len() != expect {
            return Err(NomError::config(
                format!("stages.{name}"),
                format!("expected {expect} entries, got {}", v.len()),
            ));
        }
        for (i, x) in v.into_iter().enumerate() {
            apply(i, x);
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawFile = toml::from_str(text)
            .map_err(|e| NomError::config("config", e.message().to_string()))?;
        let mut m = match &raw.preset {
            Some(p) => ModelConfig::preset(p)?,
            None => ModelConfig::micro(),
        };
        let r = raw.model;
        if let Some(v) = r.name {
            m.name = v;
        }
        if let Some(v) = r.image_size {
            m.image_size = v;
        }
        if let Some(v) = r.patch_size {
            m.patch_size = v;
        }
        if let Some(v) = r.num_classes {
            m.num_classes = v;
        }
        if let Some(v) = r.alpha {
            m.alpha = v;
        }
        if let Some(v) = r.bottleneck_reduction {
            m.bottleneck_reduction = v;
        }
        if let Some(v) = r.gumbel_temperature {
            m.gumbel_temperature = v;
        }
        if let Some(v) = r.fusion {
            m.fusion = v;
        }
        if let Some(v) = r.drop_path {
            m.drop_path = v;
        }

        let s = raw.stages;
        let st = &mut m.stages;
        per_stage("depths", s.depths, 4, |i, v| st[i].depth = v)?;
        per_stage("dims", s.dims, 4, |i, v| st[i].dim = v)?;
        per_stage("heads", s.heads, 4, |i, v| st[i].heads = v)?;
        per_stage("windows", s.windows, 2, |i, v| st[i].window = Some(v))?;
        per_stage("ksize", s.ksize, 2, |i, v| st[i].ksize = Some(v))?;
        per_stage("ffn_ratio", s.ffn_ratio, 4, |i, v| st[i].ffn_ratio = v)?;

        let mut train = TrainConfig::default();
        let t = raw.train;
        if let Some(v) = t.task {
            train.task = v;
        }
        if let Some(v) = t.steps {
            train.steps = v;
        }
        if let Some(v) = t.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = t.lr {
            train.lr = v;
        }
        if let Some(v) = t.grad_clip {
            train.grad_clip = v;
        }
        if let Some(v) = t.probes {
            train.probes = v;
        }
        if train.batch_size == 0 {
            return Err(NomError::config("train.batch_size", "must be >= 1"));
        }
        if !(train.lr > 0.0 && train.lr.is_finite()) {
            return Err(NomError::config("train.lr", "must be > 0"));
        }
        if !(train.grad_clip >= 0.0 && train.grad_clip.is_finite()) {
            return Err(NomError::config("train.grad_clip", "must be >= 0"));
        }

        m.validate()?;
        Ok(RunConfig { model: m, train })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NomError::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in ["nommer-t", "nommer-s", "nommer-b", "micro"] {
            ModelConfig::preset(p).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("huge").is_err());
    }

    #[test]
    fn tiny_matches_architecture_table() {
        let t = ModelConfig::nommer_t();
        assert_eq!(t.stage_grids(), vec![56, 28, 14, 7]);
        let dims: Vec<_> = t.stages.iter().map(|s| s.dim).collect();
        assert_eq!(dims, vec![96, 192, 384, 768]);
        let depths: Vec<_> = t.stages.iter().map(|s| s.depth).collect();
        assert_eq!(depths, vec![2, 2, 8, 2]);
        assert_eq!(t.stages[0].ksize, Some(8));
        assert_eq!(t.stages[1].ksize, Some(4));
        assert_eq!(t.stages[2].ksize, None);
    }

    #[test]
    fn file_overrides_preset() {
        let cfg = RunConfig::from_toml(
            r#"
            preset = "micro"
            [model]
            num_classes = 4
            fusion = "add"
            [stages]
            depths = [1, 2, 1, 1]
            [train]
            task = "quadrants"
            steps = 10
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model.num_classes, 4);
        assert_eq!(cfg.model.fusion, Fusion::Add);
        assert_eq!(cfg.model.stages[1].depth, 2);
        assert_eq!(cfg.train.task, Task::Quadrants);
        assert_eq!(cfg.train.steps, 10);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cases = [
            ("[stages]\ndims = [16, 30, 64, 128]", "stages[1].dim"),
            ("[stages]\nheads = [3, 2, 4, 8]", "stages[0].heads"),
            ("[model]\nimage_size = 30", "image_size"),
            ("[model]\nalpha = 0.0", "alpha"),
            ("[stages]\ndepths = [1, 1]", "stages.depths"),
            ("[model]\nbogus = 1", "config"),
            ("preset = \"nope\"", "preset"),
        ];
        for (text, field) in cases {
            match RunConfig::from_toml(text) {
                Err(NomError::Config { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn digest_tracks_content() {
        let a = ModelConfig::micro();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.num_classes = 3;
        assert_ne!(a.digest(), b.digest());
    }
}
