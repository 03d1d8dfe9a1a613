//! Full network: patch embedding, four stages with reductions in between,
//! and a pooled classification head.

pub mod blocks;
pub mod checkpoint;
pub mod config;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{NomError, Result};
use crate::nominator::{NominationMap, NominationMode};
use crate::params::{init_linear, init_norm, linear, norm, ParamStore};
use crate::tensor::Tensor;

use blocks::{GBlockConfig, SBlockConfig};
pub use config::{BlockKind, Fusion, ModelConfig, RunConfig, StageConfig, Task, TrainConfig};

/// Resolved per-stage block configuration.
#[derive(Clone, Debug)]
pub enum BlockPlan {
    S(SBlockConfig),
    G(GBlockConfig),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    plans: Vec<BlockPlan>,
}

/// Nomination map of one S-NomMer layer; `stage` and `layer` count from 1.
#[derive(Clone, Debug)]
pub struct LayerNomination {
    pub stage: usize,
    pub layer: usize,
    pub map: NominationMap,
}

impl LayerNomination {
    pub fn file_stem(&self) -> String {
        format!("layer_{}_{}", self.stage, self.layer)
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    pub nominations: Vec<LayerNomination>,
    /// `[D, D, C]` at the end of each stage.
    pub stage_shapes: Vec<Vec<usize>>,
    /// Every block output, in execution order.
    pub block_outputs: Vec<Tensor>,
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("stages.{stage}.blocks.{block}")
}

fn reduction_prefix(stage: usize) -> String {
    format!("stages.{stage}.reduction")
}

impl Model {
    /// Deterministic initialisation from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let plans = config
            .stages
            .iter()
            .map(|st| match st.kind {
                BlockKind::S => SBlockConfig::from_stage(&config, st).map(BlockPlan::S),
                BlockKind::G => GBlockConfig::from_stage(st).map(BlockPlan::G),
            })
            .collect::<Result<Vec<_>>>()?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        blocks::init_patch_embed(&config, &mut params, "patch_embed", &mut rng);
        for (s, (st, plan)) in config.stages.iter().zip(&plans).enumerate() {
            for b in 0..st.depth {
                let prefix = block_prefix(s, b);
                match plan {
                    BlockPlan::S(c) => c.init(&mut params, &prefix, &mut rng),
                    BlockPlan::G(c) => c.init(&mut params, &prefix, &mut rng),
                }
            }
            if s + 1 < config.stages.len() {
                blocks::init_reduction(st.dim, &mut params, &reduction_prefix(s), &mut rng);
            }
        }
        let last = config.stages.last().expect("validated").dim;
        init_norm(&mut params, "head.norm", last);
        init_linear(&mut params, "head.fc", last, config.num_classes, &mut rng);
        Ok(Model {
            config,
            params,
            plans,
        })
    }

    /// Rebuilds the block plans for `config` around an existing store.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Model> {
        let skeleton = Model::build(config, 0)?;
        if skeleton.params.names() != params.names() {
            return Err(NomError::Checkpoint(
                "parameter names do not match the configuration".into(),
            ));
        }
        for ((name, a), (_, b)) in skeleton.params.iter().zip(params.iter()) {
            if a.shape() != b.shape() {
                return Err(NomError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Model { params, ..skeleton })
    }

    /// Same model whose parameters are the given vars, in store order.
    pub fn rebound(&self, vars: &[Var]) -> Result<Model> {
        Ok(Model {
            config: self.config.clone(),
            params: self.params.rebind(vars)?,
            plans: self.plans.clone(),
        })
    }

    pub fn plans(&self) -> &[BlockPlan] {
        &self.plans
    }

    pub fn count_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// `(module, scalar count)` rows in parameter order.
    pub fn param_table(&self) -> Vec<(String, usize)> {
        let mut rows: Vec<(String, usize)> = Vec::new();
        for (name, v) in self.params.iter() {
            let module = match name.split('.').collect::<Vec<_>>().as_slice() {
                ["stages", s, "blocks", ..] => {
                    format!("stage{}.blocks", s.parse::<usize>().unwrap_or(0) + 1)
                }
                ["stages", s, "reduction", ..] => {
                    format!("stage{}.reduction", s.parse::<usize>().unwrap_or(0) + 1)
                }
                [first, ..] => first.to_string(),
                [] => String::new(),
            };
            let n = v.value().numel();
            match rows.last_mut() {
                Some((m, c)) if *m == module => *c += n,
                _ => rows.push((module, n)),
            }
        }
        rows
    }

    /// Logits for one `[H, W, 3]` image.
    ///
    /// `rng` supplies Gumbel noise in the two training modes; without it the
    /// noise is zero.
    pub fn forward(
        &self,
        image: &Var,
        mode: NominationMode,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput> {
        let expect = [
            self.config.image_size,
            self.config.image_size,
            self.config.in_channels,
        ];
        if image.shape() != expect {
            return Err(NomError::shape("forward", image.shape(), &expect));
        }
        let mut x =
            blocks::patch_embed(image, self.config.patch_size, &self.params, "patch_embed")?;
        let mut nominations = Vec::new();
        let mut stage_shapes = Vec::new();
        let mut block_outputs = Vec::new();
        for (s, (st, plan)) in self.config.stages.iter().zip(&self.plans).enumerate() {
            if s > 0 {
                x = blocks::reduction_module(&x, &self.params, &reduction_prefix(s - 1))?;
            }
            for b in 0..st.depth {
                let prefix = block_prefix(s, b);
                x = match plan {
                    BlockPlan::S(c) => {
                        let r = rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
                        let out = blocks::s_nommer_block(&x, c, &self.params, &prefix, mode, r)?;
                        if let Some(map) = out.nomination {
                            nominations.push(LayerNomination {
                                stage: s + 1,
                                layer: b + 1,
                                map,
                            });
                        }
                        out.output
                    }
                    BlockPlan::G(c) => blocks::g_nommer_block(&x, c, &self.params, &prefix)?,
                };
                block_outputs.push(x.value().clone());
            }
            stage_shapes.push(x.shape().to_vec());
        }
        let s = x.shape().to_vec();
        let pooled = x.reshape(&[s[0] * s[1], s[2]])?.mean_rows()?;
        let h = norm(&pooled, &self.params, "head.norm")?.reshape(&[1, s[2]])?;
        let logits = linear(&h, &self.params, "head.fc")?.reshape(&[self.config.num_classes])?;
        Ok(ForwardOutput {
            logits,
            nominations,
            stage_shapes,
            block_outputs,
        })
    }

    /// Cross-entropy of one labelled image.
    pub fn loss(
        &self,
        image: &Var,
        label: usize,
        mode: NominationMode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(Var, ForwardOutput)> {
        let out = self.forward(image, mode, rng)?;
        let loss = out.logits.cross_entropy(label)?;
        if !loss.value().is_finite() {
            return Err(NomError::Numerical("non-finite loss".into()));
        }
        Ok((loss, out))
    }
}

/// Index of the largest logit (lowest index on ties).
pub fn predict(logits: &Tensor) -> usize {
    let d = logits.data();
    (1..d.len()).fold(0, |best, i| if d[i] > d[best] { i } else { best })
}
