//! The finite-difference suite run by `nommer gradcheck`.
//!
//! Every unit reduces its output to a scalar through a fixed random weighting
//! so that all output coordinates contribute to the checked gradient.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregators::{cgca_forward, lca_cnn_forward, BottleneckConfig, CgcaConfig};
use crate::attention::{init_wmsa, mhsa, wmsa, AttentionConfig};
use crate::autograd::Var;
use crate::error::Result;
use crate::frequency::{dct2_blocks, embed_var, idct2_blocks, merge_var, partition_var, truncate_var, DctBasis};
use crate::gradcheck::{grad_check_against, GradCheckConfig, GradCheckReport};
use crate::model::blocks::{g_nommer_block, s_nommer_block, GBlockConfig, SBlockConfig};
use crate::model::{Model, ModelConfig};
use crate::nominator::{gumbel_noise, init_scn, scn_forward, CandidateSet, GumbelParams, NominationMode};
use crate::ops::ZERO_INDEX;
use crate::params::ParamStore;
use crate::tensor::Tensor;

type UnitFn = Box<dyn Fn(&[Var]) -> Result<Var>>;

pub struct CheckUnit {
    pub name: String,
    analytic: UnitFn,
    /// Differentiated numerically; `None` means the analytic function itself.
    reference: Option<UnitFn>,
    inputs: Vec<Tensor>,
    pub config: GradCheckConfig,
}

impl CheckUnit {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(&[Var]) -> Result<Var> + 'static,
        inputs: Vec<Tensor>,
    ) -> Self {
        CheckUnit {
            name: name.into(),
            analytic: Box::new(f),
            reference: None,
            inputs,
            config: GradCheckConfig::default(),
        }
    }

    /// Checks the backward of `self` against differences of `reference`.
    pub fn against(mut self, reference: impl Fn(&[Var]) -> Result<Var> + 'static) -> Self {
        self.reference = Some(Box::new(reference));
        self
    }

    pub fn max_coords(mut self, n: usize) -> Self {
        self.config.max_coords = Some(n);
        self
    }

    pub fn run(&self) -> Result<UnitResult> {
        let reference = self.reference.as_ref().unwrap_or(&self.analytic);
        let report = grad_check_against(&self.analytic, reference, &self.inputs, &self.config)?;
        Ok(UnitResult {
            name: self.name.clone(),
            report,
        })
    }
}

#[derive(Clone, Debug)]
pub struct UnitResult {
    pub name: String,
    pub report: GradCheckReport,
}

pub fn run_units(units: &[CheckUnit]) -> Result<Vec<UnitResult>> {
    units.iter().map(CheckUnit::run).collect()
}

pub fn all_passed(results: &[UnitResult]) -> bool {
    results.iter().all(|r| r.report.passed)
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn t(&mut self, shape: &[usize]) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut self.0)
    }

    fn w(&mut self, shape: &[usize]) -> Var {
        Var::constant(self.t(shape))
    }
}

fn weighted(y: Var, w: &Var) -> Result<Var> {
    Ok(y.mul(w)?.sum())
}

/// One unit per tensor primitive, with small random operands.
pub fn primitive_units(seed: u64) -> Vec<CheckUnit> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed));
    let mut units = Vec::new();
    macro_rules! unit {
        ($name:expr, [$($shape:expr),+], $out:expr, |$v:ident| $body:expr) => {{
            let w = g.w(&$out);
            let inputs = vec![$(g.t(&$shape)),+];
            units.push(CheckUnit::new(
                $name,
                move |$v: &[Var]| weighted($body, &w),
                inputs,
            ));
        }};
    }
    unit!("add", [[3, 4], [3, 4]], [3, 4], |v| v[0].add(&v[1])?);
    unit!("sub", [[3, 4], [3, 4]], [3, 4], |v| v[0].sub(&v[1])?);
    unit!("mul", [[3, 4], [3, 4]], [3, 4], |v| v[0].mul(&v[1])?);
    unit!("scale", [[3, 4]], [3, 4], |v| v[0].scale(-1.7));
    unit!("add_bias", [[3, 4], [4]], [3, 4], |v| v[0].add_bias(&v[1])?);
    unit!("mul_bias", [[3, 4], [4]], [3, 4], |v| v[0].mul_bias(&v[1])?);
    unit!("mul_rows", [[3, 4], [3]], [3, 4], |v| v[0].mul_rows(&v[1])?);
    unit!("matmul", [[3, 4], [4, 2]], [3, 2], |v| v[0].matmul(&v[1])?);
    unit!("bmm", [[2, 3, 4], [2, 4, 5]], [2, 3, 5], |v| v[0].bmm(&v[1])?);
    unit!("bmm_nt", [[2, 3, 4], [2, 5, 4]], [2, 3, 5], |v| v[0].bmm_nt(&v[1])?);
    unit!("reshape", [[3, 4]], [2, 6], |v| v[0].reshape(&[2, 6])?);
    let idx: Rc<[usize]> = vec![5, 0, ZERO_INDEX, 5, 11, 2, 7, ZERO_INDEX].into();
    unit!("gather", [[3, 4]], [2, 4], |v| v[0].gather(idx.clone(), &[2, 4])?);
    unit!("permute", [[2, 3, 4]], [4, 2, 3], |v| v[0].permute(&[2, 0, 1])?);
    unit!("transpose", [[3, 4]], [4, 3], |v| v[0].transpose()?);
    unit!("slice", [[3, 5]], [3, 2], |v| v[0].slice(1, 2, 2)?);
    unit!("concat", [[3, 2], [3, 4]], [3, 6], |v| Var::concat(&v[..2], 1)?);
    unit!("softmax", [[3, 4]], [3, 4], |v| v[0].softmax(1)?);
    unit!("cross_entropy", [[5]], [1], |v| v[0].cross_entropy(2)?.reshape(&[1])?);
    unit!("gelu", [[3, 4]], [3, 4], |v| v[0].gelu());
    unit!("layer_norm", [[3, 4], [4], [4]], [3, 4], |v| v[0].layer_norm(&v[1], &v[2], 1e-5)?);
    unit!("sum", [[3, 4]], [1], |v| v[0].sum().reshape(&[1])?);
    unit!("mean", [[3, 4]], [1], |v| v[0].mean().reshape(&[1])?);
    unit!("mean_rows", [[5, 3]], [3], |v| v[0].mean_rows()?);
    unit!("max_pool2d", [[4, 6, 2]], [2, 3, 2], |v| v[0].max_pool2d(2, 2)?);
    unit!("conv2d", [[5, 5, 2], [3, 3, 2, 3], [3]], [5, 5, 3], |v| v[0].conv2d(&v[1], Some(&v[2]), 1, 1)?);
    unit!("conv2d_strided", [[6, 6, 2], [4, 4, 2, 3]], [2, 2, 3], |v| v[0].conv2d(&v[1], None, 2, 0)?);

    // straight-through: forward is the one-hot argmax, backward is the
    // softmax Jacobian
    let w = g.w(&[4, 3]);
    let w2 = w.clone();
    let hard = |s: &Tensor| {
        Tensor::from_fn(s.shape(), |k| {
            let row = &s.data()[k / 3 * 3..k / 3 * 3 + 3];
            let best = (1..3).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            f64::from(u8::from(k % 3 == best))
        })
    };
    units.push(
        CheckUnit::new(
            "straight_through",
            move |v: &[Var]| {
                let soft = v[0].softmax(1)?;
                let h = hard(soft.value());
                weighted(soft.straight_through(h)?, &w)
            },
            vec![g.t(&[4, 3])],
        )
        .against(move |v: &[Var]| weighted(v[0].softmax(1)?, &w2)),
    );
    units
}

fn store_inputs(lead: Vec<Tensor>, store: &ParamStore) -> Vec<Tensor> {
    let mut inputs = lead;
    inputs.extend(store.values());
    inputs
}

/// Module-level units: frequency pipeline, attention, aggregators, nominator,
/// both block types at micro dimensions, and the whole of `model` in soft
/// nomination mode.
pub fn module_units(seed: u64, model: &ModelConfig) -> Result<Vec<CheckUnit>> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let mut units = Vec::new();

    let basis = DctBasis::new(4)?;
    let w = g.w(&[6, 5, 2]);
    units.push(CheckUnit::new(
        "dct_pipeline",
        move |v: &[Var]| {
            let (blocks, layout) = partition_var(&v[0], 4)?;
            let t = truncate_var(&dct2_blocks(&blocks, &basis)?, 2)?;
            let back = idct2_blocks(&embed_var(&t, 4)?, &basis)?;
            weighted(merge_var(&back, &layout)?, &w)
        },
        vec![g.t(&[6, 5, 2])],
    ));

    let att = AttentionConfig::new(8, 2)?;
    let mut store = ParamStore::new();
    att.init(&mut store, "a", &mut g.0);
    let w = g.w(&[6, 8]);
    let inputs = store_inputs(vec![g.t(&[6, 8])], &store);
    let (a, s) = (att, store.clone());
    units.push(CheckUnit::new(
        "mhsa",
        move |v: &[Var]| weighted(mhsa(&v[0], &a, &s.rebind(&v[1..])?, "a")?, &w),
        inputs,
    ));

    let mut store = ParamStore::new();
    init_wmsa(&att, 4, &mut store, "w", &mut g.0);
    store.set_value("w.rel_bias", Tensor::uniform(&[49, 2], -0.5, 0.5, &mut g.0))?;
    let w = g.w(&[8, 8, 8]);
    let inputs = store_inputs(vec![g.t(&[8, 8, 8])], &store);
    units.push(
        CheckUnit::new(
            "wmsa",
            move |v: &[Var]| weighted(wmsa(&v[0], &att, 4, &store.rebind(&v[1..])?, "w")?, &w),
            inputs,
        )
        .max_coords(48),
    );

    let cg = CgcaConfig::new(4, 4, 0.5, 2)?;
    let mut store = ParamStore::new();
    cg.init(&mut store, "g", &mut g.0);
    let w = g.w(&[8, 8, 4]);
    let inputs = store_inputs(vec![g.t(&[8, 8, 4])], &store);
    units.push(
        CheckUnit::new(
            "cgca",
            move |v: &[Var]| weighted(cgca_forward(&v[0], &cg, &store.rebind(&v[1..])?, "g")?, &w),
            inputs,
        )
        .max_coords(40),
    );

    let bn = BottleneckConfig::new(8, 4)?;
    let mut store = ParamStore::new();
    bn.init(&mut store, "c", &mut g.0);
    let w = g.w(&[6, 6, 8]);
    let inputs = store_inputs(vec![g.t(&[6, 6, 8])], &store);
    units.push(
        CheckUnit::new(
            "cnn_bottleneck",
            move |v: &[Var]| weighted(lca_cnn_forward(&v[0], &bn, &store.rebind(&v[1..])?, "c")?, &w),
            inputs,
        )
        .max_coords(40),
    );

    let mut store = ParamStore::new();
    init_scn(8, &mut store, "n", &mut g.0);
    let noise = gumbel_noise(&[4, 4, 3], &mut g.0);
    let w = g.w(&[4, 4, 8]);
    let inputs = store_inputs(vec![g.t(&[4, 4, 8]), g.t(&[4, 4, 8]), g.t(&[4, 4, 8])], &store);
    units.push(CheckUnit::new(
        "scn_soft",
        move |v: &[Var]| {
            let c = CandidateSet::new(v[0].clone(), v[1].clone(), v[2].clone())?;
            let s = store.rebind(&v[3..])?;
            let (y, _) = scn_forward(&c, &s, "n", &GumbelParams::default(), NominationMode::Soft, Some(&noise))?;
            weighted(y, &w)
        },
        inputs,
    ));

    let micro = ModelConfig::micro();
    let sb = SBlockConfig::from_stage(&micro, &micro.stages[0])?;
    let mut store = ParamStore::new();
    sb.init(&mut store, "s", &mut g.0);
    let w = g.w(&[8, 8, 16]);
    let inputs = store_inputs(vec![g.t(&[8, 8, 16])], &store);
    units.push(
        CheckUnit::new(
            "s_nommer_block",
            move |v: &[Var]| {
                let s = store.rebind(&v[1..])?;
                weighted(s_nommer_block(&v[0], &sb, &s, "s", NominationMode::Soft, None)?.output, &w)
            },
            inputs,
        )
        .max_coords(12),
    );

    let gb = GBlockConfig::from_stage(&micro.stages[2])?;
    let mut store = ParamStore::new();
    gb.init(&mut store, "g", &mut g.0);
    let w = g.w(&[2, 2, 64]);
    let inputs = store_inputs(vec![g.t(&[2, 2, 64])], &store);
    units.push(
        CheckUnit::new(
            "g_nommer_block",
            move |v: &[Var]| weighted(g_nommer_block(&v[0], &gb, &store.rebind(&v[1..])?, "g")?, &w),
            inputs,
        )
        .max_coords(16),
    );

    let model = Model::build(model.clone(), seed)?;
    let size = model.config.image_size;
    let chans = model.config.in_channels;
    let image = Tensor::uniform(&[size, size, chans], 0.0, 1.0, &mut g.0);
    let label = g.0.gen_range(0..model.config.num_classes);
    let inputs = store_inputs(vec![image], &model.params);
    units.push(
        CheckUnit::new(
            "full_model",
            move |v: &[Var]| {
                let m = model.rebound(&v[1..])?;
                Ok(m.loss(&v[0], label, NominationMode::Soft, None)?.0)
            },
            inputs,
        )
        .max_coords(4),
    );
    Ok(units)
}

/// The complete suite, primitives first.
pub fn standard_units(seed: u64, model: &ModelConfig) -> Result<Vec<CheckUnit>> {
    let mut units = primitive_units(seed);
    units.extend(module_units(seed, model)?);
    Ok(units)
}

pub fn gradient_suite(seed: u64, model: &ModelConfig) -> Result<Vec<UnitResult>> {
    run_units(&standard_units(seed, model)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for r in run_units(&primitive_units(1)).unwrap() {
            assert!(r.report.passed, "{}: {:?}", r.name, r.report);
            assert!(r.report.checked > 0);
        }
    }

    #[test]
    fn unit_names_are_unique() {
        let units = standard_units(0, &ModelConfig::micro()).unwrap();
        let mut names: Vec<_> = units.iter().map(|u| u.name.clone()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn injected_wrong_sign_fails_the_suite() {
        let mut units = primitive_units(2);
        units.truncate(3);
        units.push(CheckUnit::new(
            "negated_square",
            |v: &[Var]| {
                let x = v[0].clone();
                let y = Var::from_op(
                    "negated_square",
                    x.value().map(|a| a * a),
                    vec![x.clone()],
                    Box::new(move |g| vec![Some(g.zip_map(x.value(), |g, a| -2.0 * a * g).unwrap())]),
                );
                Ok(y.sum())
            },
            vec![Tensor::new(&[2], vec![0.5, -1.5]).unwrap()],
        ));
        let res = run_units(&units).unwrap();
        assert!(!all_passed(&res));
        assert_eq!(res.iter().filter(|r| !r.report.passed).count(), 1);
    }
}
