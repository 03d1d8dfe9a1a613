//! Per-location selection among the three candidate contexts.
//!
//! Candidates are fused by addition and a `1×1` conv (`C → 3`) produces
//! nomination logits `T`. A nomination map then picks one candidate per
//! location. At evaluation time it is the plain argmax of `T`. During
//! training it is a Gumbel-perturbed sample, the hard one-hot forward value
//! carrying the gradient of the soft relaxation.
//!
//! Channel order is fixed: 0 = window attention, 1 = CNN, 2 = global.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{NomError, Result};
use crate::params::{init_conv, ParamStore};
use crate::tensor::Tensor;

pub const NUM_CANDIDATES: usize = 3;

/// Lower clamp for the uniform draw behind Gumbel noise.
pub const GUMBEL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NominationMode {
    /// Deterministic argmax, no noise, no gradient to the logits.
    Hard,
    /// Hard forward value, soft-relaxation gradient.
    #[default]
    StraightThrough,
    /// Soft simplex weights in both directions.
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GumbelParams {
    pub temperature: f64,
}

impl GumbelParams {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(NomError::InvalidArgument(format!(
                "Gumbel temperature must be > 0, got {temperature}"
            )));
        }
        Ok(GumbelParams { temperature })
    }
}

impl Default for GumbelParams {
    fn default() -> Self {
        GumbelParams { temperature: 1.0 }
    }
}

/// `F^(L)`, `F^(C)`, `F^(G)` of one layer.
#[derive(Clone, Debug)]
pub struct CandidateSet {
    pub local: Var,
    pub cnn: Var,
    pub global: Var,
}

impl CandidateSet {
    pub fn new(local: Var, cnn: Var, global: Var) -> Result<Self> {
        if local.shape() != cnn.shape() {
            return Err(NomError::shape("candidates", local.shape(), cnn.shape()));
        }
        if local.shape() != global.shape() {
            return Err(NomError::shape("candidates", local.shape(), global.shape()));
        }
        if local.shape().len() != 3 {
            return Err(NomError::invalid_shape(
                "candidates",
                format!("expected [H, W, C], got {:?}", local.shape()),
            ));
        }
        Ok(CandidateSet { local, cnn, global })
    }

    pub fn shape(&self) -> &[usize] {
        self.local.shape()
    }

    fn as_array(&self) -> [&Var; NUM_CANDIDATES] {
        [&self.local, &self.cnn, &self.global]
    }
}

#[derive(Clone, Debug)]
pub struct NominationMap {
    pub mode: NominationMode,
    /// Raw logits `T`, `[H, W, 3]`.
    pub logits: Tensor,
    /// One-hot selection, `[H, W, 3]`.
    pub hard: Tensor,
    /// Softmax of the (noisy, tempered) logits, `[H, W, 3]`.
    pub soft: Tensor,
}

impl NominationMap {
    /// Selected candidate index per location, row-major.
    pub fn choices(&self) -> Vec<usize> {
        self.hard
            .data()
            .chunks(NUM_CANDIDATES)
            .map(|row| row.iter().position(|&v| v == 1.0).unwrap_or(0))
            .collect()
    }

    pub fn counts(&self) -> [usize; NUM_CANDIDATES] {
        let mut out = [0; NUM_CANDIDATES];
        for c in self.choices() {
            out[c] += 1;
        }
        out
    }
}

pub fn init_scn<R: Rng + ?Sized>(dim: usize, store: &mut ParamStore, prefix: &str, rng: &mut R) {
    init_conv(
        store,
        &format!("{prefix}.fuse"),
        1,
        dim,
        NUM_CANDIDATES,
        rng,
    );
}

pub fn scn_param_count(dim: usize) -> usize {
    dim * NUM_CANDIDATES + NUM_CANDIDATES
}

/// `T = Conv1×1(F^(L) + F^(C) + F^(G))`, shaped `[H, W, 3]`.
pub fn fuse_candidates(cands: &CandidateSet, store: &ParamStore, prefix: &str) -> Result<Var> {
    let sum = cands.local.add(&cands.cnn)?.add(&cands.global)?;
    sum.conv2d(
        store.get(&format!("{prefix}.fuse.weight"))?,
        Some(store.get(&format!("{prefix}.fuse.bias"))?),
        1,
        0,
    )
}

fn check_logits(t: &Tensor) -> Result<()> {
    if t.shape().last() != Some(&NUM_CANDIDATES) {
        return Err(NomError::invalid_shape(
            "nominate",
            format!("logits need a trailing axis of 3, got {:?}", t.shape()),
        ));
    }
    if t.data().iter().any(|v| v.is_nan()) {
        return Err(NomError::Numerical("NaN nomination logits".into()));
    }
    Ok(())
}

/// One-hot argmax along the last axis; ties go to the lowest index.
pub fn hard_nominate(logits: &Tensor) -> Result<Tensor> {
    check_logits(logits)?;
    let mut out = Tensor::zeros(logits.shape());
    for (row, dst) in logits
        .data()
        .chunks(NUM_CANDIDATES)
        .zip(out.data_mut().chunks_mut(NUM_CANDIDATES))
    {
        let mut best = 0;
        for p in 1..NUM_CANDIDATES {
            if row[p] > row[best] {
                best = p;
            }
        }
        dst[best] = 1.0;
    }
    Ok(out)
}

/// i.i.d. standard Gumbel noise `−log(−log U)`.
pub fn gumbel_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let u: f64 = rng.gen::<f64>().clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
        -(-u.ln()).ln()
    })
}

/// Builds the nomination weights used to mix the candidates.
///
/// `noise` is added to the logits in the two training modes; `None` means no
/// noise. Hard mode ignores it.
pub fn gumbel_softmax_sample(
    logits: &Var,
    params: &GumbelParams,
    mode: NominationMode,
    noise: Option<&Tensor>,
) -> Result<(Var, NominationMap)> {
    GumbelParams::new(params.temperature)?;
    check_logits(logits.value())?;
    let rank = logits.shape().len();
    let raw = logits.value().clone();

    if mode == NominationMode::Hard {
        let hard = hard_nominate(&raw)?;
        let soft = logits.detach().softmax(rank - 1)?.value().clone();
        let map = NominationMap {
            mode,
            logits: raw,
            hard: hard.clone(),
            soft,
        };
        return Ok((Var::constant(hard), map));
    }

    let noisy = match noise {
        Some(g) => {
            if g.shape() != logits.shape() {
                return Err(NomError::shape("gumbel noise", g.shape(), logits.shape()));
            }
            logits.add(&Var::constant(g.clone()))?
        }
        None => logits.clone(),
    };
    let hard = hard_nominate(noisy.value())?;
    let soft = noisy.scale(1.0 / params.temperature).softmax(rank - 1)?;
    let weights = match mode {
        NominationMode::Soft => soft.clone(),
        _ => soft.straight_through(hard.clone())?,
    };
    let map = NominationMap {
        mode,
        logits: raw,
        hard,
        soft: soft.value().clone(),
    };
    Ok((weights, map))
}

/// `f^(S)_{ij} = Σ_p w_{ij,p} f̃_{p,ij}`.
pub fn apply_nomination(cands: &CandidateSet, weights: &Var) -> Result<Var> {
    let s = cands.shape().to_vec();
    let expect = [s[0], s[1], NUM_CANDIDATES];
    if weights.shape() != expect {
        return Err(NomError::shape(
            "apply_nomination",
            weights.shape(),
            &expect,
        ));
    }
    let locations = s[0] * s[1];
    let mut acc: Option<Var> = None;
    for (p, cand) in cands.as_array().into_iter().enumerate() {
        let w = weights.slice(2, p, 1)?.reshape(&[locations])?;
        let term = cand.reshape(&[locations, s[2]])?.mul_rows(&w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    acc.expect("three candidates").reshape(&s)
}

/// Fuse, sample and apply.
pub fn scn_forward(
    cands: &CandidateSet,
    store: &ParamStore,
    prefix: &str,
    params: &GumbelParams,
    mode: NominationMode,
    noise: Option<&Tensor>,
) -> Result<(Var, NominationMap)> {
    let logits = fuse_candidates(cands, store, prefix)?;
    let (weights, map) = gumbel_softmax_sample(&logits, params, mode, noise)?;
    Ok((apply_nomination(cands, &weights)?, map))
}
