//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{NomError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Per-input cap on checked coordinates; larger inputs are subsampled.
    pub max_coords: Option<usize>,
    /// Relative-error denominators never drop below this fraction of the
    /// largest gradient magnitude seen, so entries that are numerically zero
    /// are judged on the gradient's own scale.
    pub scale_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tol: 1e-4,
            max_coords: None,
            scale_floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let vars: Vec<Var> = inputs.iter().cloned().map(Var::constant).collect();
    let out = f(&vars)?;
    if out.value().numel() != 1 {
        return Err(NomError::invalid_shape(
            "grad_check",
            format!("function must be scalar-valued, got {:?}", out.shape()),
        ));
    }
    Ok(out.value().item())
}

/// Compares `backward` against central differences of `f` at `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    grad_check_against(&f, &f, inputs, cfg)
}

/// Backward of `analytic` against central differences of `reference`.
///
/// For surrogate-gradient estimators the two differ: the forward value is not
/// differentiable but its backward must equal the reference's derivative.
pub fn grad_check_against<A, F>(
    analytic: A,
    f: F,
    inputs: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    A: Fn(&[Var]) -> Result<Var>,
    F: Fn(&[Var]) -> Result<Var>,
{
    let vars: Vec<Var> = inputs.iter().cloned().map(Var::parameter).collect();
    let out = analytic(&vars)?;
    out.backward()?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(cap) if cap < n => sample(&mut rng, n, cap).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = input.data()[i];
            work[which].data_mut()[i] = orig + cfg.step;
            let up = eval_scalar(&f, &work)?;
            work[which].data_mut()[i] = orig - cfg.step;
            let down = eval_scalar(&f, &work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            pairs.push((which, i, analytic[which].data()[i], numeric));
        }
    }

    let scale = pairs
        .iter()
        .fold(0.0f64, |m, &(_, _, a, n)| m.max(a.abs()).max(n.abs()));
    let floor = (cfg.scale_floor * scale).max(1e-12);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: pairs.len(),
        worst: None,
        passed: true,
    };
    for (which, i, a, n) in pairs {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = Some((which, i));
        }
    }
    report.passed = report.max_rel_error < cfg.tol && report.max_rel_error.is_finite();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact_to_rounding() {
        let w = Var::constant(Tensor::new(&[3], vec![0.5, -2.0, 3.25]).unwrap());
        let r = grad_check(
            move |v| Ok(v[0].mul(&w)?.sum()),
            &[Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn quadratic_with_small_step() {
        let r = grad_check(
            |v| Ok(v[0].mul(&v[0])?.sum()),
            &[Tensor::new(&[4], vec![0.3, -1.1, 2.0, 0.7]).unwrap()],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn wrong_sign_gradient_is_caught() {
        let bad = |v: &[Var]| -> Result<Var> {
            let x = v[0].clone();
            let y = Var::from_op(
                "bad_square",
                x.value().map(|a| a * a),
                vec![x.clone()],
                Box::new(move |g| vec![Some(g.zip_map(x.value(), |g, a| -2.0 * a * g).unwrap())]),
            );
            Ok(y.sum())
        };
        let r = grad_check(
            bad,
            &[Tensor::new(&[2], vec![1.0, 2.0]).unwrap()],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn subsampling_caps_coordinates() {
        let cfg = GradCheckConfig {
            max_coords: Some(5),
            ..Default::default()
        };
        let r = grad_check(|v| Ok(v[0].gelu().sum()), &[Tensor::full(&[40], 0.3)], &cfg).unwrap();
        assert_eq!(r.checked, 5);
        assert!(r.passed);
    }
}
