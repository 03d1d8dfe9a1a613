//! Linear-kernel CKA between layer representations.

use rayon::prelude::*;

use crate::autograd::Var;
use crate::error::{NomError, Result};
use crate::model::Model;
use crate::nominator::NominationMode;
use crate::tensor::Tensor;

/// Centered self-similarity below this fraction of `‖K‖²_F` counts as zero.
const DEGENERATE_RATIO: f64 = 1e-20;

fn check_square(k: &Tensor, what: &'static str) -> Result<usize> {
    match k.shape() {
        [m, n] if m == n => Ok(*m),
        s => Err(NomError::invalid_shape(what, format!("expected square matrix, got {s:?}"))),
    }
}

/// `K = X Xᵀ` for `X` of shape `[m, c]`.
pub fn gram(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(NomError::invalid_shape("gram", format!("expected [m, c], got {:?}", x.shape())));
    }
    x.matmul(&x.transpose()?)
}

/// `H K H` with `H = I - 11ᵀ/m`.
fn center(k: &Tensor) -> Tensor {
    let m = k.shape()[0];
    let d = k.data();
    let row: Vec<f64> = (0..m).map(|i| d[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64).collect();
    let col: Vec<f64> = (0..m).map(|j| (0..m).map(|i| d[i * m + j]).sum::<f64>() / m as f64).collect();
    let all = row.iter().sum::<f64>() / m as f64;
    Tensor::from_fn(&[m, m], |idx| {
        let (i, j) = (idx / m, idx % m);
        d[idx] - row[i] - col[j] + all
    })
}

/// Inner product of the centered Grams, normalised by `(m - 1)²`.
pub fn hsic(k: &Tensor, l: &Tensor) -> Result<f64> {
    let m = check_square(k, "hsic")?;
    if l.shape() != k.shape() {
        return Err(NomError::shape("hsic", k.shape(), l.shape()));
    }
    if m < 2 {
        return Err(NomError::invalid_shape("hsic", "need at least two samples"));
    }
    let (kc, lc) = (center(k), center(l));
    let dot: f64 = kc.data().iter().zip(lc.data()).map(|(a, b)| a * b).sum();
    Ok(dot / ((m - 1) * (m - 1)) as f64)
}

fn self_hsic(k: &Tensor) -> Result<f64> {
    let h = hsic(k, k)?;
    let scale = k.data().iter().map(|v| v * v).sum::<f64>();
    if !(h > DEGENERATE_RATIO * scale) {
        return Err(NomError::UndefinedSimilarity(
            "representation has zero centered Gram matrix".into(),
        ));
    }
    Ok(h)
}

/// CKA of two activation matrices with the same number of rows.
pub fn cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(NomError::shape("cka", x.shape(), y.shape()));
    }
    let (k, l) = (gram(x)?, gram(y)?);
    cka_from_grams(&k, &l)
}

fn cka_from_grams(k: &Tensor, l: &Tensor) -> Result<f64> {
    let kk = self_hsic(k)?;
    let ll = self_hsic(l)?;
    Ok(hsic(k, l)? / (kk * ll).sqrt())
}

#[derive(Clone, Debug)]
pub struct CkaHeatmap {
    /// Block labels in execution order, `"{stage}_{block}"` from 1.
    pub layers: Vec<String>,
    /// `[L, L]`.
    pub values: Tensor,
}

impl CkaHeatmap {
    /// Pairwise CKA of per-layer activation matrices.
    pub fn from_activations(layers: Vec<String>, acts: &[Tensor]) -> Result<CkaHeatmap> {
        let n = acts.len();
        let grams = acts.par_iter().map(gram).collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
        let vals = pairs
            .par_iter()
            .map(|&(i, j)| cka_from_grams(&grams[i], &grams[j]))
            .collect::<Result<Vec<_>>>()?;
        let mut values = Tensor::zeros(&[n, n]);
        for (&(i, j), v) in pairs.iter().zip(vals) {
            values.set(&[i, j], v);
            values.set(&[j, i], v);
        }
        Ok(CkaHeatmap { layers, values })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer");
        for l in &self.layers {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        let n = self.len();
        for (i, l) in self.layers.iter().enumerate() {
            s.push_str(l);
            for j in 0..n {
                s.push_str(&format!(",{:.12}", self.values.at(&[i, j])));
            }
            s.push('\n');
        }
        s
    }

    /// 8-bit grey levels, white for similarity 1.
    pub fn to_gray(&self) -> Vec<u8> {
        self.values
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Eval-mode forward over `probes`, then CKA between every pair of block
/// outputs. Each block's activations are flattened per probe image.
pub fn cka_heatmap(model: &Model, probes: &[Tensor]) -> Result<CkaHeatmap> {
    if probes.len() < 2 {
        return Err(NomError::InvalidArgument(format!(
            "CKA needs at least 2 probe images, got {}",
            probes.len()
        )));
    }
    let mut rows: Vec<Vec<Tensor>> = Vec::new();
    for img in probes {
        let out = model.forward(&Var::constant(img.clone()), NominationMode::Hard, None)?;
        rows.push(out.block_outputs);
    }
    let layers: Vec<String> = model
        .config
        .stages
        .iter()
        .enumerate()
        .flat_map(|(s, st)| (0..st.depth).map(move |b| format!("{}_{}", s + 1, b + 1)))
        .collect();
    let acts = (0..layers.len())
        .map(|l| {
            let width = rows[0][l].numel();
            let data = rows.iter().flat_map(|r| r[l].data().iter().copied()).collect();
            Tensor::new(&[probes.len(), width], data)
        })
        .collect::<Result<Vec<_>>>()?;
    CkaHeatmap::from_activations(layers, &acts)
}
