//! Block-wise 2D DCT-II / DCT-III and low-frequency truncation.
//!
//! A spatial map `[H, W, C]` is reflect-padded to a multiple of the block
//! size `N`, cut into `N × N × C` blocks, and each channel of each block is
//! transformed with the orthonormal basis `B` as `f = B F Bᵀ`. The inverse is
//! `F = Bᵀ f B`. Everything here is built from differentiable primitives, so
//! the same code path serves the plain-tensor API and the CGCA branch.

use std::f64::consts::PI;
use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{NomError, Result};
use crate::tensor::Tensor;

/// Normalisation factor `c(λ)` of the orthonormal DCT.
pub fn dct_scale(lambda: usize, n: usize) -> f64 {
    if lambda == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

/// `N × N` orthonormal DCT-II matrix, `B[i][j] = c(i) cos((j + ½) π i / N)`.
#[derive(Clone, Debug)]
pub struct DctBasis {
    n: usize,
    matrix: Tensor,
    transpose: Tensor,
}

impl DctBasis {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(NomError::InvalidArgument(
                "DCT block size must be >= 1".into(),
            ));
        }
        let matrix = Tensor::from_fn(&[n, n], |k| {
            let (i, j) = (k / n, k % n);
            dct_scale(i, n) * ((j as f64 + 0.5) * PI * i as f64 / n as f64).cos()
        });
        let transpose = matrix.transpose()?;
        Ok(DctBasis {
            n,
            matrix,
            transpose,
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}

/// `l = ⌊α N⌋`, clamped to at least 1.
pub fn truncated_size(n: usize, alpha: f64) -> Result<usize> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(NomError::InvalidArgument(format!(
            "truncation ratio must lie in (0, 1], got {alpha}"
        )));
    }
    Ok(((alpha * n as f64).floor() as usize).max(1))
}

/// Index into `[0, len)` for a position past the border, mirrored about the
/// edge samples (no edge repeat): `len, len+1, …` map to `len-2, len-3, …`.
pub fn reflect_index(p: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let q = p % period;
    if q < len {
        q
    } else {
        period - q
    }
}

/// Geometry of a map cut into square blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub height: usize,
    pub width: usize,
    pub block: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl BlockLayout {
    pub fn new(height: usize, width: usize, block: usize) -> Result<Self> {
        if block == 0 || height == 0 || width == 0 {
            return Err(NomError::InvalidArgument(format!(
                "block layout {height}x{width} with block {block}"
            )));
        }
        Ok(BlockLayout {
            height,
            width,
            block,
            grid_rows: height.div_ceil(block),
            grid_cols: width.div_ceil(block),
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn padded(&self) -> (usize, usize) {
        (self.grid_rows * self.block, self.grid_cols * self.block)
    }

    /// Gather indices taking an `[H, W, C]` map to `[blocks, N, N, C]`.
    pub fn partition_indices(&self, channels: usize) -> Vec<usize> {
        let n = self.block;
        let mut idx = Vec::with_capacity(self.num_blocks() * n * n * channels);
        for br in 0..self.grid_rows {
            for bc in 0..self.grid_cols {
                for u in 0..n {
                    let y = reflect_index(br * n + u, self.height);
                    for v in 0..n {
                        let x = reflect_index(bc * n + v, self.width);
                        let base = (y * self.width + x) * channels;
                        idx.extend(base..base + channels);
                    }
                }
            }
        }
        idx
    }

    /// Gather indices taking `[blocks, N, N, C]` back to the unpadded map.
    pub fn merge_indices(&self, channels: usize) -> Vec<usize> {
        let n = self.block;
        let mut idx = Vec::with_capacity(self.height * self.width * channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let b = (y / n) * self.grid_cols + x / n;
                let base = ((b * n + y % n) * n + x % n) * channels;
                idx.extend(base..base + channels);
            }
        }
        idx
    }
}

fn check_map(x: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if x.len() != 3 {
        return Err(NomError::invalid_shape(
            op,
            format!("expected [H, W, C], got {x:?}"),
        ));
    }
    Ok((x[0], x[1], x[2]))
}

fn check_blocks(x: &[usize], size: usize, op: &'static str) -> Result<(usize, usize)> {
    if x.len() != 4 || x[1] != size || x[2] != size {
        return Err(NomError::invalid_shape(
            op,
            format!("expected [blocks, {size}, {size}, C], got {x:?}"),
        ));
    }
    Ok((x[0], x[3]))
}

/// Differentiable partition of `[H, W, C]` into `[blocks, N, N, C]`.
pub fn partition_var(x: &Var, block: usize) -> Result<(Var, BlockLayout)> {
    let (h, w, c) = check_map(x.shape(), "partition")?;
    let layout = BlockLayout::new(h, w, block)?;
    let idx: Rc<[usize]> = layout.partition_indices(c).into();
    let blocks = x.gather(idx, &[layout.num_blocks(), block, block, c])?;
    Ok((blocks, layout))
}

/// Differentiable inverse of [`partition_var`], cropping the padding.
pub fn merge_var(blocks: &Var, layout: &BlockLayout) -> Result<Var> {
    let (nb, c) = check_blocks(blocks.shape(), layout.block, "merge")?;
    if nb != layout.num_blocks() {
        return Err(NomError::invalid_shape(
            "merge",
            format!("{nb} blocks for a layout of {}", layout.num_blocks()),
        ));
    }
    let idx: Rc<[usize]> = layout.merge_indices(c).into();
    blocks.gather(idx, &[layout.height, layout.width, c])
}

/// Right-multiplies along block axis `axis` (1 = rows, 2 = columns):
/// `out[.., a', ..] = Σ_a x[.., a, ..] · mat[a, a']`.
fn apply_along(x: &Var, axis: usize, mat: &Var) -> Result<Var> {
    let s = x.shape().to_vec();
    let (nb, n, c) = (s[0], s[1], s[3]);
    let (to_last, back) = match axis {
        1 => ([0, 2, 3, 1], [0, 3, 1, 2]),
        2 => ([0, 1, 3, 2], [0, 1, 3, 2]),
        _ => unreachable!("block axes are 1 and 2"),
    };
    x.permute(&to_last)?
        .reshape(&[nb * n * c, n])?
        .matmul(mat)?
        .reshape(&[nb, n, c, n])?
        .permute(&back)
}

/// Differentiable 2D DCT of every channel of every block.
pub fn dct2_blocks(blocks: &Var, basis: &DctBasis) -> Result<Var> {
    check_blocks(blocks.shape(), basis.n, "dct2")?;
    let bt = Var::constant(basis.transpose.clone());
    apply_along(&apply_along(blocks, 1, &bt)?, 2, &bt)
}

/// Differentiable 2D inverse DCT of every channel of every block.
pub fn idct2_blocks(coeffs: &Var, basis: &DctBasis) -> Result<Var> {
    check_blocks(coeffs.shape(), basis.n, "idct2")?;
    let b = Var::constant(basis.matrix.clone());
    apply_along(&apply_along(coeffs, 1, &b)?, 2, &b)
}

/// Keeps the top-left `l × l` coefficients of each block.
pub fn truncate_var(coeffs: &Var, keep: usize) -> Result<Var> {
    let s = coeffs.shape().to_vec();
    let (nb, c) = check_blocks(&s, s.get(1).copied().unwrap_or(0), "truncate")?;
    let n = s[1];
    if keep == 0 || keep > n {
        return Err(NomError::InvalidArgument(format!(
            "cannot keep {keep} of {n} frequencies"
        )));
    }
    let mut idx = Vec::with_capacity(nb * keep * keep * c);
    for b in 0..nb {
        for i in 0..keep {
            for j in 0..keep {
                let base = ((b * n + i) * n + j) * c;
                idx.extend(base..base + c);
            }
        }
    }
    coeffs.gather(idx.into(), &[nb, keep, keep, c])
}

/// Re-embeds truncated `l × l` blocks into zero-filled `N × N` blocks.
pub fn embed_var(truncated: &Var, block: usize) -> Result<Var> {
    let s = truncated.shape().to_vec();
    let (nb, c) = check_blocks(&s, s.get(1).copied().unwrap_or(0), "embed")?;
    let l = s[1];
    if l > block {
        return Err(NomError::InvalidArgument(format!(
            "cannot embed {l}x{l} blocks into {block}x{block}"
        )));
    }
    let mut idx = Vec::with_capacity(nb * block * block * c);
    for b in 0..nb {
        for i in 0..block {
            for j in 0..block {
                for ch in 0..c {
                    idx.push(if i < l && j < l {
                        ((b * l + i) * l + j) * c + ch
                    } else {
                        crate::ops::ZERO_INDEX
                    });
                }
            }
        }
    }
    truncated.gather(idx.into(), &[nb, block, block, c])
}

fn single_block(block: &Tensor, basis: &DctBasis, op: &'static str) -> Result<Tensor> {
    let s = block.shape();
    if s.len() != 3 || s[0] != basis.n || s[1] != basis.n {
        return Err(NomError::invalid_shape(
            op,
            format!("block {s:?} does not match basis size {}", basis.n),
        ));
    }
    block.reshape(&[1, s[0], s[1], s[2]])
}

/// 2D DCT of one `N × N × C` block.
pub fn dct2_block(block: &Tensor, basis: &DctBasis) -> Result<Tensor> {
    let b = single_block(block, basis, "dct2_block")?;
    let out = dct2_blocks(&Var::constant(b), basis)?;
    out.value().reshape(block.shape())
}

/// 2D inverse DCT of one `N × N × C` block.
pub fn idct2_block(freq: &Tensor, basis: &DctBasis) -> Result<Tensor> {
    let b = single_block(freq, basis, "idct2_block")?;
    let out = idct2_blocks(&Var::constant(b), basis)?;
    out.value().reshape(freq.shape())
}

/// A map cut into blocks, `blocks` shaped `[grid_rows * grid_cols, N, N, C]`.
#[derive(Clone, Debug)]
pub struct BlockPartition {
    pub layout: BlockLayout,
    pub channels: usize,
    pub blocks: Tensor,
}

impl BlockPartition {
    /// Block `(m, n)` as an `N × N × C` tensor.
    pub fn block(&self, m: usize, n: usize) -> Tensor {
        let b = self.layout.block;
        let len = b * b * self.channels;
        let k = m * self.layout.grid_cols + n;
        Tensor::from_parts(
            vec![b, b, self.channels],
            self.blocks.data()[k * len..(k + 1) * len].to_vec(),
        )
    }
}

pub fn partition_blocks(map: &Tensor, block: usize) -> Result<BlockPartition> {
    let (_, _, c) = check_map(map.shape(), "partition")?;
    let (blocks, layout) = partition_var(&Var::constant(map.clone()), block)?;
    Ok(BlockPartition {
        layout,
        channels: c,
        blocks: blocks.value().clone(),
    })
}

pub fn merge_blocks(part: &BlockPartition) -> Result<Tensor> {
    Ok(
        merge_var(&Var::constant(part.blocks.clone()), &part.layout)?
            .value()
            .clone(),
    )
}

/// DCT coefficients per block: `coeffs` is `[blocks, s, s, C]` with `s = N`
/// for a full grid or `s = l` after truncation.
#[derive(Clone, Debug)]
pub struct FrequencyGrid {
    pub layout: BlockLayout,
    pub channels: usize,
    pub kept: usize,
    pub coeffs: Tensor,
}

impl FrequencyGrid {
    pub fn forward(part: &BlockPartition, basis: &DctBasis) -> Result<Self> {
        let coeffs = dct2_blocks(&Var::constant(part.blocks.clone()), basis)?;
        Ok(FrequencyGrid {
            layout: part.layout,
            channels: part.channels,
            kept: part.layout.block,
            coeffs: coeffs.value().clone(),
        })
    }

    pub fn is_full(&self) -> bool {
        self.kept == self.layout.block
    }

    /// Zero-fills truncated blocks back to `N × N`.
    pub fn embedded(&self) -> Result<FrequencyGrid> {
        let full = embed_var(&Var::constant(self.coeffs.clone()), self.layout.block)?;
        Ok(FrequencyGrid {
            kept: self.layout.block,
            coeffs: full.value().clone(),
            ..self.clone()
        })
    }

    pub fn inverse(&self, basis: &DctBasis) -> Result<BlockPartition> {
        let full = self.embedded()?;
        let blocks = idct2_blocks(&Var::constant(full.coeffs), basis)?;
        Ok(BlockPartition {
            layout: self.layout,
            channels: self.channels,
            blocks: blocks.value().clone(),
        })
    }

    pub fn energy(&self) -> f64 {
        self.coeffs.data().iter().map(|v| v * v).sum()
    }
}

/// Low-frequency perceiver: keeps the top-left `⌊αN⌋ × ⌊αN⌋` coefficients of
/// each block, all channels retained.
pub fn low_freq_truncate(grid: &FrequencyGrid, alpha: f64) -> Result<FrequencyGrid> {
    let keep = truncated_size(grid.layout.block, alpha)?.min(grid.kept);
    let coeffs = truncate_var(&Var::constant(grid.coeffs.clone()), keep)?;
    Ok(FrequencyGrid {
        kept: keep,
        coeffs: coeffs.value().clone(),
        ..grid.clone()
    })
}
