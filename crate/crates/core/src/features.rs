//! Dense feature storage, the multimodal data model, and seeded randomness.
//!
//! Features are stored row-major with one sample per row. A [`ModalitySet`]
//! keeps one [`FeatureMatrix`] per modality; all blocks share the row count.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{arg_err, dim_err, Error, Result};

/// Dense row-major matrix of finite reals with at least one row and column.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
}

/// Pre-softmax network outputs, one row per sample.
pub type LogitMatrix = FeatureMatrix;

/// Row-stochastic matrix of class probabilities.
pub type ProbMatrix = FeatureMatrix;

impl FeatureMatrix {
    pub fn new(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return dim_err(format!("matrix must be at least 1x1, got {n_rows}x{n_cols}"));
        }
        if data.len() != n_rows * n_cols {
            return dim_err(format!(
                "{} values cannot fill a {n_rows}x{n_cols} matrix",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / n_cols,
                col: pos % n_cols,
            });
        }
        Ok(Self { data, n_rows, n_cols })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return dim_err("rows have differing lengths");
        }
        Self::new(rows.len(), n_cols, rows.concat())
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        assert!(n_rows > 0 && n_cols > 0, "matrix must be at least 1x1");
        Self {
            data: vec![0.0; n_rows * n_cols],
            n_rows,
            n_cols,
        }
    }

    /// Callers guarantee shape and finiteness.
    pub(crate) fn from_vec_unchecked(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), n_rows * n_cols);
        debug_assert!(n_rows > 0 && n_cols > 0);
        Self { data, n_rows, n_cols }
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    #[inline]
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n_cols + col]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_cols)
    }

    /// Copy of columns `start..start + width`.
    pub fn columns(&self, start: usize, width: usize) -> Result<FeatureMatrix> {
        if width == 0 || start + width > self.n_cols {
            return dim_err(format!(
                "column range {start}..{} outside width {}",
                start + width,
                self.n_cols
            ));
        }
        let mut data = Vec::with_capacity(self.n_rows * width);
        for row in self.rows() {
            data.extend_from_slice(&row[start..start + width]);
        }
        Ok(Self::from_vec_unchecked(self.n_rows, width, data))
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<FeatureMatrix> {
        if indices.is_empty() {
            return dim_err("row selection is empty");
        }
        let mut data = Vec::with_capacity(indices.len() * self.n_cols);
        for &i in indices {
            if i >= self.n_rows {
                return dim_err(format!("row {i} out of range for {} rows", self.n_rows));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self::from_vec_unchecked(indices.len(), self.n_cols, data))
    }

    /// Elementwise scaling; the result stays finite only for finite `factor`.
    pub fn scaled(&self, factor: f64) -> FeatureMatrix {
        let data = self.data.iter().map(|v| v * factor).collect();
        Self::from_vec_unchecked(self.n_rows, self.n_cols, data)
    }

    pub fn same_shape(&self, other: &FeatureMatrix) -> bool {
        self.n_rows == other.n_rows && self.n_cols == other.n_cols
    }

    pub(crate) fn add_scaled_in_place(&mut self, other: &FeatureMatrix, factor: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }
}

/// Ordered per-modality feature blocks sharing one row count.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySet {
    blocks: Vec<FeatureMatrix>,
    names: Vec<String>,
}

impl ModalitySet {
    pub fn new(blocks: Vec<FeatureMatrix>, names: Vec<String>) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return arg_err("a modality set needs at least one block");
        };
        if names.len() != blocks.len() {
            return arg_err(format!(
                "{} names given for {} blocks",
                names.len(),
                blocks.len()
            ));
        }
        let n_rows = first.n_rows();
        if let Some((i, b)) = blocks.iter().enumerate().find(|(_, b)| b.n_rows() != n_rows) {
            return dim_err(format!(
                "block {i} has {} rows, block 0 has {n_rows}",
                b.n_rows()
            ));
        }
        Ok(Self { blocks, names })
    }

    /// Blocks named `m0`, `m1`, ...
    pub fn from_blocks(blocks: Vec<FeatureMatrix>) -> Result<Self> {
        let names = (0..blocks.len()).map(|i| format!("m{i}")).collect();
        Self::new(blocks, names)
    }

    pub fn blocks(&self) -> &[FeatureMatrix] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &FeatureMatrix {
        &self.blocks[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn into_blocks(self) -> Vec<FeatureMatrix> {
        self.blocks
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_rows(&self) -> usize {
        self.blocks[0].n_rows()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.blocks.iter().map(FeatureMatrix::n_cols).collect()
    }

    pub fn total_width(&self) -> usize {
        self.blocks.iter().map(FeatureMatrix::n_cols).sum()
    }

    /// Per-sample concatenation of all blocks, in block order.
    pub fn concat(&self) -> FeatureMatrix {
        if self.blocks.len() == 1 {
            return self.blocks[0].clone();
        }
        let width = self.total_width();
        let mut data = Vec::with_capacity(self.n_rows() * width);
        for i in 0..self.n_rows() {
            for b in &self.blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        FeatureMatrix::from_vec_unchecked(self.n_rows(), width, data)
    }

    /// Inverse of [`concat`](Self::concat): cut `fm` into blocks of `widths`.
    pub fn split(fm: &FeatureMatrix, widths: &[usize], names: Vec<String>) -> Result<Self> {
        if widths.iter().sum::<usize>() != fm.n_cols() {
            return dim_err(format!(
                "block widths {widths:?} do not sum to {}",
                fm.n_cols()
            ));
        }
        let mut blocks = Vec::with_capacity(widths.len());
        let mut start = 0;
        for &w in widths {
            blocks.push(fm.columns(start, w)?);
            start += w;
        }
        Self::new(blocks, names)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<ModalitySet> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.select_rows(indices))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            names: self.names.clone(),
        })
    }
}

/// Features with class labels and ID/OOD flags.
///
/// ID rows carry labels in `0..n_classes`; OOD rows carry the sentinel
/// `n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    features: ModalitySet,
    labels: Vec<usize>,
    is_ood: Vec<bool>,
    n_classes: usize,
}

impl LabeledFeatureSet {
    pub fn new(
        features: ModalitySet,
        labels: Vec<usize>,
        is_ood: Vec<bool>,
        n_classes: usize,
    ) -> Result<Self> {
        let n = features.n_rows();
        if labels.len() != n || is_ood.len() != n {
            return dim_err(format!(
                "{n} rows but {} labels and {} OOD flags",
                labels.len(),
                is_ood.len()
            ));
        }
        for (i, (&y, &ood)) in labels.iter().zip(&is_ood).enumerate() {
            if ood && y != n_classes {
                return arg_err(format!("OOD row {i} must carry sentinel label {n_classes}, got {y}"));
            }
            if !ood && y >= n_classes {
                return arg_err(format!("ID row {i} has label {y} >= {n_classes} classes"));
            }
        }
        Ok(Self {
            features,
            labels,
            is_ood,
            n_classes,
        })
    }

    pub fn features(&self) -> &ModalitySet {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn is_ood(&self) -> &[bool] {
        &self.is_ood
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn sentinel(&self) -> usize {
        self.n_classes
    }

    pub fn has_ood(&self) -> bool {
        self.is_ood.iter().any(|&o| o)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<LabeledFeatureSet> {
        let features = self.features.select_rows(indices)?;
        Ok(Self {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            is_ood: indices.iter().map(|&i| self.is_ood[i]).collect(),
            n_classes: self.n_classes,
        })
    }

    /// The ID rows only, or an error when there are none.
    pub fn id_only(&self) -> Result<LabeledFeatureSet> {
        let idx: Vec<usize> = (0..self.n_rows()).filter(|&i| !self.is_ood[i]).collect();
        if idx.is_empty() {
            return arg_err("no ID rows present");
        }
        self.select_rows(&idx)
    }
}

/// Seeded, splittable random stream.
///
/// Children are derived from the parent's seed and a label, never from the
/// parent's position in its stream, so adding a consumer elsewhere does not
/// shift existing streams.
#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn child(&self, label: &str) -> RandomSource {
        Self::new(derive_seed(self.seed, label))
    }

    pub fn child_indexed(&self, label: &str, index: u64) -> RandomSource {
        Self::new(splitmix64(derive_seed(self.seed, label) ^ splitmix64(index)))
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

impl RngCore for RandomSource {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for `label` under `seed` (FNV-1a over the label, then mixed).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

/// `n` distinct indices from `0..range_size`, uniform over subsets, in draw order.
pub fn sample_index_subset(
    rng: &mut RandomSource,
    range_size: usize,
    n: usize,
) -> Result<Vec<usize>> {
    if n > range_size {
        return arg_err(format!("cannot draw {n} distinct indices from {range_size}"));
    }
    Ok(rand::seq::index::sample(rng, range_size, n).into_vec())
}
