//! Outlier synthesis in feature space.
//!
//! Feature Mixing swaps `N` randomly chosen dimensions between modality
//! blocks of the same sample. The bimodal form follows the reference
//! pseudo-code: independent index draws per modality, matched by draw order.
//! The cyclic form extends it to three or more modalities and the unimodal
//! form treats the two halves of one block as pseudo-modalities.
//!
//! Mixup, a VOS-style low-likelihood sampler and an NP-Mix-style
//! nearest-neighbor expansion are the baselines. The NP-Mix variant here is
//! an approximation of the published method, kept as a speed and quality
//! reference only.

use std::time::Instant;

use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};
use crate::features::{sample_index_subset, FeatureMatrix, LabeledFeatureSet, ModalitySet, RandomSource};
use crate::gauss::{estimate_moments, mahalanobis_sq};

/// Feature Mixing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixingConfig {
    /// Number of swapped dimensions per modality.
    pub n_swap: usize,
    /// Draw a fresh mask for every row instead of one per call.
    pub per_sample_masks: bool,
}

impl MixingConfig {
    pub fn new(n_swap: usize) -> Self {
        Self {
            n_swap,
            per_sample_masks: false,
        }
    }

    pub fn per_sample(n_swap: usize) -> Self {
        Self {
            n_swap,
            per_sample_masks: true,
        }
    }
}

impl Default for MixingConfig {
    fn default() -> Self {
        Self::new(10)
    }
}

/// Swap selections: `Shared[m]` is modality `m`'s index list for every row,
/// `PerRow[i][m]` the list for row `i`.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskSet {
    Shared(Vec<Vec<usize>>),
    PerRow(Vec<Vec<Vec<usize>>>),
}

impl MaskSet {
    pub fn for_row(&self, i: usize) -> &[Vec<usize>] {
        match self {
            MaskSet::Shared(m) => m,
            MaskSet::PerRow(rows) => &rows[i],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwapKind {
    Pairwise,
    Cyclic,
    SplitHalves,
}

/// How each outlier row was derived from the source rows; used to route
/// gradients from outliers back to their sources.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Swap { kind: SwapKind, masks: MaskSet },
    /// `out[i] = weight[i] * src[i] + (1 - weight[i]) * src[partner[i]]`.
    Interpolation { partner: Vec<usize>, weight: Vec<f64> },
    /// Drawn from a fitted density; no gradient path to the sources.
    Sampled,
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub outliers: ModalitySet,
    pub provenance: Provenance,
    /// Wall time of the synthesis call, seconds.
    pub elapsed: f64,
}

impl SynthesisResult {
    pub fn masks_used(&self) -> Option<&MaskSet> {
        match &self.provenance {
            Provenance::Swap { masks, .. } => Some(masks),
            _ => None,
        }
    }

    /// Maps a gradient on the outliers to a gradient on the source rows.
    ///
    /// Swaps are permutations, so the gradient is permuted back.
    /// Interpolations split the gradient by their weights. Sampled outliers
    /// have no source path and return `None`.
    pub fn backprop(&self, grad: &ModalitySet, source_rows: usize) -> Result<Option<ModalitySet>> {
        if grad.widths() != self.outliers.widths() || grad.n_rows() != self.outliers.n_rows() {
            return dim_err("outlier gradient shape does not match the outliers");
        }
        match &self.provenance {
            Provenance::Sampled => Ok(None),
            Provenance::Swap { kind, masks } => {
                let mut blocks: Vec<FeatureMatrix> = grad.blocks().to_vec();
                for i in 0..grad.n_rows() {
                    let sel = masks.for_row(i);
                    match kind {
                        SwapKind::Pairwise => {
                            let (a, b) = blocks.split_at_mut(1);
                            swap_pair_row(a[0].row_mut(i), b[0].row_mut(i), &sel[0], &sel[1]);
                        }
                        SwapKind::SplitHalves => {
                            let row = blocks[0].row_mut(i);
                            let half = row.len() / 2;
                            let (left, right) = row.split_at_mut(half);
                            swap_pair_row(left, right, &sel[0], &sel[1]);
                        }
                        SwapKind::Cyclic => rotate_row(&mut blocks, i, sel, true),
                    }
                }
                Ok(Some(ModalitySet::new(blocks, grad.names().to_vec())?))
            }
            Provenance::Interpolation { partner, weight } => {
                let mut blocks: Vec<FeatureMatrix> = grad
                    .blocks()
                    .iter()
                    .map(|b| FeatureMatrix::zeros(source_rows, b.n_cols()))
                    .collect();
                for (m, g) in grad.blocks().iter().enumerate() {
                    let out = blocks[m].as_mut_slice();
                    let w = g.n_cols();
                    for i in 0..g.n_rows() {
                        let (p, lam) = (partner[i], weight[i]);
                        for (k, &gv) in g.row(i).iter().enumerate() {
                            out[i * w + k] += lam * gv;
                            out[p * w + k] += (1.0 - lam) * gv;
                        }
                    }
                }
                Ok(Some(ModalitySet::new(blocks, grad.names().to_vec())?))
            }
        }
    }
}

/// Swaps `c[sel_c[p]]` with `l[sel_l[p]]` for every `p`. Selections hold
/// distinct indices, so this equals the simultaneous assignment of the
/// reference pseudo-code, and applying it twice is the identity.
#[inline]
pub(crate) fn swap_pair_row(c: &mut [f64], l: &mut [f64], sel_c: &[usize], sel_l: &[usize]) {
    for (&i, &j) in sel_c.iter().zip(sel_l) {
        std::mem::swap(&mut c[i], &mut l[j]);
    }
}

/// Forward: block `m` position `sel[m][p]` takes block `m+1`'s value at
/// `sel[m+1][p]`. `inverse` undoes that.
fn rotate_row(blocks: &mut [FeatureMatrix], row: usize, sel: &[Vec<usize>], inverse: bool) {
    let k = blocks.len();
    for p in 0..sel[0].len() {
        let vals: Vec<f64> = (0..k).map(|m| blocks[m].row(row)[sel[m][p]]).collect();
        for m in 0..k {
            let src = if inverse { (m + k - 1) % k } else { (m + 1) % k };
            blocks[m].row_mut(row)[sel[m][p]] = vals[src];
        }
    }
}

fn validate_selection(sel: &[usize], width: usize, what: &str) -> Result<()> {
    let mut seen = vec![false; width];
    for &i in sel {
        if i >= width {
            return arg_err(format!("{what} index {i} out of range for width {width}"));
        }
        if std::mem::replace(&mut seen[i], true) {
            return arg_err(format!("{what} index {i} selected twice"));
        }
    }
    Ok(())
}

fn check_swap_width(n_swap: usize, widths: &[usize]) -> Result<()> {
    let min = widths.iter().copied().min().unwrap_or(0);
    if n_swap > min {
        return arg_err(format!("n_swap {n_swap} exceeds the narrowest block width {min}"));
    }
    Ok(())
}

fn draw_masks(
    rng: &mut RandomSource,
    widths: &[usize],
    n_rows: usize,
    cfg: &MixingConfig,
) -> Result<MaskSet> {
    let draw = |rng: &mut RandomSource| -> Result<Vec<Vec<usize>>> {
        widths
            .iter()
            .map(|&w| sample_index_subset(rng, w, cfg.n_swap))
            .collect()
    };
    if cfg.per_sample_masks {
        Ok(MaskSet::PerRow((0..n_rows).map(|_| draw(rng)).collect::<Result<_>>()?))
    } else {
        Ok(MaskSet::Shared(draw(rng)?))
    }
}

fn apply_pairwise(ms: &ModalitySet, masks: &MaskSet) -> Result<ModalitySet> {
    let mut c = ms.block(0).clone();
    let mut l = ms.block(1).clone();
    match masks {
        MaskSet::Shared(sel) => {
            for i in 0..ms.n_rows() {
                swap_pair_row(c.row_mut(i), l.row_mut(i), &sel[0], &sel[1]);
            }
        }
        MaskSet::PerRow(rows) => {
            for (i, sel) in rows.iter().enumerate() {
                swap_pair_row(c.row_mut(i), l.row_mut(i), &sel[0], &sel[1]);
            }
        }
    }
    ModalitySet::new(vec![c, l], ms.names().to_vec())
}

/// Bimodal Feature Mixing.
pub fn feature_mixing(
    ms: &ModalitySet,
    cfg: &MixingConfig,
    rng: &mut RandomSource,
) -> Result<SynthesisResult> {
    let start = Instant::now();
    if ms.n_blocks() != 2 {
        return arg_err(format!("feature mixing needs 2 blocks, got {}", ms.n_blocks()));
    }
    check_swap_width(cfg.n_swap, &ms.widths())?;
    let masks = draw_masks(rng, &ms.widths(), ms.n_rows(), cfg)?;
    let outliers = apply_pairwise(ms, &masks)?;
    Ok(SynthesisResult {
        outliers,
        provenance: Provenance::Swap {
            kind: SwapKind::Pairwise,
            masks,
        },
        elapsed: start.elapsed().as_secs_f64(),
    })
}

/// Bimodal Feature Mixing with caller-fixed selections shared by all rows.
pub fn feature_mixing_with(ms: &ModalitySet, sel_c: &[usize], sel_l: &[usize]) -> Result<ModalitySet> {
    if ms.n_blocks() != 2 {
        return arg_err(format!("feature mixing needs 2 blocks, got {}", ms.n_blocks()));
    }
    if sel_c.len() != sel_l.len() {
        return arg_err("selections differ in length");
    }
    validate_selection(sel_c, ms.block(0).n_cols(), "first modality")?;
    validate_selection(sel_l, ms.block(1).n_cols(), "second modality")?;
    apply_pairwise(ms, &MaskSet::Shared(vec![sel_c.to_vec(), sel_l.to_vec()]))
}

fn apply_cyclic(ms: &ModalitySet, masks: &MaskSet) -> Result<ModalitySet> {
    let mut blocks = ms.blocks().to_vec();
    for i in 0..ms.n_rows() {
        rotate_row(&mut blocks, i, masks.for_row(i), false);
    }
    ModalitySet::new(blocks, ms.names().to_vec())
}

/// Feature Mixing over `k >= 3` modalities: each block's selected positions
/// receive the next block's selected values, all at once.
pub fn feature_mixing_cyclic(
    ms: &ModalitySet,
    cfg: &MixingConfig,
    rng: &mut RandomSource,
) -> Result<SynthesisResult> {
    let start = Instant::now();
    if ms.n_blocks() < 3 {
        return arg_err(format!(
            "cyclic mixing needs at least 3 blocks, got {}; use feature_mixing",
            ms.n_blocks()
        ));
    }
    check_swap_width(cfg.n_swap, &ms.widths())?;
    let masks = draw_masks(rng, &ms.widths(), ms.n_rows(), cfg)?;
    let outliers = apply_cyclic(ms, &masks)?;
    Ok(SynthesisResult {
        outliers,
        provenance: Provenance::Swap {
            kind: SwapKind::Cyclic,
            masks,
        },
        elapsed: start.elapsed().as_secs_f64(),
    })
}

/// Cyclic mixing with caller-fixed selections, one list per block.
pub fn feature_mixing_cyclic_with(ms: &ModalitySet, selections: &[Vec<usize>]) -> Result<ModalitySet> {
    if ms.n_blocks() < 3 || selections.len() != ms.n_blocks() {
        return arg_err("cyclic mixing needs at least 3 blocks and one selection per block");
    }
    let n = selections[0].len();
    for (m, sel) in selections.iter().enumerate() {
        if sel.len() != n {
            return arg_err("selections differ in length");
        }
        validate_selection(sel, ms.block(m).n_cols(), "block")?;
    }
    apply_cyclic(ms, &MaskSet::Shared(selections.to_vec()))
}

fn split_halves(fm: &FeatureMatrix) -> Result<ModalitySet> {
    if fm.n_cols() % 2 != 0 {
        return arg_err(format!("unimodal mixing needs an even width, got {}", fm.n_cols()));
    }
    let half = fm.n_cols() / 2;
    ModalitySet::split(fm, &[half, half], vec!["left".into(), "right".into()])
}

/// Feature Mixing inside one modality: the left and right halves of each
/// row play the two modalities.
pub fn feature_mixing_unimodal(
    fm: &FeatureMatrix,
    cfg: &MixingConfig,
    rng: &mut RandomSource,
) -> Result<SynthesisResult> {
    let start = Instant::now();
    let halves = split_halves(fm)?;
    check_swap_width(cfg.n_swap, &halves.widths())?;
    let masks = draw_masks(rng, &halves.widths(), fm.n_rows(), cfg)?;
    let mixed = apply_pairwise(&halves, &masks)?.concat();
    Ok(SynthesisResult {
        outliers: ModalitySet::from_blocks(vec![mixed])?,
        provenance: Provenance::Swap {
            kind: SwapKind::SplitHalves,
            masks,
        },
        elapsed: start.elapsed().as_secs_f64(),
    })
}

/// Unimodal mixing with caller-fixed selections into each half.
pub fn feature_mixing_unimodal_with(
    fm: &FeatureMatrix,
    sel_left: &[usize],
    sel_right: &[usize],
) -> Result<FeatureMatrix> {
    let halves = split_halves(fm)?;
    Ok(feature_mixing_with(&halves, sel_left, sel_right)?.concat())
}

/// `out[i] = w[i] * row_i + (1 - w[i]) * row_partner[i]`, per block.
pub fn interpolate_rows(ms: &ModalitySet, partner: &[usize], weight: &[f64]) -> Result<ModalitySet> {
    let n = ms.n_rows();
    if partner.len() != n || weight.len() != n {
        return dim_err("one partner and one weight per row required");
    }
    if let Some(&p) = partner.iter().find(|&&p| p >= n) {
        return arg_err(format!("partner row {p} out of range"));
    }
    if weight.iter().any(|w| !w.is_finite()) {
        return arg_err("non-finite interpolation weight");
    }
    // Interpolating each block separately equals interpolating the
    // concatenation and splitting it again.
    let blocks = ms
        .blocks()
        .iter()
        .map(|b| {
            let w = b.n_cols();
            let mut data = Vec::with_capacity(n * w);
            for i in 0..n {
                let (lam, a, c) = (weight[i], b.row(i), b.row(partner[i]));
                data.extend(a.iter().zip(c).map(|(x, y)| lam * x + (1.0 - lam) * y));
            }
            FeatureMatrix::new(n, w, data)
        })
        .collect::<Result<Vec<_>>>()?;
    ModalitySet::new(blocks, ms.names().to_vec())
}

/// Mixup: each row is interpolated with a random distinct row using
/// `lambda ~ Beta(alpha, alpha)`.
pub fn mixup_synth(ms: &ModalitySet, alpha: f64, rng: &mut RandomSource) -> Result<SynthesisResult> {
    let start = Instant::now();
    let n = ms.n_rows();
    if n < 2 {
        return arg_err("mixup needs at least 2 rows");
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return arg_err(format!("alpha must be positive, got {alpha}"));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| crate::Error::Argument(e.to_string()))?;
    let mut partner = Vec::with_capacity(n);
    let mut weight = Vec::with_capacity(n);
    for i in 0..n {
        let j = rng.below(n - 1);
        partner.push(if j >= i { j + 1 } else { j });
        weight.push(beta.sample(rng));
    }
    let outliers = interpolate_rows(ms, &partner, &weight)?;
    Ok(SynthesisResult {
        outliers,
        provenance: Provenance::Interpolation { partner, weight },
        elapsed: start.elapsed().as_secs_f64(),
    })
}

/// VOS-style synthesis: per ID class, fit a Gaussian to the concatenated
/// features, draw `n_candidates` from it and keep the `keep_fraction` with
/// the lowest likelihood (largest Mahalanobis distance). Kept rows stay in
/// draw order, grouped by class.
pub fn vos_synth(
    lfs: &LabeledFeatureSet,
    n_candidates: usize,
    keep_fraction: f64,
    rng: &mut RandomSource,
) -> Result<SynthesisResult> {
    let start = Instant::now();
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return arg_err(format!("keep_fraction must be in (0, 1], got {keep_fraction}"));
    }
    if n_candidates == 0 {
        return arg_err("n_candidates must be positive");
    }
    let features = lfs.features().concat();
    let d = features.n_cols();
    let keep = ((n_candidates as f64 * keep_fraction).ceil() as usize).clamp(1, n_candidates);

    let mut data = Vec::new();
    let mut n_out = 0;
    for class in 0..lfs.n_classes() {
        let rows: Vec<usize> = (0..lfs.n_rows())
            .filter(|&i| !lfs.is_ood()[i] && lfs.labels()[i] == class)
            .collect();
        if rows.is_empty() {
            continue;
        }
        if rows.len() < d + 2 {
            return arg_err(format!(
                "class {class} has {} rows; {} needed to fit {d}-dim moments",
                rows.len(),
                d + 2
            ));
        }
        let gm = estimate_moments(&features.select_rows(&rows)?)?;
        let mut candidates = Vec::with_capacity(n_candidates);
        for _ in 0..n_candidates {
            let x = gm.sample(rng);
            let d2 = mahalanobis_sq(&x, &gm)?;
            candidates.push((x, d2));
        }
        let mut order: Vec<usize> = (0..n_candidates).collect();
        order.sort_by(|&a, &b| candidates[b].1.total_cmp(&candidates[a].1).then(a.cmp(&b)));
        let mut kept = order[..keep].to_vec();
        kept.sort_unstable();
        for k in kept {
            data.extend_from_slice(&candidates[k].0);
            n_out += 1;
        }
    }
    if n_out == 0 {
        return arg_err("no ID rows to fit");
    }
    let fm = FeatureMatrix::new(n_out, d, data)?;
    let outliers = ModalitySet::split(&fm, &lfs.features().widths(), lfs.features().names().to_vec())?;
    Ok(SynthesisResult {
        outliers,
        provenance: Provenance::Sampled,
        elapsed: start.elapsed().as_secs_f64(),
    })
}

/// NP-Mix-style parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NpMixConfig {
    /// Candidates drawn from other classes per source row.
    pub k_neighbors: usize,
    /// Range of the extrapolation factor `beta`.
    pub beta_range: (f64, f64),
}

impl Default for NpMixConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 32,
            beta_range: (0.5, 1.5),
        }
    }
}

/// NP-Mix-style expansion toward other classes.
///
/// For each ID row, draws `k_neighbors` candidate rows uniformly from the
/// other classes, takes the nearest (Euclidean on concatenated features)
/// and emits `F + beta (F_nn - F)` with `beta ~ U(beta_range)`.
pub fn npmix_synth(
    lfs: &LabeledFeatureSet,
    k_neighbors: usize,
    beta_range: (f64, f64),
    rng: &mut RandomSource,
) -> Result<SynthesisResult> {
    let start = Instant::now();
    if k_neighbors == 0 {
        return arg_err("k_neighbors must be at least 1");
    }
    let (lo, hi) = beta_range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return arg_err(format!("invalid beta range ({lo}, {hi})"));
    }
    let id = lfs.id_only()?;
    let n = id.n_rows();
    let labels = id.labels();

    // Rows grouped by class so "any row outside class c" is two contiguous runs.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| labels[i]);
    let mut class_start = vec![0usize; id.n_classes() + 1];
    for &i in &order {
        class_start[labels[i] + 1] += 1;
    }
    for c in 0..id.n_classes() {
        class_start[c + 1] += class_start[c];
    }
    if (0..id.n_classes()).filter(|&c| class_start[c + 1] > class_start[c]).count() < 2 {
        return arg_err("nearest-neighbor expansion needs at least 2 classes");
    }

    let features = id.features().concat();
    let mut partner = Vec::with_capacity(n);
    let mut weight = Vec::with_capacity(n);
    for i in 0..n {
        let c = labels[i];
        let (s, e) = (class_start[c], class_start[c + 1]);
        let pool = n - (e - s);
        let x = features.row(i);
        let mut best = (f64::INFINITY, usize::MAX);
        for _ in 0..k_neighbors {
            let r = rng.below(pool);
            let j = order[if r < s { r } else { r + (e - s) }];
            let dist: f64 = x
                .iter()
                .zip(features.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist < best.0 {
                best = (dist, j);
            }
        }
        let beta = if hi > lo { lo + (hi - lo) * rng.uniform() } else { lo };
        partner.push(best.1);
        weight.push(1.0 - beta);
    }
    let outliers = interpolate_rows(id.features(), &partner, &weight)?;
    Ok(SynthesisResult {
        outliers,
        provenance: Provenance::Interpolation { partner, weight },
        elapsed: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::cross_modal_delta;
    use proptest::prelude::*;

    fn row_block(v: &[f64]) -> FeatureMatrix {
        FeatureMatrix::new(1, v.len(), v.to_vec()).unwrap()
    }

    fn random_block(rng: &mut RandomSource, n: usize, w: usize) -> FeatureMatrix {
        FeatureMatrix::new(n, w, (0..n * w).map(|_| rng.standard_normal()).collect()).unwrap()
    }

    fn sorted_row(ms: &ModalitySet, i: usize) -> Vec<f64> {
        let mut v: Vec<f64> = ms.blocks().iter().flat_map(|b| b.row(i).to_vec()).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn zero_swap_is_identity() {
        let mut rng = RandomSource::new(1);
        let ms = ModalitySet::from_blocks(vec![random_block(&mut rng, 5, 4), random_block(&mut rng, 5, 6)]).unwrap();
        let out = feature_mixing(&ms, &MixingConfig::new(0), &mut rng).unwrap();
        assert_eq!(out.outliers, ms);
        let ms3 = ModalitySet::from_blocks(vec![
            random_block(&mut rng, 3, 4),
            random_block(&mut rng, 3, 4),
            random_block(&mut rng, 3, 4),
        ])
        .unwrap();
        assert_eq!(feature_mixing_cyclic(&ms3, &MixingConfig::new(0), &mut rng).unwrap().outliers, ms3);
        let fm = random_block(&mut rng, 3, 4);
        let uni = feature_mixing_unimodal(&fm, &MixingConfig::new(0), &mut rng).unwrap();
        assert_eq!(uni.outliers.block(0), &fm);
    }

    #[test]
    fn full_ordered_swap() {
        let ms = ModalitySet::from_blocks(vec![row_block(&[1.0, 2.0, 3.0]), row_block(&[4.0, 5.0, 6.0])]).unwrap();
        let out = feature_mixing_with(&ms, &[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(out.block(0).as_slice(), &[4.0, 5.0, 6.0]);
        assert_eq!(out.block(1).as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(out.concat().as_slice(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn draw_order_pairs_positions() {
        let ms = ModalitySet::from_blocks(vec![row_block(&[1.0, 2.0, 3.0]), row_block(&[4.0, 5.0, 6.0])]).unwrap();
        let out = feature_mixing_with(&ms, &[2, 0], &[0, 1]).unwrap();
        assert_eq!(out.block(0).as_slice(), &[5.0, 2.0, 4.0]);
        assert_eq!(out.block(1).as_slice(), &[3.0, 1.0, 6.0]);
    }

    #[test]
    fn every_selection_pair_hits_the_bound() {
        let ms = ModalitySet::from_blocks(vec![row_block(&[0.0, 0.0]), row_block(&[10.0, 10.0])]).unwrap();
        let delta = cross_modal_delta(&[0.0, 0.0], &[10.0, 10.0]);
        assert_eq!(delta, 10.0);
        for a in 0..2 {
            for b in 0..2 {
                let out = feature_mixing_with(&ms, &[a], &[b]).unwrap();
                let dev: f64 = ms
                    .concat()
                    .as_slice()
                    .iter()
                    .zip(out.concat().as_slice())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert_eq!(dev, 2f64.sqrt() * 10.0);
                assert_eq!(dev, (2.0f64 * 1.0).sqrt() * delta);
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let mut rng = RandomSource::new(2);
        let ms = ModalitySet::from_blocks(vec![random_block(&mut rng, 2, 3), random_block(&mut rng, 2, 5)]).unwrap();
        assert!(feature_mixing(&ms, &MixingConfig::new(4), &mut rng).is_err());
        assert!(feature_mixing(&ms, &MixingConfig::new(3), &mut rng).is_ok());
        assert!(feature_mixing_cyclic(&ms, &MixingConfig::new(1), &mut rng).is_err());
        assert!(feature_mixing_with(&ms, &[0, 0], &[1, 2]).is_err());
        let odd = random_block(&mut rng, 2, 5);
        assert!(feature_mixing_unimodal(&odd, &MixingConfig::new(1), &mut rng).is_err());
    }

    #[test]
    fn cyclic_single_dimension() {
        let ms = ModalitySet::from_blocks(vec![row_block(&[1.0]), row_block(&[2.0]), row_block(&[3.0])]).unwrap();
        let out = feature_mixing_cyclic(&ms, &MixingConfig::new(1), &mut RandomSource::new(0)).unwrap();
        assert_eq!(out.outliers.concat().as_slice(), &[2.0, 3.0, 1.0]);
    }

    #[test]
    fn cyclic_conserves_sum() {
        let mut rng = RandomSource::new(3);
        let ms = ModalitySet::from_blocks((0..3).map(|_| random_block(&mut rng, 6, 4)).collect()).unwrap();
        let out = feature_mixing_cyclic(&ms, &MixingConfig::new(2), &mut rng).unwrap();
        for i in 0..6 {
            assert_eq!(sorted_row(&ms, i), sorted_row(&out.outliers, i));
        }
        let before: f64 = ms.concat().as_slice().iter().sum();
        let after: f64 = out.outliers.concat().as_slice().iter().sum();
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn unimodal_half_swap() {
        let fm = row_block(&[1.0, 2.0, 3.0, 4.0]);
        let out = feature_mixing_unimodal_with(&fm, &[0, 1], &[0, 1]).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn unimodal_preserves_multiset() {
        let mut rng = RandomSource::new(4);
        let fm = random_block(&mut rng, 10, 8);
        let out = feature_mixing_unimodal(&fm, &MixingConfig::per_sample(2), &mut rng).unwrap();
        let src = ModalitySet::from_blocks(vec![fm]).unwrap();
        for i in 0..10 {
            assert_eq!(sorted_row(&src, i), sorted_row(&out.outliers, i));
        }
    }

    #[test]
    fn shared_masks_apply_to_all_rows() {
        let mut rng = RandomSource::new(5);
        let ms = ModalitySet::from_blocks(vec![random_block(&mut rng, 8, 6), random_block(&mut rng, 8, 6)]).unwrap();
        let out = feature_mixing(&ms, &MixingConfig::new(2), &mut rng).unwrap();
        let MaskSet::Shared(sel) = out.masks_used().unwrap() else {
            panic!("expected shared masks");
        };
        let again = feature_mixing_with(&ms, &sel[0], &sel[1]).unwrap();
        assert_eq!(again, out.outliers);
    }

    #[test]
    fn swap_backprop_is_the_same_permutation() {
        let mut rng = RandomSource::new(6);
        let ms = ModalitySet::from_blocks(vec![random_block(&mut rng, 4, 5), random_block(&mut rng, 4, 3)]).unwrap();
        let out = feature_mixing(&ms, &MixingConfig::per_sample(2), &mut rng).unwrap();
        // <g, P x> = <P^T g, x> for the swap P.
        let g = ModalitySet::from_blocks(vec![random_block(&mut rng, 4, 5), random_block(&mut rng, 4, 3)]).unwrap();
        let back = out.backprop(&g, 4).unwrap().unwrap();
        let dot = |a: &ModalitySet, b: &ModalitySet| -> f64 {
            a.concat().as_slice().iter().zip(b.concat().as_slice()).map(|(x, y)| x * y).sum()
        };
        assert!((dot(&g, &out.outliers) - dot(&back, &ms)).abs() < 1e-12);

        let ms3 = ModalitySet::from_blocks((0..3).map(|_| random_block(&mut rng, 4, 4)).collect()).unwrap();
        let cyc = feature_mixing_cyclic(&ms3, &MixingConfig::new(2), &mut rng).unwrap();
        let g3 = ModalitySet::from_blocks((0..3).map(|_| random_block(&mut rng, 4, 4)).collect()).unwrap();
        let back3 = cyc.backprop(&g3, 4).unwrap().unwrap();
        assert!((dot(&g3, &cyc.outliers) - dot(&back3, &ms3)).abs() < 1e-12);
    }

    #[test]
    fn interpolation_backprop_is_adjoint() {
        let mut rng = RandomSource::new(7);
        let ms = ModalitySet::from_blocks(vec![random_block(&mut rng, 6, 3), random_block(&mut rng, 6, 2)]).unwrap();
        let out = mixup_synth(&ms, 0.4, &mut rng).unwrap();
        let g = ModalitySet::from_blocks(vec![random_block(&mut rng, 6, 3), random_block(&mut rng, 6, 2)]).unwrap();
        let back = out.backprop(&g, 6).unwrap().unwrap();
        let dot = |a: &ModalitySet, b: &ModalitySet| -> f64 {
            a.concat().as_slice().iter().zip(b.concat().as_slice()).map(|(x, y)| x * y).sum()
        };
        assert!((dot(&g, &out.outliers) - dot(&back, &ms)).abs() < 1e-10);
    }

    #[test]
    fn mixup_degenerate_and_midpoint() {
        let ms = ModalitySet::from_blocks(vec![FeatureMatrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap()]).unwrap();
        assert_eq!(interpolate_rows(&ms, &[1, 0], &[1.0, 1.0]).unwrap(), ms);
        let mid = interpolate_rows(&ms, &[1, 0], &[0.5, 0.5]).unwrap();
        assert_eq!(mid.block(0).row(0), &[1.0, 1.0]);
        let one = ModalitySet::from_blocks(vec![row_block(&[1.0])]).unwrap();
        assert!(mixup_synth(&one, 1.0, &mut RandomSource::new(0)).is_err());
        assert!(mixup_synth(&ms, 0.0, &mut RandomSource::new(0)).is_err());
    }

    #[test]
    fn mixup_stays_in_parent_box() {
        let mut rng = RandomSource::new(8);
        let ms = ModalitySet::from_blocks(vec![random_block(&mut rng, 50, 4), random_block(&mut rng, 50, 3)]).unwrap();
        let out = mixup_synth(&ms, 0.4, &mut rng).unwrap();
        let Provenance::Interpolation { partner, .. } = &out.provenance else {
            panic!("mixup records its partners");
        };
        let (src, res) = (ms.concat(), out.outliers.concat());
        for i in 0..50 {
            assert_ne!(partner[i], i);
            for k in 0..7 {
                let (a, b) = (src.get(i, k), src.get(partner[i], k));
                let v = res.get(i, k);
                assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
            }
        }
    }

    fn gaussian_classes(rng: &mut RandomSource, n_per: usize, classes: usize, w: usize) -> LabeledFeatureSet {
        let n = n_per * classes;
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for _ in 0..n_per {
                a.extend((0..w).map(|_| rng.standard_normal() + 3.0 * c as f64));
                b.extend((0..w).map(|_| rng.standard_normal() - 3.0 * c as f64));
                labels.push(c);
            }
        }
        let ms = ModalitySet::from_blocks(vec![
            FeatureMatrix::new(n, w, a).unwrap(),
            FeatureMatrix::new(n, w, b).unwrap(),
        ])
        .unwrap();
        LabeledFeatureSet::new(ms, labels, vec![false; n], classes).unwrap()
    }

    #[test]
    fn vos_keep_all_is_the_candidate_draw() {
        let mut rng = RandomSource::new(9);
        let lfs = gaussian_classes(&mut rng, 40, 1, 2);
        let all = vos_synth(&lfs, 25, 1.0, &mut RandomSource::new(1)).unwrap();
        assert_eq!(all.outliers.n_rows(), 25);
        let gm = estimate_moments(&lfs.features().concat()).unwrap();
        let mut r = RandomSource::new(1);
        let expect: Vec<f64> = (0..25).flat_map(|_| gm.sample(&mut r)).collect();
        assert_eq!(all.outliers.concat().as_slice(), expect.as_slice());
    }

    #[test]
    fn vos_keeps_the_tail() {
        let mut rng = RandomSource::new(10);
        let lfs = gaussian_classes(&mut rng, 200, 2, 2);
        let out = vos_synth(&lfs, 1000, 0.1, &mut rng).unwrap();
        assert_eq!(out.outliers.n_rows(), 200);
        // Kept rows of class 0 against class-0 moments vs a fresh draw.
        let class0 = lfs.select_rows(&(0..200).collect::<Vec<_>>()).unwrap();
        let gm = estimate_moments(&class0.features().concat()).unwrap();
        let kept = out.outliers.concat();
        let kept_mean: f64 = (0..100).map(|i| mahalanobis_sq(kept.row(i), &gm).unwrap()).sum::<f64>() / 100.0;
        let mut r = RandomSource::new(3);
        let cand_mean: f64 = (0..1000)
            .map(|_| mahalanobis_sq(&gm.sample(&mut r), &gm).unwrap())
            .sum::<f64>()
            / 1000.0;
        assert!(kept_mean >= cand_mean);
    }

    #[test]
    fn vos_needs_enough_rows() {
        let mut rng = RandomSource::new(11);
        let lfs = gaussian_classes(&mut rng, 5, 2, 4);
        assert!(vos_synth(&lfs, 10, 0.5, &mut rng).is_err());
        assert!(vos_synth(&lfs, 10, 0.0, &mut rng).is_err());
    }

    #[test]
    fn npmix_forced_betas() {
        let mut rng = RandomSource::new(12);
        let lfs = gaussian_classes(&mut rng, 10, 3, 2);
        let zero = npmix_synth(&lfs, 4, (0.0, 0.0), &mut rng).unwrap();
        assert_eq!(&zero.outliers, lfs.features());
        let one = npmix_synth(&lfs, 4, (1.0, 1.0), &mut rng).unwrap();
        let Provenance::Interpolation { partner, .. } = &one.provenance else {
            panic!();
        };
        let src = lfs.features().concat();
        for (i, &p) in partner.iter().enumerate() {
            assert_ne!(lfs.labels()[p], lfs.labels()[i]);
            assert_eq!(one.outliers.concat().row(i), src.row(p));
        }
    }

    #[test]
    fn npmix_norm_bound() {
        let mut rng = RandomSource::new(13);
        let lfs = gaussian_classes(&mut rng, 20, 3, 3);
        let out = npmix_synth(&lfs, 5, (0.5, 1.5), &mut rng).unwrap();
        let Provenance::Interpolation { partner, .. } = &out.provenance else {
            panic!();
        };
        let (src, res) = (lfs.features().concat(), out.outliers.concat());
        let norm = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        for i in 0..src.n_rows() {
            let moved = norm(res.row(i), src.row(i));
            let span = norm(src.row(partner[i]), src.row(i));
            assert!(moved <= 1.5 * span + 1e-12);
        }
    }

    #[test]
    fn npmix_single_class_rejected() {
        let mut rng = RandomSource::new(14);
        let lfs = gaussian_classes(&mut rng, 10, 1, 2);
        assert!(npmix_synth(&lfs, 3, (0.5, 1.5), &mut rng).is_err());
    }

    #[test]
    fn synthesizers_are_seed_deterministic() {
        let mut rng = RandomSource::new(15);
        let lfs = gaussian_classes(&mut rng, 20, 2, 3);
        let ms = lfs.features();
        let run = |seed| {
            let mut r = RandomSource::new(seed);
            (
                feature_mixing(ms, &MixingConfig::per_sample(2), &mut r).unwrap().outliers,
                mixup_synth(ms, 1.0, &mut r).unwrap().outliers,
                npmix_synth(&lfs, 3, (0.5, 1.5), &mut r).unwrap().outliers,
                vos_synth(&lfs, 30, 0.2, &mut r).unwrap().outliers,
            )
        };
        assert_eq!(run(77), run(77));
    }

    proptest! {
        #[test]
        fn mixing_permutes_each_row(
            seed in any::<u64>(),
            rows in 1usize..6,
            wc in 1usize..9,
            wl in 1usize..9,
            n_frac in 0.0f64..=1.0,
            per_row in any::<bool>(),
        ) {
            let mut rng = RandomSource::new(seed);
            let ms = ModalitySet::from_blocks(vec![random_block(&mut rng, rows, wc), random_block(&mut rng, rows, wl)]).unwrap();
            let n_swap = (n_frac * wc.min(wl) as f64).floor() as usize;
            let cfg = MixingConfig { n_swap, per_sample_masks: per_row };
            let out = feature_mixing(&ms, &cfg, &mut rng).unwrap();
            for i in 0..rows {
                prop_assert_eq!(sorted_row(&ms, i), sorted_row(&out.outliers, i));
                let dev_sq: f64 = ms.concat().row(i).iter().zip(out.outliers.concat().row(i)).map(|(a, b)| (a - b).powi(2)).sum();
                let delta = cross_modal_delta(ms.block(0).row(i), ms.block(1).row(i));
                prop_assert!(dev_sq <= 2.0 * n_swap as f64 * delta * delta * (1.0 + 1e-12));
            }
        }
    }
}
