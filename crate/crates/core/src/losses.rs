//! Training objectives with analytic gradients with respect to logits.
//!
//! Every loss that consumes probabilities assumes they came from a row-wise
//! softmax; its gradient is pushed through the softmax Jacobian
//! `diag(p) - p p^T`, which needs only the probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};
use crate::features::{FeatureMatrix, LogitMatrix, ProbMatrix};

/// Lower clamp applied to probabilities inside logarithms and divisions.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_logits: LogitMatrix,
}

/// A loss over the two per-modality outputs (and optionally the fused one).
#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalLoss {
    pub value: f64,
    pub grad_c: LogitMatrix,
    pub grad_l: LogitMatrix,
    /// Present only for losses that depend on the fused output.
    pub grad_fused: Option<LogitMatrix>,
}

fn ln_clamped(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

pub fn softmax_row(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax(lm: &LogitMatrix) -> ProbMatrix {
    let c = lm.n_cols();
    let mut data = vec![0.0; lm.as_slice().len()];
    for (i, out) in data.chunks_mut(c).enumerate() {
        softmax_row(lm.row(i), out);
    }
    FeatureMatrix::from_vec_unchecked(lm.n_rows(), c, data)
}

/// Gradient with respect to logits given the gradient with respect to the
/// softmax probabilities: `p * (g - <p, g>)`.
pub fn prob_grad_to_logit_grad(pm: &ProbMatrix, grad_probs: &FeatureMatrix) -> LogitMatrix {
    let c = pm.n_cols();
    let mut data = vec![0.0; pm.as_slice().len()];
    for (i, out) in data.chunks_mut(c).enumerate() {
        let (p, g) = (pm.row(i), grad_probs.row(i));
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..c {
            out[k] = p[k] * (g[k] - dot);
        }
    }
    FeatureMatrix::from_vec_unchecked(pm.n_rows(), c, data)
}

fn check_labels(labels: &[usize], n_rows: usize, n_classes: usize) -> Result<()> {
    if labels.len() != n_rows {
        return dim_err(format!("{} labels for {n_rows} rows", labels.len()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
        return arg_err(format!("label {y} out of range for {n_classes} classes"));
    }
    Ok(())
}

fn check_normalized(pm: &ProbMatrix) -> Result<()> {
    for (i, row) in pm.rows().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < -1e-12) {
            return arg_err(format!("row {i} is not a probability vector (sum {s})"));
        }
    }
    Ok(())
}

/// Mean cross-entropy `-(1/n) sum log p_y`.
pub fn cross_entropy(lm: &LogitMatrix, labels: &[usize]) -> Result<LossValue> {
    focal_loss(lm, labels, None, 0.0)
}

/// Focal loss `(1/M) sum alpha_y * -(1 - p_y)^lambda log p_y`.
///
/// `alpha` holds one weight per class; `None` means all ones. With
/// `lambda = 0` and unit weights this is cross-entropy.
pub fn focal_loss(lm: &LogitMatrix, labels: &[usize], alpha: Option<&[f64]>, lambda: f64) -> Result<LossValue> {
    let (n, c) = (lm.n_rows(), lm.n_cols());
    check_labels(labels, n, c)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return arg_err(format!("focal exponent must be >= 0, got {lambda}"));
    }
    if let Some(a) = alpha {
        if a.len() != c {
            return dim_err(format!("{} class weights for {c} classes", a.len()));
        }
        if a.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return arg_err("class weights must be positive");
        }
    }
    let pm = softmax(lm);
    let mut grad = pm.clone();
    let mut value = 0.0;
    for i in 0..n {
        let y = labels[i];
        let w = alpha.map_or(1.0, |a| a[y]) / n as f64;
        let p = pm.get(i, y);
        let q = 1.0 - p;
        let logp = ln_clamped(p);
        value -= w * q.powf(lambda) * logp;
        // d/dz_k of -(1-p)^l log p = -(1-p)^l (d_yk - p_k) + l (1-p)^(l-1) p log p (d_yk - p_k)
        let mut coef = -q.powf(lambda);
        if lambda != 0.0 && q > 0.0 {
            coef += lambda * q.powf(lambda - 1.0) * p * logp;
        }
        let row = grad.row_mut(i);
        for (k, g) in row.iter_mut().enumerate() {
            let delta = if k == y { 1.0 } else { 0.0 };
            *g = w * coef * (delta - pm.get(i, k));
        }
    }
    Ok(LossValue { value, grad_logits: grad })
}

/// Lovász extension of the Jaccard loss of class `k`, accumulating
/// `scale` times its gradient with respect to the probabilities.
///
/// The errors `1 - p_k` (ground truth) or `p_k` (others) are sorted in
/// decreasing order and dotted with the increments of the Jaccard loss
/// along that order.
fn lovasz_class(pm: &ProbMatrix, labels: &[usize], k: usize, scale: f64, grad_p: &mut FeatureMatrix) -> f64 {
    let n = pm.n_rows();
    let errors: Vec<f64> = (0..n)
        .map(|i| if labels[i] == k { 1.0 - pm.get(i, k) } else { pm.get(i, k) })
        .collect();
    let gts = labels.iter().filter(|&&y| y == k).count() as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    let mut value = 0.0;
    for &i in &order {
        let fg = labels[i] == k;
        if fg {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        let w = jaccard - prev;
        prev = jaccard;
        value += w * errors[i];
        let sign = if fg { -1.0 } else { 1.0 };
        grad_p.row_mut(i)[k] += scale * w * sign;
    }
    value
}

/// The Lovász term of a single class.
pub fn lovasz_class_term(pm: &ProbMatrix, labels: &[usize], k: usize) -> Result<f64> {
    check_labels(labels, pm.n_rows(), pm.n_cols())?;
    check_normalized(pm)?;
    if k >= pm.n_cols() {
        return arg_err(format!("class {k} out of range for {} classes", pm.n_cols()));
    }
    let mut scratch = FeatureMatrix::zeros(pm.n_rows(), pm.n_cols());
    Ok(lovasz_class(pm, labels, k, 0.0, &mut scratch))
}

/// Lovász-softmax: the per-class terms averaged over classes present in
/// `labels`.
pub fn lovasz_softmax(pm: &ProbMatrix, labels: &[usize]) -> Result<LossValue> {
    let (n, c) = (pm.n_rows(), pm.n_cols());
    check_labels(labels, n, c)?;
    check_normalized(pm)?;
    let mut grad_p = FeatureMatrix::zeros(n, c);
    let present: Vec<usize> = (0..c).filter(|&k| labels.contains(&k)).collect();
    let scale = 1.0 / present.len() as f64;
    let value = present
        .iter()
        .map(|&k| scale * lovasz_class(pm, labels, k, scale, &mut grad_p))
        .sum();
    Ok(LossValue {
        value,
        grad_logits: prob_grad_to_logit_grad(pm, &grad_p),
    })
}

/// Mean negative entropy `(1/M) sum_m sum_k p log p` of the softmax.
/// Minimizing it pushes predictions toward uniform.
pub fn entropy_max_loss(lm: &LogitMatrix) -> LossValue {
    let pm = softmax(lm);
    let n = lm.n_rows() as f64;
    let mut grad = pm.clone();
    let mut value = 0.0;
    for i in 0..pm.n_rows() {
        let row = grad.row_mut(i);
        let plogp: f64 = row.iter().map(|&p| if p > 0.0 { p * ln_clamped(p) } else { 0.0 }).sum();
        value += plogp;
        for g in row.iter_mut() {
            let p = *g;
            *g = if p > 0.0 { p * (ln_clamped(p) - plogp) / n } else { 0.0 };
        }
    }
    LossValue {
        value: value / n,
        grad_logits: grad,
    }
}

/// Distance between two probability vectors, used by the A2D loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// Sum of absolute differences (twice the total variation).
    #[default]
    L1,
    SquaredEuclidean,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Distance::SquaredEuclidean => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum(),
        }
    }

    /// Gradient with respect to `a`; the gradient with respect to `b` is
    /// its negation for both distances.
    fn grad_a(self, a: &[f64], b: &[f64], out: &mut [f64]) {
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o = match self {
                Distance::L1 => {
                    let d = x - y;
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                Distance::SquaredEuclidean => 2.0 * (x - y),
            };
        }
    }
}

fn check_same_shape(a: &FeatureMatrix, b: &FeatureMatrix, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return dim_err(format!("{what}: {}x{} vs {}x{}", a.n_rows(), a.n_cols(), b.n_rows(), b.n_cols()));
    }
    Ok(())
}

/// Agree-to-disagree loss `-(1/M) sum D(o_c without y, o_l without y)`.
///
/// The ground-truth column is removed from both outputs and the remaining
/// probabilities are renormalized before measuring the distance.
pub fn a2d_loss(o_c: &ProbMatrix, o_l: &ProbMatrix, labels: &[usize], distance: Distance) -> Result<CrossModalLoss> {
    check_same_shape(o_c, o_l, "modality outputs differ in shape")?;
    let (n, c) = (o_c.n_rows(), o_c.n_cols());
    if c < 2 {
        return arg_err("discrepancy needs at least 2 classes");
    }
    check_labels(labels, n, c)?;
    let mut gp_c = FeatureMatrix::from_vec_unchecked(n, c, vec![0.0; n * c]);
    let mut gp_l = gp_c.clone();
    let mut value = 0.0;
    let (mut qc, mut ql) = (vec![0.0; c - 1], vec![0.0; c - 1]);
    let mut gq = vec![0.0; c - 1];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let y = labels[i];
        let strip = |row: &[f64], q: &mut [f64]| -> f64 {
            let mut s = 0.0;
            let mut j = 0;
            for (k, &p) in row.iter().enumerate() {
                if k != y {
                    q[j] = p;
                    s += p;
                    j += 1;
                }
            }
            let s = s.max(PROB_FLOOR);
            q.iter_mut().for_each(|v| *v /= s);
            s
        };
        let s_c = strip(o_c.row(i), &mut qc);
        let s_l = strip(o_l.row(i), &mut ql);
        value -= inv_n * distance.eval(&qc, &ql);

        distance.grad_a(&qc, &ql, &mut gq);
        // loss = -D/n; q_k = p_k / S, so dL/dp_j = (g_j - <g, q>) / S.
        for (gp, q, s, sign) in [(&mut gp_c, &qc, s_c, -inv_n), (&mut gp_l, &ql, s_l, inv_n)] {
            let dot: f64 = gq.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
            let row = gp.row_mut(i);
            let mut j = 0;
            for (k, out) in row.iter_mut().enumerate() {
                if k != y {
                    *out = sign * (gq[j] - dot) / s;
                    j += 1;
                }
            }
        }
    }
    Ok(CrossModalLoss {
        value,
        grad_c: prob_grad_to_logit_grad(o_c, &gp_c),
        grad_l: prob_grad_to_logit_grad(o_l, &gp_l),
        grad_fused: None,
    })
}

/// Cross-modal KL loss `mean(KL(o_c || o_fused) + KL(o_l || o_fused))`.
pub fn xmuda_loss(o_c: &ProbMatrix, o_l: &ProbMatrix, o_fused: &ProbMatrix) -> Result<CrossModalLoss> {
    check_same_shape(o_c, o_l, "modality outputs differ in shape")?;
    check_same_shape(o_c, o_fused, "fused output differs in shape")?;
    let (n, c) = (o_c.n_rows(), o_c.n_cols());
    let inv_n = 1.0 / n as f64;
    let mut gp_c = FeatureMatrix::from_vec_unchecked(n, c, vec![0.0; n * c]);
    let mut gp_l = gp_c.clone();
    let mut gp_f = gp_c.clone();
    let mut value = 0.0;
    for i in 0..n {
        for k in 0..c {
            let q = o_fused.get(i, k).max(PROB_FLOOR);
            let lq = q.ln();
            for (pm, gp) in [(o_c, &mut gp_c), (o_l, &mut gp_l)] {
                let p = pm.get(i, k);
                if p > 0.0 {
                    let lp = ln_clamped(p);
                    value += inv_n * p * (lp - lq);
                    gp.row_mut(i)[k] = inv_n * (lp - lq + 1.0);
                    if o_fused.get(i, k) >= PROB_FLOOR {
                        gp_f.row_mut(i)[k] -= inv_n * p / q;
                    }
                }
            }
        }
    }
    Ok(CrossModalLoss {
        value,
        grad_c: prob_grad_to_logit_grad(o_c, &gp_c),
        grad_l: prob_grad_to_logit_grad(o_l, &gp_l),
        grad_fused: Some(prob_grad_to_logit_grad(o_fused, &gp_f)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Focal + Lovász-softmax on ID rows.
    Segmentation,
    /// Cross-entropy on ID rows.
    #[default]
    Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossModal {
    #[default]
    None,
    A2d,
    Xmuda,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CombinedLossConfig {
    /// Weight of the outlier entropy term.
    pub gamma1: f64,
    /// Weight of the cross-modal term.
    pub gamma2: f64,
    pub mode: LossMode,
    pub cross_modal: CrossModal,
    /// Focal exponent used in segmentation mode.
    pub focal_lambda: f64,
    /// Distance used by the A2D term.
    pub distance: Distance,
}

impl Default for CombinedLossConfig {
    fn default() -> Self {
        Self {
            gamma1: 3.0,
            gamma2: 1.0,
            mode: LossMode::Detection,
            cross_modal: CrossModal::None,
            focal_lambda: 2.0,
            distance: Distance::L1,
        }
    }
}

impl CombinedLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0 && self.gamma1.is_finite() && self.gamma2.is_finite()) {
            return arg_err("loss weights must be finite and >= 0");
        }
        if !(self.focal_lambda >= 0.0) {
            return arg_err("focal exponent must be >= 0");
        }
        Ok(())
    }
}

/// Individual terms fed to [`combined_loss`]. Gradients of `cls`, `focal`
/// and `lovasz` are on the ID logits, `entropy` on the outlier logits.
#[derive(Debug, Clone, Default)]
pub struct LossParts {
    pub cls: Option<LossValue>,
    pub focal: Option<LossValue>,
    pub lovasz: Option<LossValue>,
    pub entropy: Option<LossValue>,
    pub cross_modal: Option<CrossModalLoss>,
}

/// Weighted total together with per-target gradients.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub value: f64,
    /// Unweighted ID classification value (`cls`, or `focal + lovasz`).
    pub cls_value: f64,
    pub ent_value: f64,
    pub xmodal_value: f64,
    pub grad_id: LogitMatrix,
    pub grad_outlier: Option<LogitMatrix>,
    /// Gradients on the per-modality logits, scaled by `gamma2`.
    pub grad_modal: Option<(LogitMatrix, LogitMatrix)>,
    /// Gradient on the fused ID logits from the cross-modal term, scaled.
    pub grad_fused_xmodal: Option<LogitMatrix>,
}

fn require<'a, T>(part: &'a Option<T>, name: &str) -> Result<&'a T> {
    part.as_ref()
        .map_or_else(|| arg_err(format!("combined loss is missing the {name} term")), Ok)
}

/// `cls + gamma1 * ent + gamma2 * xmodal` (detection) or
/// `focal + lovasz + gamma1 * ent + gamma2 * xmodal` (segmentation).
///
/// The entropy term is required when `gamma1 > 0` and the cross-modal term
/// when `cfg.cross_modal` is not `None`.
pub fn combined_loss(parts: &LossParts, cfg: &CombinedLossConfig) -> Result<CombinedLoss> {
    cfg.validate()?;
    let (cls_value, grad_id) = match cfg.mode {
        LossMode::Detection => {
            let cls = require(&parts.cls, "classification")?;
            (cls.value, cls.grad_logits.clone())
        }
        LossMode::Segmentation => {
            let foc = require(&parts.focal, "focal")?;
            let lov = require(&parts.lovasz, "Lovász")?;
            if !foc.grad_logits.same_shape(&lov.grad_logits) {
                return dim_err("focal and Lovász gradients differ in shape");
            }
            let mut g = foc.grad_logits.clone();
            g.add_scaled_in_place(&lov.grad_logits, 1.0);
            (foc.value + lov.value, g)
        }
    };
    let (ent_value, grad_outlier) = match (&parts.entropy, cfg.gamma1 > 0.0) {
        (Some(e), _) => (e.value, Some(e.grad_logits.scaled(cfg.gamma1))),
        (None, true) => return arg_err("combined loss is missing the entropy term"),
        (None, false) => (0.0, None),
    };
    let (xmodal_value, grad_modal, grad_fused_xmodal) = match cfg.cross_modal {
        CrossModal::None => (0.0, None, None),
        CrossModal::A2d | CrossModal::Xmuda => {
            let x = require(&parts.cross_modal, "cross-modal")?;
            (
                x.value,
                Some((x.grad_c.scaled(cfg.gamma2), x.grad_l.scaled(cfg.gamma2))),
                x.grad_fused.as_ref().map(|g| g.scaled(cfg.gamma2)),
            )
        }
    };
    Ok(CombinedLoss {
        value: cls_value + cfg.gamma1 * ent_value + cfg.gamma2 * xmodal_value,
        cls_value,
        ent_value,
        xmodal_value,
        grad_id,
        grad_outlier,
        grad_modal,
        grad_fused_xmodal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::RandomSource;

    fn lm(rows: &[Vec<f64>]) -> LogitMatrix {
        FeatureMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&lm(&[vec![0.0, 0.0], vec![1000.0, 0.0]]));
        assert_eq!(p.row(0), &[0.5, 0.5]);
        assert_eq!(p.get(1, 0), 1.0);
        assert!(p.get(1, 1) >= 0.0 && p.get(1, 1) < 1e-300);
        let mut rng = RandomSource::new(1);
        let z: Vec<f64> = (0..6).map(|_| 3.0 * rng.standard_normal()).collect();
        let a = softmax(&FeatureMatrix::new(1, 6, z.clone()).unwrap());
        let b = softmax(&FeatureMatrix::new(1, 6, z.iter().map(|v| v + 17.5).collect()).unwrap());
        for k in 0..6 {
            assert!((a.get(0, k) - b.get(0, k)).abs() < 1e-14);
        }
        assert!((a.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform() {
        let v = cross_entropy(&lm(&[vec![0.0, 0.0]]), &[1]).unwrap();
        assert!((v.value - 2f64.ln()).abs() < 1e-12);
        let sharp = cross_entropy(&lm(&[vec![60.0, 0.0]]), &[0]).unwrap();
        assert!(sharp.value < 1e-20);
        assert!(cross_entropy(&lm(&[vec![0.0, 0.0]]), &[2]).is_err());
    }

    #[test]
    fn focal_scalar_value() {
        // logits [log 9, 0] give p_0 = 0.9.
        let v = focal_loss(&lm(&[vec![9f64.ln(), 0.0]]), &[0], None, 2.0).unwrap();
        let expect = -(0.1f64).powi(2) * 0.9f64.ln();
        assert!((v.value - expect).abs() < 1e-12);
        assert!((v.value - 0.0010536).abs() < 1e-7);
        assert!(focal_loss(&lm(&[vec![0.0, 0.0]]), &[0], Some(&[1.0, 0.0]), 2.0).is_err());
        assert!(focal_loss(&lm(&[vec![0.0, 0.0]]), &[0], None, -1.0).is_err());
    }

    #[test]
    fn lovasz_two_points_half() {
        let pm = lm(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v = lovasz_softmax(&pm, &[0, 0]).unwrap();
        assert!((v.value - 0.5).abs() < 1e-12);
        let perfect = lovasz_softmax(&lm(&[vec![1.0, 0.0], vec![0.0, 1.0]]), &[0, 1]).unwrap();
        assert_eq!(perfect.value, 0.0);
        assert!(lovasz_softmax(&lm(&[vec![0.7, 0.7]]), &[0]).is_err());
    }

    #[test]
    fn entropy_extremes() {
        let u = entropy_max_loss(&lm(&[vec![0.0, 0.0]]));
        assert!((u.value + 2f64.ln()).abs() < 1e-12);
        let hard = entropy_max_loss(&lm(&[vec![800.0, 0.0]]));
        assert_eq!(hard.value, 0.0);
    }

    #[test]
    fn a2d_cases() {
        let o = lm(&[vec![0.2, 0.5, 0.3]]);
        assert_eq!(a2d_loss(&o, &o, &[0], Distance::L1).unwrap().value, 0.0);
        let oc = lm(&[vec![0.5, 0.5, 0.0]]);
        let ol = lm(&[vec![0.5, 0.0, 0.5]]);
        let v = a2d_loss(&oc, &ol, &[0], Distance::L1).unwrap();
        assert!((v.value + 2.0).abs() < 1e-12);
        let w = a2d_loss(&ol, &oc, &[0], Distance::L1).unwrap();
        assert_eq!(v.value, w.value);
        let one = lm(&[vec![1.0]]);
        assert!(a2d_loss(&one, &one, &[0], Distance::L1).is_err());
    }

    #[test]
    fn xmuda_cases() {
        let o = lm(&[vec![0.3, 0.7]]);
        assert!(xmuda_loss(&o, &o, &o).unwrap().value.abs() < 1e-15);
        let oc = lm(&[vec![1.0, 0.0]]);
        let of = lm(&[vec![0.5, 0.5]]);
        let v = xmuda_loss(&oc, &of, &of).unwrap();
        assert!((v.value - 2f64.ln()).abs() < 1e-12);
    }

    fn unit(v: f64) -> LossValue {
        LossValue {
            value: v,
            grad_logits: lm(&[vec![v, -v]]),
        }
    }

    #[test]
    fn combined_weights() {
        let parts = LossParts {
            focal: Some(unit(1.0)),
            lovasz: Some(unit(1.0)),
            entropy: Some(unit(1.0)),
            ..Default::default()
        };
        let cfg = CombinedLossConfig {
            mode: LossMode::Segmentation,
            ..Default::default()
        };
        let out = combined_loss(&parts, &cfg).unwrap();
        assert_eq!(out.value, 5.0);
        assert_eq!(out.grad_id.as_slice(), &[2.0, -2.0]);
        assert_eq!(out.grad_outlier.unwrap().as_slice(), &[3.0, -3.0]);

        let det = CombinedLossConfig {
            gamma1: 0.0,
            ..Default::default()
        };
        let only_cls = LossParts {
            cls: Some(unit(0.7)),
            ..Default::default()
        };
        assert_eq!(combined_loss(&only_cls, &det).unwrap().value, 0.7);
        assert!(combined_loss(&only_cls, &CombinedLossConfig::default()).is_err());
        assert!(combined_loss(&parts, &CombinedLossConfig::default()).is_err());
        let xm = CombinedLossConfig {
            gamma1: 0.0,
            cross_modal: CrossModal::A2d,
            ..Default::default()
        };
        assert!(combined_loss(&only_cls, &xm).is_err());
    }
}
