//! Central finite-difference checks for the losses and the network.
//!
//! Errors are `|numeric - analytic| / max(1, |analytic|)`, reported as the
//! maximum over entries and instances.

use crate::error::Result;
use crate::features::{FeatureMatrix, ModalitySet, RandomSource};
use crate::losses::*;
use crate::model::{step_loss_and_grad, FeatureBank, NetShape, SynthMethod, SynthSpace, TrainConfig, TwoStreamNet};
use crate::synth::MixingConfig;

pub const STEP: f64 = 1e-6;

fn random_matrix(rng: &mut RandomSource, n: usize, c: usize, scale: f64) -> FeatureMatrix {
    FeatureMatrix::from_vec_unchecked(n, c, (0..n * c).map(|_| scale * rng.standard_normal()).collect())
}

fn perturbed(m: &FeatureMatrix, idx: usize, delta: f64) -> FeatureMatrix {
    let mut v = m.as_slice().to_vec();
    v[idx] += delta;
    FeatureMatrix::from_vec_unchecked(m.n_rows(), m.n_cols(), v)
}

fn rel_err(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / analytic.abs().max(1.0)
}

/// Largest error between `grad` and central differences of `f` at `x`.
pub fn matrix_error(x: &FeatureMatrix, grad: &FeatureMatrix, f: impl Fn(&FeatureMatrix) -> f64) -> f64 {
    if !x.same_shape(grad) {
        return f64::INFINITY;
    }
    (0..x.as_slice().len())
        .map(|idx| {
            let fd = (f(&perturbed(x, idx, STEP)) - f(&perturbed(x, idx, -STEP))) / (2.0 * STEP);
            rel_err(fd, grad.as_slice()[idx])
        })
        .fold(0.0, f64::max)
}

fn labels(rng: &mut RandomSource, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(c)).collect()
}

/// Maximum error of each loss over `instances` random 5 x 4 problems.
pub fn loss_suite(instances: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let root = RandomSource::new(seed);
    let mut worst = vec![
        ("cross_entropy", 0.0f64),
        ("focal", 0.0),
        ("lovasz_softmax", 0.0),
        ("entropy_max", 0.0),
        ("a2d", 0.0),
        ("xmuda", 0.0),
        ("combined", 0.0),
    ];
    for t in 0..instances {
        let mut rng = root.child_indexed("instance", t as u64);
        let z = random_matrix(&mut rng, 5, 4, 2.0);
        let zc = random_matrix(&mut rng, 5, 4, 2.0);
        let zl = random_matrix(&mut rng, 5, 4, 2.0);
        let y = labels(&mut rng, 5, 4);
        let alpha: Vec<f64> = (0..4).map(|_| 0.5 + rng.uniform()).collect();
        let lambda = [0.0, 0.5, 2.0, 3.7][t % 4];
        let dist = if t % 2 == 0 { Distance::L1 } else { Distance::SquaredEuclidean };

        let mut errs = [0.0f64; 7];
        let g = cross_entropy(&z, &y)?.grad_logits;
        errs[0] = matrix_error(&z, &g, |z| cross_entropy(z, &y).unwrap().value);
        let g = focal_loss(&z, &y, Some(&alpha), lambda)?.grad_logits;
        errs[1] = matrix_error(&z, &g, |z| focal_loss(z, &y, Some(&alpha), lambda).unwrap().value);
        let g = lovasz_softmax(&softmax(&z), &y)?.grad_logits;
        errs[2] = matrix_error(&z, &g, |z| lovasz_softmax(&softmax(z), &y).unwrap().value);
        let g = entropy_max_loss(&z).grad_logits;
        errs[3] = matrix_error(&z, &g, |z| entropy_max_loss(z).value);
        let v = a2d_loss(&softmax(&zc), &softmax(&zl), &y, dist)?;
        errs[4] = matrix_error(&zc, &v.grad_c, |a| a2d_loss(&softmax(a), &softmax(&zl), &y, dist).unwrap().value)
            .max(matrix_error(&zl, &v.grad_l, |b| {
                a2d_loss(&softmax(&zc), &softmax(b), &y, dist).unwrap().value
            }));
        let xm = |c: &FeatureMatrix, l: &FeatureMatrix, u: &FeatureMatrix| {
            xmuda_loss(&softmax(c), &softmax(l), &softmax(u)).unwrap().value
        };
        let v = xmuda_loss(&softmax(&zc), &softmax(&zl), &softmax(&z))?;
        errs[5] = matrix_error(&zc, &v.grad_c, |a| xm(a, &zl, &z))
            .max(matrix_error(&zl, &v.grad_l, |b| xm(&zc, b, &z)))
            .max(match &v.grad_fused {
                Some(g) => matrix_error(&z, g, |u| xm(&zc, &zl, u)),
                None => f64::INFINITY,
            });

        let cfg = CombinedLossConfig {
            gamma1: 0.5 + 3.0 * rng.uniform(),
            gamma2: 0.5 + rng.uniform(),
            mode: if t % 2 == 0 { LossMode::Detection } else { LossMode::Segmentation },
            cross_modal: CrossModal::A2d,
            distance: dist,
            ..Default::default()
        };
        let parts = |z: &FeatureMatrix, zo: &FeatureMatrix, zc: &FeatureMatrix| LossParts {
            cls: Some(cross_entropy(z, &y).unwrap()),
            focal: Some(focal_loss(z, &y, None, cfg.focal_lambda).unwrap()),
            lovasz: Some(lovasz_softmax(&softmax(z), &y).unwrap()),
            entropy: Some(entropy_max_loss(zo)),
            cross_modal: Some(a2d_loss(&softmax(zc), &softmax(&zl), &y, dist).unwrap()),
        };
        let total = |z: &FeatureMatrix, zo: &FeatureMatrix, zc: &FeatureMatrix| {
            combined_loss(&parts(z, zo, zc), &cfg).unwrap().value
        };
        let out = combined_loss(&parts(&z, &zl, &zc), &cfg)?;
        let modal = out.grad_modal.as_ref().map(|m| m.0.clone());
        errs[6] = matrix_error(&z, &out.grad_id, |a| total(a, &zl, &zc))
            .max(match &out.grad_outlier {
                Some(g) => matrix_error(&zl, g, |a| total(&z, a, &zc)),
                None => f64::INFINITY,
            })
            .max(match &modal {
                Some(g) => matrix_error(&zc, g, |a| total(&z, &zl, a)),
                None => f64::INFINITY,
            });
        for (w, e) in worst.iter_mut().zip(errs) {
            w.1 = w.1.max(e);
        }
    }
    Ok(worst)
}

/// Maximum error of the full training-step gradient over every parameter
/// of a small random network.
pub fn network_error(cfg: &TrainConfig, widths: &[usize], head_hidden: usize, seed: u64) -> Result<f64> {
    let mut rng = RandomSource::new(seed);
    let shape = NetShape::uniform(widths.to_vec(), [5, 4], 3, cfg.loss.cross_modal != CrossModal::None)
        .with_head_hidden(head_hidden)
        .with_stream_norm(seed % 3 == 0);
    let mut net = TwoStreamNet::new(shape, &mut rng)?;
    // Zero biases put rows with an all-dead layer exactly on the next
    // layer's ReLU kink, where central differences are meaningless.
    for p in net.params_mut() {
        *p += 0.1 * rng.standard_normal();
    }
    let x = ModalitySet::from_blocks(widths.iter().map(|&w| random_matrix(&mut rng, 6, w, 1.0)).collect())?;
    let y: Vec<usize> = (0..6).map(|i| i % 3).collect();
    let synth_rng = rng.child("synth");
    let bank_widths = match cfg.synth_space {
        SynthSpace::Features => vec![4; widths.len()],
        SynthSpace::Inputs => widths.to_vec(),
    };
    let mut bank = FeatureBank::new(3, bank_widths.clone(), 16);
    // Enough rows per class for the VOS-style sampler to fit moments.
    let per_class = bank_widths.iter().sum::<usize>() + 2;
    for _ in 0..per_class {
        let rows = ModalitySet::from_blocks(bank_widths.iter().map(|&w| random_matrix(&mut rng, 3, w, 1.0)).collect())?;
        bank.push(&rows, &[0, 1, 2]);
    }
    let loss = |n: &TwoStreamNet| step_loss_and_grad(n, &x, &y, cfg, &mut bank.clone(), &mut synth_rng.clone());
    let (_, grads) = loss(&net)?;
    let mut worst = 0.0f64;
    for (idx, &g) in grads.iter().enumerate() {
        let mut plus = net.clone();
        plus.params_mut()[idx] += STEP;
        let mut minus = net.clone();
        minus.params_mut()[idx] -= STEP;
        let fd = (loss(&plus)?.0.loss_total - loss(&minus)?.0.loss_total) / (2.0 * STEP);
        worst = worst.max(rel_err(fd, g));
    }
    Ok(worst)
}

/// Training configs exercised by [`network_suite`].
pub fn network_case(synth: SynthMethod, space: SynthSpace, mode: LossMode, cross_modal: CrossModal) -> TrainConfig {
    TrainConfig {
        synth_method: synth,
        synth_space: space,
        mixing: MixingConfig::per_sample(2),
        loss: CombinedLossConfig {
            gamma1: 3.0,
            gamma2: 0.7,
            mode,
            cross_modal,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Network gradient errors over `instances` seeds cycling through loss
/// and synthesis variants, plus three- and one-stream networks.
///
/// VOS-style sampling is checked only on inputs: on stream features its
/// bank depends on the parameters while the samples are detached.
pub fn network_suite(instances: usize) -> Result<f64> {
    use CrossModal as X;
    use LossMode as L;
    use SynthSpace as S;
    let cases = [
        (SynthMethod::None, S::Features, L::Detection, X::None),
        (SynthMethod::FeatureMixing, S::Features, L::Detection, X::None),
        (SynthMethod::FeatureMixing, S::Features, L::Segmentation, X::A2d),
        (SynthMethod::FeatureMixing, S::Features, L::Detection, X::Xmuda),
        (SynthMethod::Mixup, S::Features, L::Detection, X::None),
        (SynthMethod::FeatureMixing, S::Inputs, L::Segmentation, X::Xmuda),
    ];
    let mut worst = 0.0f64;
    for seed in 0..instances as u64 {
        let (s, sp, m, x) = cases[seed as usize % cases.len()];
        worst = worst.max(network_error(&network_case(s, sp, m, x), &[3, 4], (seed % 2) as usize * 5, seed)?);
    }
    let fm = network_case(SynthMethod::FeatureMixing, S::Features, L::Detection, X::None);
    worst = worst.max(network_error(&fm, &[4, 4, 4], 0, 99)?);
    worst = worst.max(network_error(&fm, &[6], 3, 98)?);
    let np = network_case(SynthMethod::Npmix, S::Features, L::Detection, X::None);
    worst = worst.max(network_error(&np, &[3, 4], 0, 97)?);
    let decayed = TrainConfig { weight_decay: 0.3, ..fm.clone() };
    worst = worst.max(network_error(&decayed, &[3, 4], 4, 96)?);
    let vos = network_case(SynthMethod::Vos, S::Inputs, L::Detection, X::None);
    worst = worst.max(network_error(&vos, &[2, 2], 0, 5)?);
    Ok(worst)
}
