use featmix_core::losses::{lovasz_class_term, lovasz_softmax};
use featmix_core::FeatureMatrix;

/// All vectors of length `n` over `0..c`.
fn assignments(n: usize, c: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|v| {
                (0..c).map(move |k| {
                    let mut w = v.clone();
                    w.push(k);
                    w
                })
            })
            .collect();
    }
    out
}

fn one_hot(pred: &[usize], c: usize) -> FeatureMatrix {
    let rows: Vec<Vec<f64>> = pred
        .iter()
        .map(|&p| (0..c).map(|k| if k == p { 1.0 } else { 0.0 }).collect())
        .collect();
    FeatureMatrix::from_rows(&rows).unwrap()
}

/// `|gt & pred| / |gt | pred|`, 1 when both are empty.
fn jaccard(labels: &[usize], pred: &[usize], k: usize) -> f64 {
    let inter = labels.iter().zip(pred).filter(|&(&y, &p)| y == k && p == k).count();
    let union = labels.iter().zip(pred).filter(|&(&y, &p)| y == k || p == k).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[test]
fn hard_predictions_give_one_minus_jaccard() {
    let mut checked = 0;
    for n in 1..=3 {
        for c in 1..=3 {
            for labels in assignments(n, c) {
                for pred in assignments(n, c) {
                    let pm = one_hot(&pred, c);
                    let mut present = Vec::new();
                    for k in 0..c {
                        let term = lovasz_class_term(&pm, &labels, k).unwrap();
                        let want = 1.0 - jaccard(&labels, &pred, k);
                        assert!(
                            (term - want).abs() < 1e-10,
                            "labels {labels:?} pred {pred:?} class {k}: {term} vs {want}"
                        );
                        if labels.contains(&k) {
                            present.push(want);
                        }
                        checked += 1;
                    }
                    let mean = present.iter().sum::<f64>() / present.len() as f64;
                    let total = lovasz_softmax(&pm, &labels).unwrap().value;
                    assert!((total - mean).abs() < 1e-10);
                }
            }
        }
    }
    assert!(checked > 1000);
}
