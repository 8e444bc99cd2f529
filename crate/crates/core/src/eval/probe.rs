use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, EvalError};
use crate::numeric::{Adam, AdamConfig, Float, Graph, ParamStore, Tensor};
use crate::pretrain::step_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub predictions: Vec<usize>,
}

fn to_matrix<T: Float>(x: &[Vec<T>], d: usize) -> Result<Vec<Vec<f64>>, EvalError> {
    x.iter()
        .map(|r| {
            if r.len() != d {
                return Err(EvalError::DimensionMismatch {
                    expected: d,
                    found: r.len(),
                });
            }
            Ok(r.iter().map(|v| v.as_f64()).collect())
        })
        .collect()
}

/// Train a softmax-regression classifier (one linear map plus bias) on
/// fixed embeddings with full-batch Adam from zero weights, then report
/// accuracy on the evaluation set. Features are standardized with training
/// statistics, which keeps the classifier linear in the embeddings.
pub fn linear_probe<T: Float>(
    train_x: &[Vec<T>],
    train_y: &[usize],
    eval_x: &[Vec<T>],
    eval_y: &[usize],
    classes: usize,
    config: ProbeConfig,
) -> Result<ProbeResult, EvalError> {
    if train_x.len() != train_y.len() || eval_x.len() != eval_y.len() {
        return Err(EvalError::Invalid("features and labels differ in count".into()));
    }
    if eval_x.is_empty() || classes == 0 {
        return Err(EvalError::Invalid("empty evaluation set or class list".into()));
    }
    if let Some(&y) = train_y.iter().chain(eval_y).find(|&&y| y >= classes) {
        return Err(EvalError::Invalid(format!("label {y} outside {classes} classes")));
    }
    for c in 0..classes {
        if !train_y.contains(&c) {
            return Err(EvalError::EmptyClass(c));
        }
    }
    let d = train_x[0].len();
    let tx = to_matrix(train_x, d)?;
    let ex = to_matrix(eval_x, d)?;

    let n = tx.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| tx.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let var = tx.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let standardize = |rows: &[Vec<f64>]| -> Tensor<f64> {
        let data = rows
            .iter()
            .flat_map(|r| (0..d).map(|j| (r[j] - mean[j]) / std[j]).collect::<Vec<_>>())
            .collect();
        Tensor::new(vec![rows.len(), d], data).expect("consistent shape")
    };
    let xs = standardize(&tx);
    let xe = standardize(&ex);

    let mut params = ParamStore::new();
    let w = params.insert("probe.weight", Tensor::zeros(&[d, classes]));
    let b = params.insert("probe.bias", Tensor::zeros(&[classes]));
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        &params,
    );
    for _ in 0..config.steps {
        let grads = {
            let mut g = Graph::new(&params);
            let x = g.input(xs.clone());
            let wv = g.param(w).expect("probe weight");
            let bv = g.param(b).expect("probe bias");
            let z = g.matmul(x, wv, false).expect("shapes checked");
            let z = g.add_row(z, bv).expect("shapes checked");
            let ce = g.cross_entropy(z, train_y).expect("labels checked");
            let loss = g.scale(ce, 1.0 / n);
            g.backward(loss).expect("scalar loss")
        };
        adam.step(&mut params, &grads).expect("same store");
    }

    let predict = |x: &Tensor<f64>| -> Vec<usize> {
        let z = x.matmul(params.get(w), false).expect("shapes checked");
        (0..z.rows())
            .map(|r| {
                let row: Vec<f64> = z
                    .row(r)
                    .iter()
                    .zip(params.get(b).data())
                    .map(|(v, bias)| v + bias)
                    .collect();
                argmax(&row)
            })
            .collect()
    };
    let acc = |pred: &[usize], y: &[usize]| {
        pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64
    };
    let train_pred = predict(&xs);
    let predictions = predict(&xe);
    Ok(ProbeResult {
        accuracy: acc(&predictions, eval_y),
        train_accuracy: acc(&train_pred, train_y),
        predictions,
    })
}

/// Exactly `k` examples of every class for training, the rest for
/// evaluation. Both index lists are sorted.
pub fn few_shot_split(labels: &[usize], k: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    if k == 0 {
        return Err(EvalError::Invalid("k must be positive".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (&class, members) in &by_class {
        if members.len() < k {
            return Err(EvalError::InsufficientClassExamples {
                class,
                have: members.len(),
                need: k,
            });
        }
        let mut m = members.clone();
        m.shuffle(&mut rng);
        train.extend_from_slice(&m[..k]);
        eval.extend_from_slice(&m[k..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    Ok((train, eval))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub k: usize,
    pub trials: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotReport {
    pub rows: Vec<FewShotRow>,
}

/// For every `k`, `trials` independent splits, each probed and scored.
pub fn few_shot_harness<T: Float>(
    x: &[Vec<T>],
    labels: &[usize],
    classes: usize,
    ks: &[usize],
    trials: usize,
    seed: u64,
    config: ProbeConfig,
) -> Result<FewShotReport, EvalError> {
    if trials == 0 {
        return Err(EvalError::Invalid("trials must be positive".into()));
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let accs = (0..trials)
            .map(|t| {
                let (tr, ev) = few_shot_split(labels, k, step_seed(seed ^ k as u64, t))?;
                let pick = |idx: &[usize]| -> (Vec<Vec<T>>, Vec<usize>) {
                    (
                        idx.iter().map(|&i| x[i].clone()).collect(),
                        idx.iter().map(|&i| labels[i]).collect(),
                    )
                };
                let (txs, tys) = pick(&tr);
                let (exs, eys) = pick(&ev);
                Ok(linear_probe(&txs, &tys, &exs, &eys, classes, config)?.accuracy)
            })
            .collect::<Result<Vec<f64>, EvalError>>()?;
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        rows.push(FewShotRow {
            k,
            trials: accs,
            mean,
        });
    }
    Ok(FewShotReport { rows })
}
