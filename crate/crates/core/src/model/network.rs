use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{Activation, ModelParams};
use crate::error::{Error, Result};

/// Labelled samples, one feature row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::input(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::input("feature rows have differing lengths"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let features = Array2::from_shape_vec((rows.len(), dim), flat)
            .map_err(|e| Error::Internal(e.to_string()))?;
        Self::new(features, labels)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Array2::zeros((0, dim)),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn check_input(m: &ModelParams, dim: usize) -> Result<()> {
    if dim != m.input_dim() {
        return Err(Error::input(format!(
            "input has dimension {dim}, model expects {}",
            m.input_dim()
        )));
    }
    Ok(())
}

/// Row-wise softmax, shifted by the row maximum.
fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Pre-activations and activations of every layer; `acts[0]` is the input.
struct Trace {
    acts: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Runs the network on a batch of rows. The last layer's output is always
/// normalized by softmax into class probabilities.
fn run(m: &ModelParams, x: ArrayView2<f64>, keep: bool) -> (Array2<f64>, Option<Trace>) {
    let mut trace = keep.then(|| Trace {
        acts: vec![x.to_owned()],
        pre: Vec::with_capacity(m.layer_count()),
    });
    let last = m.layer_count() - 1;
    let mut cur = x.to_owned();
    for (l, layer) in m.layers().iter().enumerate() {
        let mut z = cur.dot(&layer.weights.t());
        z += &layer.bias;
        if let Some(t) = trace.as_mut() {
            t.pre.push(z.clone());
        }
        if l == last {
            softmax_rows(&mut z);
        } else if layer.activation == Activation::Relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
        if l < last {
            if let Some(t) = trace.as_mut() {
                t.acts.push(z.clone());
            }
        }
        cur = z;
    }
    (cur, trace)
}

/// Class probabilities for one input vector.
pub fn forward(m: &ModelParams, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_input(m, x.len())?;
    let row = x.insert_axis(Axis(0));
    let (probs, _) = run(m, row, false);
    Ok(probs.index_axis_move(Axis(0), 0))
}

/// Class probabilities for every row of `x`.
pub fn forward_batch(m: &ModelParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_input(m, x.ncols())?;
    Ok(run(m, x, false).0)
}

/// Mean cross-entropy over the batch and its gradient with respect to every
/// parameter. Gradients are returned as a `ModelParams` of the same shape.
pub fn loss_and_grads(m: &ModelParams, b: &Batch) -> Result<(f64, ModelParams)> {
    if b.is_empty() {
        return Err(Error::input("empty batch"));
    }
    check_input(m, b.dim())?;
    let n_classes = m.output_dim();
    if let Some(&bad) = b.labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::input(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    let (probs, trace) = run(m, b.features.view(), true);
    let trace = trace.expect("trace requested");
    let n = b.len() as f64;

    let loss = b
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -log_prob(&trace.pre[trace.pre.len() - 1], i, y))
        .sum::<f64>()
        / n;

    // dL/dz for softmax + cross-entropy.
    let mut delta = probs;
    for (i, &y) in b.labels.iter().enumerate() {
        delta[[i, y]] -= 1.0;
    }
    delta.mapv_inplace(|v| v / n);

    let mut grads = m.clone();
    for l in (0..m.layer_count()).rev() {
        let g = &mut grads.layers_mut()[l];
        g.weights = delta.t().dot(&trace.acts[l]);
        g.bias = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut back = delta.dot(&m.layers()[l].weights);
            if m.layers()[l - 1].activation == Activation::Relu {
                ndarray::Zip::from(&mut back)
                    .and(&trace.pre[l - 1])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            delta = back;
        }
    }
    Ok((loss, grads))
}

/// Numerically stable `ln softmax(z[row])[class]`.
fn log_prob(logits: &Array2<f64>, row: usize, class: usize) -> f64 {
    let r = logits.row(row);
    let max = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = r.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    r[class] - lse
}
