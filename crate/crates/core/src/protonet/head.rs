//! Prototype computation, squared Euclidean distances, softmax over negative
//! distances and the episode cross-entropy, with its gradient with respect to
//! the support and query embeddings.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::ProtoError;

/// `way x D` class prototypes, row `k` for local class `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Array2<f64>,
    /// Support rows averaged into each prototype.
    pub shot: usize,
}

impl PrototypeSet {
    pub fn way(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }
}

/// Prototype `k` is the mean of the support rows labelled `k`. Every class
/// must have the same, nonzero number of rows.
pub fn compute_prototypes(
    support: ArrayView2<f64>,
    labels: &[usize],
    way: usize,
) -> Result<PrototypeSet, ProtoError> {
    if labels.len() != support.nrows() {
        return Err(ProtoError::Shape(format!(
            "{} labels for {} support rows",
            labels.len(),
            support.nrows()
        )));
    }
    let mut counts = vec![0usize; way];
    let mut sums = Array2::<f64>::zeros((way, support.ncols()));
    for (row, &label) in support.outer_iter().zip(labels) {
        if label >= way {
            return Err(ProtoError::LabelOutOfRange { label, way });
        }
        counts[label] += 1;
        let mut acc = sums.row_mut(label);
        acc += &row;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(ProtoError::MissingClass { class });
    }
    let shot = counts[0];
    if let Some(class) = counts.iter().position(|&c| c != shot) {
        return Err(ProtoError::UnequalShots {
            class,
            expected: shot,
            found: counts[class],
        });
    }
    sums /= shot as f64;
    Ok(PrototypeSet {
        prototypes: sums,
        shot,
    })
}

/// `Q x way` matrix of squared Euclidean distances.
pub fn sq_distances(
    queries: ArrayView2<f64>,
    prototypes: ArrayView2<f64>,
) -> Result<Array2<f64>, ProtoError> {
    if queries.ncols() != prototypes.ncols() {
        return Err(ProtoError::Shape(format!(
            "query dim {} vs prototype dim {}",
            queries.ncols(),
            prototypes.ncols()
        )));
    }
    let mut out = Array2::<f64>::zeros((queries.nrows(), prototypes.nrows()));
    for (q, query) in queries.outer_iter().enumerate() {
        for (k, proto) in prototypes.outer_iter().enumerate() {
            out[[q, k]] = query
                .iter()
                .zip(proto.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// Negative squared distances.
    pub logits: Array2<f64>,
    pub probabilities: Array2<f64>,
    /// Nearest prototype per query; ties go to the smaller class index.
    pub predictions: Vec<usize>,
}

fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

pub fn classify(distances: ArrayView2<f64>) -> Classification {
    let logits = distances.mapv(|d| -d);
    let probabilities = softmax_rows(logits.view());
    let predictions = distances
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &d) in row.iter().enumerate() {
                if d < row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    Classification {
        logits,
        probabilities,
        predictions,
    }
}

fn log_sum_exp(row: ndarray::ArrayView1<f64>) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of `logits` against `labels`.
pub fn episode_loss(logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64, ProtoError> {
    check_labels(logits, labels)?;
    let total: f64 = logits
        .outer_iter()
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .sum();
    Ok(total / labels.len() as f64)
}

fn check_labels(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(), ProtoError> {
    if labels.is_empty() {
        return Err(ProtoError::Shape("empty query set".into()));
    }
    if labels.len() != logits.nrows() {
        return Err(ProtoError::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.nrows()
        )));
    }
    let way = logits.ncols();
    if let Some(&label) = labels.iter().find(|&&l| l >= way) {
        return Err(ProtoError::LabelOutOfRange { label, way });
    }
    Ok(())
}

/// Everything one training step needs from the metric head.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub loss: f64,
    pub prototypes: PrototypeSet,
    pub classification: Classification,
    /// dLoss / d(support embeddings), same shape as the support matrix.
    pub support_grad: Array2<f64>,
    /// dLoss / d(query embeddings).
    pub query_grad: Array2<f64>,
}

impl HeadOutput {
    pub fn correct(&self, query_labels: &[usize]) -> usize {
        self.classification
            .predictions
            .iter()
            .zip(query_labels)
            .filter(|(p, y)| p == y)
            .count()
    }
}

/// Forward pass of the head plus the analytic gradient.
///
/// With `G = (softmax(-d) - onehot(y)) / Q` the logit gradient, and
/// `d_qk = |x_q - c_k|^2`:
///
/// - `dL/dx_q = -2 * sum_k G_qk (x_q - c_k)`
/// - `dL/dc_k =  2 * sum_q G_qk (x_q - c_k)`, split evenly over the `shot`
///   support rows that make up `c_k`.
pub fn episode_loss_and_grad(
    support: ArrayView2<f64>,
    support_labels: &[usize],
    query: ArrayView2<f64>,
    query_labels: &[usize],
    way: usize,
) -> Result<HeadOutput, ProtoError> {
    let prototypes = compute_prototypes(support, support_labels, way)?;
    let distances = sq_distances(query, prototypes.prototypes.view())?;
    let classification = classify(distances.view());
    let loss = episode_loss(classification.logits.view(), query_labels)?;

    let q_count = query.nrows() as f64;
    let mut g = classification.probabilities.clone();
    for (q, &y) in query_labels.iter().enumerate() {
        g[[q, y]] -= 1.0;
    }
    g /= q_count;

    let protos = &prototypes.prototypes;
    let mut query_grad = Array2::<f64>::zeros(query.raw_dim());
    let mut proto_grad = Array2::<f64>::zeros(protos.raw_dim());
    for (q, x) in query.outer_iter().enumerate() {
        for (k, c) in protos.outer_iter().enumerate() {
            let w = 2.0 * g[[q, k]];
            let diff: Array1<f64> = &x - &c;
            query_grad.row_mut(q).scaled_add(-w, &diff);
            proto_grad.row_mut(k).scaled_add(w, &diff);
        }
    }
    let mut support_grad = Array2::<f64>::zeros(support.raw_dim());
    let inv_shot = 1.0 / prototypes.shot as f64;
    for (i, &label) in support_labels.iter().enumerate() {
        support_grad
            .row_mut(i)
            .scaled_add(inv_shot, &proto_grad.index_axis(Axis(0), label));
    }
    Ok(HeadOutput {
        loss,
        prototypes,
        classification,
        support_grad,
        query_grad,
    })
}
