//! Label relation graphs: co-occurrence adjacency, block-wise growth across
//! tasks, graph-based label disambiguation, and graph-vs-oracle correlation.

use crate::error::{AeslError, Result};
use crate::numerics::matrix::{squared_distance, Matrix};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Directed label-relation graph. Entry (i, j) of `adjacency` is the
/// empirical conditional probability P(label_i | label_j); the diagonal is
/// zero in this raw form.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationGraph {
    pub labels: Vec<usize>,
    pub adjacency: Matrix,
}

impl RelationGraph {
    pub fn empty() -> Self {
        RelationGraph {
            labels: Vec::new(),
            adjacency: Matrix::zeros(0, 0),
        }
    }

    pub fn new(labels: Vec<usize>, adjacency: Matrix) -> Result<Self> {
        if adjacency.rows() != labels.len() || adjacency.cols() != labels.len() {
            return Err(AeslError::ShapeMismatch {
                op: "relation_graph",
                left_rows: labels.len(),
                left_cols: labels.len(),
                right_rows: adjacency.rows(),
                right_cols: adjacency.cols(),
            });
        }
        Ok(RelationGraph { labels, adjacency })
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    /// (A + A^T) / 2. Idempotent.
    pub fn symmetrize(&self) -> RelationGraph {
        let sym = self
            .adjacency
            .add(&self.adjacency.transpose())
            .expect("square adjacency")
            .scale(0.5);
        RelationGraph {
            labels: self.labels.clone(),
            adjacency: sym,
        }
    }

    /// Symmetrized adjacency plus the identity, the decoder target.
    pub fn decoder_target(&self) -> Matrix {
        let sym = self.symmetrize().adjacency;
        sym.add(&Matrix::identity(sym.rows())).expect("square")
    }
}

/// Raw co-occurrence statistics behind the conditional adjacency.
#[derive(Debug, Clone)]
pub struct CooccurrenceCounts {
    /// N_ij: instances carrying both label i and label j. Symmetric.
    pub pair_counts: Matrix,
    /// N_j: instances carrying label j.
    pub label_counts: Vec<f64>,
}

impl CooccurrenceCounts {
    /// Counts from a multi-hot label matrix (instances x labels).
    pub fn from_labels(labels: &Matrix) -> Self {
        let k = labels.cols();
        let mut pair = Matrix::zeros(k, k);
        let mut counts = vec![0.0; k];
        for r in 0..labels.rows() {
            let row = labels.row(r);
            for i in 0..k {
                if row[i] == 0.0 {
                    continue;
                }
                counts[i] += 1.0;
                for j in 0..k {
                    if j != i && row[j] != 0.0 {
                        pair.set(i, j, pair.get(i, j) + 1.0);
                    }
                }
            }
        }
        CooccurrenceCounts {
            pair_counts: pair,
            label_counts: counts,
        }
    }

    /// A_ij = N_ij / N_j for i != j, zero diagonal. Labels that never occur
    /// contribute zero columns: no evidence, no asserted correlation.
    pub fn conditional_adjacency(&self) -> Matrix {
        let k = self.label_counts.len();
        let mut a = Matrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                if i == j || self.label_counts[j] == 0.0 {
                    continue;
                }
                a.set(i, j, self.pair_counts.get(i, j) / self.label_counts[j]);
            }
        }
        a
    }
}

/// Conditional co-occurrence graph of a multi-hot label matrix.
pub fn cooccurrence_adjacency(labels_matrix: &Matrix, label_ids: &[usize]) -> Result<RelationGraph> {
    if labels_matrix.cols() != label_ids.len() {
        return Err(AeslError::ShapeMismatch {
            op: "cooccurrence_adjacency",
            left_rows: labels_matrix.rows(),
            left_cols: labels_matrix.cols(),
            right_rows: 1,
            right_cols: label_ids.len(),
        });
    }
    let counts = CooccurrenceCounts::from_labels(labels_matrix);
    RelationGraph::new(label_ids.to_vec(), counts.conditional_adjacency())
}

/// Gaussian-kernel instance similarity: P_ij = exp(-||x_i - x_j||^2 / (2 sigma^2)).
pub fn gaussian_similarity(features: &Matrix, sigma: f64) -> Result<Matrix> {
    if sigma <= 0.0 {
        return Err(AeslError::invalid(format!(
            "gaussian kernel bandwidth must be positive, got {sigma}"
        )));
    }
    let n = features.rows();
    let mut p = Matrix::zeros(n, n);
    let denom = 2.0 * sigma * sigma;
    for i in 0..n {
        p.set(i, i, 1.0);
        for j in (i + 1)..n {
            let d2 = squared_distance(features.row(i), features.row(j));
            let v = (-d2 / denom).exp();
            p.set(i, j, v);
            p.set(j, i, v);
        }
    }
    Ok(p)
}

/// Median of pairwise Euclidean distances; the default kernel bandwidth.
/// Falls back to 1.0 when there are no pairs or all points coincide.
pub fn median_pairwise_distance(features: &Matrix) -> f64 {
    let n = features.rows();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(squared_distance(features.row(i), features.row(j)).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Instance-similarity state for graph-based label disambiguation.
#[derive(Debug, Clone)]
pub struct PropagationState {
    /// Gaussian kernel similarity P: symmetric, unit diagonal.
    pub similarity: Matrix,
    /// Column-normalized propagation matrix P_hat = P D^{-1}.
    pub propagation: Matrix,
    /// Balance between propagated and initial confidence.
    pub beta: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl PropagationState {
    pub fn new(features: &Matrix, sigma: f64, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(AeslError::invalid(format!(
                "propagation balance must lie in [0, 1], got {beta}"
            )));
        }
        let similarity = gaussian_similarity(features, sigma)?;
        let col_sums = similarity.column_sums();
        let n = similarity.rows();
        let mut propagation = similarity.clone();
        for r in 0..n {
            let row = propagation.row_mut(r);
            for (c, v) in row.iter_mut().enumerate() {
                // Column sums are >= 1 because the diagonal is 1.
                *v /= col_sums.get(0, c);
            }
        }
        Ok(PropagationState {
            similarity,
            propagation,
            beta,
            tolerance: 1e-10,
            max_iterations: 5000,
        })
    }

    pub fn with_termination(mut self, tolerance: f64, max_iterations: usize) -> Self {
        self.tolerance = tolerance;
        self.max_iterations = max_iterations;
        self
    }

    /// Iterates F <- beta P_hat^T F + (1 - beta) F0 to its fixed point and
    /// clamps the result into [0, 1].
    pub fn propagate(&self, initial: &Matrix) -> Result<Matrix> {
        if initial.rows() != self.propagation.rows() {
            return Err(AeslError::ShapeMismatch {
                op: "propagate_labels",
                left_rows: self.propagation.rows(),
                left_cols: self.propagation.cols(),
                right_rows: initial.rows(),
                right_cols: initial.cols(),
            });
        }
        let p_hat_t = self.propagation.transpose();
        let base = initial.scale(1.0 - self.beta);
        let mut current = initial.clone();
        let mut residual = f64::INFINITY;
        for _ in 0..self.max_iterations {
            let next = p_hat_t.matmul(&current)?.scale(self.beta).add(&base)?;
            residual = next.max_abs_diff(&current)?;
            current = next;
            if residual < self.tolerance {
                return Ok(current.map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Err(AeslError::PropagationDiverged {
            iterations: self.max_iterations,
            residual,
        })
    }
}

/// Inter-task blocks of the augmented graph.
///
/// R_ij = sum_x s_hat_i y_j / N_j couples old label i to new label j;
/// Q_ji = R_ij N_j / sum_x s_hat_i is its Bayes inversion. Zero denominators
/// yield zero entries.
pub fn complete_blocks(
    old: &RelationGraph,
    soft: &Matrix,
    labels_new: &Matrix,
) -> Result<(Matrix, Matrix)> {
    if soft.rows() != labels_new.rows() {
        return Err(AeslError::ShapeMismatch {
            op: "complete_blocks",
            left_rows: soft.rows(),
            left_cols: soft.cols(),
            right_rows: labels_new.rows(),
            right_cols: labels_new.cols(),
        });
    }
    if soft.cols() != old.label_count() {
        return Err(AeslError::ShapeMismatch {
            op: "complete_blocks",
            left_rows: soft.rows(),
            left_cols: soft.cols(),
            right_rows: old.label_count(),
            right_cols: old.label_count(),
        });
    }
    let n_old = soft.cols();
    let n_new = labels_new.cols();
    let n = soft.rows();

    let mut joint = Matrix::zeros(n_old, n_new); // sum_x s_hat_i * y_j
    let mut soft_mass = vec![0.0; n_old]; // sum_x s_hat_i
    let mut new_counts = vec![0.0; n_new]; // N_j
    for x in 0..n {
        let s_row = soft.row(x);
        let y_row = labels_new.row(x);
        for i in 0..n_old {
            soft_mass[i] += s_row[i];
            for j in 0..n_new {
                joint.set(i, j, joint.get(i, j) + s_row[i] * y_row[j]);
            }
        }
        for j in 0..n_new {
            new_counts[j] += y_row[j];
        }
    }

    let mut r = Matrix::zeros(n_old, n_new);
    let mut q = Matrix::zeros(n_new, n_old);
    for i in 0..n_old {
        for j in 0..n_new {
            if new_counts[j] > 0.0 {
                r.set(i, j, joint.get(i, j) / new_counts[j]);
            }
            if soft_mass[i] > 0.0 {
                q.set(j, i, r.get(i, j) * new_counts[j] / soft_mass[i]);
            }
        }
    }
    Ok((r, q))
}

/// Assembles [[A_old, R], [Q, B]] without touching the old block.
pub fn augment(
    old: &RelationGraph,
    r: &Matrix,
    q: &Matrix,
    new_block: &Matrix,
    new_labels: &[usize],
) -> Result<RelationGraph> {
    let n_old = old.label_count();
    let n_new = new_labels.len();
    let bad_shape = r.shape() != (n_old, n_new)
        || q.shape() != (n_new, n_old)
        || new_block.shape() != (n_new, n_new);
    if bad_shape {
        return Err(AeslError::ShapeMismatch {
            op: "augment",
            left_rows: n_old,
            left_cols: n_new,
            right_rows: new_block.rows(),
            right_cols: new_block.cols(),
        });
    }
    let total = n_old + n_new;
    let mut adjacency = Matrix::zeros(total, total);
    for i in 0..n_old {
        for j in 0..n_old {
            adjacency.set(i, j, old.adjacency.get(i, j));
        }
        for j in 0..n_new {
            adjacency.set(i, n_old + j, r.get(i, j));
        }
    }
    for i in 0..n_new {
        for j in 0..n_old {
            adjacency.set(n_old + i, j, q.get(i, j));
        }
        for j in 0..n_new {
            adjacency.set(n_old + i, n_old + j, new_block.get(i, j));
        }
    }
    let mut labels = old.labels.clone();
    labels.extend_from_slice(new_labels);
    RelationGraph::new(labels, adjacency)
}

/// Pearson correlation of the off-diagonal entries of two graphs over the
/// same label set.
pub fn erg_pcc(a: &RelationGraph, oracle: &RelationGraph) -> Result<f64> {
    if a.labels != oracle.labels {
        return Err(AeslError::invalid(
            "erg_pcc requires identical label sets and ordering",
        ));
    }
    let n = a.label_count();
    let mut xs = Vec::with_capacity(n * n.saturating_sub(1));
    let mut ys = Vec::with_capacity(xs.capacity());
    for i in 0..n {
        for j in 0..n {
            if i != j {
                xs.push(a.adjacency.get(i, j));
                ys.push(oracle.adjacency.get(i, j));
            }
        }
    }
    pearson(&xs, &ys)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(AeslError::invalid("pearson requires two equal-length series"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 {
        return Err(AeslError::ZeroVariance { what: "left graph" });
    }
    if vy == 0.0 {
        return Err(AeslError::ZeroVariance { what: "right graph" });
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// On-disk form of a relation graph.
#[derive(Debug, Serialize, Deserialize)]
pub struct GraphDocument {
    pub labels: Vec<usize>,
    pub adjacency: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl GraphDocument {
    pub fn from_graph(graph: &RelationGraph, config_hash: Option<String>) -> Self {
        let n = graph.label_count();
        let adjacency = (0..n).map(|i| graph.adjacency.row(i).to_vec()).collect();
        GraphDocument {
            labels: graph.labels.clone(),
            adjacency,
            config_hash,
        }
    }

    pub fn into_graph(self) -> Result<RelationGraph> {
        let matrix = Matrix::from_rows(&self.adjacency)?;
        RelationGraph::new(self.labels, matrix)
    }
}

pub fn save_graph_json(graph: &RelationGraph, config_hash: Option<String>, path: &Path) -> Result<()> {
    let doc = GraphDocument::from_graph(graph, config_hash);
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(file, &doc)?;
    Ok(())
}

pub fn load_graph_json(path: &Path) -> Result<RelationGraph> {
    let file = std::fs::File::open(path)
        .map_err(|_| AeslError::MissingFile(path.display().to_string()))?;
    let doc: GraphDocument = serde_json::from_reader(file)?;
    doc.into_graph()
}
