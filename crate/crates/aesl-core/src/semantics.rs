//! Emotion label semantics: a GIN graph autoencoder over the relation graph
//! with a pairwise decoder that reconstructs the adjacency from embedding
//! cosines.

use crate::error::{AeslError, Result};
use crate::numerics::matrix::{centered_cosine_matrix, Matrix};
use crate::numerics::tape::{NodeId, Tape};
use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// One GIN layer: H' = f[(1 + eps) H + A H] with f an affine map.
/// The mixing weight eps is a trainable 1x1 parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GinLayer {
    pub weight: Matrix,
    pub bias: Matrix,
    pub eps: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GinEncoder {
    pub layers: Vec<GinLayer>,
}

/// Tape node ids for one bound encoder; order matches `GinEncoder::params`.
pub struct BoundGin {
    pub layers: Vec<BoundGinLayer>,
}

pub struct BoundGinLayer {
    pub weight: NodeId,
    pub bias: NodeId,
    pub eps: NodeId,
}

impl GinEncoder {
    /// `dims` lists layer widths [d0, d1, ..., dL]. Weights start at
    /// N(0, 1/sqrt(fan_in)); eps starts at 0 so (1 + eps) = 1.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(AeslError::invalid("GIN encoder needs at least one layer"));
        }
        let layers = dims
            .windows(2)
            .map(|w| GinLayer {
                weight: Matrix::normal(w[0], w[1], 1.0 / (w[0] as f64).sqrt(), rng),
                bias: Matrix::zeros(1, w[1]),
                eps: Matrix::scalar(0.0),
            })
            .collect();
        Ok(GinEncoder { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").weight.cols()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias, &l.eps])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias, &mut l.eps])
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundGin {
        let layers = self
            .layers
            .iter()
            .map(|l| BoundGinLayer {
                weight: tape.leaf(l.weight.clone()),
                bias: tape.leaf(l.bias.clone()),
                eps: tape.leaf(l.eps.clone()),
            })
            .collect();
        BoundGin { layers }
    }

    /// Message passing on the tape. Hidden layers use ReLU; the final layer
    /// is linear.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundGin,
        node_features: NodeId,
        adjacency: NodeId,
    ) -> Result<NodeId> {
        let adj = tape.value(adjacency);
        let h0 = tape.value(node_features);
        if adj.rows() != adj.cols() || adj.rows() != h0.rows() {
            return Err(AeslError::ShapeMismatch {
                op: "gin_forward",
                left_rows: h0.rows(),
                left_cols: h0.cols(),
                right_rows: adj.rows(),
                right_cols: adj.cols(),
            });
        }
        let mut h = node_features;
        let last = bound.layers.len() - 1;
        for (idx, layer) in bound.layers.iter().enumerate() {
            let scaled = tape.scale_by_scalar_node(h, layer.eps)?;
            let mixed = tape.add(h, scaled)?;
            let message = tape.matmul(adjacency, h)?;
            let agg = tape.add(mixed, message)?;
            let lin = tape.matmul(agg, layer.weight)?;
            let shifted = tape.add_row_broadcast(lin, layer.bias)?;
            h = if idx == last { shifted } else { tape.relu(shifted) };
        }
        Ok(h)
    }

    /// Plain forward pass through a scratch tape.
    pub fn forward(&self, node_features: &Matrix, adjacency: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let h0 = tape.leaf(node_features.clone());
        let adj = tape.leaf(adjacency.clone());
        let out = self.forward_on_tape(&mut tape, &bound, h0, adj)?;
        Ok(tape.value(out).clone())
    }
}

/// Appends `new_count` rows of N(0, 1) node features from the seeded
/// generator; existing rows are untouched. Growing by zero is a no-op.
pub fn grow_nodes(features: &Matrix, new_count: usize, seed: u64) -> Matrix {
    if new_count == 0 {
        return features.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fresh = Matrix::standard_normal(new_count, features.cols(), &mut rng);
    if features.rows() == 0 {
        fresh
    } else {
        features.vstack(&fresh).expect("same column count")
    }
}

/// Mean embedding over label rows.
pub fn mean_embedding(embeddings: &Matrix) -> Matrix {
    embeddings.column_means()
}

/// Pairwise-decoder loss on the tape: mean over all (i, j) of
/// (centered_cosine(e_i, e_j) - a_hat_ij)^2.
pub fn reconstruction_loss_on_tape(
    tape: &mut Tape,
    embeddings: NodeId,
    decoder_target: &Matrix,
) -> Result<NodeId> {
    let n = tape.value(embeddings).rows();
    if decoder_target.shape() != (n, n) {
        return Err(AeslError::ShapeMismatch {
            op: "reconstruction_loss",
            left_rows: n,
            left_cols: n,
            right_rows: decoder_target.rows(),
            right_cols: decoder_target.cols(),
        });
    }
    let centered = tape.center_rows(embeddings);
    let normed = tape.normalize_rows(centered)?;
    let cosine = tape.gram(normed)?;
    let target = tape.leaf(decoder_target.clone());
    let diff = tape.sub(cosine, target)?;
    let sq = tape.hadamard(diff, diff)?;
    let total = tape.sum_all(sq);
    Ok(tape.scale_const(total, 1.0 / (n * n) as f64))
}

/// Direct evaluation of the pairwise-decoder loss, independent of the tape.
pub fn reconstruction_loss(embeddings: &Matrix, decoder_target: &Matrix) -> Result<f64> {
    let n = embeddings.rows();
    if decoder_target.shape() != (n, n) {
        return Err(AeslError::ShapeMismatch {
            op: "reconstruction_loss",
            left_rows: n,
            left_cols: n,
            right_rows: decoder_target.rows(),
            right_cols: decoder_target.cols(),
        });
    }
    let cosine = centered_cosine_matrix(embeddings)?;
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = cosine.get(i, j) - decoder_target.get(i, j);
            acc += d * d;
        }
    }
    Ok(acc / (n * n) as f64)
}

/// One row per label, label id first.
pub fn export_embeddings_csv(labels: &[usize], embeddings: &Matrix, path: &Path) -> Result<()> {
    if labels.len() != embeddings.rows() {
        return Err(AeslError::invalid(
            "embedding export: label count does not match embedding rows",
        ));
    }
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..embeddings.cols()).map(|c| format!("e{c}")));
    writer.write_record(&header)?;
    for (i, &label) in labels.iter().enumerate() {
        let mut record = vec![label.to_string()];
        record.extend(embeddings.row(i).iter().map(|v| v.to_string()));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_diff_check;
    use approx::assert_abs_diff_eq;

    fn identity_encoder(n: usize) -> GinEncoder {
        GinEncoder {
            layers: vec![GinLayer {
                weight: Matrix::identity(n),
                bias: Matrix::zeros(1, n),
                eps: Matrix::scalar(0.0),
            }],
        }
    }

    #[test]
    fn no_neighbors_identity_mlp_is_identity() {
        let enc = identity_encoder(3);
        let h0 = Matrix::from_rows(&[
            vec![1.0, -2.0, 0.5],
            vec![0.0, 1.0, 2.0],
            vec![3.0, 0.0, -1.0],
        ])
        .unwrap();
        let out = enc.forward(&h0, &Matrix::zeros(3, 3)).unwrap();
        assert_eq!(out, h0);
    }

    #[test]
    fn two_node_hand_message_passing() {
        let enc = identity_encoder(2);
        let h0 = Matrix::identity(2);
        let adj = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let out = enc.forward(&h0, &adj).unwrap();
        assert_eq!(out, Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = GinEncoder::new(&[4, 6, 5], &mut rng).unwrap();
        let h0 = Matrix::standard_normal(4, 4, &mut rng);
        let mut adj = Matrix::standard_normal(4, 4, &mut rng).map(|v| v.abs() % 1.0);
        for i in 0..4 {
            adj.set(i, i, 0.0);
        }
        let perm = [2usize, 0, 3, 1];
        let mut p = Matrix::zeros(4, 4);
        for (i, &j) in perm.iter().enumerate() {
            p.set(i, j, 1.0);
        }
        let ph = p.matmul(&h0).unwrap();
        let pap = p.matmul(&adj).unwrap().matmul(&p.transpose()).unwrap();

        let base = enc.forward(&h0, &adj).unwrap();
        let permuted = enc.forward(&ph, &pap).unwrap();
        let expected = p.matmul(&base).unwrap();
        assert!(permuted.max_abs_diff(&expected).unwrap() <= 1e-10);
    }

    #[test]
    fn reconstruction_zero_at_perfect_match() {
        // Two antipodal embeddings: centered cosine matrix [[1,-1],[-1,1]].
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let target = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(reconstruction_loss(&e, &target).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn reconstruction_two_label_hand_case() {
        // Centered cosines are [[1,-1],[-1,1]]; with a fully co-occurring
        // pair the decoder target A + I is all ones, so the two off-diagonal
        // terms each contribute (-1 - 1)^2 = 4 and the loss is 8/4 = 2.
        let e = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let a_hat = Matrix::filled(2, 2, 1.0);
        assert_abs_diff_eq!(reconstruction_loss(&e, &a_hat).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn reconstruction_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = Matrix::standard_normal(5, 3, &mut rng);
        let target = Matrix::identity(5);
        let base = reconstruction_loss(&e, &target).unwrap();
        let scaled = reconstruction_loss(&e.scale(3.7), &target).unwrap();
        assert_abs_diff_eq!(base, scaled, epsilon = 1e-12);
    }

    #[test]
    fn reconstruction_zero_centered_row_names_row() {
        // Row 1 equals the mean embedding of the three rows.
        let e = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        match reconstruction_loss(&e, &Matrix::identity(3)) {
            Err(AeslError::ZeroCenteredNorm { row }) => assert_eq!(row, 1),
            other => panic!("expected zero-norm error, got {other:?}"),
        }
    }

    #[test]
    fn tape_and_direct_loss_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let e = Matrix::standard_normal(6, 4, &mut rng);
        let target = Matrix::identity(6);
        let direct = reconstruction_loss(&e, &target).unwrap();
        let mut tape = Tape::new();
        let node = tape.leaf(e);
        let loss = reconstruction_loss_on_tape(&mut tape, node, &target).unwrap();
        assert_abs_diff_eq!(tape.value(loss).item().unwrap(), direct, epsilon = 1e-12);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let enc = GinEncoder::new(&[3, 4, 3], &mut rng).unwrap();
        let h0 = Matrix::standard_normal(5, 3, &mut rng);
        let adj = Matrix::standard_normal(5, 5, &mut rng).map(|v| (v * v).min(1.0));
        let target = Matrix::identity(5);

        let params: Vec<Matrix> = enc.params().into_iter().cloned().collect();
        let build = |p: &[Matrix], tape: &mut Tape| -> NodeId {
            let mut probe = enc.clone();
            for (dst, src) in probe.params_mut().into_iter().zip(p) {
                *dst = src.clone();
            }
            let bound = probe.bind(tape);
            let h = tape.leaf(h0.clone());
            let a = tape.leaf(adj.clone());
            let emb = probe.forward_on_tape(tape, &bound, h, a).unwrap();
            reconstruction_loss_on_tape(tape, emb, &target).unwrap()
        };
        finite_diff_check(&params, build, 1e-6, 1e-4);
    }

    #[test]
    fn grow_nodes_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let base = Matrix::standard_normal(27, 8, &mut rng);
        assert_eq!(grow_nodes(&base, 0, 42), base);

        let grown_a = grow_nodes(&base, 3, 42);
        let grown_b = grow_nodes(&base, 3, 42);
        assert_eq!(grown_a, grown_b);
        assert_eq!(grown_a.rows(), 30);
        for r in 0..27 {
            assert_eq!(grown_a.row(r), base.row(r));
        }
        let other_seed = grow_nodes(&base, 3, 43);
        assert_ne!(grown_a, other_seed);
    }

    #[test]
    fn embeddings_csv_round_trip_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let emb = Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
        export_embeddings_csv(&[7, 9], &emb, &path).unwrap();
        let mut reader = csv::Reader::from_path(&path).unwrap();
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[0][0], "7");
        assert_eq!(rows[0][1].parse::<f64>().unwrap(), 0.5);
    }
}
