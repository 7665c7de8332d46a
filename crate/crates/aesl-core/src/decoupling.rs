//! Semantic-guided feature decoupling and the expandable classification head.
//!
//! An instance is lifted to a deep latent z, each label's embedding gates z
//! through a sigmoid importance vector, and a shared affine map produces the
//! per-label semantic feature scored by that label's classifier column.

use crate::error::{AeslError, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::{sigmoid, NodeId, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Activation applied to semantic features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn apply_on_tape(self, tape: &mut Tape, node: NodeId) -> NodeId {
        match self {
            Activation::Relu => tape.relu(node),
            Activation::Identity => node,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

/// The decoupler parameters phi: instance map, gate map, and the shared
/// output map.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoupler {
    pub instance_weight: Matrix, // D x d_z
    pub instance_bias: Matrix,   // 1 x d_z
    pub gate_weight: Matrix,     // d_L x d_z
    pub gate_bias: Matrix,       // 1 x d_z
    pub output_weight: Matrix,   // d_z x d
    pub output_bias: Matrix,     // 1 x d
    pub activation: Activation,
}

pub struct BoundDecoupler {
    pub instance_weight: NodeId,
    pub instance_bias: NodeId,
    pub gate_weight: NodeId,
    pub gate_bias: NodeId,
    pub output_weight: NodeId,
    pub output_bias: NodeId,
}

impl Decoupler {
    pub fn new(
        feature_dim: usize,
        embed_dim: usize,
        latent_dim: usize,
        semantic_dim: usize,
        activation: Activation,
        rng: &mut impl rand::Rng,
    ) -> Self {
        fn init(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Matrix {
            Matrix::normal(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
        }
        Decoupler {
            instance_weight: init(feature_dim, latent_dim, rng),
            instance_bias: Matrix::zeros(1, latent_dim),
            gate_weight: init(embed_dim, latent_dim, rng),
            gate_bias: Matrix::zeros(1, latent_dim),
            output_weight: init(latent_dim, semantic_dim, rng),
            output_bias: Matrix::zeros(1, semantic_dim),
            activation,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.instance_weight.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.instance_weight.rows()
    }

    pub fn semantic_dim(&self) -> usize {
        self.output_weight.cols()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![
            &self.instance_weight,
            &self.instance_bias,
            &self.gate_weight,
            &self.gate_bias,
            &self.output_weight,
            &self.output_bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.instance_weight,
            &mut self.instance_bias,
            &mut self.gate_weight,
            &mut self.gate_bias,
            &mut self.output_weight,
            &mut self.output_bias,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundDecoupler {
        BoundDecoupler {
            instance_weight: tape.leaf(self.instance_weight.clone()),
            instance_bias: tape.leaf(self.instance_bias.clone()),
            gate_weight: tape.leaf(self.gate_weight.clone()),
            gate_bias: tape.leaf(self.gate_bias.clone()),
            output_weight: tape.leaf(self.output_weight.clone()),
            output_bias: tape.leaf(self.output_bias.clone()),
        }
    }

    /// Deep latent for a batch: z = ReLU(X W_x + b_x).
    pub fn latent_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundDecoupler,
        features: NodeId,
    ) -> Result<NodeId> {
        let lin = tape.matmul(features, bound.instance_weight)?;
        let shifted = tape.add_row_broadcast(lin, bound.instance_bias)?;
        Ok(tape.relu(shifted))
    }

    /// Gate matrix for all labels: alpha = sigmoid(E W_e + b_e).
    pub fn gates_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundDecoupler,
        embeddings: NodeId,
    ) -> Result<NodeId> {
        let lin = tape.matmul(embeddings, bound.gate_weight)?;
        let shifted = tape.add_row_broadcast(lin, bound.gate_bias)?;
        Ok(tape.sigmoid(shifted))
    }

    /// Semantic feature for one label: o_k = act(W_o^T (z . alpha_k) + b_o).
    pub fn semantic_feature_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundDecoupler,
        latent: NodeId,
        gate_row: NodeId,
    ) -> Result<NodeId> {
        let gated = tape.row_gate(latent, gate_row)?;
        let lin = tape.matmul(gated, bound.output_weight)?;
        let shifted = tape.add_row_broadcast(lin, bound.output_bias)?;
        Ok(self.activation.apply_on_tape(tape, shifted))
    }
}

/// Maps one instance into the deep latent space: z = ReLU(W_x^T x + b_x).
pub fn embed_instance(x: &[f64], dec: &Decoupler) -> Result<Vec<f64>> {
    if x.len() != dec.feature_dim() {
        return Err(AeslError::invalid(format!(
            "embed_instance: expected feature length {}, got {}",
            dec.feature_dim(),
            x.len()
        )));
    }
    let d_z = dec.latent_dim();
    let mut z = vec![0.0; d_z];
    for j in 0..d_z {
        let mut acc = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            acc += dec.instance_weight.get(i, j) * xi;
        }
        z[j] = (acc + dec.instance_bias.get(0, j)).max(0.0);
    }
    Ok(z)
}

/// Importance gate for one label embedding: alpha_k = sigmoid(W_e^T e_k + b_e).
pub fn semantic_gate(e_k: &[f64], dec: &Decoupler) -> Result<Vec<f64>> {
    if e_k.len() != dec.gate_weight.rows() {
        return Err(AeslError::invalid(format!(
            "semantic_gate: expected embedding length {}, got {}",
            dec.gate_weight.rows(),
            e_k.len()
        )));
    }
    let d_z = dec.latent_dim();
    let mut alpha = vec![0.0; d_z];
    for j in 0..d_z {
        let mut acc = 0.0;
        for (i, &ei) in e_k.iter().enumerate() {
            acc += dec.gate_weight.get(i, j) * ei;
        }
        alpha[j] = sigmoid(acc + dec.gate_bias.get(0, j));
    }
    Ok(alpha)
}

/// Semantic feature for one label: o_k = act(W_o^T (z . alpha_k) + b_o).
pub fn semantic_feature(z: &[f64], alpha_k: &[f64], dec: &Decoupler) -> Result<Vec<f64>> {
    if z.len() != dec.latent_dim() || alpha_k.len() != dec.latent_dim() {
        return Err(AeslError::invalid(format!(
            "semantic_feature: expected latent length {}, got {} and {}",
            dec.latent_dim(),
            z.len(),
            alpha_k.len()
        )));
    }
    let d = dec.semantic_dim();
    let mut o = vec![0.0; d];
    for j in 0..d {
        let mut acc = 0.0;
        for i in 0..z.len() {
            acc += dec.output_weight.get(i, j) * z[i] * alpha_k[i];
        }
        o[j] = dec.activation.apply(acc + dec.output_bias.get(0, j));
    }
    Ok(o)
}

/// One classifier column per label, ordered by label arrival.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassifierHead {
    pub columns: Vec<HeadColumn>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadColumn {
    pub weight: Matrix, // d x 1
    pub bias: Matrix,   // 1 x 1
}

impl ClassifierHead {
    pub fn empty() -> Self {
        ClassifierHead::default()
    }

    pub fn label_count(&self) -> usize {
        self.columns.len()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.columns
            .iter()
            .flat_map(|c| [&c.weight, &c.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.columns
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<(NodeId, NodeId)> {
        self.columns
            .iter()
            .map(|c| (tape.leaf(c.weight.clone()), tape.leaf(c.bias.clone())))
            .collect()
    }
}

/// Appends `new_labels` fresh columns: weights from N(0, 0.01), biases zero.
/// Existing columns are bit-identical afterwards.
pub fn expand_head(head: &ClassifierHead, semantic_dim: usize, new_labels: usize, seed: u64) -> ClassifierHead {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns = head.columns.clone();
    for _ in 0..new_labels {
        columns.push(HeadColumn {
            weight: Matrix::normal(semantic_dim, 1, 0.01, &mut rng),
            bias: Matrix::zeros(1, 1),
        });
    }
    ClassifierHead { columns }
}

/// Confidence scores for one instance given its per-label semantic features:
/// s_k = sigmoid(w_k^T o_k + b_k).
pub fn predict_scores(per_label_features: &[Vec<f64>], head: &ClassifierHead) -> Result<Vec<f64>> {
    if per_label_features.len() != head.label_count() {
        return Err(AeslError::invalid(format!(
            "predict_scores: {} feature rows for {} head columns",
            per_label_features.len(),
            head.label_count()
        )));
    }
    let mut scores = Vec::with_capacity(head.label_count());
    for (o, col) in per_label_features.iter().zip(&head.columns) {
        if o.len() != col.weight.rows() {
            return Err(AeslError::invalid(format!(
                "predict_scores: feature length {} does not match head width {}",
                o.len(),
                col.weight.rows()
            )));
        }
        let mut acc = 0.0;
        for (i, &v) in o.iter().enumerate() {
            acc += col.weight.get(i, 0) * v;
        }
        scores.push(sigmoid(acc + col.bias.get(0, 0)));
    }
    Ok(scores)
}

/// Indices with score strictly above the 0.5 decision threshold.
pub fn predict_labels(scores: &[f64]) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.5)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn tiny_decoupler() -> Decoupler {
        Decoupler {
            instance_weight: Matrix::identity(2),
            instance_bias: Matrix::zeros(1, 2),
            gate_weight: Matrix::zeros(3, 2),
            gate_bias: Matrix::zeros(1, 2),
            output_weight: Matrix::identity(2),
            output_bias: Matrix::zeros(1, 2),
            activation: Activation::Identity,
        }
    }

    #[test]
    fn embed_instance_cases() {
        let mut dec = tiny_decoupler();
        assert_eq!(embed_instance(&[0.5, 2.0], &dec).unwrap(), vec![0.5, 2.0]);

        dec.instance_weight = Matrix::zeros(2, 2);
        assert_eq!(embed_instance(&[0.5, 2.0], &dec).unwrap(), vec![0.0, 0.0]);

        // 1-D hand case: W = [[2]], b = [-1], x = [1] -> z = 1.
        let dec1 = Decoupler {
            instance_weight: Matrix::from_rows(&[vec![2.0]]).unwrap(),
            instance_bias: Matrix::from_rows(&[vec![-1.0]]).unwrap(),
            gate_weight: Matrix::zeros(1, 1),
            gate_bias: Matrix::zeros(1, 1),
            output_weight: Matrix::identity(1),
            output_bias: Matrix::zeros(1, 1),
            activation: Activation::Identity,
        };
        assert_eq!(embed_instance(&[1.0], &dec1).unwrap(), vec![1.0]);
        assert!(embed_instance(&[1.0, 2.0], &dec1).is_err());
    }

    #[test]
    fn semantic_gate_cases() {
        let dec = tiny_decoupler();
        let alpha = semantic_gate(&[1.0, -2.0, 0.5], &dec).unwrap();
        assert_eq!(alpha, vec![0.5, 0.5]);

        // Pre-activation ln 3 gives sigmoid value 0.75.
        let dec2 = Decoupler {
            instance_weight: Matrix::identity(1),
            instance_bias: Matrix::zeros(1, 1),
            gate_weight: Matrix::from_rows(&[vec![3f64.ln()]]).unwrap(),
            gate_bias: Matrix::zeros(1, 1),
            output_weight: Matrix::identity(1),
            output_bias: Matrix::zeros(1, 1),
            activation: Activation::Identity,
        };
        let alpha = semantic_gate(&[1.0], &dec2).unwrap();
        assert_abs_diff_eq!(alpha[0], 0.75, epsilon = 1e-12);

        for &x in &[-50.0, -1.0, 0.0, 1.0, 50.0] {
            let a = semantic_gate(&[x, 0.0, 0.0], &tiny_decoupler()).unwrap();
            assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn semantic_feature_cases() {
        let dec = tiny_decoupler();
        let z = vec![1.5, -0.5];
        assert_eq!(semantic_feature(&z, &[1.0, 1.0], &dec).unwrap(), z);
        assert_eq!(
            semantic_feature(&z, &[0.0, 0.0], &dec).unwrap(),
            vec![0.0, 0.0]
        );

        let dec1 = Decoupler {
            instance_weight: Matrix::identity(1),
            instance_bias: Matrix::zeros(1, 1),
            gate_weight: Matrix::zeros(1, 1),
            gate_bias: Matrix::zeros(1, 1),
            output_weight: Matrix::from_rows(&[vec![1.0]]).unwrap(),
            output_bias: Matrix::zeros(1, 1),
            activation: Activation::Identity,
        };
        assert_eq!(semantic_feature(&[2.0], &[0.5], &dec1).unwrap(), vec![1.0]);
    }

    #[test]
    fn predict_scores_cases() {
        let head = ClassifierHead {
            columns: vec![HeadColumn {
                weight: Matrix::zeros(2, 1),
                bias: Matrix::zeros(1, 1),
            }],
        };
        let s = predict_scores(&[vec![3.0, -1.0]], &head).unwrap();
        assert_eq!(s, vec![0.5]);

        let head = ClassifierHead {
            columns: vec![HeadColumn {
                weight: Matrix::from_rows(&[vec![3f64.ln()]]).unwrap(),
                bias: Matrix::zeros(1, 1),
            }],
        };
        let s = predict_scores(&[vec![1.0]], &head).unwrap();
        assert_abs_diff_eq!(s[0], 0.75, epsilon = 1e-12);

        // Monotone in the logit.
        let mut last = 0.0;
        for logit in [-2.0, -0.5, 0.0, 0.5, 2.0] {
            let head = ClassifierHead {
                columns: vec![HeadColumn {
                    weight: Matrix::from_rows(&[vec![logit]]).unwrap(),
                    bias: Matrix::zeros(1, 1),
                }],
            };
            let s = predict_scores(&[vec![1.0]], &head).unwrap()[0];
            assert!(s > last);
            last = s;
        }

        assert!(predict_scores(&[vec![1.0], vec![2.0]], &head).is_err());
    }

    #[test]
    fn expand_head_contract() {
        let base = expand_head(&ClassifierHead::empty(), 4, 2, 7);
        assert_eq!(base.label_count(), 2);
        let grown = expand_head(&base, 4, 3, 11);
        assert_eq!(grown.label_count(), 5);
        for (old, new) in base.columns.iter().zip(&grown.columns) {
            assert_eq!(old, new);
        }
        let again = expand_head(&base, 4, 3, 11);
        assert_eq!(grown, again);
        // Bias starts at zero, weights are small.
        assert_eq!(grown.columns[4].bias.get(0, 0), 0.0);
        assert!(grown.columns[4].weight.max_abs() < 0.1);
    }

    #[test]
    fn expand_from_empty_matches_fresh_head() {
        let fresh = expand_head(&ClassifierHead::empty(), 3, 4, 99);
        let staged = expand_head(&ClassifierHead::empty(), 3, 4, 99);
        assert_eq!(fresh, staged);
    }

    #[test]
    fn predict_labels_threshold() {
        assert_eq!(predict_labels(&[0.6, 0.4, 0.9]), vec![0, 2]);
        assert!(predict_labels(&[0.5, 0.5, 0.5]).is_empty());
        assert_eq!(predict_labels(&[0.51, 0.99, 0.7]), vec![0, 1, 2]);
    }

    #[test]
    fn per_label_independence() {
        // Changing one label's embedding must leave other labels' features
        // untouched when z and the shared maps are fixed.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let dec = Decoupler::new(4, 3, 5, 4, Activation::Relu, &mut rng);
        let z = embed_instance(&[0.3, -1.0, 0.7, 0.2], &dec).unwrap();
        let e1 = vec![0.1, 0.2, 0.3];
        let e2 = vec![-0.5, 0.9, 0.0];
        let e2_changed = vec![1.5, -0.9, 2.0];

        let o1_before = semantic_feature(&z, &semantic_gate(&e1, &dec).unwrap(), &dec).unwrap();
        let o1_after = semantic_feature(&z, &semantic_gate(&e1, &dec).unwrap(), &dec).unwrap();
        assert_eq!(o1_before, o1_after);

        let o2_before = semantic_feature(&z, &semantic_gate(&e2, &dec).unwrap(), &dec).unwrap();
        let o2_after =
            semantic_feature(&z, &semantic_gate(&e2_changed, &dec).unwrap(), &dec).unwrap();
        assert_ne!(o2_before, o2_after);
    }
}
