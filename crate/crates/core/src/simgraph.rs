//! Batch cosine-similarity structure and anchor selection.
//!
//! For an embedding batch `X` (b x m) the similarity matrix is
//! `S = (X·Xᵀ) / (n·nᵀ)` where `n` holds the row norms. Anchors are the `k`
//! samples whose off-diagonal similarity mass is smallest, i.e. the samples
//! least like the rest of the batch.

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffGraph, NodeId, Tensor2};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Teacher,
    Student,
}

/// `b x m` batch of embeddings, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    matrix: Tensor2,
    source: Source,
}

impl EmbeddingBatch {
    pub fn new(matrix: Tensor2, source: Source) -> Result<Self> {
        if matrix.rows() < 2 {
            return Err(Error::contract(format!(
                "embedding batch needs at least 2 rows, got {}",
                matrix.rows()
            )));
        }
        check_nonzero_rows(&matrix)?;
        Ok(Self { matrix, source })
    }

    pub fn matrix(&self) -> &Tensor2 {
        &self.matrix
    }

    pub fn source(&self) -> Source {
        self.source
    }
}

fn check_nonzero_rows(x: &Tensor2) -> Result<()> {
    for i in 0..x.rows() {
        if x.row(i).iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate(format!("embedding row {i} is all zeros")));
        }
    }
    Ok(())
}

/// Symmetric `b x b` matrix of pairwise cosine similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix(Tensor2);

impl SimilarityMatrix {
    /// Wraps a matrix after checking symmetry, unit diagonal and range within `1e-9`.
    pub fn new(matrix: Tensor2) -> Result<Self> {
        let s = Self(matrix);
        s.check_invariants(1e-9)?;
        Ok(s)
    }

    pub fn matrix(&self) -> &Tensor2 {
        &self.0
    }

    pub fn into_matrix(self) -> Tensor2 {
        self.0
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn check_invariants(&self, tol: f64) -> Result<()> {
        let s = &self.0;
        if s.rows() != s.cols() {
            return Err(Error::contract(format!(
                "similarity matrix is {}x{}",
                s.rows(),
                s.cols()
            )));
        }
        for i in 0..s.rows() {
            if (s.get(i, i) - 1.0).abs() > tol {
                return Err(Error::contract(format!("diagonal entry {i} is {}", s.get(i, i))));
            }
            for j in 0..s.cols() {
                let v = s.get(i, j);
                if !(-1.0 - tol..=1.0 + tol).contains(&v) {
                    return Err(Error::contract(format!("entry ({i}, {j}) = {v} outside [-1, 1]")));
                }
                if (v - s.get(j, i)).abs() > tol {
                    return Err(Error::contract(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }
}

/// Sorted, distinct column indices chosen as anchors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSet {
    indices: Vec<usize>,
}

impl AnchorSet {
    pub fn new(mut indices: Vec<usize>, batch_size: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() || indices.len() > batch_size {
            return Err(Error::contract(format!(
                "anchor count {} not in [1, {batch_size}]",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= batch_size) {
            return Err(Error::contract(format!(
                "anchor index {bad} out of range for batch {batch_size}"
            )));
        }
        Ok(Self { indices })
    }

    pub fn all(batch_size: usize) -> Self {
        Self {
            indices: (0..batch_size).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

pub fn gram(x: &EmbeddingBatch) -> Tensor2 {
    let m = x.matrix();
    m.matmul(&m.transpose()).expect("X·Xᵀ is always conformable")
}

pub fn row_l2_norms(x: &EmbeddingBatch) -> Result<Tensor2> {
    norms_of(x.matrix())
}

fn norms_of(x: &Tensor2) -> Result<Tensor2> {
    let mut out = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Degenerate(format!("embedding row {i} has zero norm")));
        }
        out.push(n);
    }
    Ok(Tensor2::column(&out))
}

pub fn cosine_similarity_matrix(x: &EmbeddingBatch) -> Result<SimilarityMatrix> {
    Ok(SimilarityMatrix(cosine_similarity(x.matrix())?))
}

/// Value-level cosine similarity of any matrix without zero rows.
pub fn cosine_similarity(x: &Tensor2) -> Result<Tensor2> {
    let norms = norms_of(x)?;
    let c = x.matmul(&x.transpose())?;
    let outer = norms.matmul(&norms.transpose())?;
    let mut s = c.zip_map(&outer, "cosine", |a, b| a / b)?;
    // exact unit diagonal; cancellation can leave it a few ulps off
    for i in 0..s.rows() {
        s.set(i, i, 1.0);
    }
    Ok(s)
}

/// Differentiable cosine similarity of the rows of node `x`.
pub fn cosine_similarity_node(graph: &mut DiffGraph, x: NodeId) -> Result<NodeId> {
    check_nonzero_rows(graph.value(x))?;
    let xt = graph.transpose(x)?;
    let gram = graph.matmul(x, xt)?;
    let sq = graph.square(x)?;
    let sq_norms = graph.row_sums(sq)?;
    let norms = graph.sqrt(sq_norms)?;
    let norms_t = graph.transpose(norms)?;
    let outer = graph.matmul(norms, norms_t)?;
    graph.div(gram, outer)
}

/// Picks the `k` samples with the lowest off-diagonal row sum of `s`.
///
/// Ties go to the lower index; the result is sorted ascending.
pub fn select_anchors(s: &SimilarityMatrix, k: usize) -> Result<AnchorSet> {
    let b = s.size();
    if k == 0 || k > b {
        return Err(Error::contract(format!("k = {k} not in [1, {b}]")));
    }
    let m = s.matrix();
    let scores: Vec<f64> = (0..b)
        .map(|i| (0..b).filter(|&j| j != i).map(|j| m.get(i, j)).sum())
        .collect();
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&a, &c| scores[a].total_cmp(&scores[c]).then(a.cmp(&c)));
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();
    Ok(AnchorSet { indices })
}

/// Keeps every row and only the anchor columns, in anchor order.
pub fn restrict(s: &SimilarityMatrix, anchors: &AnchorSet) -> Result<Tensor2> {
    s.matrix().select_cols(anchors.indices())
}

pub fn restrict_node(graph: &mut DiffGraph, s: NodeId, anchors: &AnchorSet) -> Result<NodeId> {
    graph.select_cols(s, anchors.indices())
}
