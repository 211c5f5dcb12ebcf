//! Weight-space distances between client models and the similarity graph.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Sum over layers of the Euclidean distance between the two models' flat
/// layer vectors. Not the same as one norm over the concatenated vector.
pub fn pair_distance(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    if !a.same_structure(b) {
        return Err(Error::input("models have different layer structure"));
    }
    Ok(a.layers()
        .iter()
        .zip(b.layers())
        .map(|(la, lb)| {
            la.flat_iter()
                .zip(lb.flat_iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum())
}

/// Complete graph over clients. Edge weights reverse the distance ordering:
/// `s[i][j] = d_min + d_max - d[i][j]`, with `d_min`/`d_max` taken over
/// distinct pairs. Diagonal entries of `s` are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    pub d: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub d_min: f64,
    pub d_max: f64,
}

impl SimilarityGraph {
    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    /// All pairwise distances are equal, so every edge has the same weight.
    pub fn is_degenerate(&self) -> bool {
        self.d_min == self.d_max
    }

    /// Builds the graph from a precomputed distance matrix.
    pub fn from_distances(d: Vec<Vec<f64>>) -> Result<Self> {
        let n = d.len();
        if n < 2 {
            return Err(Error::input("similarity graph needs at least two clients"));
        }
        if d.iter().any(|row| row.len() != n) {
            return Err(Error::input("distance matrix is not square"));
        }
        let mut d_min = f64::INFINITY;
        let mut d_max = f64::NEG_INFINITY;
        for i in 0..n {
            if d[i][i] != 0.0 {
                return Err(Error::input("distance matrix diagonal must be zero"));
            }
            for j in i + 1..n {
                let v = d[i][j];
                if !(v >= 0.0) || !v.is_finite() || v != d[j][i] {
                    return Err(Error::input(format!(
                        "distance ({i}, {j}) must be finite, nonnegative and symmetric"
                    )));
                }
                d_min = d_min.min(v);
                d_max = d_max.max(v);
            }
        }
        let s = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            0.0
                        } else {
                            -d[i][j] + d_min + d_max
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self { d, s, d_min, d_max })
    }

    /// `i j d_ij S_ij` per unordered pair, one per line.
    pub fn write_edge_list(&self, mut out: impl Write) -> std::io::Result<()> {
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                writeln!(out, "{i} {j} {} {}", self.d[i][j], self.s[i][j])?;
            }
        }
        Ok(())
    }
}

/// Distance matrix over `models` and the derived similarity weights.
pub fn build_graph(models: &[&ModelParams]) -> Result<SimilarityGraph> {
    let n = models.len();
    if n < 2 {
        return Err(Error::input("similarity graph needs at least two clients"));
    }
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = pair_distance(models[i], models[j])?;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    SimilarityGraph::from_distances(d)
}
