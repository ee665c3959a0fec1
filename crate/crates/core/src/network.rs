//! Communication graphs and doubly stochastic gossip matrices.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Tolerance for symmetry and stochasticity of a gossip matrix.
pub const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    /// Cycle: node i is linked to i±1 mod N.
    Ring,
    /// Node 0 is linked to every other node.
    Star,
    Complete,
    /// Explicit edge list.
    Custom,
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" | "cycle" => Ok(Self::Ring),
            "star" => Ok(Self::Star),
            "complete" => Ok(Self::Complete),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Config(format!("unknown topology {other:?}"))),
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Ring => "ring",
            Self::Star => "star",
            Self::Complete => "complete",
            Self::Custom => "custom",
        };
        f.write_str(name)
    }
}

/// An undirected, simple, connected graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    edges: BTreeSet<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an edge list, rejecting self-loops, duplicates,
    /// out-of-range endpoints and disconnected results.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if num_nodes == 0 {
            return Err(invalid("graph needs at least one node"));
        }
        let mut set = BTreeSet::new();
        for &(i, j) in edges {
            if i >= num_nodes || j >= num_nodes {
                return Err(invalid(format!("edge ({i},{j}) out of range for {num_nodes} nodes")));
            }
            if i == j {
                return Err(invalid(format!("self-loop at node {i}")));
            }
            if !set.insert((i.min(j), i.max(j))) {
                return Err(invalid(format!("duplicate edge ({i},{j})")));
            }
        }
        let mut neighbors = vec![Vec::new(); num_nodes];
        for &(i, j) in &set {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let graph = Self {
            num_nodes,
            edges: set,
            neighbors,
        };
        let reached = graph.reachable_from(0);
        if reached < num_nodes {
            return Err(Error::Disconnected(format!(
                "only {reached} of {num_nodes} nodes reachable from node 0"
            )));
        }
        Ok(graph)
    }

    fn reachable_from(&self, start: usize) -> usize {
        let mut seen = vec![false; self.num_nodes];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &u in &self.neighbors[v] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    queue.push_back(u);
                }
            }
        }
        count
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Edges as ordered pairs `(i, j)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }
}

/// Builds a named topology. `custom` requires an edge list.
pub fn build_graph(kind: TopologyKind, num_nodes: usize, custom: Option<&[(usize, usize)]>) -> Result<Graph> {
    let edges: Vec<(usize, usize)> = match kind {
        TopologyKind::Ring => {
            if num_nodes < 3 {
                return Err(invalid("ring needs at least 3 nodes"));
            }
            (0..num_nodes).map(|i| (i, (i + 1) % num_nodes)).collect()
        }
        TopologyKind::Star => {
            if num_nodes < 2 {
                return Err(invalid("star needs at least 2 nodes"));
            }
            (1..num_nodes).map(|j| (0, j)).collect()
        }
        TopologyKind::Complete => {
            if num_nodes < 2 {
                return Err(invalid("complete graph needs at least 2 nodes"));
            }
            (0..num_nodes)
                .flat_map(|i| (i + 1..num_nodes).map(move |j| (i, j)))
                .collect()
        }
        TopologyKind::Custom => custom
            .ok_or_else(|| Error::Config("custom topology needs an edge list".into()))?
            .to_vec(),
    };
    Graph::from_edges(num_nodes, &edges)
}

/// A symmetric doubly stochastic matrix supported on a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    w: Vec<f64>,
    /// Non-zero off-diagonal entries per row, `(column, weight)`.
    sparse: Vec<Vec<(usize, f64)>>,
    sigma2: f64,
}

impl WeightMatrix {
    /// Validates a dense row-major matrix against the gossip invariants.
    pub fn new(n: usize, w: Vec<f64>) -> Result<Self> {
        if n == 0 || w.len() != n * n {
            return Err(invalid("weight matrix must be a non-empty square matrix"));
        }
        for i in 0..n {
            if !(w[i * n + i] > 0.0) {
                return Err(invalid(format!("diagonal entry {i} must be positive")));
            }
            let mut row = 0.0;
            let mut col = 0.0;
            for j in 0..n {
                let wij = w[i * n + j];
                if !(wij >= 0.0) || !wij.is_finite() {
                    return Err(invalid(format!("entry ({i},{j}) = {wij} is negative")));
                }
                if (wij - w[j * n + i]).abs() > WEIGHT_TOL {
                    return Err(invalid(format!("entry ({i},{j}) breaks symmetry")));
                }
                row += wij;
                col += w[j * n + i];
            }
            if (row - 1.0).abs() > WEIGHT_TOL || (col - 1.0).abs() > WEIGHT_TOL {
                return Err(invalid(format!("row/column {i} does not sum to one")));
            }
        }
        let sparse = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i && w[i * n + j] > 0.0)
                    .map(|j| (j, w[i * n + j]))
                    .collect()
            })
            .collect();
        let sigma2 = second_singular_value_of(n, &w);
        if !(sigma2 < 1.0 - 1e-12) {
            return Err(Error::Disconnected(format!(
                "second singular value {sigma2} is not below one"
            )));
        }
        Ok(Self { n, w, sparse, sigma2 })
    }

    /// Validates a matrix and additionally checks that its support matches
    /// the graph's edges plus the diagonal.
    pub fn on_graph(graph: &Graph, w: Vec<f64>) -> Result<Self> {
        let n = graph.num_nodes();
        let matrix = Self::new(n, w)?;
        for i in 0..n {
            for j in 0..n {
                let positive = matrix.get(i, j) > 0.0;
                if i != j && positive != graph.has_edge(i, j) {
                    return Err(invalid(format!("support of W differs from the graph at ({i},{j})")));
                }
            }
        }
        Ok(matrix)
    }

    /// Exact averaging `(1/N) 1 1ᵀ`.
    pub fn uniform_averaging(n: usize) -> Self {
        Self::new(n, vec![1.0 / n as f64; n * n]).expect("uniform averaging is doubly stochastic")
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    pub fn self_weight(&self, i: usize) -> f64 {
        self.w[i * self.n + i]
    }

    pub fn min_self_weight(&self) -> f64 {
        (0..self.n).map(|i| self.self_weight(i)).fold(f64::INFINITY, f64::min)
    }

    /// Positive off-diagonal weights of row `i`.
    pub fn neighbor_weights(&self, i: usize) -> &[(usize, f64)] {
        &self.sparse[i]
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.w)
    }
}

/// Lazy Metropolis weights: `1 / (2 max(deg_i, deg_j))` on each edge and the
/// remaining mass on the diagonal, which is therefore at least 1/2.
pub fn lazy_metropolis(graph: &Graph) -> WeightMatrix {
    let n = graph.num_nodes();
    let mut w = vec![0.0; n * n];
    for (i, j) in graph.edges() {
        let weight = 1.0 / (2.0 * graph.degree(i).max(graph.degree(j)) as f64);
        w[i * n + j] = weight;
        w[j * n + i] = weight;
    }
    for i in 0..n {
        let off: f64 = graph.neighbors(i).iter().map(|&j| w[i * n + j]).sum();
        w[i * n + i] = 1.0 - off;
    }
    WeightMatrix::new(n, w).expect("lazy Metropolis weights on a connected graph are valid")
}

/// Second largest singular value of a gossip matrix.
pub fn second_singular_value(w: &WeightMatrix) -> f64 {
    w.sigma2()
}

fn second_singular_value_of(n: usize, w: &[f64]) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let m = DMatrix::from_row_slice(n, n, w);
    let mut singular: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().map(|l| l.abs()).collect();
    singular.sort_by(|a, b| b.total_cmp(a));
    singular[1]
}

/// `‖Wᵏ - (1/N) 1 1ᵀ‖₂`, computed from explicit matrix powers.
pub fn gossip_deviation(w: &WeightMatrix, k: u32) -> f64 {
    let n = w.size();
    let base = w.to_matrix();
    let mut power = DMatrix::identity(n, n);
    for _ in 0..k {
        power = &power * &base;
    }
    let deviation = power - DMatrix::from_element(n, n, 1.0 / n as f64);
    let sym = (&deviation + deviation.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(0.0, |m: f64, l| m.max(l.abs()))
}
