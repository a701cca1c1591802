//! Communication graphs and doubly stochastic mixing matrices.
//!
//! A [`MixingMatrix`] is built once from a connected [`Graph`] and is
//! immutable afterwards. Its contraction factor `rho = ||W - J||_2` is
//! computed at construction and cached.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use thiserror::Error;

/// Tolerance on row and column sums of a mixing matrix.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Max `|W - W^T|` for a matrix to be treated as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-14;

const POWER_REL_TOL: f64 = 1e-12;
const POWER_MAX_ITERS: usize = 100_000;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("{what} needs at least {min} nodes per dimension, got {got}")]
    TooSmall { what: &'static str, min: usize, got: usize },
    #[error("edge ({0}, {1}) references a node outside [0, {2})")]
    NodeOutOfRange(usize, usize, usize),
    #[error("graph is disconnected: component {first:?} is separated from {rest:?}")]
    Disconnected { first: Vec<usize>, rest: Vec<usize> },
    #[error("mixing matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("mixing matrix entry ({i}, {j}) = {value} is negative or not finite")]
    BadEntry { i: usize, j: usize, value: f64 },
    #[error("mixing matrix is not doubly stochastic: max |row/col sum - 1| = {max_deviation:e}")]
    NotDoublyStochastic { max_deviation: f64 },
    #[error("mixing matrix does not contract: rho = ||W - J||_2 = {rho}")]
    NotContractive { rho: f64 },
    #[error("power iteration for ||W - J||_2 did not converge in {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("damping factor must lie in (0, 1], got {0}")]
    BadDamping(f64),
}

/// Undirected simple graph on nodes `0..n`. Self-communication is implicit
/// and never stored as an edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Graph {
    pub fn from_edges<I>(n: usize, edges: I) -> Result<Self, TopologyError>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(TopologyError::NodeOutOfRange(a, b, n));
            }
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
        Ok(Self { n, edges: set })
    }

    /// Parse a whitespace separated edge list, one `i j` pair per line,
    /// 0-indexed. Blank lines and `#` comments are skipped. The node count
    /// is one more than the largest index seen unless `n` is given.
    pub fn parse_edge_list(text: &str, n: Option<usize>) -> Result<Self, TopologyError> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let mut next = || -> Result<usize, TopologyError> {
                let tok = it.next().ok_or_else(|| TopologyError::Parse {
                    line: lineno + 1,
                    message: "expected two node indices".into(),
                })?;
                tok.parse().map_err(|_| TopologyError::Parse {
                    line: lineno + 1,
                    message: format!("`{tok}` is not a node index"),
                })
            };
            let (a, b) = (next()?, next()?);
            if it.next().is_some() {
                return Err(TopologyError::Parse { line: lineno + 1, message: "trailing tokens".into() });
            }
            pairs.push((a, b));
        }
        let inferred = pairs.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(0);
        Self::from_edges(n.unwrap_or(inferred), pairs)
    }

    pub fn read_edge_list(path: &Path, n: Option<usize>) -> Result<Self, TopologyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| TopologyError::Io { path: path.display().to_string(), source })?;
        Self::parse_edge_list(&text, n)
    }

    pub fn ring(n: usize) -> Self {
        let edges = (0..n).map(|i| (i, (i + 1) % n));
        Self::from_edges(n, edges).expect("ring indices are in range")
    }

    pub fn path(n: usize) -> Self {
        Self::from_edges(n, (1..n).map(|i| (i - 1, i))).expect("path indices are in range")
    }

    pub fn star(n: usize) -> Self {
        Self::from_edges(n, (1..n).map(|i| (0, i))).expect("star indices are in range")
    }

    pub fn complete(n: usize) -> Self {
        let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
        Self::from_edges(n, edges).expect("complete graph indices are in range")
    }

    /// 2d grid with wraparound; node `(r, c)` has index `r * cols + c`.
    pub fn torus2d(rows: usize, cols: usize) -> Self {
        let idx = |r: usize, c: usize| r * cols + c;
        let mut edges = Vec::with_capacity(2 * rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                edges.push((idx(r, c), idx((r + 1) % rows, c)));
                edges.push((idx(r, c), idx(r, (c + 1) % cols)));
            }
        }
        Self::from_edges(rows * cols, edges).expect("torus indices are in range")
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    /// Connected components in order of their smallest node.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.n];
        let mut out = Vec::new();
        for start in 0..self.n {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn ensure_connected(&self) -> Result<(), TopologyError> {
        let comps = self.components();
        if comps.len() > 1 {
            let mut iter = comps.into_iter();
            let first = iter.next().unwrap_or_default();
            let mut rest: Vec<usize> = iter.flatten().collect();
            rest.sort_unstable();
            return Err(TopologyError::Disconnected { first, rest });
        }
        Ok(())
    }
}

/// Edge weighting rule for graphs without a prescribed matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    /// Every edge gets `1 / (1 + max_degree)`; on a regular graph this is
    /// the same weight on self and on every neighbor (1/3 on a ring).
    Uniform,
    /// `w_ij = 1 / (1 + max(deg_i, deg_j))` per edge.
    Metropolis,
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightScheme::Uniform => f.write_str("uniform"),
            WeightScheme::Metropolis => f.write_str("metropolis"),
        }
    }
}

impl serde::Serialize for WeightScheme {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for WeightScheme {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        <String as serde::Deserialize>::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl std::str::FromStr for WeightScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" | "uniform-degree" | "uniform-1/3" => Ok(Self::Uniform),
            "metropolis" => Ok(Self::Metropolis),
            other => Err(format!("unknown weight scheme `{other}` (expected uniform or metropolis)")),
        }
    }
}

/// Doubly stochastic, nonnegative weights with `||W - J||_2 < 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    w: Array2<f64>,
    rho: f64,
}

impl MixingMatrix {
    /// Validate an arbitrary matrix and cache its contraction factor.
    pub fn from_matrix(w: Array2<f64>) -> Result<Self, TopologyError> {
        let (r, c) = w.dim();
        if r != c || r == 0 {
            return Err(TopologyError::NotSquare(r, c));
        }
        for ((i, j), &v) in w.indexed_iter() {
            if !v.is_finite() || v < 0.0 {
                return Err(TopologyError::BadEntry { i, j, value: v });
            }
        }
        let dev = stochastic_deviation(w.view());
        if dev > STOCHASTIC_TOL {
            return Err(TopologyError::NotDoublyStochastic { max_deviation: dev });
        }
        let rho = spectral_rho(w.view())?;
        if rho >= 1.0 {
            return Err(TopologyError::NotContractive { rho });
        }
        Ok(Self { w, rho })
    }

    fn from_graph(graph: &Graph, scheme: WeightScheme) -> Result<Self, TopologyError> {
        graph.ensure_connected()?;
        let n = graph.node_count();
        let deg = graph.degrees();
        let max_deg = deg.iter().copied().max().unwrap_or(0);
        let mut w = Array2::<f64>::zeros((n, n));
        for (a, b) in graph.edges() {
            let weight = match scheme {
                WeightScheme::Uniform => 1.0 / (1 + max_deg) as f64,
                WeightScheme::Metropolis => 1.0 / (1 + deg[a].max(deg[b])) as f64,
            };
            w[[a, b]] = weight;
            w[[b, a]] = weight;
        }
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[[i, j]]).sum();
            w[[i, i]] = 1.0 - off;
        }
        Self::from_matrix(w)
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.w
    }

    /// Cached `||W - J||_2`.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Number of neighbors (nonzero off-diagonal entries) of each node.
    pub fn degrees(&self) -> Vec<usize> {
        let n = self.n();
        (0..n)
            .map(|i| (0..n).filter(|&j| j != i && (self.w[[i, j]] != 0.0 || self.w[[j, i]] != 0.0)).count())
            .collect()
    }

    pub fn max_stochastic_deviation(&self) -> f64 {
        stochastic_deviation(self.w.view())
    }

    /// Damped gossip matrix `gamma W + (1 - gamma) I`.
    pub fn damped(&self, gamma: f64) -> Result<Self, TopologyError> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(TopologyError::BadDamping(gamma));
        }
        let n = self.n();
        let w = &self.w * gamma + &(Array2::<f64>::eye(n) * (1.0 - gamma));
        Self::from_matrix(w)
    }
}

/// Ring where node `i` talks to `i +- 1 mod n`.
pub fn build_ring(n: usize, scheme: WeightScheme) -> Result<MixingMatrix, TopologyError> {
    if n < 2 {
        return Err(TopologyError::TooSmall { what: "ring", min: 2, got: n });
    }
    MixingMatrix::from_graph(&Graph::ring(n), scheme)
}

/// All-to-all averaging, `W = J`.
pub fn build_complete(n: usize) -> Result<MixingMatrix, TopologyError> {
    if n < 1 {
        return Err(TopologyError::TooSmall { what: "complete graph", min: 1, got: n });
    }
    MixingMatrix::from_matrix(Array2::from_elem((n, n), 1.0 / n as f64))
}

/// Wraparound grid with weight 1/5 on self and each of the 4 neighbors.
pub fn build_torus2d(rows: usize, cols: usize) -> Result<MixingMatrix, TopologyError> {
    for d in [rows, cols] {
        if d < 3 {
            return Err(TopologyError::TooSmall { what: "2d torus", min: 3, got: d });
        }
    }
    MixingMatrix::from_graph(&Graph::torus2d(rows, cols), WeightScheme::Uniform)
}

pub fn build_custom(graph: &Graph, scheme: WeightScheme) -> Result<MixingMatrix, TopologyError> {
    if graph.node_count() < 1 {
        return Err(TopologyError::TooSmall { what: "custom graph", min: 1, got: 0 });
    }
    MixingMatrix::from_graph(graph, scheme)
}

/// Dense matrix text: one row per line, entries separated by whitespace or
/// commas, `#` starts a comment. Only the shape is checked here.
pub fn parse_matrix(text: &str) -> Result<Array2<f64>, TopologyError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|_| TopologyError::Parse { line: lineno + 1, message: format!("`{t}` is not a number") }))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(TopologyError::Parse {
                    line: lineno + 1,
                    message: format!("row has {} entries, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n != m || n == 0 {
        return Err(TopologyError::NotSquare(n, m));
    }
    Ok(Array2::from_shape_fn((n, n), |(i, j)| rows[i][j]))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>, TopologyError> {
    let text = std::fs::read_to_string(path).map_err(|source| TopologyError::Io { path: path.display().to_string(), source })?;
    parse_matrix(&text)
}

/// Max over rows and columns of `|sum - 1|`.
pub fn stochastic_deviation(w: ArrayView2<f64>) -> f64 {
    let rows = w.rows().into_iter().map(|r| (r.sum() - 1.0).abs());
    let cols = w.columns().into_iter().map(|c| (c.sum() - 1.0).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// `||W - J||_2`: symmetric eigendecomposition when `W` is symmetric, power
/// iteration on `(W - J)^T (W - J)` otherwise.
pub fn spectral_rho(w: ArrayView2<f64>) -> Result<f64, TopologyError> {
    let (r, c) = w.dim();
    if r != c || r == 0 {
        return Err(TopologyError::NotSquare(r, c));
    }
    let n = r;
    let centered = &w - 1.0 / n as f64;
    let asym = centered
        .indexed_iter()
        .map(|((i, j), &v)| (v - centered[[j, i]]).abs())
        .fold(0.0, f64::max);
    if asym <= SYMMETRY_TOL {
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (centered[[i, j]] + centered[[j, i]]));
        let eig = nalgebra::SymmetricEigen::new(m);
        return Ok(eig.eigenvalues.iter().fold(0.0, |acc: f64, &v| acc.max(v.abs())));
    }
    power_norm(&centered)
}

fn power_norm(m: &Array2<f64>) -> Result<f64, TopologyError> {
    let n = m.nrows();
    let gram = m.t().dot(m);
    let mut v: Array1<f64> = Array1::from_shape_fn(n, |j| 1.0 + ((j + 1) as f64).sin());
    let norm = v.dot(&v).sqrt();
    v /= norm;
    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    for _ in 0..POWER_MAX_ITERS {
        let mv = gram.dot(&v);
        let next_lambda = v.dot(&mv);
        let mv_norm = mv.dot(&mv).sqrt();
        if mv_norm == 0.0 {
            return Ok(0.0);
        }
        residual = (&mv - &(&v * next_lambda)).dot(&(&mv - &(&v * next_lambda))).sqrt();
        let converged = (next_lambda - lambda).abs() <= POWER_REL_TOL * next_lambda.abs();
        lambda = next_lambda;
        v = mv / mv_norm;
        if converged {
            return Ok(lambda.max(0.0).sqrt());
        }
    }
    Err(TopologyError::NonConvergence { iterations: POWER_MAX_ITERS, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn ring5_uniform_weights() {
        let m = build_ring(5, WeightScheme::Uniform).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let near = i == j || (i + 1) % 5 == j || (j + 1) % 5 == i;
                let expect = if near { 1.0 / 3.0 } else { 0.0 };
                assert_abs_diff_eq!(m.weights()[[i, j]], expect, epsilon = 1e-15);
            }
        }
        assert_eq!(m.degrees(), vec![2; 5]);
    }

    #[test]
    fn two_node_ring_is_complete() {
        let m = build_ring(2, WeightScheme::Uniform).unwrap();
        assert_eq!(m.weights(), &array![[0.5, 0.5], [0.5, 0.5]]);
        assert!(m.rho() < 1e-15);
        let m = build_ring(2, WeightScheme::Metropolis).unwrap();
        assert_eq!(m.weights(), &array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn rejects_tiny_shapes() {
        assert!(matches!(build_ring(1, WeightScheme::Uniform), Err(TopologyError::TooSmall { .. })));
        assert!(matches!(build_torus2d(2, 5), Err(TopologyError::TooSmall { .. })));
        assert!(matches!(build_complete(0), Err(TopologyError::TooSmall { .. })));
    }

    #[test]
    fn complete_is_averaging() {
        let m = build_complete(4).unwrap();
        assert!(m.weights().iter().all(|&v| v == 0.25));
        assert_eq!(m.rho(), 0.0);
        let one = build_complete(1).unwrap();
        assert_eq!(one.weights(), &array![[1.0]]);
        assert_eq!(one.rho(), 0.0);
    }

    #[test]
    fn torus_rows_have_five_fifths() {
        let m = build_torus2d(3, 3).unwrap();
        for row in m.weights().rows() {
            let nz: Vec<f64> = row.iter().copied().filter(|&v| v != 0.0).collect();
            assert_eq!(nz.len(), 5);
            assert!(nz.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn metropolis_path3() {
        let m = build_custom(&Graph::path(3), WeightScheme::Metropolis).unwrap();
        let expect = array![[2.0 / 3.0, 1.0 / 3.0, 0.0], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], [0.0, 1.0 / 3.0, 2.0 / 3.0]];
        for (a, b) in m.weights().iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        assert!(m.max_stochastic_deviation() <= 1e-12);
    }

    #[test]
    fn metropolis_complete_is_j() {
        let m = build_custom(&Graph::complete(6), WeightScheme::Metropolis).unwrap();
        assert!(m.weights().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        assert!(m.rho() < 1e-12);
    }

    #[test]
    fn disconnected_graph_reports_components() {
        let g = Graph::from_edges(5, [(0, 1), (2, 3), (3, 4)]).unwrap();
        match build_custom(&g, WeightScheme::Metropolis) {
            Err(TopologyError::Disconnected { first, rest }) => {
                assert_eq!(first, vec![0, 1]);
                assert_eq!(rest, vec![2, 3, 4]);
            }
            other => panic!("expected disconnected error, got {other:?}"),
        }
    }

    #[test]
    fn edge_list_parsing() {
        let g = Graph::parse_edge_list("# star\n0 1\n0 2\n\n0 3 # last\n", None).unwrap();
        assert_eq!(g.node_count(), 4);
        assert_eq!(g.degrees(), vec![3, 1, 1, 1]);
        assert!(matches!(Graph::parse_edge_list("0 x\n", None), Err(TopologyError::Parse { line: 1, .. })));
        assert!(matches!(Graph::parse_edge_list("0 1 2\n", None), Err(TopologyError::Parse { .. })));
        assert!(matches!(Graph::parse_edge_list("0 5\n", Some(3)), Err(TopologyError::NodeOutOfRange(..))));
    }

    #[test]
    fn rho_of_identity_is_one() {
        let rho = spectral_rho(Array2::<f64>::eye(2).view()).unwrap();
        assert_abs_diff_eq!(rho, 1.0, epsilon = 1e-14);
        assert!(matches!(MixingMatrix::from_matrix(Array2::eye(2)), Err(TopologyError::NotContractive { .. })));
    }

    #[test]
    fn power_iteration_on_nonsymmetric() {
        // doubly stochastic but not symmetric: a permutation blend
        let p = array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        let w = &p * 0.5 + &(Array2::<f64>::eye(3) * 0.5);
        let rho = spectral_rho(w.view()).unwrap();
        // W - J is normal (circulant), so its 2-norm is the largest |eigenvalue|:
        // |0.5 + 0.5 e^{2 pi i / 3}| = 0.5
        assert_abs_diff_eq!(rho, 0.5, epsilon = 1e-10);
    }

    #[test]
    fn rejects_bad_rows() {
        let w = array![[0.5, 0.4], [0.5, 0.5]];
        match MixingMatrix::from_matrix(w) {
            Err(TopologyError::NotDoublyStochastic { max_deviation }) => assert_abs_diff_eq!(max_deviation, 0.1, epsilon = 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn damped_matrix_contracts() {
        let m = build_ring(6, WeightScheme::Uniform).unwrap();
        for gamma in [0.05, 0.5, 1.0] {
            let d = m.damped(gamma).unwrap();
            assert!(d.rho() < 1.0);
            assert!(d.rho() >= m.rho() - 1e-12);
        }
        assert!(m.damped(0.0).is_err());
    }
}
