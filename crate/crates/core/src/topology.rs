//! Spectral persistent homology for hole detection.
//!
//! Points are joined into a symmetrized kNN graph, distances are effective
//! resistances read off the Laplacian pseudoinverse (optionally with the
//! degree correction that removes the `1/d_i + 1/d_j` limit), and H1
//! persistence of the Vietoris–Rips filtration on those distances locates
//! loops. Each long-lived loop is described by its representative cycle:
//! center, size, radius, hypersphere volume and nearby boundary samples.
//!
//! Persistence is computed per connected component; resistance between
//! components is infinite.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::corpus::Corpus;
use crate::geometry::{euclidean, knn_euclidean_all, matrix_rows, pca_reduce, GeometryError};
use crate::stats::{median, substream};

pub const DEFAULT_GRAPH_K: usize = 15;
pub const DEFAULT_EPS_REL: f64 = 1e-10;
pub const DEFAULT_BOUNDARY_K: usize = 20;
pub const DEFAULT_BOUNDARY_ALPHA: f64 = 1.5;
pub const DEFAULT_TOP_HOLES: usize = 5;
pub const MAX_COMPONENT_POINTS: usize = 2000;
/// Negative corrected resistances above this magnitude are treated as errors, not roundoff.
pub const ROUNDOFF_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("graph k = {k} out of range for {n} points (need 1 <= k <= n - 1)")]
    KOutOfRange { k: usize, n: usize },
    #[error("vertex {0} has degree zero")]
    ZeroDegree(usize),
    #[error("distance matrix is not square ({0} x {1})")]
    NotSquare(usize, usize),
    #[error("distance matrix is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("distance matrix has a negative or non-finite entry at ({0}, {1})")]
    InvalidEntry(usize, usize),
    #[error("distance matrix has a non-zero diagonal at {0}")]
    NonZeroDiagonal(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Undirected kNN graph with sorted adjacency lists and labelled components.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub n: usize,
    pub adjacency: Vec<Vec<usize>>,
    /// Components ordered by their smallest vertex; vertices sorted.
    pub components: Vec<Vec<usize>>,
    pub component_of: Vec<usize>,
}

impl KnnGraph {
    /// Graph on `n` vertices from an undirected edge list; self-loops and repeats are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a != b {
                sets[a].insert(b);
                sets[b].insert(a);
            }
        }
        let adjacency: Vec<Vec<usize>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        let mut component_of = vec![usize::MAX; n];
        let mut components = Vec::new();
        for start in 0..n {
            if component_of[start] != usize::MAX {
                continue;
            }
            let id = components.len();
            let mut members = vec![start];
            component_of[start] = id;
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &w in &adjacency[v] {
                    if component_of[w] == usize::MAX {
                        component_of[w] = id;
                        members.push(w);
                        queue.push_back(w);
                    }
                }
            }
            members.sort_unstable();
            components.push(members);
        }
        Self { n, adjacency, components, component_of }
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n).map(|v| self.degree(v)).collect()
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n).flat_map(|a| self.adjacency[a].iter().filter(move |&&b| b > a).map(move |&b| (a, b))).collect()
    }

    /// Dense `L = D - A` restricted to `vertices`, in that order.
    pub fn laplacian(&self, vertices: &[usize]) -> DMatrix<f64> {
        let local: BTreeMap<usize, usize> = vertices.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let m = vertices.len();
        let mut l = DMatrix::zeros(m, m);
        for (i, &v) in vertices.iter().enumerate() {
            for w in &self.adjacency[v] {
                if let Some(&j) = local.get(w) {
                    l[(i, j)] -= 1.0;
                    l[(i, i)] += 1.0;
                }
            }
        }
        l
    }
}

/// Edge `(i, j)` whenever `j` is among the `k` Euclidean nearest neighbors of
/// `i` or vice versa. On unit vectors this ranking equals the cosine one.
pub fn build_knn_graph(points: &[Vec<f64>], k: usize) -> Result<KnnGraph, TopologyError> {
    let n = points.len();
    if n < 2 || k == 0 || k > n - 1 {
        return Err(TopologyError::KOutOfRange { k, n });
    }
    let lists = knn_euclidean_all(points, k)?;
    let edges: Vec<(usize, usize)> =
        lists.iter().enumerate().flat_map(|(i, l)| l.iter().map(move |nb| (i, nb.index))).collect();
    Ok(KnnGraph::from_edges(n, &edges))
}

#[derive(Debug, Clone)]
pub struct ComponentPinv {
    pub vertices: Vec<usize>,
    pub pinv: DMatrix<f64>,
}

/// Moore–Penrose pseudoinverse of the Laplacian of each component.
/// Eigenvalues at or below `eps_rel * lambda_max` are treated as zero.
pub fn laplacian_pseudoinverse(g: &KnnGraph, eps_rel: f64) -> Vec<ComponentPinv> {
    g.components
        .par_iter()
        .map(|vertices| {
            let l = g.laplacian(vertices);
            let eig = SymmetricEigen::new(l);
            let lambda_max = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
            let cutoff = eps_rel * lambda_max;
            let inv = eig.eigenvalues.map(|v| if v <= cutoff { 0.0 } else { 1.0 / v });
            let pinv = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
            ComponentPinv { vertices: vertices.clone(), pinv: (&pinv + pinv.transpose()) * 0.5 }
        })
        .collect()
}

/// `R_ij = P_ii + P_jj - 2 P_ij` within components, `+inf` across components.
pub fn effective_resistance(g: &KnnGraph, pinvs: &[ComponentPinv]) -> DMatrix<f64> {
    let mut r = DMatrix::from_element(g.n, g.n, f64::INFINITY);
    for c in pinvs {
        let p = &c.pinv;
        for (a, &u) in c.vertices.iter().enumerate() {
            r[(u, u)] = 0.0;
            for (b, &v) in c.vertices.iter().enumerate().skip(a + 1) {
                let value = p[(a, a)] + p[(b, b)] - 2.0 * p[(a, b)];
                r[(u, v)] = value;
                r[(v, u)] = value;
            }
        }
    }
    r
}

/// Degree-corrected resistance
/// `R_ij - 1/d_i - 1/d_j + 2 A_ij / (d_i d_j) - A_ii / d_i^2 - A_jj / d_j^2`
/// for `i != j` (the graph has no self-loops, so the last two terms vanish).
/// The diagonal is defined as 0 and cross-component pairs stay infinite.
pub fn corrected_resistance(naive: &DMatrix<f64>, g: &KnnGraph) -> Result<DMatrix<f64>, TopologyError> {
    let degrees = g.degrees();
    if let Some(v) = degrees.iter().position(|&d| d == 0) {
        return Err(TopologyError::ZeroDegree(v));
    }
    let mut out = naive.clone();
    for i in 0..g.n {
        out[(i, i)] = 0.0;
        for j in i + 1..g.n {
            let r = naive[(i, j)];
            if !r.is_finite() {
                continue;
            }
            let (di, dj) = (degrees[i] as f64, degrees[j] as f64);
            let a = if g.is_adjacent(i, j) { 1.0 } else { 0.0 };
            let value = r - 1.0 / di - 1.0 / dj + 2.0 * a / (di * dj);
            out[(i, j)] = value;
            out[(j, i)] = value;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ResistanceMatrix {
    pub naive: DMatrix<f64>,
    pub corrected: DMatrix<f64>,
    pub component_of: Vec<usize>,
}

impl ResistanceMatrix {
    pub fn compute(g: &KnnGraph, eps_rel: f64) -> Result<Self, TopologyError> {
        let naive = effective_resistance(g, &laplacian_pseudoinverse(g, eps_rel));
        let corrected = corrected_resistance(&naive, g)?;
        Ok(Self { naive, corrected, component_of: g.component_of.clone() })
    }

    pub fn is_reachable(&self, i: usize, j: usize) -> bool {
        self.component_of[i] == self.component_of[j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistencePair {
    pub dimension: u8,
    pub birth: f64,
    /// `+inf` for essential classes (serialized as `null`).
    pub death: f64,
    pub birth_edge: (usize, usize),
    pub death_triangle: Option<[usize; 3]>,
    /// Edges of a representative cycle, each as `(low, high)` vertex pair.
    pub representative: Vec<(usize, usize)>,
}

impl PersistencePair {
    pub fn persistence(&self) -> f64 {
        self.death - self.birth
    }

    /// Distinct vertices of the representative cycle, sorted.
    pub fn vertices(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.representative.iter().flat_map(|&(a, b)| [a, b]).collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RipsOptions {
    /// Keep pairs whose death equals their birth.
    pub include_zero_persistence: bool,
}

fn validate_distances(dist: &DMatrix<f64>) -> Result<(), TopologyError> {
    let (n, m) = dist.shape();
    if n != m {
        return Err(TopologyError::NotSquare(n, m));
    }
    for i in 0..n {
        if dist[(i, i)] != 0.0 {
            return Err(TopologyError::NonZeroDiagonal(i));
        }
        for j in i + 1..n {
            let (a, b) = (dist[(i, j)], dist[(j, i)]);
            if !a.is_finite() || a < 0.0 {
                return Err(TopologyError::InvalidEntry(i, j));
            }
            if (a - b).abs() > 1e-12 * a.abs().max(1.0) {
                return Err(TopologyError::NotSymmetric(i, j));
            }
        }
    }
    Ok(())
}

/// Symmetric difference of two ascending index lists.
fn add_columns(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Path between `a` and `b` in a forest given as adjacency lists.
fn forest_path(forest: &[Vec<usize>], a: usize, b: usize) -> Vec<usize> {
    let mut prev = vec![usize::MAX; forest.len()];
    prev[a] = a;
    let mut queue = VecDeque::from([a]);
    while let Some(v) = queue.pop_front() {
        if v == b {
            break;
        }
        for &w in &forest[v] {
            if prev[w] == usize::MAX {
                prev[w] = v;
                queue.push_back(w);
            }
        }
    }
    let mut path = vec![b];
    let mut v = b;
    while v != a {
        v = prev[v];
        path.push(v);
    }
    path
}

/// Enclosing radius `min_i max_j d_ij`. Beyond it the Rips complex is a cone,
/// so every H1 class has died.
pub fn enclosing_radius(dist: &DMatrix<f64>) -> f64 {
    (0..dist.nrows()).map(|i| dist.row(i).iter().copied().fold(0.0f64, f64::max)).fold(f64::INFINITY, f64::min)
}

/// H1 persistence of the Vietoris–Rips filtration of a finite metric, using
/// simplices of dimension at most 2.
///
/// Edges are ordered by (value, lower vertex, upper vertex). A triangle enters
/// with its longest edge; triangles are ordered by that edge's position, then
/// lexicographically. Positive edges are found with union–find, and triangle
/// boundary columns are reduced left to right over GF(2). The filtration is
/// truncated at the enclosing radius, which leaves the H1 diagram unchanged.
pub fn rips_persistence_h1(dist: &DMatrix<f64>, options: RipsOptions) -> Result<Vec<PersistencePair>, TopologyError> {
    validate_distances(dist)?;
    let n = dist.nrows();
    if n < 3 {
        return Ok(Vec::new());
    }
    let radius = enclosing_radius(dist);

    let mut edges: Vec<(f64, u32, u32)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = dist[(i, j)];
            if d <= radius {
                edges.push((d, i as u32, j as u32));
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut edge_index = vec![u32::MAX; n * n];
    for (e, &(_, a, b)) in edges.iter().enumerate() {
        edge_index[a as usize * n + b as usize] = e as u32;
        edge_index[b as usize * n + a as usize] = e as u32;
    }

    let mut uf = UnionFind::new(n);
    let mut positive = vec![false; edges.len()];
    let mut forest: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, &(_, a, b)) in edges.iter().enumerate() {
        if uf.union(a as usize, b as usize) {
            forest[a as usize].push(b as usize);
            forest[b as usize].push(a as usize);
        } else {
            positive[e] = true;
        }
    }
    let total_positive = positive.iter().filter(|&&p| p).count();

    // Reduced columns keyed by their pivot edge.
    let mut reduced: BTreeMap<u32, (Vec<u32>, [usize; 3])> = BTreeMap::new();
    let mut pairs = Vec::new();
    'edges: for (e, &(value, a, b)) in edges.iter().enumerate() {
        if reduced.len() == total_positive {
            break;
        }
        // Triangles whose longest edge is `e`: third vertices joined to both ends by earlier edges.
        let (a, b) = (a as usize, b as usize);
        for c in 0..n {
            if c == a || c == b {
                continue;
            }
            let (ea, eb) = (edge_index[a * n + c], edge_index[b * n + c]);
            if ea == u32::MAX || eb == u32::MAX || ea as usize >= e || eb as usize >= e {
                continue;
            }
            let mut column = vec![ea, eb, e as u32];
            column.sort_unstable();
            let mut tri = [a, b, c];
            tri.sort_unstable();
            while let Some(&low) = column.last() {
                match reduced.get(&low) {
                    Some((other, _)) => column = add_columns(&column, other),
                    None => break,
                }
            }
            if let Some(&low) = column.last() {
                let (birth, ba, bb) = edges[low as usize];
                if options.include_zero_persistence || value > birth {
                    pairs.push(PersistencePair {
                        dimension: 1,
                        birth,
                        death: value,
                        birth_edge: (ba as usize, bb as usize),
                        death_triangle: Some(tri),
                        representative: column
                            .iter()
                            .map(|&x| (edges[x as usize].1 as usize, edges[x as usize].2 as usize))
                            .collect(),
                    });
                }
                reduced.insert(low, (column, tri));
                if reduced.len() == total_positive {
                    break 'edges;
                }
            }
        }
    }

    // Positive edges never killed below the enclosing radius would be essential.
    for (e, &(birth, a, b)) in edges.iter().enumerate() {
        if positive[e] && !reduced.contains_key(&(e as u32)) {
            let path = forest_path(&forest, a as usize, b as usize);
            let mut representative: Vec<(usize, usize)> =
                path.windows(2).map(|w| (w[0].min(w[1]), w[0].max(w[1]))).collect();
            representative.push((a as usize, b as usize));
            pairs.push(PersistencePair {
                dimension: 1,
                birth,
                death: f64::INFINITY,
                birth_edge: (a as usize, b as usize),
                death_triangle: None,
                representative,
            });
        }
    }
    Ok(pairs)
}

/// H0 deaths of the Rips filtration; pairs at infinite distance are never
/// joined. Returns `(finite deaths, number of essential classes)`.
pub fn rips_persistence_h0(dist: &DMatrix<f64>) -> (Vec<f64>, usize) {
    let n = dist.nrows();
    let mut edges: Vec<(f64, usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| dist[(i, j)].is_finite())
        .map(|(i, j)| (dist[(i, j)], i, j))
        .collect();
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut uf = UnionFind::new(n);
    let deaths: Vec<f64> = edges.iter().filter(|&&(_, a, b)| uf.union(a, b)).map(|e| e.0).collect();
    let essential = n - deaths.len();
    (deaths, essential)
}

/// Volume of a `dim`-ball of radius `r`, as `(volume, ln volume)`.
pub fn hypersphere_volume(dim: usize, r: f64) -> (f64, f64) {
    let d = dim as f64;
    let ln_v = 0.5 * d * std::f64::consts::PI.ln() - ln_gamma(0.5 * d + 1.0) + d * r.ln();
    (ln_v.exp(), ln_v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hole {
    pub rank: usize,
    pub birth: f64,
    pub death: f64,
    pub persistence: f64,
    /// Row indices of the representative cycle's vertices.
    pub vertices: Vec<usize>,
    pub center: Vec<f64>,
    pub size: usize,
    /// Median distance from the vertices to the center.
    pub radius: f64,
    /// Dimension used in the volume formula.
    pub dim: usize,
    pub volume: f64,
    pub log_volume: f64,
}

/// The `k_top` most persistent pairs (ties by birth, then birth edge) with
/// their geometry. `points` are indexed by the vertex ids used in `pairs`.
pub fn top_holes(pairs: &[PersistencePair], points: &[Vec<f64>], k_top: usize) -> Vec<Hole> {
    let mut ranked: Vec<&PersistencePair> = pairs.iter().collect();
    ranked.sort_by(|a, b| {
        b.persistence()
            .total_cmp(&a.persistence())
            .then(a.birth.total_cmp(&b.birth))
            .then(a.birth_edge.cmp(&b.birth_edge))
    });
    if ranked.len() < k_top {
        log::info!("requested {k_top} holes, only {} H1 pairs available", ranked.len());
    }
    ranked
        .into_iter()
        .take(k_top)
        .enumerate()
        .map(|(rank, pair)| {
            let vertices = pair.vertices();
            let dim = points.first().map_or(0, Vec::len);
            let mut center = vec![0.0; dim];
            for &v in &vertices {
                for (c, x) in center.iter_mut().zip(&points[v]) {
                    *c += x;
                }
            }
            center.iter_mut().for_each(|c| *c /= vertices.len() as f64);
            let radius = median(&vertices.iter().map(|&v| euclidean(&points[v], &center)).collect::<Vec<_>>());
            let (volume, log_volume) = hypersphere_volume(dim, radius);
            Hole {
                rank: rank + 1,
                birth: pair.birth,
                death: pair.death,
                persistence: pair.persistence(),
                size: vertices.len(),
                vertices,
                center,
                radius,
                dim,
                volume,
                log_volume,
            }
        })
        .collect()
}

/// Rows near a hole: for each hole vertex its `k_b` nearest neighbors among
/// all points, kept when within `alpha` times the median (over hole vertices)
/// of the distance to the `k_b`-th neighbor. Hole vertices are always included.
pub fn boundary_points(hole_vertices: &[usize], points: &[Vec<f64>], k_b: usize, alpha: f64) -> Vec<usize> {
    let mut out: BTreeSet<usize> = hole_vertices.iter().copied().collect();
    if k_b == 0 || points.len() < 2 {
        return out.into_iter().collect();
    }
    let k = k_b.min(points.len() - 1);
    let neighborhoods: Vec<Vec<(f64, usize)>> = hole_vertices
        .iter()
        .map(|&v| {
            crate::geometry::smallest_k(
                points.iter().enumerate().filter(|(j, _)| *j != v).map(|(j, p)| (euclidean(&points[v], p), j)),
                k,
            )
        })
        .collect();
    let kth: Vec<f64> = neighborhoods.iter().map(|nb| nb.last().map_or(0.0, |x| x.0)).collect();
    let cutoff = alpha * median(&kth);
    for nb in &neighborhoods {
        out.extend(nb.iter().filter(|(d, _)| *d <= cutoff).map(|&(_, j)| j));
    }
    out.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResistanceKind {
    Naive,
    Corrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoleConfig {
    pub graph_k: usize,
    pub eps_rel: f64,
    pub k_top: usize,
    pub boundary_k: usize,
    pub boundary_alpha: f64,
    pub distance: ResistanceKind,
    pub include_zero_persistence: bool,
    /// PCA dimension for the point space; `None` keeps the unit embeddings.
    pub reduce_to: Option<usize>,
    pub max_component_points: usize,
    pub seed: u64,
}

impl Default for HoleConfig {
    fn default() -> Self {
        Self {
            graph_k: DEFAULT_GRAPH_K,
            eps_rel: DEFAULT_EPS_REL,
            k_top: DEFAULT_TOP_HOLES,
            boundary_k: DEFAULT_BOUNDARY_K,
            boundary_alpha: DEFAULT_BOUNDARY_ALPHA,
            distance: ResistanceKind::Corrected,
            include_zero_persistence: false,
            reduce_to: None,
            max_component_points: MAX_COMPONENT_POINTS,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermCount {
    pub term: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoleEntry {
    pub rank: usize,
    pub component: usize,
    pub persistence: f64,
    pub birth: f64,
    pub death: f64,
    pub vertex_ids: Vec<String>,
    pub center: Vec<f64>,
    pub size: usize,
    pub radius: f64,
    pub dim: usize,
    pub volume: f64,
    pub log_volume: f64,
    pub boundary_ids: Vec<String>,
    pub term_frequencies: Vec<TermCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subsample {
    pub component: usize,
    pub original_size: usize,
    pub used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoleReport {
    pub config: HoleConfig,
    pub space: String,
    pub components: usize,
    pub subsampled: Vec<Subsample>,
    pub n_pairs: usize,
    pub holes: Vec<HoleEntry>,
}

/// Word counts over the label and body-region text of the given rows,
/// most frequent first.
pub fn term_frequencies(corpus: &Corpus, rows: &[usize]) -> Vec<TermCount> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for &r in rows {
        let rec = corpus.record(r);
        for text in [&rec.label, &rec.body_region].into_iter().flatten() {
            for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
                *counts.entry(word.to_lowercase()).or_default() += 1;
            }
        }
    }
    let mut out: Vec<TermCount> = counts.into_iter().map(|(term, count)| TermCount { term, count }).collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.term.cmp(&b.term)));
    out
}

/// Maps roundoff-level negatives to zero; larger negatives are an error.
fn clamp_roundoff(m: &mut DMatrix<f64>) -> Result<(), TopologyError> {
    let (n, _) = m.shape();
    for i in 0..n {
        for j in 0..n {
            let v = m[(i, j)];
            if v < 0.0 {
                if v < -ROUNDOFF_TOLERANCE {
                    return Err(TopologyError::InvalidEntry(i, j));
                }
                m[(i, j)] = 0.0;
            }
        }
    }
    Ok(())
}

/// Runs the full hole pipeline on the corpus embeddings.
pub fn hole_audit(corpus: &Corpus, config: &HoleConfig) -> Result<HoleReport, TopologyError> {
    let (points, space) = match config.reduce_to {
        Some(p) => {
            let p = p.min(corpus.len()).min(corpus.dim());
            (matrix_rows(&pca_reduce(&corpus.embeddings().to_dmatrix(), p)?.values), format!("pca-{p}"))
        }
        None => (
            corpus.embeddings().iter_rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect::<Vec<_>>(),
            "embedding".to_string(),
        ),
    };
    let graph = build_knn_graph(&points, config.graph_k)?;
    let resistance = ResistanceMatrix::compute(&graph, config.eps_rel)?;
    let dist = match config.distance {
        ResistanceKind::Naive => &resistance.naive,
        ResistanceKind::Corrected => &resistance.corrected,
    };

    let mut subsampled = Vec::new();
    let per_component: Vec<(usize, Vec<usize>)> = graph
        .components
        .iter()
        .enumerate()
        .filter(|(_, c)| c.len() >= 3)
        .map(|(ci, c)| {
            if c.len() > config.max_component_points {
                let mut rng = substream(config.seed, ci as u64);
                let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, c.len(), config.max_component_points)
                    .into_iter()
                    .map(|i| c[i])
                    .collect();
                picked.sort_unstable();
                subsampled.push(Subsample { component: ci, original_size: c.len(), used: picked.len() });
                (ci, picked)
            } else {
                (ci, c.clone())
            }
        })
        .collect();

    let options = RipsOptions { include_zero_persistence: config.include_zero_persistence };
    let results: Vec<Result<Vec<(usize, PersistencePair)>, TopologyError>> = per_component
        .par_iter()
        .map(|(ci, vertices)| {
            let mut sub = DMatrix::from_fn(vertices.len(), vertices.len(), |a, b| dist[(vertices[a], vertices[b])]);
            clamp_roundoff(&mut sub)?;
            let pairs = rips_persistence_h1(&sub, options)?;
            // Back to global row indices.
            Ok(pairs
                .into_iter()
                .map(|mut p| {
                    p.birth_edge = (vertices[p.birth_edge.0], vertices[p.birth_edge.1]);
                    p.death_triangle = p.death_triangle.map(|t| t.map(|v| vertices[v]));
                    p.representative = p.representative.iter().map(|&(a, b)| (vertices[a], vertices[b])).collect();
                    (*ci, p)
                })
                .collect())
        })
        .collect();
    let mut all: Vec<(usize, PersistencePair)> = Vec::new();
    for r in results {
        all.extend(r?);
    }
    let n_pairs = all.len();
    let pairs: Vec<PersistencePair> = all.iter().map(|(_, p)| p.clone()).collect();
    let holes = top_holes(&pairs, &points, config.k_top);
    let ids: Vec<&str> = corpus.records().iter().map(|r| r.id.as_str()).collect();
    let entries = holes
        .into_iter()
        .map(|h| {
            let boundary = boundary_points(&h.vertices, &points, config.boundary_k, config.boundary_alpha);
            HoleEntry {
                rank: h.rank,
                component: graph.component_of[h.vertices[0]],
                persistence: h.persistence,
                birth: h.birth,
                death: h.death,
                vertex_ids: h.vertices.iter().map(|&v| ids[v].to_string()).collect(),
                center: h.center,
                size: h.size,
                radius: h.radius,
                dim: h.dim,
                volume: h.volume,
                log_volume: h.log_volume,
                boundary_ids: boundary.iter().map(|&v| ids[v].to_string()).collect(),
                term_frequencies: term_frequencies(corpus, &boundary),
            }
        })
        .collect();
    Ok(HoleReport {
        config: config.clone(),
        space,
        components: graph.components.len(),
        subsampled,
        n_pairs,
        holes: entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resistance(n: usize, edges: &[(usize, usize)]) -> (KnnGraph, DMatrix<f64>) {
        let g = KnnGraph::from_edges(n, edges);
        let r = effective_resistance(&g, &laplacian_pseudoinverse(&g, DEFAULT_EPS_REL));
        (g, r)
    }

    #[test]
    fn collinear_points_middle_vertex_degree_two() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![2.5, 0.0]];
        let g = build_knn_graph(&pts, 1).unwrap();
        assert_eq!(g.degree(1), 2);
        assert_eq!(g.components.len(), 1);
    }

    #[test]
    fn full_k_gives_complete_graph() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let g = build_knn_graph(&pts, 4).unwrap();
        assert_eq!(g.edges().len(), 10);
        assert_eq!(g.components.len(), 1);
        assert!(matches!(build_knn_graph(&pts, 5), Err(TopologyError::KOutOfRange { .. })));
    }

    #[test]
    fn far_clusters_split() {
        let mut pts: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64 * 0.1, 0.0]).collect();
        pts.extend((0..4).map(|i| vec![100.0 + i as f64 * 0.1, 0.0]));
        let g = build_knn_graph(&pts, 2).unwrap();
        assert_eq!(g.components.len(), 2);
    }

    #[test]
    fn single_edge_pseudoinverse() {
        let g = KnnGraph::from_edges(2, &[(0, 1)]);
        let p = &laplacian_pseudoinverse(&g, DEFAULT_EPS_REL)[0].pinv;
        let expect = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert!((p - expect).abs().max() < 1e-12);
    }

    #[test]
    fn resistor_networks() {
        let (_, r) = resistance(2, &[(0, 1)]);
        assert!((r[(0, 1)] - 1.0).abs() < 1e-10);
        let (_, r) = resistance(3, &[(0, 1), (1, 2), (0, 2)]);
        assert!((r[(0, 2)] - 2.0 / 3.0).abs() < 1e-10);
        let (_, r) = resistance(3, &[(0, 1), (1, 2)]);
        assert!((r[(0, 2)] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn disconnected_pairs_are_infinite() {
        let (g, r) = resistance(4, &[(0, 1), (2, 3)]);
        assert_eq!(g.components, vec![vec![0, 1], vec![2, 3]]);
        assert!(r[(0, 2)].is_infinite());
        assert!((r[(2, 3)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn corrected_plug_in_values() {
        let (g, r) = resistance(2, &[(0, 1)]);
        assert!((corrected_resistance(&r, &g).unwrap()[(0, 1)] - 1.0).abs() < 1e-10);
        let (g, r) = resistance(3, &[(0, 1), (1, 2), (0, 2)]);
        assert!((corrected_resistance(&r, &g).unwrap()[(0, 1)] - 1.0 / 6.0).abs() < 1e-10);
        let (g, r) = resistance(4, &[(0, 1), (1, 2), (2, 3)]);
        assert!((corrected_resistance(&r, &g).unwrap()[(0, 3)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn corrected_rejects_isolated_vertex() {
        let (g, r) = resistance(3, &[(0, 1)]);
        assert!(matches!(corrected_resistance(&r, &g), Err(TopologyError::ZeroDegree(2))));
    }

    fn euclid_matrix(pts: &[[f64; 2]]) -> DMatrix<f64> {
        DMatrix::from_fn(pts.len(), pts.len(), |i, j| {
            ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt()
        })
    }

    #[test]
    fn unit_square_has_one_loop() {
        let d = euclid_matrix(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
        let pairs = rips_persistence_h1(&d, RipsOptions::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].birth, 1.0);
        assert!((pairs[0].death - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(pairs[0].vertices(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn triangle_has_no_persistent_loop() {
        let d = euclid_matrix(&[[0.0, 0.0], [1.0, 0.0], [0.4, 0.9]]);
        assert!(rips_persistence_h1(&d, RipsOptions::default()).unwrap().is_empty());
        // The loop closes at the longest edge, which also fills the triangle.
        let zero = rips_persistence_h1(&d, RipsOptions { include_zero_persistence: true }).unwrap();
        assert!(zero.iter().all(|p| p.persistence() == 0.0));
    }

    #[test]
    fn rips_rejects_bad_input() {
        let mut d = DMatrix::from_element(3, 3, 1.0);
        d.fill_diagonal(0.0);
        d[(0, 1)] = 2.0;
        assert!(matches!(rips_persistence_h1(&d, RipsOptions::default()), Err(TopologyError::NotSymmetric(0, 1))));
        d[(1, 0)] = -2.0;
        d[(0, 1)] = -2.0;
        assert!(matches!(rips_persistence_h1(&d, RipsOptions::default()), Err(TopologyError::InvalidEntry(0, 1))));
    }

    #[test]
    fn hypersphere_volumes() {
        assert!((hypersphere_volume(2, 1.0).0 - std::f64::consts::PI).abs() < 1e-12);
        assert!((hypersphere_volume(3, 1.0).0 - 4.0 * std::f64::consts::PI / 3.0).abs() < 1e-12);
        assert!(hypersphere_volume(1024, 0.5).1.is_finite());
    }

    #[test]
    fn boundary_of_isolated_cluster_is_its_vertices() {
        let mut pts: Vec<Vec<f64>> = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![0.0, 0.1]];
        pts.extend((0..5).map(|i| vec![100.0 * (i + 1) as f64, 0.0]));
        assert_eq!(boundary_points(&[0, 1, 2], &pts, 1, 1.5), vec![0, 1, 2]);
        assert_eq!(boundary_points(&[0, 1, 2], &pts, 3, f64::INFINITY), vec![0, 1, 2, 3]);
    }

    #[test]
    fn h0_essential_classes_match_components() {
        let (g, r) = resistance(5, &[(0, 1), (2, 3), (3, 4)]);
        let (_, essential) = rips_persistence_h0(&r);
        assert_eq!(essential, g.components.len());
    }
}
