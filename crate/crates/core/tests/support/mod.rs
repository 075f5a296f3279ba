//! Fixtures and brute-force oracles shared by the integration tests. Nothing
//! here calls into the library code it checks.
#![allow(dead_code)]

use std::collections::BTreeMap;

use atlas_core::corpus::{Corpus, EmbeddingMatrix, MetadataRecord};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn rec(id: &str, dataset: &str) -> MetadataRecord {
    MetadataRecord { id: id.into(), dataset: dataset.into(), ..Default::default() }
}

/// Corpus from raw rows; rows are unit-normalized on the way in.
pub fn corpus(rows: &[Vec<f64>], records: Vec<MetadataRecord>) -> Corpus {
    let f32_rows: Vec<Vec<f32>> = rows.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
    let m = EmbeddingMatrix::from_rows(&f32_rows).unwrap();
    Corpus::prepare(&m, records).unwrap().0
}

pub fn unit_f64(v: &[f32]) -> Vec<f64> {
    let w: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    w.into_iter().map(|x| x / n).collect()
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (1.0 - dot / (nu * nv)).clamp(0.0, 2.0)
}

pub fn euclid(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

pub fn distance_matrix(points: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), points.len(), |i, j| if i == j { 0.0 } else { euclid(&points[i], &points[j]) })
}

// ---------- graphs ----------

/// Edge list of the undirected graph encoded by `mask` over all vertex pairs.
pub fn graph_from_mask(n: usize, mask: u64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    let mut bit = 0;
    for i in 0..n {
        for j in i + 1..n {
            if mask >> bit & 1 == 1 {
                edges.push((i, j));
            }
            bit += 1;
        }
    }
    edges
}

pub fn components(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut label: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for &(a, b) in edges {
            let m = label[a].min(label[b]);
            if label[a] != m || label[b] != m {
                label[a] = m;
                label[b] = m;
                changed = true;
            }
        }
        if !changed {
            return label;
        }
    }
}

pub fn is_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    components(n, edges).iter().all(|&c| c == 0)
}

/// All connected graphs on `n` labelled vertices.
pub fn all_connected_graphs(n: usize) -> Vec<Vec<(usize, usize)>> {
    let pairs = n * (n - 1) / 2;
    (0..1u64 << pairs).map(|m| graph_from_mask(n, m)).filter(|e| is_connected(n, e)).collect()
}

/// Random connected graph: a random spanning tree plus each other pair with probability `p`.
pub fn random_connected_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for v in 1..n {
        edges.push((rng.random_range(0..v), v));
    }
    for i in 0..n {
        for j in i + 1..n {
            if !edges.contains(&(i, j)) && rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    edges
}

pub fn adjacency(n: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    for &(i, j) in edges {
        if i != j {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
    }
    a
}

/// Resistance via `(L + J/m)^-1 - J/m` on each component, which equals the
/// pseudoinverse there; infinite across components.
pub fn resistance_oracle(n: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let a = adjacency(n, edges);
    let label = components(n, edges);
    let mut r = DMatrix::from_element(n, n, f64::INFINITY);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for v in 0..n {
        groups.entry(label[v]).or_default().push(v);
    }
    for verts in groups.values() {
        let m = verts.len();
        let mut l = DMatrix::from_fn(m, m, |i, j| -a[(verts[i], verts[j])]);
        for i in 0..m {
            l[(i, i)] = verts.iter().map(|&w| a[(verts[i], w)]).sum();
        }
        let j = DMatrix::from_element(m, m, 1.0 / m as f64);
        let p = (l + &j).try_inverse().unwrap() - j;
        for (x, &u) in verts.iter().enumerate() {
            for (y, &v) in verts.iter().enumerate() {
                r[(u, v)] = p[(x, x)] + p[(y, y)] - 2.0 * p[(x, y)];
            }
        }
    }
    r
}

/// Degree correction written out term by term, including the self-loop terms.
pub fn corrected_oracle(r: &DMatrix<f64>, n: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let a = adjacency(n, edges);
    let d: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else if r[(i, j)].is_infinite() {
            f64::INFINITY
        } else {
            r[(i, j)] - 1.0 / d[i] - 1.0 / d[j] + 2.0 * a[(i, j)] / (d[i] * d[j])
                - a[(i, i)] / (d[i] * d[i])
                - a[(j, j)] / (d[j] * d[j])
        }
    })
}

// ---------- persistence ----------

/// H1 pairs `(birth, death)` with positive persistence, from a plain
/// reduction of the full boundary matrix over all simplices of dimension
/// at most 2, ordered by (value, dimension, vertices).
pub fn naive_h1(dist: &DMatrix<f64>) -> Vec<(f64, f64)> {
    let n = dist.nrows();
    let mut simplices: Vec<(f64, usize, Vec<usize>)> = Vec::new();
    for i in 0..n {
        simplices.push((0.0, 0, vec![i]));
        for j in i + 1..n {
            simplices.push((dist[(i, j)], 1, vec![i, j]));
            for k in j + 1..n {
                let v = dist[(i, j)].max(dist[(i, k)]).max(dist[(j, k)]);
                simplices.push((v, 2, vec![i, j, k]));
            }
        }
    }
    simplices.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let index: BTreeMap<Vec<usize>, usize> = simplices.iter().enumerate().map(|(i, s)| (s.2.clone(), i)).collect();
    let m = simplices.len();
    let words = m.div_ceil(64);
    let mut columns: Vec<Vec<u64>> = simplices
        .iter()
        .map(|(_, dim, v)| {
            let mut col = vec![0u64; words];
            if *dim > 0 {
                for skip in 0..v.len() {
                    let face: Vec<usize> = v.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, &x)| x).collect();
                    let f = index[&face];
                    col[f / 64] ^= 1 << (f % 64);
                }
            }
            col
        })
        .collect();
    let low = |col: &[u64]| -> Option<usize> {
        col.iter().enumerate().rev().find(|(_, &w)| w != 0).map(|(i, &w)| i * 64 + 63 - w.leading_zeros() as usize)
    };
    let mut owner: Vec<Option<usize>> = vec![None; m];
    let mut pairs = Vec::new();
    for j in 0..m {
        while let Some(l) = low(&columns[j]) {
            match owner[l] {
                Some(o) => {
                    let other = columns[o].clone();
                    for (w, x) in columns[j].iter_mut().zip(other) {
                        *w ^= x;
                    }
                }
                None => {
                    owner[l] = Some(j);
                    if simplices[l].1 == 1 && simplices[j].0 > simplices[l].0 {
                        pairs.push((simplices[l].0, simplices[j].0));
                    }
                    break;
                }
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pairs
}

/// `n` points on a circle of radius `r` in the plane, angles jittered.
pub fn circle(n: usize, r: f64, jitter: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut g = rng(seed);
    (0..n)
        .map(|i| {
            let t = std::f64::consts::TAU * (i as f64 + jitter * g.random_range(-0.5..0.5)) / n as f64;
            vec![r * t.cos(), r * t.sin()]
        })
        .collect()
}

pub fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut g = rng(seed);
    (0..n).map(|_| (0..d).map(|_| g.random_range(0.0..1.0)).collect()).collect()
}

// ---------- corpora ----------

/// Pool of `n_pool` year-`y0` samples and `n_new` year-`y0 + 1` samples, all
/// drawn i.i.d. from one isotropic Gaussian.
pub fn null_years(n_pool: usize, n_new: usize, d: usize, seed: u64) -> Corpus {
    let mut g = rng(seed);
    let rows: Vec<Vec<f64>> = (0..n_pool + n_new).map(|_| gaussian(&mut g, d)).collect();
    let records = (0..n_pool + n_new)
        .map(|i| MetadataRecord {
            year: Some(if i < n_pool { 2001 } else { 2002 }),
            ..rec(&format!("s{i:05}"), "null")
        })
        .collect();
    corpus(&rows, records)
}

/// Dense pool around one direction plus a new year concentrated around a far direction.
pub fn far_cluster_years(seed: u64) -> Corpus {
    let mut g = rng(seed);
    let d = 8;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for i in 0..300 {
        let mut v = gaussian(&mut g, d).into_iter().map(|x| 0.15 * x).collect::<Vec<_>>();
        v[0] += 1.0;
        rows.push(v);
        records.push(MetadataRecord { year: Some(2010), ..rec(&format!("p{i:04}"), "old") });
    }
    for i in 0..40 {
        let mut v = gaussian(&mut g, d).into_iter().map(|x| 0.15 * x).collect::<Vec<_>>();
        v[1] += 1.0;
        rows.push(v);
        records.push(MetadataRecord { year: Some(2011), ..rec(&format!("n{i:04}"), "new") });
    }
    corpus(&rows, records)
}

/// Mean over new samples of the `k` smallest cosine distances to the pool,
/// from a full distance matrix.
pub fn novelty_oracle(c: &Corpus, year: i32, k: usize) -> f64 {
    // The stored rows are the unit vectors; distances are 1 - <u, v> on them.
    let rows: Vec<Vec<f64>> = (0..c.len()).map(|i| c.vector(i).iter().map(|&x| x as f64).collect()).collect();
    let new: Vec<usize> = (0..c.len()).filter(|&i| c.record(i).year == Some(year)).collect();
    let pool: Vec<usize> = (0..c.len()).filter(|&i| c.record(i).year.is_some_and(|y| y < year)).collect();
    let full = DMatrix::from_fn(rows.len(), rows.len(), |i, j| {
        (1.0 - rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>()).clamp(0.0, 2.0)
    });
    let total: f64 = new
        .iter()
        .map(|&q| {
            let mut d: Vec<f64> = pool.iter().map(|&p| full[(q, p)]).collect();
            d.sort_by(f64::total_cmp);
            d[..k].iter().sum::<f64>() / k as f64
        })
        .sum();
    total / new.len() as f64
}

// ---------- probes ----------

/// Class centroids in `d` dimensions and samples around them; the class
/// is the planted truth.
pub fn planted_classes(n: usize, d: usize, classes: usize, spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut g = rng(seed);
    let centroids: Vec<Vec<f64>> = (0..classes).map(|_| gaussian(&mut g, d)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let rows = labels
        .iter()
        .map(|&c| {
            centroids[c]
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut g);
                    m + spread * z
                })
                .collect()
        })
        .collect();
    (rows, labels)
}

/// Ridge with unpenalized bias solved on the augmented normal equations.
pub fn ridge_oracle(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Vec<f64> {
    let (n, d) = x.shape();
    let xa = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[(i, j)] } else { 1.0 });
    let mut lhs = xa.transpose() * &xa;
    for j in 0..d {
        lhs[(j, j)] += lambda;
    }
    let rhs = xa.transpose() * nalgebra::DVector::from_column_slice(y);
    lhs.lu().solve(&rhs).unwrap().iter().copied().collect()
}

/// Penalized softmax objective written independently: `w[c][j]` with the
/// bias in the last slot of each class.
pub fn softmax_loss(x: &[Vec<f64>], y: &[usize], w: &[Vec<f64>], lambda: f64) -> f64 {
    let d = x[0].len();
    let mut total = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let z: Vec<f64> = w.iter().map(|wc| wc[d] + xi.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>()).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        total += m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[yi];
    }
    total + 0.5 * lambda * w.iter().map(|wc| wc[..d].iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
}

/// Minimizes `softmax_loss` by gradient descent with backtracking.
pub fn softmax_gd(x: &[Vec<f64>], y: &[usize], classes: usize, lambda: f64, iters: usize) -> f64 {
    let d = x[0].len();
    let mut w = vec![vec![0.0; d + 1]; classes];
    let mut step = 1.0;
    let mut f = softmax_loss(x, y, &w, lambda);
    for _ in 0..iters {
        let mut grad = vec![vec![0.0; d + 1]; classes];
        for (xi, &yi) in x.iter().zip(y) {
            let z: Vec<f64> = w.iter().map(|wc| wc[d] + xi.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>()).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            for c in 0..classes {
                let p = (z[c] - m).exp() / s - if c == yi { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[c][j] += p * xi[j];
                }
                grad[c][d] += p;
            }
        }
        for c in 0..classes {
            for j in 0..d {
                grad[c][j] += lambda * w[c][j];
            }
        }
        loop {
            let trial: Vec<Vec<f64>> =
                w.iter().zip(&grad).map(|(wc, gc)| wc.iter().zip(gc).map(|(a, b)| a - step * b).collect()).collect();
            let ft = softmax_loss(x, y, &trial, lambda);
            if ft <= f || step < 1e-12 {
                w = trial;
                f = ft;
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
    }
    f
}
