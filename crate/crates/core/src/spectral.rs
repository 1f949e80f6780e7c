//! Code graph construction and normalized-cut spectral clustering.
//!
//! Vertices are the distinct codes of the global codebook. Two codes at
//! Hamming distance `h ≥ 1` with degrees `d_i`, `d_j` are joined by an edge
//! of weight `d_i·d_j / h`.
//!
//! The cut objective evaluated by [`ncut_value`] divides each part's
//! boundary weight by its number of vertices. The spectral relaxation uses
//! the usual symmetric normalized Laplacian `I − D^{-1/2} W D^{-1/2}` with
//! weighted vertex degrees.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::hashnet::HashCode;
use crate::kmeans::{kmeans, KMeansConfig};

/// Largest code length the dense eigensolver accepts.
pub const MAX_CODE_LEN: usize = 16;

/// Vertex limit of [`brute_force_ncut`].
pub const ORACLE_MAX_VERTICES: usize = 12;

pub fn hamming(a: &HashCode, b: &HashCode) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.bits()
        .iter()
        .zip(b.bits())
        .filter(|(x, y)| x != y)
        .count())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeGraph {
    pub adjacency: DMatrix<f64>,
    /// Codes behind the vertices; absent for graphs built from a raw matrix.
    pub codebook: Option<Codebook>,
}

impl CodeGraph {
    /// Wraps a symmetric, nonnegative adjacency matrix with zero diagonal.
    pub fn from_adjacency(adjacency: DMatrix<f64>) -> Result<Self> {
        let n = adjacency.nrows();
        if adjacency.ncols() != n {
            return Err(Error::Shape(format!(
                "adjacency is {n} x {}",
                adjacency.ncols()
            )));
        }
        for i in 0..n {
            if adjacency[(i, i)] != 0.0 {
                return Err(Error::Shape(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let w = adjacency[(i, j)];
                if !(w >= 0.0 && w.is_finite()) || w != adjacency[(j, i)] {
                    return Err(Error::Shape(format!("invalid weight at ({i}, {j})")));
                }
            }
        }
        Ok(Self {
            adjacency,
            codebook: None,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.adjacency.nrows()
    }

    /// Weighted degree of every vertex.
    pub fn degrees(&self) -> Vec<f64> {
        self.adjacency.row_iter().map(|r| r.sum()).collect()
    }
}

/// Dense weighted graph over the codes of `book`.
pub fn build_graph(book: &Codebook) -> Result<CodeGraph> {
    if book.is_empty() {
        return Err(Error::InvalidCodebook("no entries".into()));
    }
    let n = book.len();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let h = hamming(&book.entries[i].code, &book.entries[j].code)?;
            if h == 0 {
                return Err(Error::InvalidCodebook("duplicate code".into()));
            }
            let weight =
                (book.entries[i].degree as f64) * (book.entries[j].degree as f64) / h as f64;
            w[(i, j)] = weight;
            w[(j, i)] = weight;
        }
    }
    Ok(CodeGraph {
        adjacency: w,
        codebook: Some(book.clone()),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl Partition {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            if l >= k {
                return Err(Error::InvalidPartition(format!(
                    "label {l} outside [0, {k})"
                )));
            }
            sizes[l] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidPartition(format!("cluster {empty} is empty")));
        }
        Ok(Self { labels, k })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        self.labels.iter().for_each(|&l| sizes[l] += 1);
        sizes
    }

    /// Relabels clusters in order of first appearance.
    pub fn canonical(&self) -> Self {
        let mut map = vec![usize::MAX; self.k];
        let mut next = 0;
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                if map[l] == usize::MAX {
                    map[l] = next;
                    next += 1;
                }
                map[l]
            })
            .collect();
        Self { labels, k: self.k }
    }
}

/// `½ Σ_i W(G_i, Ḡ_i) / |G_i|`.
pub fn ncut_value(graph: &CodeGraph, partition: &Partition) -> Result<f64> {
    let n = graph.n_vertices();
    if partition.labels.len() != n {
        return Err(Error::LengthMismatch(partition.labels.len(), n));
    }
    let sizes = Partition::new(partition.labels.clone(), partition.k)?.sizes();
    Ok(ncut_unchecked(&graph.adjacency, &partition.labels, &sizes))
}

fn ncut_unchecked(w: &DMatrix<f64>, labels: &[usize], sizes: &[usize]) -> f64 {
    let n = labels.len();
    let mut cut = vec![0.0; sizes.len()];
    for i in 0..n {
        for j in 0..n {
            if labels[i] != labels[j] {
                cut[labels[i]] += w[(i, j)];
            }
        }
    }
    0.5 * cut
        .iter()
        .zip(sizes)
        .map(|(c, &s)| c / s as f64)
        .sum::<f64>()
}

/// Exhaustive minimizer of [`ncut_value`] over all partitions into exactly
/// `k` nonempty parts. Among minimizers the lexicographically smallest label
/// vector is returned.
pub fn brute_force_ncut(graph: &CodeGraph, k: usize) -> Result<Partition> {
    let n = graph.n_vertices();
    if n > ORACLE_MAX_VERTICES {
        return Err(Error::OracleSize {
            max: ORACLE_MAX_VERTICES,
            got: n,
        });
    }
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, vertices: n });
    }
    // Restricted growth strings enumerate each set partition once, in
    // lexicographic order, as its smallest labeling.
    struct Search<'a> {
        w: &'a DMatrix<f64>,
        k: usize,
        labels: Vec<usize>,
        sizes: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }
    impl Search<'_> {
        fn visit(&mut self, pos: usize, used: usize) {
            let n = self.labels.len();
            if pos == n {
                if used == self.k {
                    let v = ncut_unchecked(self.w, &self.labels, &self.sizes);
                    let better = match &self.best {
                        None => true,
                        Some((b, _)) => v < *b - 1e-12 * (1.0 + b.abs()),
                    };
                    if better {
                        self.best = Some((v, self.labels.clone()));
                    }
                }
                return;
            }
            let top = (used + 1).min(self.k);
            for label in 0..top {
                let new_used = used.max(label + 1);
                if self.k - new_used > n - pos - 1 {
                    continue;
                }
                self.labels[pos] = label;
                self.sizes[label] += 1;
                self.visit(pos + 1, new_used);
                self.sizes[label] -= 1;
            }
        }
    }
    let mut search = Search {
        w: &graph.adjacency,
        k,
        labels: vec![0; n],
        sizes: vec![0; k],
        best: None,
    };
    search.visit(0, 0);
    let (_, labels) = search.best.expect("k <= n admits a partition");
    Partition::new(labels, k)
}

/// Eigendecomposition of the normalized Laplacian of the non-isolated
/// vertices, eigenvalues ascending. Each column of `vectors` is a unit
/// eigenvector.
#[derive(Debug, Clone)]
pub struct LaplacianSpectrum {
    /// Vertex ids (into the graph) the rows of `laplacian` refer to.
    pub vertices: Vec<usize>,
    pub laplacian: DMatrix<f64>,
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn normalized_laplacian(graph: &CodeGraph) -> (Vec<usize>, DMatrix<f64>) {
    let degrees = graph.degrees();
    let active: Vec<usize> = (0..graph.n_vertices())
        .filter(|&i| degrees[i] > 0.0)
        .collect();
    let inv_sqrt: Vec<f64> = active.iter().map(|&i| 1.0 / degrees[i].sqrt()).collect();
    let m = active.len();
    let lap = DMatrix::from_fn(m, m, |a, b| {
        let off = graph.adjacency[(active[a], active[b])] * inv_sqrt[a] * inv_sqrt[b];
        if a == b {
            1.0 - off
        } else {
            -off
        }
    });
    (active, lap)
}

pub fn laplacian_spectrum(graph: &CodeGraph) -> LaplacianSpectrum {
    let (vertices, laplacian) = normalized_laplacian(graph);
    let eig = SymmetricEigen::new(laplacian.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .total_cmp(&eig.eigenvalues[b])
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(laplacian.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    LaplacianSpectrum {
        vertices,
        laplacian,
        values,
        vectors,
    }
}

/// Normalized-cut spectral clustering of the code graph into `k` parts.
///
/// Rows of the `k` lowest Laplacian eigenvectors are scaled to unit length
/// and grouped with seeded k-means (k-means++ seeding, 10 restarts, 300
/// iterations). Isolated vertices go to cluster 0. Labels are canonical
/// (first appearance order).
pub fn spectral_cluster(graph: &CodeGraph, k: usize, seed: u64) -> Result<Partition> {
    let n = graph.n_vertices();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, vertices: n });
    }
    if let Some(book) = &graph.codebook {
        if book.code_len > MAX_CODE_LEN {
            return Err(Error::UnsupportedSize(format!(
                "code length {} exceeds the dense solver limit of {MAX_CODE_LEN}",
                book.code_len
            )));
        }
    }
    if k == n {
        return Partition::new((0..n).collect(), k);
    }
    if k == 1 {
        return Partition::new(vec![0; n], 1);
    }
    let spectrum = laplacian_spectrum(graph);
    if spectrum.vertices.len() < k {
        return Err(Error::InvalidK {
            k,
            vertices: spectrum.vertices.len(),
        });
    }
    let embedding: Vec<Vec<f64>> = (0..spectrum.vertices.len())
        .map(|r| {
            let row: Vec<f64> = (0..k).map(|c| spectrum.vectors[(r, c)]).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.into_iter().map(|v| v / norm).collect()
            } else {
                row
            }
        })
        .collect();
    let fit = kmeans(&embedding, k, seed, &KMeansConfig::default())?;
    let mut labels = vec![0usize; n];
    for (row, &v) in spectrum.vertices.iter().enumerate() {
        labels[v] = fit.labels[row];
    }
    Ok(Partition::new(labels, k)?.canonical())
}

/// Per-site, per-sample cluster labels: every sample takes the cluster of
/// its code in the global codebook.
pub fn propagate_labels(
    partition: &Partition,
    global: &Codebook,
    sites: &[(Codebook, Vec<usize>)],
) -> Result<Vec<Vec<usize>>> {
    if partition.labels.len() != global.len() {
        return Err(Error::LengthMismatch(partition.labels.len(), global.len()));
    }
    sites
        .iter()
        .map(|(book, assignment)| {
            let site_to_cluster = book
                .entries
                .iter()
                .map(|e| {
                    global
                        .position(&e.code)
                        .map(|g| partition.labels[g])
                        .ok_or_else(|| {
                            Error::InconsistentState(
                                "site code missing from global codebook".into(),
                            )
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            assignment
                .iter()
                .map(|&entry| {
                    site_to_cluster.get(entry).copied().ok_or_else(|| {
                        Error::InconsistentState(format!("sample maps to unknown entry {entry}"))
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{CodeEntry, Origin};

    fn code(bits: &[i8]) -> HashCode {
        HashCode::from_bits(bits.to_vec()).unwrap()
    }

    fn graph(n: usize, edges: &[(usize, usize, f64)]) -> CodeGraph {
        let mut w = DMatrix::zeros(n, n);
        for &(i, j, v) in edges {
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
        CodeGraph::from_adjacency(w).unwrap()
    }

    #[test]
    fn hamming_cases() {
        let a = code(&[1, -1, 1, 1]);
        assert_eq!(hamming(&a, &a).unwrap(), 0);
        assert_eq!(hamming(&a, &a.antipode()).unwrap(), 4);
        assert_eq!(hamming(&a, &code(&[1, 1, 1, -1])).unwrap(), 2);
        assert!(hamming(&a, &code(&[1])).is_err());
    }

    #[test]
    fn graph_weights() {
        let c = code(&[1, 1, -1, 1]);
        let book = Codebook::new(
            4,
            vec![
                CodeEntry {
                    code: c.clone(),
                    degree: 3,
                },
                CodeEntry {
                    code: c.antipode(),
                    degree: 5,
                },
            ],
            Origin::Global,
        )
        .unwrap();
        let g = build_graph(&book).unwrap();
        assert_eq!(g.adjacency[(0, 1)], 3.75);
        assert_eq!(g.adjacency[(1, 0)], 3.75);
        assert_eq!(g.adjacency[(0, 0)], 0.0);

        let single =
            Codebook::new(4, vec![CodeEntry { code: c, degree: 2 }], Origin::Global).unwrap();
        let g1 = build_graph(&single).unwrap();
        assert_eq!(g1.adjacency, DMatrix::zeros(1, 1));
    }

    #[test]
    fn graph_scales_quadratically_in_degree() {
        let entries: Vec<CodeEntry> = [[1, 1, 1], [1, -1, 1], [-1, -1, -1]]
            .iter()
            .zip([2u64, 3, 7])
            .map(|(b, d)| CodeEntry {
                code: code(b),
                degree: d,
            })
            .collect();
        let scaled: Vec<CodeEntry> = entries
            .iter()
            .map(|e| CodeEntry {
                code: e.code.clone(),
                degree: e.degree * 4,
            })
            .collect();
        let g = build_graph(&Codebook::new(3, entries, Origin::Global).unwrap()).unwrap();
        let gs = build_graph(&Codebook::new(3, scaled, Origin::Global).unwrap()).unwrap();
        assert_eq!(gs.adjacency, g.adjacency * 16.0);
    }

    #[test]
    fn ncut_hand_cases() {
        let path = graph(3, &[(0, 1, 1.0), (1, 2, 1.0)]);
        let p = Partition::new(vec![0, 1, 1], 2).unwrap();
        assert!((ncut_value(&path, &p).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(
            ncut_value(&path, &Partition::new(vec![0, 0, 0], 1).unwrap()).unwrap(),
            0.0
        );
        let split = graph(4, &[(0, 1, 2.0), (2, 3, 5.0)]);
        assert_eq!(
            ncut_value(&split, &Partition::new(vec![0, 0, 1, 1], 2).unwrap()).unwrap(),
            0.0
        );
        assert!(Partition::new(vec![0, 0, 2], 3).is_err());
        assert!(Partition::new(vec![0, 3], 2).is_err());
    }

    #[test]
    fn oracle_cases() {
        // two triangles joined by a weak edge
        let g = graph(
            6,
            &[
                (0, 1, 5.0),
                (1, 2, 5.0),
                (0, 2, 5.0),
                (3, 4, 5.0),
                (4, 5, 5.0),
                (3, 5, 5.0),
                (2, 3, 0.1),
            ],
        );
        assert_eq!(
            brute_force_ncut(&g, 2).unwrap().labels,
            vec![0, 0, 0, 1, 1, 1]
        );

        // complete graph on 4 vertices: 2+2 costs ½(4/2 + 4/2) = 2 and 1+3
        // costs ½(3/1 + 3/3) = 2, a tie; the canonical minimizer is returned
        let mut edges = Vec::new();
        for i in 0..4 {
            for j in (i + 1)..4 {
                edges.push((i, j, 1.0));
            }
        }
        let k4 = graph(4, &edges);
        let best = brute_force_ncut(&k4, 2).unwrap();
        assert_eq!(best.labels, vec![0, 0, 0, 1]);
        assert_eq!(ncut_value(&k4, &best).unwrap(), 2.0);
        let balanced = Partition::new(vec![0, 0, 1, 1], 2).unwrap();
        assert_eq!(ncut_value(&k4, &balanced).unwrap(), 2.0);

        let disconnected = graph(5, &[(0, 1, 1.0), (2, 3, 1.0), (3, 4, 1.0)]);
        let p = brute_force_ncut(&disconnected, 2).unwrap();
        assert_eq!(p.labels, vec![0, 0, 1, 1, 1]);
        assert_eq!(ncut_value(&disconnected, &p).unwrap(), 0.0);

        let big = CodeGraph::from_adjacency(DMatrix::zeros(13, 13)).unwrap();
        assert!(matches!(
            brute_force_ncut(&big, 2),
            Err(Error::OracleSize { .. })
        ));
    }

    #[test]
    fn spectral_recovers_components() {
        let g = graph(
            7,
            &[
                (0, 1, 1.0),
                (1, 2, 3.0),
                (3, 4, 2.0),
                (5, 6, 0.5),
                (4, 3, 2.0),
            ],
        );
        let p = spectral_cluster(&g, 3, 1).unwrap();
        assert_eq!(p.labels, vec![0, 0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn spectral_edge_cases() {
        let g = graph(3, &[(0, 1, 1.0), (1, 2, 1.0)]);
        assert_eq!(spectral_cluster(&g, 3, 0).unwrap().labels, vec![0, 1, 2]);
        assert_eq!(spectral_cluster(&g, 1, 0).unwrap().labels, vec![0, 0, 0]);
        assert!(matches!(
            spectral_cluster(&g, 4, 0),
            Err(Error::InvalidK { .. })
        ));
        let single = CodeGraph::from_adjacency(DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(spectral_cluster(&single, 1, 0).unwrap().labels, vec![0]);
    }

    #[test]
    fn spectrum_is_sane() {
        let g = graph(
            5,
            &[
                (0, 1, 1.0),
                (1, 2, 2.0),
                (2, 3, 0.5),
                (3, 4, 4.0),
                (0, 4, 1.5),
                (1, 3, 0.2),
            ],
        );
        let s = laplacian_spectrum(&g);
        for (c, &lambda) in s.values.iter().enumerate() {
            assert!((-1e-12..=2.0 + 1e-12).contains(&lambda));
            let v = s.vectors.column(c).into_owned();
            let residual = (&s.laplacian * &v - &v * lambda).norm();
            assert!(residual <= 1e-8 * v.norm());
        }
        assert!(s.values[0].abs() < 1e-12);
    }

    #[test]
    fn propagation() {
        let book = Codebook::new(
            2,
            vec![
                CodeEntry {
                    code: code(&[1, 1]),
                    degree: 2,
                },
                CodeEntry {
                    code: code(&[-1, -1]),
                    degree: 1,
                },
            ],
            Origin::Site(0),
        )
        .unwrap();
        let global = book.clone();
        let p = Partition::new(vec![0, 1], 2).unwrap();
        let labels = propagate_labels(&p, &global, &[(book.clone(), vec![1, 0, 1])]).unwrap();
        assert_eq!(labels, vec![vec![1, 0, 1]]);
        let other = Codebook::new(
            2,
            vec![CodeEntry {
                code: code(&[1, -1]),
                degree: 1,
            }],
            Origin::Site(1),
        )
        .unwrap();
        assert!(matches!(
            propagate_labels(&p, &global, &[(other, vec![0])]),
            Err(Error::InconsistentState(_))
        ));
    }
}
