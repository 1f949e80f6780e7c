//! Synthetic Gaussian clusters drawn from low-dimensional embedding
//! subspaces, and random sharding across sub-sites.
//!
//! One cluster in ambient dimension `M'` from a `D`-dimensional subspace:
//!
//! 1. `T ∈ R^{M'×D}` with standard normal entries, scaled to `‖T‖_F = 1`.
//! 2. Shift `u` uniform in `[−20/ln M', 20/ln M']` per component.
//! 3. Each sample is `T z + u + e`, `z ~ N(0, I_D)`, `e ~ N(0, I_{M'}/(10 M'))`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Shard};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub ambient_dim: usize,
    pub embed_dim: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ambient_dim < 2 {
            return Err(Error::InvalidClusterSpec(format!(
                "ambient dimension must be >= 2, got {}",
                self.ambient_dim
            )));
        }
        if self.embed_dim == 0 || self.embed_dim > self.ambient_dim {
            return Err(Error::InvalidClusterSpec(format!(
                "embedding dimension {} not in [1, {}]",
                self.embed_dim, self.ambient_dim
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidClusterSpec(
                "cluster needs at least one sample".into(),
            ));
        }
        Ok(())
    }

    /// Half-width of the shift range, `20 / ln M'`.
    pub fn shift_bound(&self) -> f64 {
        20.0 / (self.ambient_dim as f64).ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub clusters: Vec<ClusterSpec>,
    pub seed: u64,
}

impl DatasetSpec {
    /// `n_clusters` clusters of `samples_per_cluster` points each, all from
    /// `embed_dim`-dimensional subspaces; cluster seeds derived from `seed`.
    pub fn uniform(
        n_clusters: usize,
        ambient_dim: usize,
        embed_dim: usize,
        samples_per_cluster: usize,
        seed: u64,
    ) -> Self {
        let clusters = (0..n_clusters)
            .map(|c| ClusterSpec {
                ambient_dim,
                embed_dim,
                n_samples: samples_per_cluster,
                seed: derive_seed(seed, c as u64),
            })
            .collect();
        Self { clusters, seed }
    }

    /// Layout of the synthetic benchmark family: ambient dimension
    /// `2^log2_dim`, embedding dimensions `2^1 … 2^log2_dim`, and
    /// `clusters_per_dim` clusters for each embedding dimension.
    pub fn subspace_family(
        log2_dim: u32,
        clusters_per_dim: usize,
        samples_per_cluster: usize,
        seed: u64,
    ) -> Self {
        let ambient_dim = 1usize << log2_dim;
        let mut clusters = Vec::new();
        for e in 1..=log2_dim {
            for _ in 0..clusters_per_dim {
                let id = clusters.len() as u64;
                clusters.push(ClusterSpec {
                    ambient_dim,
                    embed_dim: 1 << e,
                    n_samples: samples_per_cluster,
                    seed: derive_seed(seed, id),
                });
            }
        }
        Self { clusters, seed }
    }

    pub fn n_samples(&self) -> usize {
        self.clusters.iter().map(|c| c.n_samples).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .clusters
            .first()
            .ok_or_else(|| Error::InvalidClusterSpec("no clusters".into()))?;
        for c in &self.clusters {
            c.validate()?;
            if c.ambient_dim != first.ambient_dim {
                return Err(Error::InvalidClusterSpec(format!(
                    "mixed ambient dimensions {} and {}",
                    first.ambient_dim, c.ambient_dim
                )));
            }
        }
        Ok(())
    }
}

/// SplitMix64 step; used to derive independent child seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generated cluster together with its projection and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCluster {
    pub samples: Vec<Vec<f64>>,
    /// Row-major `M' × D` projection.
    pub projection: Vec<f64>,
    pub shift: Vec<f64>,
}

pub fn gen_cluster_detailed(spec: &ClusterSpec) -> Result<GeneratedCluster> {
    spec.validate()?;
    let m = spec.ambient_dim;
    let d = spec.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut projection: Vec<f64> = (0..m * d).map(|_| rng.sample(StandardNormal)).collect();
    let frob = projection.iter().map(|v| v * v).sum::<f64>().sqrt();
    projection.iter_mut().for_each(|v| *v /= frob);

    let bound = spec.shift_bound();
    let shift_dist = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
    let shift: Vec<f64> = (0..m).map(|_| shift_dist.sample(&mut rng)).collect();

    let noise_std = (1.0 / (10.0 * m as f64)).sqrt();
    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut z = vec![0.0; d];
    for _ in 0..spec.n_samples {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let row = (0..m)
            .map(|i| {
                let tz: f64 = projection[i * d..(i + 1) * d]
                    .iter()
                    .zip(&z)
                    .map(|(t, zk)| t * zk)
                    .sum();
                let e: f64 = rng.sample::<f64, _>(StandardNormal) * noise_std;
                tz + shift[i] + e
            })
            .collect();
        samples.push(row);
    }
    Ok(GeneratedCluster {
        samples,
        projection,
        shift,
    })
}

pub fn gen_cluster(spec: &ClusterSpec) -> Result<Vec<Vec<f64>>> {
    Ok(gen_cluster_detailed(spec)?.samples)
}

/// Concatenates all clusters; the truth label is the cluster index.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut features = Vec::with_capacity(spec.n_samples());
    let mut labels = Vec::with_capacity(spec.n_samples());
    for (label, cluster) in spec.clusters.iter().enumerate() {
        let rows = gen_cluster(cluster)?;
        labels.extend(std::iter::repeat_n(label, rows.len()));
        features.extend(rows);
    }
    Dataset::new(features, labels)
}

/// Randomly splits a dataset into `sites` disjoint shards of at least
/// `min_per_site` samples each. Each shard is normalized locally and gets its
/// own sampling seed.
pub fn shard_dataset(
    dataset: &Dataset,
    sites: usize,
    min_per_site: usize,
    seed: u64,
) -> Result<Vec<Shard>> {
    let n = dataset.len();
    let min = min_per_site.max(1);
    if sites == 0 || n < sites * min {
        return Err(Error::InfeasibleShard {
            samples: n,
            sites,
            min_per_site,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); sites];
    for (pos, &idx) in order.iter().enumerate() {
        let site = if pos < sites * min {
            pos / min
        } else {
            rng.random_range(0..sites)
        };
        assignment[site].push(idx);
    }

    assignment
        .into_iter()
        .enumerate()
        .map(|(site, mut idx)| {
            idx.sort_unstable();
            let raw = idx.iter().map(|&i| dataset.features[i].clone()).collect();
            let labels = idx.iter().map(|&i| dataset.labels[i]).collect();
            Shard::from_rows(
                site,
                idx,
                raw,
                labels,
                derive_seed(seed, 1_000 + site as u64),
            )
        })
        .collect()
}
