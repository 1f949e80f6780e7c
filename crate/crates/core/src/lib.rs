//! Hashing-based distributed clustering.
//!
//! Sub-sites jointly train a small hash network by gradient averaging at a
//! global site, convert their local data to binary codes with degrees, and
//! the global site clusters the resulting code graph with a normalized cut.
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`hashnet`] | fully-connected hash network, codes, parameter encoding |
//! | [`pairloss`] | distance-driven pairwise loss and its gradient |
//! | [`sampler`] | diverse batch selection from code buckets |
//! | [`fedtrain`] | broadcast / local gradient / average rounds |
//! | [`codebook`] | codes with degrees, merging, code traffic |
//! | [`spectral`] | code graph, normalized cut, spectral clustering |
//! | [`metrics`] | purity, NMI, cost ledger |
//! | [`datagen`] | synthetic subspace clusters and sharding |
//! | [`wire`] | TCP framing and the session protocol |

pub mod codebook;
pub mod data;
pub mod datagen;
pub mod error;
pub mod fedtrain;
pub mod hashnet;
pub mod kmeans;
pub mod metrics;
pub mod pairloss;
pub mod sampler;
pub mod spectral;
pub mod wire;

pub use error::{Error, Result};
