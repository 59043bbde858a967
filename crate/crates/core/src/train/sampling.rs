use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Keeps exactly `m` examples of every class, chosen by a seeded shuffle.
/// The result preserves the original relative order.
pub fn subsample_per_class(ds: &Dataset, m: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(m * ds.num_classes);
    for (class, mut idx) in ds.class_indices().into_iter().enumerate() {
        if idx.len() < m {
            return Err(Error::InvalidArgument(format!("class {class} has {} examples, {m} requested", idx.len())));
        }
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..m]);
    }
    keep.sort_unstable();
    ds.subset(&keep)
}
