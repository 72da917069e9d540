use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

/// Groups example indices into batches of equal caption length.
///
/// Indices are shuffled within each length bucket and cut into chunks of
/// `batch_size` (the last chunk of a bucket may be short); the batch order
/// is then shuffled so lengths are visited at random. Every index appears
/// exactly once.
pub fn bucket_batches<R: Rng + ?Sized>(lengths: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &len) in lengths.iter().enumerate() {
        buckets.entry(len).or_default().push(i);
    }
    let mut batches = Vec::new();
    for mut members in buckets.into_values() {
        members.shuffle(rng);
        batches.extend(members.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}
