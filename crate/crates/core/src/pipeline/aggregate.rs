use rand::seq::SliceRandom;

use crate::rng;
use crate::toydata::SplitDataset;
use crate::{Error, Real, Result};

/// Draw `n_total` samples with equal quotas per source (remainder to the
/// earlier sources), each quota a seeded subsample, then shuffle the union.
/// Items keep their source tags and metadata.
pub fn aggregate_samples<F: Real>(
    sources: &[&SplitDataset<F>],
    n_total: usize,
    seed: u64,
) -> Result<SplitDataset<F>> {
    if sources.is_empty() {
        return Err(Error::Contract(
            "aggregate_samples needs at least one source".into(),
        ));
    }
    let dims = sources[0].image_dims().map(|d| d.to_vec());
    let k = sources.len();
    let mut items = Vec::with_capacity(n_total);
    for (i, src) in sources.iter().enumerate() {
        let quota = n_total / k + usize::from(i < n_total % k);
        if src.len() < quota {
            return Err(Error::Contract(format!(
                "source {i} (`{}`) has {} samples, quota is {quota}",
                src.name,
                src.len()
            )));
        }
        if quota > 0 && src.image_dims().map(|d| d.to_vec()) != dims {
            return Err(Error::shape(format!(
                "source {i} image dims differ from source 0"
            )));
        }
        let mut idx: Vec<usize> = (0..src.len()).collect();
        idx.shuffle(&mut rng::rng(rng::derive_path(seed, "source", i as u64)));
        items.extend(idx[..quota].iter().map(|&j| src.items[j].clone()));
    }
    items.shuffle(&mut rng::rng(rng::derive(seed, "shuffle")));
    Ok(SplitDataset {
        name: "aggregate".into(),
        seed,
        items,
    })
}
