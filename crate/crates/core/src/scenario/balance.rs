use rand::seq::index::sample;

use super::{Maneuver, ScenarioSample};
use crate::error::{Error, Result};

/// Subsamples every maneuver class down to the size of the smallest one.
/// Survivors keep their original relative order.
pub fn balance_dataset(samples: Vec<ScenarioSample>, seed: u64) -> Result<Vec<ScenarioSample>> {
    let mut by_class: [Vec<usize>; 3] = Default::default();
    for (i, s) in samples.iter().enumerate() {
        by_class[s.maneuver.index()].push(i);
    }
    for m in Maneuver::ALL {
        if by_class[m.index()].is_empty() {
            return Err(Error::Balance {
                class: m.name().to_string(),
            });
        }
    }
    let n = by_class.iter().map(Vec::len).min().unwrap();
    let mut rng = crate::rng::seeded(seed, "balance");
    let mut keep = vec![false; samples.len()];
    for members in &by_class {
        for j in sample(&mut rng, members.len(), n) {
            keep[members[j]] = true;
        }
    }
    Ok(samples
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect())
}
