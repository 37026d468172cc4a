use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Picks indices of items to hold out, spread across strata (idioms).
///
/// About `fraction` of all items are held out. Every stratum keeps at least
/// one item, and strata are visited round-robin in a seeded order so the
/// held-out set covers as many different strata as possible.
pub fn stratified_holdout(strata: &[&str], fraction: f64, seed: u64) -> BTreeSet<usize> {
    let n = strata.len();
    let wanted = if n < 2 || fraction <= 0.0 {
        0
    } else {
        ((n as f64 * fraction).round() as usize).max(1)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in strata.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    let mut order: Vec<Vec<usize>> = groups.into_values().collect();
    for g in &mut order {
        g.shuffle(&mut rng);
    }
    order.shuffle(&mut rng);
    let mut held = BTreeSet::new();
    let max_rank = order.iter().map(Vec::len).max().unwrap_or(0);
    'outer: for rank in 1..max_rank {
        for g in &order {
            if held.len() >= wanted {
                break 'outer;
            }
            if let Some(&i) = g.get(rank) {
                held.insert(i);
            }
        }
    }
    held
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_one_per_stratum_and_spreads() {
        let strata: Vec<&str> = ["a", "a", "a", "b", "b", "c"].into();
        let held = stratified_holdout(&strata, 0.34, 3);
        assert_eq!(held.len(), 2);
        let ids: BTreeSet<&str> = held.iter().map(|&i| strata[i]).collect();
        assert_eq!(ids.len(), 2, "spread over two idioms");
        assert!(!ids.contains("c"));
    }

    #[test]
    fn zero_fraction_holds_nothing() {
        assert!(stratified_holdout(&["a", "a"], 0.0, 1).is_empty());
    }
}
