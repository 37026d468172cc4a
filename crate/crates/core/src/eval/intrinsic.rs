use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::cluster::agglomerative_cluster;
use crate::bank::{cosine, EmbeddingBank};
use crate::corpus::MeaningGroups;
use crate::error::{Error, Result};

fn entropy<K: Eq + Hash>(labels: impl Iterator<Item = K>) -> f64 {
    let mut counts: HashMap<K, usize> = HashMap::new();
    let mut n = 0usize;
    for l in labels {
        *counts.entry(l).or_default() += 1;
        n += 1;
    }
    let n = n as f64;
    let mut counts: Vec<usize> = counts.into_values().collect();
    counts.sort_unstable();
    counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `1 - H(C|K) / H(C)` with natural logs; 1.0 when there is a single class.
pub fn homogeneity_score<C: Eq + Hash + Clone, K: Eq + Hash + Clone>(classes: &[C], clusters: &[K]) -> Result<f64> {
    if classes.len() != clusters.len() {
        return Err(Error::Validation(format!(
            "{} gold labels for {} cluster labels",
            classes.len(),
            clusters.len()
        )));
    }
    if classes.is_empty() {
        return Err(Error::Validation("homogeneity of an empty assignment".into()));
    }
    let h_c = entropy(classes.iter().cloned());
    if h_c == 0.0 {
        return Ok(1.0);
    }
    let n = classes.len() as f64;
    let mut by_cluster: HashMap<K, Vec<C>> = HashMap::new();
    for (c, k) in classes.iter().zip(clusters) {
        by_cluster.entry(k.clone()).or_default().push(c.clone());
    }
    // Summed in a fixed order so the result does not depend on hashing.
    let mut terms: Vec<f64> = by_cluster
        .values()
        .map(|members| members.len() as f64 / n * entropy(members.iter().cloned()))
        .collect();
    terms.sort_by(f64::total_cmp);
    let h_c_given_k: f64 = terms.iter().sum();
    Ok(1.0 - h_c_given_k / h_c)
}

/// Mean `1 - cos` over unordered pairs of bank idioms from different groups.
pub fn mean_intergroup_distance(bank: &EmbeddingBank, groups: &MeaningGroups) -> Result<f64> {
    let members: Vec<(&str, usize)> = bank
        .ids()
        .filter_map(|id| groups.group_of(id).map(|g| (id, g)))
        .collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, (ia, ga)) in members.iter().enumerate() {
        for (ib, gb) in &members[a + 1..] {
            if ga != gb {
                sum += 1.0 - cosine(bank.vector(ia).unwrap(), bank.vector(ib).unwrap());
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Validation("inter-group distance needs idioms from two groups".into()));
    }
    Ok(sum / n as f64)
}

/// `100 (x - lower) / (upper - lower)`.
pub fn normalize_score(x: f64, lower: f64, upper: f64) -> Result<f64> {
    if upper == lower {
        return Err(Error::Validation(format!("normalization bounds coincide at {lower}")));
    }
    // Adding 0.0 turns -0.0 into 0.0 when the anchors are inverted.
    Ok(100.0 * (x - lower) / (upper - lower) + 0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAtK {
    pub k: usize,
    pub mean: f64,
    pub per_idiom: BTreeMap<String, f64>,
    pub per_group: BTreeMap<String, f64>,
}

/// For each grouped idiom, the share of its `k` nearest grouped neighbours
/// (cosine, self excluded, ties by idiom id) that are in its own group.
pub fn precision_at_k(bank: &EmbeddingBank, groups: &MeaningGroups, k: usize) -> Result<PrecisionAtK> {
    let ids: Vec<&str> = bank.ids().filter(|id| groups.group_of(id).is_some()).collect();
    if k == 0 || k >= ids.len() {
        return Err(Error::Validation(format!(
            "k = {k} must be in [1, {}) for the grouped idioms in the bank",
            ids.len()
        )));
    }
    let restricted = bank.restrict(ids.iter().copied());
    let mut per_idiom = BTreeMap::new();
    let mut group_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for id in &ids {
        let own = groups.group_of(id);
        let hits = crate::bank::nearest_idioms(&restricted, id, k)?
            .iter()
            .filter(|(n, _)| groups.group_of(n) == own)
            .count();
        let score = hits as f64 / k as f64;
        per_idiom.insert(id.to_string(), score);
        let g = groups.group_id_of(id).expect("grouped").to_string();
        let e = group_sums.entry(g).or_default();
        e.0 += score;
        e.1 += 1;
    }
    let mean = per_idiom.values().sum::<f64>() / per_idiom.len() as f64;
    let per_group = group_sums.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect();
    Ok(PrecisionAtK { k, mean, per_idiom, per_group })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicReport {
    pub n_idioms: usize,
    pub n_groups: usize,
    pub n_clusters: usize,
    pub homogeneity: f64,
    pub mean_intergroup_distance: f64,
    pub normalized_homogeneity: Option<f64>,
    pub normalized_distance: Option<f64>,
    pub p_at_k: PrecisionAtK,
    /// Cluster index per evaluated idiom.
    pub assignment: BTreeMap<String, usize>,
}

/// Anchor scores for normalization: the untrained backbone (lower) and the
/// definition bank (upper).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub homogeneity: (f64, f64),
    pub distance: (f64, f64),
}

impl IntrinsicReport {
    pub fn normalize(&mut self, anchors: &Anchors) -> Result<()> {
        self.normalized_homogeneity =
            Some(normalize_score(self.homogeneity, anchors.homogeneity.0, anchors.homogeneity.1)?);
        self.normalized_distance =
            Some(normalize_score(self.mean_intergroup_distance, anchors.distance.0, anchors.distance.1)?);
        Ok(())
    }
}

/// Clusters the bank's grouped idioms and scores the result against the groups.
pub fn evaluate_intrinsic(
    bank: &EmbeddingBank,
    groups: &MeaningGroups,
    n_clusters: usize,
    k: usize,
) -> Result<IntrinsicReport> {
    let ids: Vec<&str> = bank.ids().filter(|id| groups.group_of(id).is_some()).collect();
    let vectors: Vec<&[f32]> = ids.iter().map(|id| bank.vector(id).unwrap()).collect();
    let dendro = agglomerative_cluster(&vectors, n_clusters)?;
    let gold: Vec<usize> = ids.iter().map(|id| groups.group_of(id).unwrap()).collect();
    let homogeneity = homogeneity_score(&gold, &dendro.labels)?;
    let n_groups = gold.iter().collect::<std::collections::BTreeSet<_>>().len();
    Ok(IntrinsicReport {
        n_idioms: ids.len(),
        n_groups,
        n_clusters,
        homogeneity,
        mean_intergroup_distance: mean_intergroup_distance(bank, groups)?,
        normalized_homogeneity: None,
        normalized_distance: None,
        p_at_k: precision_at_k(bank, groups, k)?,
        assignment: ids.iter().map(|s| s.to_string()).zip(dendro.labels).collect(),
    })
}
