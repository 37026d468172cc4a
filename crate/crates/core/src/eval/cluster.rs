use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One agglomeration step. Clusters are named by their smallest member index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub merges: Vec<Merge>,
    /// Cluster index per input point, numbered by first appearance.
    pub labels: Vec<usize>,
}

/// `1 - cos` for every pair; zero vectors are at distance 1 from everything.
pub fn cosine_distance_matrix(vectors: &[&[f32]]) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = vectors
        .iter()
        .map(|v| v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt())
        .collect();
    let n = vectors.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dot: f64 = vectors[i].iter().zip(vectors[j]).map(|(&a, &b)| a as f64 * b as f64).sum();
            let denom = norms[i] * norms[j];
            let cos = if denom == 0.0 { 0.0 } else { dot / denom };
            d[i][j] = 1.0 - cos;
            d[j][i] = d[i][j];
        }
    }
    d
}

/// Complete-linkage agglomeration on a precomputed distance matrix, stopped
/// at `n_clusters`. Among equally distant candidate pairs the one with the
/// smallest `(left, right)` wins.
pub fn complete_linkage(dist: &[Vec<f64>], n_clusters: usize) -> Result<Dendrogram> {
    let n = dist.len();
    if n_clusters == 0 || n < n_clusters {
        return Err(Error::Validation(format!(
            "cannot form {n_clusters} clusters from {n} points"
        )));
    }
    let mut d: Vec<Vec<f64>> = dist.to_vec();
    let mut active: Vec<bool> = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n - n_clusters);
    for _ in 0..(n - n_clusters) {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in (0..n).filter(|&i| active[i]) {
            for j in ((i + 1)..n).filter(|&j| active[j]) {
                if best.is_none_or(|(_, _, b)| d[i][j] < b) {
                    best = Some((i, j, d[i][j]));
                }
            }
        }
        let (i, j, dij) = best.expect("at least two active clusters");
        for k in 0..n {
            if active[k] && k != i && k != j {
                let m = d[i][k].max(d[j][k]);
                d[i][k] = m;
                d[k][i] = m;
            }
        }
        active[j] = false;
        for o in owner.iter_mut().filter(|o| **o == j) {
            *o = i;
        }
        merges.push(Merge { left: i, right: j, distance: dij });
    }
    let mut next = 0;
    let mut relabel = vec![usize::MAX; n];
    let labels = owner
        .iter()
        .map(|&o| {
            if relabel[o] == usize::MAX {
                relabel[o] = next;
                next += 1;
            }
            relabel[o]
        })
        .collect();
    Ok(Dendrogram { merges, labels })
}

/// Clusters vectors under cosine distance with complete linkage.
pub fn agglomerative_cluster(vectors: &[&[f32]], n_clusters: usize) -> Result<Dendrogram> {
    complete_linkage(&cosine_distance_matrix(vectors), n_clusters)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_equals_k_gives_singletons() {
        let v: Vec<Vec<f32>> = (0..5).map(|i| vec![1.0, i as f32]).collect();
        let refs: Vec<&[f32]> = v.iter().map(Vec::as_slice).collect();
        let d = agglomerative_cluster(&refs, 5).unwrap();
        assert!(d.merges.is_empty());
        assert_eq!(d.labels, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn duplicates_merge_first() {
        let mut v: Vec<Vec<f32>> = (0..20)
            .map(|i| {
                let a = i as f32 * 0.3;
                vec![a.cos(), a.sin(), (i % 3) as f32]
            })
            .collect();
        v.push(v[7].clone());
        let refs: Vec<&[f32]> = v.iter().map(Vec::as_slice).collect();
        let d = agglomerative_cluster(&refs, 20).unwrap();
        assert_eq!((d.merges[0].left, d.merges[0].right), (7, 20));
        assert_eq!(d.labels[7], d.labels[20]);
    }

    #[test]
    fn too_few_points() {
        assert!(agglomerative_cluster(&[&[1.0f32][..]], 2).is_err());
    }
}
