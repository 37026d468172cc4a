use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeaningGroup {
    pub group_id: String,
    pub name: String,
    pub idiom_ids: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GroupsFile {
    groups: Vec<MeaningGroup>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeaningGroups {
    pub groups: Vec<MeaningGroup>,
    membership: HashMap<String, usize>,
}

impl MeaningGroups {
    /// Checks that no idiom belongs to two groups and builds the membership
    /// index.
    pub fn new(groups: Vec<MeaningGroup>) -> Result<Self> {
        let mut membership = HashMap::new();
        let mut seen_groups = std::collections::HashSet::new();
        for (gi, g) in groups.iter().enumerate() {
            if !seen_groups.insert(g.group_id.clone()) {
                return Err(Error::Validation(format!("duplicate group id {}", g.group_id)));
            }
            for id in &g.idiom_ids {
                if let Some(prev) = membership.insert(id.clone(), gi) {
                    return Err(Error::Validation(format!(
                        "idiom {id} belongs to both {} and {}",
                        groups[prev].group_id, g.group_id
                    )));
                }
            }
        }
        Ok(Self { groups, membership })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: GroupsFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::new(file.groups)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GroupsFile {
            groups: self.groups.clone(),
        })
        .expect("groups serialize")
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn idiom_count(&self) -> usize {
        self.membership.len()
    }

    pub fn mean_group_size(&self) -> f64 {
        if self.groups.is_empty() {
            return 0.0;
        }
        self.idiom_count() as f64 / self.groups.len() as f64
    }

    /// Group index of an idiom.
    pub fn group_of(&self, idiom_id: &str) -> Option<usize> {
        self.membership.get(idiom_id).copied()
    }

    pub fn group_id_of(&self, idiom_id: &str) -> Option<&str> {
        self.group_of(idiom_id)
            .map(|g| self.groups[g].group_id.as_str())
    }

    /// Idiom id → group id, ordered by idiom id.
    pub fn labels(&self) -> BTreeMap<String, String> {
        self.membership
            .iter()
            .map(|(id, &g)| (id.clone(), self.groups[g].group_id.clone()))
            .collect()
    }

    /// Groups with fewer than `min_members` idioms.
    pub fn undersized(&self, min_members: usize) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.idiom_ids.len() < min_members)
            .map(|g| g.group_id.as_str())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(id: &str, ids: &[&str]) -> MeaningGroup {
        MeaningGroup {
            group_id: id.into(),
            name: id.into(),
            idiom_ids: ids.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn duplicate_membership_is_rejected() {
        let err = MeaningGroups::new(vec![g("a", &["x", "y"]), g("b", &["y", "z"])]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn membership_and_mean_size() {
        let groups = MeaningGroups::new(vec![g("a", &["x", "y"]), g("b", &["z"])]).unwrap();
        assert_eq!(groups.group_id_of("z"), Some("b"));
        assert_eq!(groups.idiom_count(), 3);
        assert!((groups.mean_group_size() - 1.5).abs() < 1e-12);
        assert_eq!(groups.undersized(2), vec!["b"]);
    }
}
