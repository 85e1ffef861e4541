//! Interaction datasets: MovieLens ingestion, preprocessing, leave-one-out
//! splits and a synthetic attribute-correlated generator.

mod movielens;
mod preprocess;
mod synth;

pub use movielens::{parse_movielens, parse_users, MovieLensFormat, ParsedRatings, RawUser};
pub use preprocess::{balance_gender, discretize_age, filter_kcore, leave_one_out_split};
pub use synth::{synth_generate, SynthConfig};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One implicit positive `x_ui = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAttribute {
    pub user: u32,
    pub gender: u8,
    pub age_bucket: u8,
}

/// Which protected attribute the adversary and the attacker target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    #[default]
    Gender,
    Age,
}

impl AttributeKind {
    pub fn n_classes(self) -> usize {
        match self {
            AttributeKind::Gender => 2,
            AttributeKind::Age => 3,
        }
    }

    pub fn label(self, attr: &UserAttribute) -> usize {
        match self {
            AttributeKind::Gender => attr.gender as usize,
            AttributeKind::Age => attr.age_bucket as usize,
        }
    }
}

/// Users, items, training interactions, attributes and (after
/// [`leave_one_out_split`]) one held-out test item per user.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub users: BTreeSet<u32>,
    pub items: BTreeSet<u32>,
    pub interactions: Vec<Interaction>,
    pub attributes: BTreeMap<u32, UserAttribute>,
    pub test_holdout: BTreeMap<u32, u32>,
}

impl Dataset {
    /// Builds a dataset from interactions and attributes, keeping only users
    /// that have an attribute record. Interactions are sorted canonically.
    pub fn from_parts(
        interactions: Vec<Interaction>,
        attributes: BTreeMap<u32, UserAttribute>,
    ) -> Result<Self> {
        let mut interactions: Vec<Interaction> = interactions
            .into_iter()
            .filter(|it| attributes.contains_key(&it.user))
            .collect();
        interactions.sort();
        let users: BTreeSet<u32> = interactions.iter().map(|it| it.user).collect();
        if users.is_empty() {
            return Err(Error::Domain("no user has both interactions and attributes".into()));
        }
        let items = interactions.iter().map(|it| it.item).collect();
        let attributes = attributes
            .into_iter()
            .filter(|(u, _)| users.contains(u))
            .collect();
        Ok(Dataset {
            users,
            items,
            interactions,
            attributes,
            test_holdout: BTreeMap::new(),
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Per-user count of training interactions.
    pub fn user_degrees(&self) -> BTreeMap<u32, usize> {
        let mut deg = BTreeMap::new();
        for it in &self.interactions {
            *deg.entry(it.user).or_insert(0) += 1;
        }
        deg
    }

    pub fn gender_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for a in self.attributes.values() {
            c[a.gender as usize & 1] += 1;
        }
        c
    }

    pub fn to_snapshot(&self) -> DatasetSnapshot {
        DatasetSnapshot {
            users: self.users.iter().copied().collect(),
            items: self.items.iter().copied().collect(),
            train: self
                .interactions
                .iter()
                .map(|it| (it.user, it.item, it.timestamp))
                .collect(),
            test: self.test_holdout.clone(),
            attrs: self
                .attributes
                .iter()
                .map(|(&u, a)| {
                    (
                        u,
                        AttrSnapshot {
                            gender: a.gender,
                            age: a.age_bucket,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_snapshot(s: DatasetSnapshot) -> Result<Self> {
        let ds = Dataset {
            users: s.users.into_iter().collect(),
            items: s.items.into_iter().collect(),
            interactions: s
                .train
                .into_iter()
                .map(|(user, item, timestamp)| Interaction {
                    user,
                    item,
                    timestamp,
                })
                .collect(),
            attributes: s
                .attrs
                .into_iter()
                .map(|(user, a)| {
                    (
                        user,
                        UserAttribute {
                            user,
                            gender: a.gender,
                            age_bucket: a.age,
                        },
                    )
                })
                .collect(),
            test_holdout: s.test,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks the referential invariants of the dataset.
    pub fn validate(&self) -> Result<()> {
        for it in &self.interactions {
            if !self.users.contains(&it.user) || !self.items.contains(&it.item) {
                return Err(Error::State(format!(
                    "interaction ({}, {}) references an unknown id",
                    it.user, it.item
                )));
            }
        }
        let deg = self.user_degrees();
        for (&u, &i) in &self.test_holdout {
            if !self.items.contains(&i) {
                return Err(Error::State(format!("test item {i} of user {u} unknown")));
            }
            if deg.get(&u).copied().unwrap_or(0) == 0 {
                return Err(Error::State(format!("user {u} has no training data")));
            }
        }
        for u in &self.users {
            if !self.attributes.contains_key(u) {
                return Err(Error::State(format!("user {u} has no attributes")));
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_snapshot())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_snapshot(serde_json::from_str(&text)?)
    }

    /// Dense 0-based re-indexing used by the training loop.
    pub fn index(&self, attribute: AttributeKind) -> IndexedDataset {
        let user_ids: Vec<u32> = self.users.iter().copied().collect();
        let item_ids: Vec<u32> = self.items.iter().copied().collect();
        let user_pos: BTreeMap<u32, usize> =
            user_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let item_pos: BTreeMap<u32, usize> =
            item_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let mut train = vec![Vec::new(); user_ids.len()];
        for it in &self.interactions {
            train[user_pos[&it.user]].push(item_pos[&it.item]);
        }
        for items in &mut train {
            items.sort_unstable();
            items.dedup();
        }
        let test = user_ids
            .iter()
            .map(|u| self.test_holdout.get(u).map(|i| item_pos[i]))
            .collect();
        let labels = user_ids
            .iter()
            .map(|u| attribute.label(&self.attributes[u]))
            .collect();
        IndexedDataset {
            user_ids,
            item_ids,
            train,
            test,
            labels,
            n_classes: attribute.n_classes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrSnapshot {
    pub gender: u8,
    pub age: u8,
}

/// Canonical JSON form of a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSnapshot {
    pub users: Vec<u32>,
    pub items: Vec<u32>,
    pub train: Vec<(u32, u32, i64)>,
    pub test: BTreeMap<u32, u32>,
    pub attrs: BTreeMap<u32, AttrSnapshot>,
}

/// A dataset with users and items mapped to `0..n`.
#[derive(Debug, Clone)]
pub struct IndexedDataset {
    pub user_ids: Vec<u32>,
    pub item_ids: Vec<u32>,
    /// Sorted, deduplicated training item indices per user.
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Option<usize>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl IndexedDataset {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }
}
