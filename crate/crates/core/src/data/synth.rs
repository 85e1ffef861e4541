use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Interaction, UserAttribute};
use crate::error::{Error, Result};
use crate::numkernel::RngStream;

/// Knobs of the synthetic generator.
///
/// Items are split into two gender-affinity halves and three age-affinity
/// groups, and carry a popularity weight and a taste cluster. Each user
/// takes `round(share · n)` of their interactions from the half aligned with
/// their gender, where `share = 0.5 + (max_aligned_share − 0.5) · signal`.
/// Within a half, items are drawn without replacement with weight
/// `popularity × taste boost × age boost`; the age boost is
/// `1 + age_boost · signal` for the user's age group and 1 otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub signal: f64,
    pub min_interactions: usize,
    pub max_interactions: usize,
    pub max_aligned_share: f64,
    pub taste_clusters: usize,
    pub taste_boost: f64,
    pub age_boost: f64,
    pub popularity_exponent: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 200,
            n_items: 300,
            signal: 1.0,
            min_interactions: 15,
            max_interactions: 40,
            max_aligned_share: 0.7,
            taste_clusters: 4,
            taste_boost: 30.0,
            age_boost: 2.0,
            popularity_exponent: 0.7,
        }
    }
}

/// Generates with the default knobs and the given sizes and signal; the
/// per-user interaction range shrinks to fit small catalogues.
pub fn synth_generate(
    n_users: usize,
    n_items: usize,
    signal: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    let defaults = SynthConfig::default();
    let max_interactions = defaults.max_interactions.min(n_items / 2);
    SynthConfig {
        n_users,
        n_items,
        signal,
        max_interactions,
        min_interactions: defaults.min_interactions.min(max_interactions),
        ..defaults
    }
    .generate(rng)
}

fn weighted_pick(rng: &mut RngStream, pool: &[usize], weights: &[f64]) -> usize {
    let total: f64 = pool.iter().map(|&i| weights[i]).sum();
    let mut target = rng.random::<f64>() * total;
    for (pos, &i) in pool.iter().enumerate() {
        target -= weights[i];
        if target <= 0.0 {
            return pos;
        }
    }
    pool.len() - 1
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users < 10 || self.n_items < 10 {
            return Err(Error::Domain(format!(
                "synthetic data needs >= 10 users and items, got {}x{}",
                self.n_users, self.n_items
            )));
        }
        if !(0.0..=1.0).contains(&self.signal) {
            return Err(Error::Domain(format!("signal {} outside [0, 1]", self.signal)));
        }
        if !(0.5..=1.0).contains(&self.max_aligned_share) {
            return Err(Error::Domain("max_aligned_share must lie in [0.5, 1]".into()));
        }
        if self.min_interactions < 2
            || self.min_interactions > self.max_interactions
            || self.max_interactions > self.n_items / 2
        {
            return Err(Error::Domain(format!(
                "interaction range {}..={} invalid for {} items",
                self.min_interactions, self.max_interactions, self.n_items
            )));
        }
        if self.taste_clusters == 0 {
            return Err(Error::Domain("taste_clusters must be >= 1".into()));
        }
        Ok(())
    }

    pub fn aligned_share(&self) -> f64 {
        0.5 + (self.max_aligned_share - 0.5) * self.signal
    }

    pub fn generate(&self, rng: &mut RngStream) -> Result<Dataset> {
        Ok(self.generate_with_groups(rng)?.0)
    }

    /// Like [`generate`](Self::generate), also returning each item's
    /// gender-affinity half, indexed by `item id − 1`.
    pub fn generate_with_groups(&self, rng: &mut RngStream) -> Result<(Dataset, Vec<u8>)> {
        self.validate()?;
        let n_items = self.n_items;

        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(rng);
        let mut item_gender = vec![0u8; n_items];
        for &i in &order[n_items / 2..] {
            item_gender[i] = 1;
        }
        let item_age: Vec<u8> = (0..n_items).map(|_| rng.random_range(0..3)).collect();
        let item_taste: Vec<usize> = (0..n_items)
            .map(|_| rng.random_range(0..self.taste_clusters))
            .collect();
        let mut ranks: Vec<usize> = (0..n_items).collect();
        ranks.shuffle(rng);
        let popularity: Vec<f64> = ranks
            .iter()
            .map(|&r| (r as f64 + 5.0).powf(-self.popularity_exponent))
            .collect();
        let halves: [Vec<usize>; 2] = [0u8, 1].map(|g| {
            (0..n_items).filter(|&i| item_gender[i] == g).collect()
        });

        let mut genders: Vec<u8> = (0..self.n_users).map(|u| (u % 2) as u8).collect();
        genders.shuffle(rng);

        let share = self.aligned_share();
        let mut interactions = Vec::new();
        let mut attributes = BTreeMap::new();
        for (u, &gender) in genders.iter().enumerate() {
            let user = u as u32 + 1;
            let age_bucket: u8 = rng.random_range(0..3);
            let taste = rng.random_range(0..self.taste_clusters);
            attributes.insert(user, UserAttribute { user, gender, age_bucket });

            let weights: Vec<f64> = (0..n_items)
                .map(|i| {
                    let mut w = popularity[i];
                    if item_taste[i] == taste {
                        w *= self.taste_boost;
                    }
                    if item_age[i] == age_bucket {
                        w *= 1.0 + self.age_boost * self.signal;
                    }
                    w
                })
                .collect();

            let n = rng.random_range(self.min_interactions..=self.max_interactions);
            let n_aligned = (share * n as f64).round() as usize;
            let mut from_aligned: Vec<bool> = (0..n).map(|k| k < n_aligned).collect();
            from_aligned.shuffle(rng);

            let mut pools = [halves[0].clone(), halves[1].clone()];
            let mut ts: i64 = 1_000_000 + rng.random_range(0..10_000);
            for aligned in from_aligned {
                let side = if aligned { gender } else { 1 - gender } as usize;
                let pos = weighted_pick(rng, &pools[side], &weights);
                let item = pools[side].swap_remove(pos);
                ts += rng.random_range(1..3_600);
                interactions.push(Interaction {
                    user,
                    item: item as u32 + 1,
                    timestamp: ts,
                });
            }
        }
        let mut ds = Dataset::from_parts(interactions, attributes)?;
        ds.items = (1..=n_items as u32).collect();
        Ok((ds, item_gender))
    }
}
