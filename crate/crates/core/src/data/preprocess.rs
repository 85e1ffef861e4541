use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;

use super::{Dataset, Interaction};
use crate::error::{Error, Result};
use crate::numkernel::RngStream;

/// Iterated k-core filter: repeatedly drops users with fewer than
/// `min_user` interactions and items with fewer than `min_item`, until
/// nothing changes.
pub fn filter_kcore(
    interactions: &[Interaction],
    min_user: usize,
    min_item: usize,
) -> Result<Vec<Interaction>> {
    if min_user == 0 || min_item == 0 {
        return Err(Error::Domain("k-core thresholds must be >= 1".into()));
    }
    let mut current: Vec<Interaction> = interactions.to_vec();
    loop {
        let mut user_deg: HashMap<u32, usize> = HashMap::new();
        let mut item_deg: HashMap<u32, usize> = HashMap::new();
        for it in &current {
            *user_deg.entry(it.user).or_default() += 1;
            *item_deg.entry(it.item).or_default() += 1;
        }
        let before = current.len();
        current.retain(|it| user_deg[&it.user] >= min_user && item_deg[&it.item] >= min_item);
        if current.len() == before {
            break;
        }
    }
    if current.is_empty() {
        return Err(Error::EmptyAfterFilter { min_user, min_item });
    }
    Ok(current)
}

/// Buckets a raw age: 0 below `t1`, 1 for `t1..=t2`, 2 above `t2`.
pub fn discretize_age(raw_age: u32, thresholds: (u32, u32)) -> Result<u8> {
    let (t1, t2) = thresholds;
    if raw_age == 0 {
        return Err(Error::Domain("age must be positive".into()));
    }
    if t1 >= t2 {
        return Err(Error::Domain(format!(
            "age thresholds ({t1}, {t2}) must be strictly increasing"
        )));
    }
    Ok(if raw_age < t1 {
        0
    } else if raw_age <= t2 {
        1
    } else {
        2
    })
}

/// Downsamples the majority gender uniformly at random to the minority count.
pub fn balance_gender(ds: &Dataset, rng: &mut RngStream) -> Result<Dataset> {
    let mut by_gender: [Vec<u32>; 2] = [Vec::new(), Vec::new()];
    for u in &ds.users {
        let g = ds
            .attributes
            .get(u)
            .ok_or_else(|| Error::State(format!("user {u} has no attributes")))?
            .gender;
        by_gender[(g & 1) as usize].push(*u);
    }
    if by_gender.iter().any(Vec::is_empty) {
        return Err(Error::Domain(format!(
            "cannot balance genders with counts {}/{}",
            by_gender[0].len(),
            by_gender[1].len()
        )));
    }
    let target = by_gender[0].len().min(by_gender[1].len());
    let mut keep: BTreeSet<u32> = BTreeSet::new();
    for group in &mut by_gender {
        if group.len() > target {
            group.shuffle(rng);
            group.truncate(target);
        }
        keep.extend(group.iter().copied());
    }

    let interactions: Vec<Interaction> = ds
        .interactions
        .iter()
        .filter(|it| keep.contains(&it.user))
        .copied()
        .collect();
    let test_holdout: BTreeMap<u32, u32> = ds
        .test_holdout
        .iter()
        .filter(|(u, _)| keep.contains(u))
        .map(|(&u, &i)| (u, i))
        .collect();
    let items = interactions
        .iter()
        .map(|it| it.item)
        .chain(test_holdout.values().copied())
        .collect();
    Ok(Dataset {
        users: keep.clone(),
        items,
        interactions,
        attributes: ds
            .attributes
            .iter()
            .filter(|(u, _)| keep.contains(u))
            .map(|(&u, &a)| (u, a))
            .collect(),
        test_holdout,
    })
}

/// Moves each user's most recent interaction into `test_holdout`.
///
/// Timestamp ties are broken by the larger item id.
pub fn leave_one_out_split(ds: &Dataset) -> Result<Dataset> {
    let mut per_user: BTreeMap<u32, Vec<Interaction>> = BTreeMap::new();
    for it in &ds.interactions {
        per_user.entry(it.user).or_default().push(*it);
    }
    let mut train = Vec::with_capacity(ds.interactions.len());
    let mut test = BTreeMap::new();
    for u in &ds.users {
        let ints = per_user.get(u).map(Vec::as_slice).unwrap_or(&[]);
        if ints.len() < 2 {
            return Err(Error::Split {
                user: *u,
                count: ints.len(),
            });
        }
        let held = ints
            .iter()
            .max_by_key(|it| (it.timestamp, it.item))
            .copied()
            .expect("nonempty");
        test.insert(*u, held.item);
        train.extend(ints.iter().filter(|it| **it != held).copied());
    }
    train.sort();
    Ok(Dataset {
        users: ds.users.clone(),
        items: ds.items.clone(),
        interactions: train,
        attributes: ds.attributes.clone(),
        test_holdout: test,
    })
}
