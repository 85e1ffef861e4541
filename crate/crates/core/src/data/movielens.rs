use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Interaction;
use crate::error::{Error, Result};

/// Line layout of a MovieLens file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MovieLensFormat {
    /// `user\titem\trating\ttimestamp` (ML-100K `u.data`).
    Tab,
    /// `UserID::MovieID::Rating::Timestamp` (ML-1M `ratings.dat`).
    DoubleColon,
}

impl MovieLensFormat {
    fn split(self, line: &str) -> Vec<&str> {
        match self {
            MovieLensFormat::Tab => line.split('\t').collect(),
            MovieLensFormat::DoubleColon => line.split("::").collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRatings {
    pub interactions: Vec<Interaction>,
    pub malformed: usize,
}

/// Raw demographic record before age discretization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawUser {
    pub user: u32,
    pub gender: u8,
    pub age: u32,
}

fn parse_rating_line(fields: &[&str]) -> Option<Interaction> {
    if fields.len() != 4 {
        return None;
    }
    let user = fields[0].trim().parse().ok()?;
    let item = fields[1].trim().parse().ok()?;
    // the rating value only has to be numeric; it collapses to x_ui = 1
    fields[2].trim().parse::<f64>().ok()?;
    let timestamp = fields[3].trim().parse().ok()?;
    Some(Interaction {
        user,
        item,
        timestamp,
    })
}

/// Reads a ratings file into implicit positives.
///
/// Duplicate (user, item) pairs keep their most recent timestamp. Blank
/// lines are ignored; any other line that does not match the layout counts
/// as malformed.
pub fn parse_movielens(path: &Path, format: MovieLensFormat) -> Result<ParsedRatings> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut latest: BTreeMap<(u32, u32), i64> = BTreeMap::new();
    let mut malformed = 0;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_rating_line(&format.split(&line)) {
            Some(it) => {
                let ts = latest.entry((it.user, it.item)).or_insert(it.timestamp);
                *ts = (*ts).max(it.timestamp);
            }
            None => malformed += 1,
        }
    }
    if latest.is_empty() {
        return Err(Error::Format(format!(
            "{}: no valid {format:?} rating lines",
            path.display()
        )));
    }
    let interactions = latest
        .into_iter()
        .map(|((user, item), timestamp)| Interaction {
            user,
            item,
            timestamp,
        })
        .collect();
    Ok(ParsedRatings {
        interactions,
        malformed,
    })
}

fn gender_code(s: &str) -> Option<u8> {
    match s.trim() {
        "M" | "m" => Some(0),
        "F" | "f" => Some(1),
        _ => None,
    }
}

/// Reads user demographics.
///
/// `DoubleColon` expects `UserID::Gender::Age::Occupation::Zip` (ML-1M);
/// `Tab` expects the ML-100K `u.user` layout `user|age|gender|occupation|zip`.
/// Users whose gender is not M/F are skipped. Returns the records and the
/// number of skipped lines.
pub fn parse_users(path: &Path, format: MovieLensFormat) -> Result<(Vec<RawUser>, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut skipped = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parsed = match format {
            MovieLensFormat::DoubleColon => {
                let f: Vec<&str> = line.split("::").collect();
                (f.len() == 5)
                    .then(|| Some((f[0].parse().ok()?, gender_code(f[1])?, f[2].parse().ok()?)))
                    .flatten()
            }
            MovieLensFormat::Tab => {
                let f: Vec<&str> = line.split('|').collect();
                (f.len() == 5)
                    .then(|| Some((f[0].parse().ok()?, gender_code(f[2])?, f[1].parse().ok()?)))
                    .flatten()
            }
        };
        match parsed {
            Some((user, gender, age)) => out.push(RawUser { user, gender, age }),
            None => skipped += 1,
        }
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{}: no valid user lines", path.display())));
    }
    Ok((out, skipped))
}
