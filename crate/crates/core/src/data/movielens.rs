//! MovieLens 1M `ratings.dat` reader (`UserID::MovieID::Rating::Timestamp`,
//! ISO-8859-1).

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ClientDataset, Example};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingRecord {
    pub user_id: usize,
    pub item_id: usize,
    pub rating: u8,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingsData {
    /// One dataset per user, client id = dense user id, examples in time order.
    pub clients: Vec<ClientDataset>,
    pub num_items: usize,
    pub num_ratings: usize,
    /// Original ids indexed by dense id.
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
}

pub fn parse_movielens(path: &Path) -> Result<RatingsData> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_movielens_bytes(&bytes)
}

/// Parses the raw file contents. Bytes are decoded as Latin-1, so any byte
/// sequence decodes; only the field syntax can fail.
pub fn parse_movielens_bytes(bytes: &[u8]) -> Result<RatingsData> {
    let text: String = bytes.iter().map(|&b| b as char).collect();
    let mut users: HashMap<u64, usize> = HashMap::new();
    let mut items: HashMap<u64, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut per_user: Vec<Vec<RatingRecord>> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_line(line, line_no)?;
        let u = *users.entry(rec.0).or_insert_with(|| {
            user_ids.push(rec.0);
            per_user.push(Vec::new());
            user_ids.len() - 1
        });
        let j = *items.entry(rec.1).or_insert_with(|| {
            item_ids.push(rec.1);
            item_ids.len() - 1
        });
        per_user[u].push(RatingRecord {
            user_id: u,
            item_id: j,
            rating: rec.2,
            timestamp: rec.3,
        });
    }

    let num_ratings = per_user.iter().map(Vec::len).sum();
    let clients = per_user
        .into_iter()
        .enumerate()
        .map(|(u, mut recs)| {
            recs.sort_by_key(|r| r.timestamp);
            let examples = recs
                .iter()
                .map(|r| Example::rating(r.item_id, f64::from(r.rating), r.timestamp))
                .collect();
            ClientDataset::new(u as u64, examples)
        })
        .collect();
    Ok(RatingsData {
        clients,
        num_items: item_ids.len(),
        num_ratings,
        user_ids,
        item_ids,
    })
}

fn parse_line(line: &str, line_no: usize) -> Result<(u64, u64, u8, i64)> {
    let bad = |message: String| Error::Parse {
        line: line_no,
        message,
    };
    let fields: Vec<&str> = line.split("::").collect();
    if fields.len() != 4 {
        return Err(bad(format!(
            "expected 4 '::'-separated fields, found {}",
            fields.len()
        )));
    }
    let int = |idx: usize, name: &str| -> Result<i64> {
        fields[idx]
            .trim()
            .parse::<i64>()
            .map_err(|e| bad(format!("{name} {:?}: {e}", fields[idx])))
    };
    let user = int(0, "user id")?;
    let item = int(1, "movie id")?;
    let rating = int(2, "rating")?;
    let ts = int(3, "timestamp")?;
    if user < 0 || item < 0 {
        return Err(bad("ids must be non-negative".into()));
    }
    if !(1..=5).contains(&rating) {
        return Err(Error::Data(format!(
            "line {line_no}: rating {rating} outside 1..5"
        )));
    }
    Ok((user as u64, item as u64, rating as u8, ts))
}
