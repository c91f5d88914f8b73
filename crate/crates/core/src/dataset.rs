//! Interaction logs, k-core filtering, and the leave-one-out split.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ItemId;

/// One raw `(user, item, timestamp)` record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    /// `user<TAB>item<TAB>timestamp`, commas accepted in place of tabs.
    Tabular,
    /// `user::item::rating::timestamp`; every rating is an implicit positive.
    Movielens,
    /// A directory written by [`Dataset::save`].
    Canonical,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular" | "tsv" | "csv" => Ok(Format::Tabular),
            "movielens" | "ml" => Ok(Format::Movielens),
            "canonical" => Ok(Format::Canonical),
            other => Err(Error::Config(format!(
                "unknown dataset format `{other}` (expected tabular, movielens or canonical)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserRecord {
    pub raw_id: String,
    /// Item indices in chronological order.
    pub items: Vec<ItemId>,
    pub timestamps: Vec<i64>,
}

/// Per-user chronologically sorted sequences over a dense item vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub users: Vec<UserRecord>,
    /// Raw identifier of each dense item index.
    pub item_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_items: usize,
    pub num_actions: usize,
    pub avg_length: f64,
    pub density: f64,
}

impl DatasetStats {
    /// `key=value` report, one field per line.
    pub fn to_report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "num_users={}", self.num_users);
        let _ = writeln!(out, "num_items={}", self.num_items);
        let _ = writeln!(out, "num_actions={}", self.num_actions);
        let _ = writeln!(out, "avg_length={:.4}", self.avg_length);
        let _ = writeln!(out, "density={:.8}", self.density);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub train: Vec<ItemId>,
    pub val: ItemId,
    pub test: ItemId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub num_items: usize,
    pub users: Vec<UserSplit>,
}

pub fn parse_line(line: &str, format: Format, line_no: usize) -> Result<Interaction> {
    let parse_err = |message: String| Error::Parse {
        line: line_no,
        message,
    };
    let fields: Vec<&str> = match format {
        Format::Tabular | Format::Canonical => {
            if line.contains('\t') {
                line.split('\t').collect()
            } else {
                line.split(',').collect()
            }
        }
        Format::Movielens => line.split("::").collect(),
    };
    let expected = if format == Format::Movielens { 4 } else { 3 };
    if fields.len() != expected {
        return Err(parse_err(format!(
            "expected {expected} fields, found {}",
            fields.len()
        )));
    }
    let user = fields[0].trim();
    let item = fields[1].trim();
    if user.is_empty() || item.is_empty() {
        return Err(parse_err("empty user or item field".into()));
    }
    if format == Format::Movielens {
        fields[2]
            .trim()
            .parse::<f64>()
            .map_err(|_| parse_err(format!("bad rating `{}`", fields[2])))?;
    }
    let ts_field = fields[expected - 1].trim();
    let timestamp = ts_field
        .parse::<i64>()
        .map_err(|_| parse_err(format!("bad timestamp `{ts_field}`")))?;
    Ok(Interaction {
        user: user.to_string(),
        item: item.to_string(),
        timestamp,
    })
}

impl Dataset {
    /// Reads a raw log (or a canonical directory) into dense sequences.
    ///
    /// Users and items are indexed in order of first appearance. Sequences are
    /// stably sorted by timestamp, so equal timestamps keep file order.
    pub fn ingest(path: impl AsRef<Path>, format: Format) -> Result<Self> {
        let path = path.as_ref();
        if format == Format::Canonical {
            return Self::load(path);
        }
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            records.push(parse_line(line, format, idx + 1)?);
        }
        if records.is_empty() {
            return Err(Error::Empty(path.display().to_string()));
        }
        Ok(Self::from_interactions(records))
    }

    pub fn from_interactions(records: impl IntoIterator<Item = Interaction>) -> Self {
        let mut user_index: HashMap<String, usize> = HashMap::new();
        let mut item_index: HashMap<String, usize> = HashMap::new();
        let mut item_ids = Vec::new();
        let mut events: Vec<Vec<(i64, ItemId)>> = Vec::new();
        let mut user_ids = Vec::new();
        for rec in records {
            let u = *user_index.entry(rec.user.clone()).or_insert_with(|| {
                user_ids.push(rec.user.clone());
                events.push(Vec::new());
                user_ids.len() - 1
            });
            let i = *item_index.entry(rec.item.clone()).or_insert_with(|| {
                item_ids.push(rec.item.clone());
                item_ids.len() - 1
            });
            events[u].push((rec.timestamp, i));
        }
        let users = user_ids
            .into_iter()
            .zip(events)
            .map(|(raw_id, mut ev)| {
                ev.sort_by_key(|&(ts, _)| ts);
                UserRecord {
                    raw_id,
                    items: ev.iter().map(|&(_, i)| i).collect(),
                    timestamps: ev.iter().map(|&(t, _)| t).collect(),
                }
            })
            .collect();
        Dataset { users, item_ids }
    }

    /// Builds a dataset from already-dense sequences; timestamps are positions.
    pub fn from_sequences(sequences: Vec<Vec<ItemId>>, num_items: usize) -> Result<Self> {
        for seq in &sequences {
            if let Some(&bad) = seq.iter().find(|&&i| i >= num_items) {
                return Err(Error::InvalidItem {
                    index: bad,
                    vocab: num_items,
                });
            }
        }
        let users = sequences
            .into_iter()
            .enumerate()
            .map(|(u, items)| UserRecord {
                raw_id: u.to_string(),
                timestamps: (0..items.len() as i64).collect(),
                items,
            })
            .collect();
        Ok(Dataset {
            users,
            item_ids: (0..num_items).map(|i| i.to_string()).collect(),
        })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_actions(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }

    pub fn stats(&self) -> Result<DatasetStats> {
        let num_users = self.num_users();
        let num_items = self.num_items();
        let num_actions = self.num_actions();
        if num_users == 0 || num_items == 0 || num_actions == 0 {
            return Err(Error::Empty("dataset".into()));
        }
        Ok(DatasetStats {
            num_users,
            num_items,
            num_actions,
            avg_length: num_actions as f64 / num_users as f64,
            density: num_actions as f64 / (num_users as f64 * num_items as f64),
        })
    }

    /// Iteratively drops users and items with fewer than `k` interactions
    /// until no more can be removed, then re-indexes both densely.
    pub fn kcore_filter(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("kcore k must be at least 1".into()));
        }
        let mut user_alive = vec![true; self.num_users()];
        let mut item_alive = vec![true; self.num_items()];
        loop {
            let mut item_count = vec![0usize; self.num_items()];
            let mut user_count = vec![0usize; self.num_users()];
            for (u, rec) in self.users.iter().enumerate() {
                if !user_alive[u] {
                    continue;
                }
                for &i in rec.items.iter().filter(|&&i| item_alive[i]) {
                    item_count[i] += 1;
                    user_count[u] += 1;
                }
            }
            let mut changed = false;
            for (alive, &count) in user_alive.iter_mut().zip(&user_count) {
                if *alive && count < k {
                    *alive = false;
                    changed = true;
                }
            }
            for (alive, &count) in item_alive.iter_mut().zip(&item_count) {
                if *alive && count < k {
                    *alive = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        let mut remap = vec![usize::MAX; self.num_items()];
        let mut item_ids = Vec::new();
        for (i, raw) in self.item_ids.iter().enumerate() {
            if item_alive[i] {
                remap[i] = item_ids.len();
                item_ids.push(raw.clone());
            }
        }
        let users: Vec<UserRecord> = self
            .users
            .iter()
            .zip(&user_alive)
            .filter(|(_, &alive)| alive)
            .map(|(rec, _)| {
                let (items, timestamps) = rec
                    .items
                    .iter()
                    .zip(&rec.timestamps)
                    .filter(|(&i, _)| item_alive[i])
                    .map(|(&i, &t)| (remap[i], t))
                    .unzip();
                UserRecord {
                    raw_id: rec.raw_id.clone(),
                    items,
                    timestamps,
                }
            })
            .collect();
        if users.is_empty() || item_ids.is_empty() {
            return Err(Error::Empty(format!("{k}-core of dataset")));
        }
        Ok(Dataset { users, item_ids })
    }

    /// Last item is the test target, the one before it validation.
    pub fn leave_one_out_split(&self) -> Result<SplitDataset> {
        let users = self
            .users
            .iter()
            .map(|rec| {
                let n = rec.items.len();
                if n < 3 {
                    return Err(Error::ShortSequence {
                        user: rec.raw_id.clone(),
                        len: n,
                    });
                }
                Ok(UserSplit {
                    train: rec.items[..n - 2].to_vec(),
                    val: rec.items[n - 2],
                    test: rec.items[n - 1],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SplitDataset {
            num_items: self.num_items(),
            users,
        })
    }

    fn sequences_text(&self) -> String {
        let mut out = String::new();
        for (u, rec) in self.users.iter().enumerate() {
            for (&i, &t) in rec.items.iter().zip(&rec.timestamps) {
                let _ = writeln!(out, "{u}\t{i}\t{t}");
            }
        }
        out
    }

    /// Hex SHA-256 of the canonical sequence serialization.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.sequences_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes `sequences.tsv`, `users.map`, `items.map` and `stats.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("sequences.tsv"), self.sequences_text().as_bytes())?;
        self.write_id_maps(dir)?;
        write_file(&dir.join("stats.txt"), self.stats()?.to_report().as_bytes())
    }

    /// Two-column `dense<TAB>raw` map files for users and items.
    pub fn write_id_maps(&self, dir: &Path) -> Result<()> {
        let mut users = String::new();
        for (u, rec) in self.users.iter().enumerate() {
            let _ = writeln!(users, "{u}\t{}", rec.raw_id);
        }
        let mut items = String::new();
        for (i, raw) in self.item_ids.iter().enumerate() {
            let _ = writeln!(items, "{i}\t{raw}");
        }
        write_file(&dir.join("users.map"), users.as_bytes())?;
        write_file(&dir.join("items.map"), items.as_bytes())
    }

    /// Loads a directory written by [`Dataset::save`], keeping its dense ids.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let users_map = read_map(&dir.join("users.map"))?;
        let item_ids = read_map(&dir.join("items.map"))?;
        let mut users: Vec<UserRecord> = users_map
            .into_iter()
            .map(|raw_id| UserRecord {
                raw_id,
                items: Vec::new(),
                timestamps: Vec::new(),
            })
            .collect();
        let seq_path = dir.join("sequences.tsv");
        let text = fs::read_to_string(&seq_path).map_err(|e| Error::io(&seq_path, e))?;
        for (idx, line) in text.lines().enumerate() {
            let rec = parse_line(line, Format::Canonical, idx + 1)?;
            let bad = |what: &str| Error::Parse {
                line: idx + 1,
                message: format!("{what} index out of range"),
            };
            let u: usize = rec.user.parse().map_err(|_| bad("user"))?;
            let i: usize = rec.item.parse().map_err(|_| bad("item"))?;
            if u >= users.len() {
                return Err(bad("user"));
            }
            if i >= item_ids.len() {
                return Err(bad("item"));
            }
            users[u].items.push(i);
            users[u].timestamps.push(rec.timestamp);
        }
        let ds = Dataset { users, item_ids };
        if ds.num_actions() == 0 {
            return Err(Error::Empty(seq_path.display().to_string()));
        }
        Ok(ds)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_map(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(idx, line)| {
            let (dense, raw) = line.split_once('\t').ok_or(Error::Parse {
                line: idx + 1,
                message: format!("{}: expected `dense<TAB>raw`", path.display()),
            })?;
            if dense.parse::<usize>().ok() != Some(idx) {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("{}: dense ids must be consecutive", path.display()),
                });
            }
            Ok(raw.to_string())
        })
        .collect()
}
