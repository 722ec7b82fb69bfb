//! Interaction ingestion, iterative core-k filtering and leave-one-out splits.
//!
//! Raw events are parsed into [`Interaction`]s keyed by opaque string ids.
//! [`core_filter`] interns them into a dense [`Dataset`] (users `0..N`, items
//! `1..=|I|`, item `0` reserved for padding) and [`build_sequences`] turns that
//! into chronological per-user histories.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Item index reserved for left padding.
pub const PAD: u32 = 0;

const RETAILROCKET_HEADER: &str = "timestamp,visitorid,event,itemid,transactionid";
const BIN_MAGIC: &[u8; 8] = b"SQFDATA1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
    /// Line index in the source file; unique per file and used to break timestamp ties.
    pub source_order: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Retailrocket,
    Ml1m,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retailrocket" => Ok(DatasetKind::Retailrocket),
            "ml1m" => Ok(DatasetKind::Ml1m),
            other => Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

impl DatasetKind {
    pub fn parse<R: BufRead>(self, reader: R) -> Result<Vec<Interaction>> {
        match self {
            DatasetKind::Retailrocket => parse_retailrocket(reader),
            DatasetKind::Ml1m => parse_movielens(reader),
        }
    }
}

fn parse_timestamp(raw: &str, line: usize) -> Result<i64> {
    let ts: i64 = raw.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("timestamp `{raw}` is not an integer"),
    })?;
    if ts < 0 {
        return Err(Error::Parse { line, msg: format!("negative timestamp {ts}") });
    }
    Ok(ts)
}

/// Parses a Retailrocket `events.csv`, keeping only `view` events.
pub fn parse_retailrocket<R: BufRead>(reader: R) -> Result<Vec<Interaction>> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::Format(e.to_string()))?,
        None => return Err(Error::Format("missing header".into())),
    };
    if header.trim_start_matches('\u{feff}').trim() != RETAILROCKET_HEADER {
        return Err(Error::Format(format!(
            "expected header `{RETAILROCKET_HEADER}`, found `{}`",
            header.trim()
        )));
    }

    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line.map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 5 columns, found {}", fields.len()),
            });
        }
        let timestamp = parse_timestamp(fields[0], line_no)?;
        if fields[2] != "view" {
            continue;
        }
        out.push(Interaction {
            user: fields[1].to_string(),
            item: fields[3].to_string(),
            timestamp,
            source_order: line_no as u64,
        });
    }
    Ok(out)
}

/// Parses a MovieLens `ratings.dat` (`UserID::MovieID::Rating::Timestamp`).
/// Every rating counts as an interaction; the rating value is discarded.
pub fn parse_movielens<R: BufRead>(reader: R) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 4 `::`-separated fields, found {}", fields.len()),
            });
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse { line: line_no, msg: "empty user or item id".into() });
        }
        out.push(Interaction {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            timestamp: parse_timestamp(fields[3], line_no)?,
            source_order: line_no as u64,
        });
    }
    Ok(out)
}

/// Total order on opaque ids: numeric ids numerically, then everything else lexicographically.
fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Record {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
    pub source_order: u64,
}

/// A filtered, densely indexed interaction log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    /// `users[u]` is the original id of user index `u`.
    pub users: Vec<String>,
    /// `items[i - 1]` is the original id of item index `i`.
    pub items: Vec<String>,
    /// Sorted by `(user, timestamp, source_order)`.
    pub records: Vec<Record>,
}

#[derive(Serialize, Deserialize)]
struct IndexSidecar {
    format: u32,
    users: Vec<String>,
    items: Vec<String>,
    num_interactions: usize,
    bin_sha256: String,
}

impl Dataset {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Catalogue size |I| (excluding padding).
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.records.len()
    }

    pub fn item_id(&self, index: u32) -> Option<&str> {
        if index == PAD {
            return None;
        }
        self.items.get(index as usize - 1).map(String::as_str)
    }

    pub fn user_index(&self) -> HashMap<&str, u32> {
        self.users.iter().enumerate().map(|(i, u)| (u.as_str(), i as u32)).collect()
    }

    fn encode_columns(&self) -> Vec<u8> {
        let n = self.records.len();
        let mut buf = Vec::with_capacity(16 + n * 24);
        buf.extend_from_slice(BIN_MAGIC);
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        for r in &self.records {
            buf.extend_from_slice(&r.user.to_le_bytes());
        }
        for r in &self.records {
            buf.extend_from_slice(&r.item.to_le_bytes());
        }
        for r in &self.records {
            buf.extend_from_slice(&r.timestamp.to_le_bytes());
        }
        for r in &self.records {
            buf.extend_from_slice(&r.source_order.to_le_bytes());
        }
        buf
    }

    fn decode_columns(bytes: &[u8]) -> Result<Vec<Record>> {
        let bad = || Error::Format("truncated or corrupt interactions.bin".into());
        if bytes.len() < 16 || &bytes[..8] != BIN_MAGIC {
            return Err(bad());
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() != 16 + n * 24 {
            return Err(bad());
        }
        let col = |offset: usize, width: usize, i: usize| &bytes[offset + i * width..offset + (i + 1) * width];
        let (u_off, i_off, t_off, o_off) = (16, 16 + 4 * n, 16 + 8 * n, 16 + 16 * n);
        Ok((0..n)
            .map(|i| Record {
                user: u32::from_le_bytes(col(u_off, 4, i).try_into().unwrap()),
                item: u32::from_le_bytes(col(i_off, 4, i).try_into().unwrap()),
                timestamp: i64::from_le_bytes(col(t_off, 8, i).try_into().unwrap()),
                source_order: u64::from_le_bytes(col(o_off, 8, i).try_into().unwrap()),
            })
            .collect())
    }

    /// SHA-256 over the columnar encoding and both index maps.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.encode_columns());
        for u in &self.users {
            h.update(u.as_bytes());
            h.update([0u8]);
        }
        h.update([1u8]);
        for i in &self.items {
            h.update(i.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    /// Writes `interactions.bin` and `index.json` into `dir`; returns the content hash.
    pub fn save(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bin = self.encode_columns();
        let sidecar = IndexSidecar {
            format: 1,
            users: self.users.clone(),
            items: self.items.clone(),
            num_interactions: self.records.len(),
            bin_sha256: hex::encode(Sha256::digest(&bin)),
        };
        let bin_path = dir.join("interactions.bin");
        fs::write(&bin_path, &bin).map_err(|e| Error::io(&bin_path, e))?;
        let idx_path = dir.join("index.json");
        fs::write(&idx_path, serde_json::to_vec(&sidecar)?).map_err(|e| Error::io(&idx_path, e))?;
        Ok(self.content_hash())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bin_path = dir.join("interactions.bin");
        let bin = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let idx_path = dir.join("index.json");
        let raw = fs::read(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
        let sidecar: IndexSidecar = serde_json::from_slice(&raw)?;
        if sidecar.bin_sha256 != hex::encode(Sha256::digest(&bin)) {
            return Err(Error::Format(format!("{} does not match its sidecar hash", bin_path.display())));
        }
        let records = Self::decode_columns(&bin)?;
        if records.len() != sidecar.num_interactions {
            return Err(Error::Format("interaction count mismatch".into()));
        }
        let ds = Dataset { users: sidecar.users, items: sidecar.items, records };
        for r in &ds.records {
            if r.user as usize >= ds.users.len() || r.item == PAD || r.item as usize > ds.items.len() {
                return Err(Error::Format("record references unknown user or item".into()));
            }
        }
        Ok(ds)
    }
}

/// Iterative core-k filter: drops every user and item with fewer than `k`
/// interactions until a fixpoint is reached. Indices of the survivors are
/// assigned in natural id order, so the result does not depend on input order.
pub fn core_filter(interactions: &[Interaction], k: usize) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::Config("core filter threshold must be >= 1".into()));
    }
    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let mut pairs = Vec::with_capacity(interactions.len());
    for it in interactions {
        let next_u = user_ids.len();
        let u = *user_ids.entry(it.user.as_str()).or_insert(next_u);
        let next_i = item_ids.len();
        let i = *item_ids.entry(it.item.as_str()).or_insert(next_i);
        pairs.push((u, i));
    }

    let mut alive = vec![true; pairs.len()];
    let mut ucount = vec![0usize; user_ids.len()];
    let mut icount = vec![0usize; item_ids.len()];
    loop {
        ucount.iter_mut().for_each(|c| *c = 0);
        icount.iter_mut().for_each(|c| *c = 0);
        for (&(u, i), _) in pairs.iter().zip(&alive).filter(|(_, a)| **a) {
            ucount[u] += 1;
            icount[i] += 1;
        }
        let mut removed = false;
        for (&(u, i), a) in pairs.iter().zip(alive.iter_mut()) {
            if *a && (ucount[u] < k || icount[i] < k) {
                *a = false;
                removed = true;
            }
        }
        if !removed {
            break;
        }
    }
    if !alive.iter().any(|a| *a) {
        return Err(Error::EmptyAfterFilter);
    }

    let mut users: Vec<&str> = user_ids.iter().filter(|(_, &u)| ucount[u] > 0).map(|(s, _)| *s).collect();
    let mut items: Vec<&str> = item_ids.iter().filter(|(_, &i)| icount[i] > 0).map(|(s, _)| *s).collect();
    users.sort_by(|a, b| natural_cmp(a, b));
    items.sort_by(|a, b| natural_cmp(a, b));
    let user_index: HashMap<&str, u32> = users.iter().enumerate().map(|(n, s)| (*s, n as u32)).collect();
    let item_index: HashMap<&str, u32> = items.iter().enumerate().map(|(n, s)| (*s, n as u32 + 1)).collect();

    let mut records: Vec<Record> = interactions
        .iter()
        .zip(&alive)
        .filter(|(_, a)| **a)
        .map(|(it, _)| Record {
            user: user_index[it.user.as_str()],
            item: item_index[it.item.as_str()],
            timestamp: it.timestamp,
            source_order: it.source_order,
        })
        .collect();
    records.sort_by_key(|r| (r.user, r.timestamp, r.source_order));

    Ok(Dataset {
        users: users.into_iter().map(str::to_string).collect(),
        items: items.into_iter().map(str::to_string).collect(),
        records,
    })
}

/// One user's chronological history. The last item is the test target, the
/// second-to-last the validation target, the rest is the training prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: u32,
    pub history: Vec<u32>,
}

impl UserSequence {
    pub fn train_prefix(&self) -> &[u32] {
        &self.history[..self.history.len() - 2]
    }

    pub fn val_target(&self) -> u32 {
        self.history[self.history.len() - 2]
    }

    pub fn test_target(&self) -> u32 {
        self.history[self.history.len() - 1]
    }

    /// Model input used to predict the target of `split`.
    pub fn eval_input(&self, split: Split) -> &[u32] {
        match split {
            Split::Val => self.train_prefix(),
            Split::Test => &self.history[..self.history.len() - 1],
        }
    }

    pub fn eval_target(&self, split: Split) -> u32 {
        match split {
            Split::Val => self.val_target(),
            Split::Test => self.test_target(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Builds leave-one-out sequences, one per user in index order.
pub fn build_sequences(dataset: &Dataset) -> Result<Vec<UserSequence>> {
    let mut out: Vec<UserSequence> = Vec::with_capacity(dataset.num_users());
    for r in &dataset.records {
        match out.last_mut() {
            Some(seq) if seq.user == r.user => seq.history.push(r.item),
            _ => out.push(UserSequence { user: r.user, history: vec![r.item] }),
        }
    }
    if let Some(seq) = out.iter().find(|s| s.history.len() < 3) {
        return Err(Error::Data(format!(
            "user {} has {} interactions; leave-one-out needs at least 3",
            dataset.users[seq.user as usize],
            seq.history.len()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedInput {
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
}

impl PaddedInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The real (non-padding) tokens in order.
    pub fn unpadded(&self) -> Vec<u32> {
        self.tokens.iter().zip(&self.mask).filter(|(_, m)| **m).map(|(t, _)| *t).collect()
    }
}

/// Keeps the `max_len` most recent items and left-pads with [`PAD`].
pub fn pad_truncate(sequence: &[u32], max_len: usize) -> PaddedInput {
    let kept = &sequence[sequence.len().saturating_sub(max_len)..];
    let pad = max_len - kept.len();
    let mut tokens = vec![PAD; pad];
    tokens.extend_from_slice(kept);
    let mut mask = vec![false; pad];
    mask.extend(std::iter::repeat_n(true, kept.len()));
    PaddedInput { tokens, mask }
}

/// Sequence-to-sequence training pair over a training prefix: position `j`
/// of the input predicts the item at `j + 1`. Padding targets are [`PAD`].
pub fn training_pair(prefix: &[u32], max_len: usize) -> (PaddedInput, Vec<u32>) {
    if prefix.len() < 2 {
        return (pad_truncate(&[], max_len), vec![PAD; max_len]);
    }
    let input = pad_truncate(&prefix[..prefix.len() - 1], max_len);
    let targets = pad_truncate(&prefix[1..], max_len).tokens;
    (input, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn it(u: &str, i: &str, ts: i64, order: u64) -> Interaction {
        Interaction { user: u.into(), item: i.into(), timestamp: ts, source_order: order }
    }

    #[test]
    fn retailrocket_row_mapping_and_event_filter() {
        let csv = "timestamp,visitorid,event,itemid,transactionid\n\
                   1433221332117,257597,view,355908,\n\
                   1433224214164,992329,addtocart,248676,\n";
        let out = parse_retailrocket(csv.as_bytes()).unwrap();
        assert_eq!(out, vec![it("257597", "355908", 1433221332117, 2)]);
    }

    #[test]
    fn retailrocket_header_only_is_empty() {
        let out = parse_retailrocket("timestamp,visitorid,event,itemid,transactionid\n".as_bytes()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn retailrocket_errors() {
        assert!(matches!(parse_retailrocket("".as_bytes()), Err(Error::Format(_))));
        assert!(matches!(parse_retailrocket("a,b\n1,2\n".as_bytes()), Err(Error::Format(_))));
        let bad_cols = "timestamp,visitorid,event,itemid,transactionid\n1,2,view,3,\n1,2,view\n";
        assert!(matches!(parse_retailrocket(bad_cols.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let bad_ts = "timestamp,visitorid,event,itemid,transactionid\nabc,2,view,3,\n";
        assert!(matches!(parse_retailrocket(bad_ts.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn movielens_row_mapping() {
        let out = parse_movielens("1::1193::5::978300760\n".as_bytes()).unwrap();
        assert_eq!(out, vec![it("1", "1193", 978300760, 1)]);
        assert!(parse_movielens("".as_bytes()).unwrap().is_empty());
        assert!(matches!(parse_movielens("1::2::3\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_movielens("1::2::3::x\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn core_filter_removes_sparse_user_and_orphans() {
        // users a, b have 2 interactions each over items x, y; user c has 1 on z.
        let data = vec![
            it("a", "x", 1, 0),
            it("a", "y", 2, 1),
            it("b", "x", 1, 2),
            it("b", "y", 2, 3),
            it("c", "z", 1, 4),
            it("c", "x", 2, 5),
        ];
        let ds = core_filter(&data, 2).unwrap();
        assert_eq!(ds.users, vec!["a", "b"]);
        assert_eq!(ds.items, vec!["x", "y"]);
        assert_eq!(ds.num_interactions(), 4);
        assert!(matches!(core_filter(&data, 5), Err(Error::EmptyAfterFilter)));
        assert!(matches!(core_filter(&data, 0), Err(Error::Config(_))));
    }

    #[test]
    fn core_filter_cascades() {
        // Removing user c drops item z below threshold, which then drops user d.
        let mut data = Vec::new();
        let mut n = 0;
        let mut push = |u: &str, i: &str| {
            data.push(it(u, i, n as i64, n));
            n += 1;
        };
        for u in ["a", "b"] {
            push(u, "x");
            push(u, "y");
        }
        push("c", "z");
        push("d", "z");
        push("d", "x");
        let ds = core_filter(&data, 2).unwrap();
        assert_eq!(ds.users, vec!["a", "b"]);
    }

    #[test]
    fn sequences_follow_timestamp_then_source_order() {
        let data = vec![
            it("1", "e", 5, 10),
            it("1", "c", 3, 11),
            it("1", "b", 2, 3),
            it("1", "a", 2, 1),
            it("1", "d", 4, 7),
        ];
        let ds = core_filter(&data, 1).unwrap();
        let seqs = build_sequences(&ds).unwrap();
        let names: Vec<&str> = seqs[0].history.iter().map(|&i| ds.item_id(i).unwrap()).collect();
        assert_eq!(names, vec!["a", "b", "c", "d", "e"]);
        assert_eq!(seqs[0].train_prefix().len(), 3);
        assert_eq!(ds.item_id(seqs[0].val_target()), Some("d"));
        assert_eq!(ds.item_id(seqs[0].test_target()), Some("e"));
    }

    #[test]
    fn short_history_is_rejected() {
        let data = vec![it("1", "a", 1, 0), it("1", "b", 2, 1)];
        let ds = core_filter(&data, 1).unwrap();
        assert!(matches!(build_sequences(&ds), Err(Error::Data(_))));
    }

    #[test]
    fn padding() {
        let p = pad_truncate(&[7, 8, 9], 5);
        assert_eq!(p.tokens, vec![0, 0, 7, 8, 9]);
        assert_eq!(p.mask, vec![false, false, true, true, true]);
        let long: Vec<u32> = (1..=300).collect();
        let p = pad_truncate(&long, 200);
        assert_eq!(p.tokens, (101..=300).collect::<Vec<_>>());
        assert!(p.mask.iter().all(|m| *m));
        let p = pad_truncate(&[], 3);
        assert_eq!(p.tokens, vec![0, 0, 0]);
        assert_eq!(p.mask, vec![false; 3]);
    }

    #[test]
    fn training_pairs_shift_by_one() {
        let (input, targets) = training_pair(&[4, 5, 6], 4);
        assert_eq!(input.tokens, vec![0, 0, 4, 5]);
        assert_eq!(targets, vec![0, 0, 5, 6]);
    }

    #[test]
    fn artifact_round_trip() {
        let data = vec![it("2", "x", 9, 0), it("10", "y", 1, 1), it("2", "y", 3, 2), it("10", "x", 1, 3)];
        let ds = core_filter(&data, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let hash = ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.content_hash(), hash);
        assert_eq!(ds.users, vec!["2", "10"]);
    }
}
