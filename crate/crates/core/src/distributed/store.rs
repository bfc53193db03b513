//! Append-only alert log, one JSON line per record, one file per UTC day.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use chrono::DateTime;

use super::wire::AlertRecord;

const SEGMENT_PREFIX: &str = "alerts-";
const SEGMENT_SUFFIX: &str = ".jsonl";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StoreQuery {
    /// Inclusive lower bound on alert time.
    pub from_us: Option<u64>,
    /// Exclusive upper bound on alert time.
    pub to_us: Option<u64>,
    pub sensor_id: Option<String>,
    pub sid: Option<u32>,
    pub gid: Option<u32>,
    pub limit: Option<usize>,
}

impl StoreQuery {
    fn accepts(&self, r: &AlertRecord) -> bool {
        self.sensor_id.as_ref().is_none_or(|s| *s == r.sensor_id)
            && self.sid.is_none_or(|s| s == r.alert.sid)
            && self.gid.is_none_or(|g| g == r.alert.gid)
    }
}

type Key = (u64, String, u64);

#[derive(Default)]
struct SeqTracker {
    /// Every seq in `1..=contiguous` is stored.
    contiguous: u64,
    ahead: BTreeSet<u64>,
}

impl SeqTracker {
    fn holds(&self, seq: u64) -> bool {
        seq <= self.contiguous || self.ahead.contains(&seq)
    }

    fn insert(&mut self, seq: u64) {
        self.ahead.insert(seq);
        while self.ahead.remove(&(self.contiguous + 1)) {
            self.contiguous += 1;
        }
    }
}

#[derive(Default)]
struct Inner {
    index: BTreeMap<Key, AlertRecord>,
    seqs: HashMap<String, SeqTracker>,
}

impl Inner {
    fn insert(&mut self, r: AlertRecord) {
        self.seqs.entry(r.sensor_id.clone()).or_default().insert(r.seq);
        self.index.insert((r.alert.ts_us, r.sensor_id.clone(), r.seq), r);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Recovery {
    pub records: usize,
    /// Octets cut from segment tails that did not hold a whole record.
    pub truncated_bytes: u64,
}

/// Appends are serialized by the write lock; queries see a consistent prefix.
pub struct AlertStore {
    dir: PathBuf,
    inner: RwLock<Inner>,
    recovery: Recovery,
}

pub fn segment_name(ts_us: u64) -> String {
    let day = DateTime::from_timestamp((ts_us / 1_000_000) as i64, 0)
        .map(|d| d.format("%Y-%m-%d").to_string())
        .unwrap_or_else(|| "invalid".into());
    format!("{SEGMENT_PREFIX}{day}{SEGMENT_SUFFIX}")
}

fn segments(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(SEGMENT_PREFIX) && n.ends_with(SEGMENT_SUFFIX))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Reads whole lines up to the first one that does not parse. Returns the
/// records and the length of the valid prefix.
fn read_segment(path: &Path) -> io::Result<(Vec<AlertRecord>, u64)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut good = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        match serde_json::from_str::<AlertRecord>(&line) {
            Ok(r) => records.push(r),
            Err(_) => break,
        }
        good += n as u64;
    }
    Ok((records, good))
}

impl AlertStore {
    /// Opens or creates the store, cutting any torn tail from each segment.
    pub fn open(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut inner = Inner::default();
        let mut recovery = Recovery::default();
        for path in segments(&dir)? {
            let (records, good) = read_segment(&path)?;
            let len = fs::metadata(&path)?.len();
            if good < len {
                OpenOptions::new().write(true).open(&path)?.set_len(good)?;
                recovery.truncated_bytes += len - good;
            }
            recovery.records += records.len();
            for r in records {
                inner.insert(r);
            }
        }
        Ok(Self { dir, inner: RwLock::new(inner), recovery })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn recovery(&self) -> &Recovery {
        &self.recovery
    }

    /// Writes the record unless its `(sensor_id, seq)` is already stored.
    /// Returns whether it was new.
    pub fn append(&self, record: AlertRecord) -> io::Result<bool> {
        let mut inner = self.inner.write().expect("store lock poisoned");
        if inner.seqs.get(&record.sensor_id).is_some_and(|t| t.holds(record.seq)) {
            return Ok(false);
        }
        let mut line = serde_json::to_string(&record).map_err(io::Error::other)?;
        line.push('\n');
        let path = self.dir.join(segment_name(record.alert.ts_us));
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(line.as_bytes())?;
        f.flush()?;
        inner.insert(record);
        Ok(true)
    }

    /// Highest seq with no gap below it; 0 when nothing is stored.
    pub fn last_contiguous(&self, sensor_id: &str) -> u64 {
        let inner = self.inner.read().expect("store lock poisoned");
        inner.seqs.get(sensor_id).map_or(0, |t| t.contiguous)
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("store lock poisoned").index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_for(&self, sensor_id: &str) -> usize {
        let inner = self.inner.read().expect("store lock poisoned");
        inner.index.values().filter(|r| r.sensor_id == sensor_id).count()
    }

    /// Matching records ordered by (timestamp, sensor, seq).
    pub fn query(&self, q: &StoreQuery) -> Vec<AlertRecord> {
        let inner = self.inner.read().expect("store lock poisoned");
        let from = (q.from_us.unwrap_or(0), String::new(), 0);
        let limit = q.limit.unwrap_or(usize::MAX);
        inner
            .index
            .range(from..)
            .map(|(_, r)| r)
            .take_while(|r| q.to_us.is_none_or(|t| r.alert.ts_us < t))
            .filter(|r| q.accepts(r))
            .take(limit)
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alert::Alert;
    use crate::packet::IpProto;
    use crate::rules::Action;
    use std::net::Ipv4Addr;

    fn rec(sensor: &str, seq: u64, ts_us: u64, sid: u32) -> AlertRecord {
        AlertRecord {
            sensor_id: sensor.into(),
            seq,
            alert: Alert {
                ts_us,
                sid,
                gid: 1,
                msg: "m".into(),
                rule_pos: None,
                action: Action::Alert,
                src_ip: Ipv4Addr::new(10, 0, 0, 66),
                src_port: 1,
                dst_ip: Ipv4Addr::new(10, 0, 0, 2),
                dst_port: 20000,
                proto: IpProto::Tcp,
                dnp3_fc: None,
                options_evaluated: 1,
                rule_version: 1,
            },
            received_at_us: Some(5),
        }
    }

    #[test]
    fn empty_store_answers_empty() {
        let d = tempfile::tempdir().unwrap();
        let s = AlertStore::open(d.path()).unwrap();
        assert!(s.query(&StoreQuery::default()).is_empty());
        assert_eq!(s.last_contiguous("x"), 0);
    }

    #[test]
    fn duplicates_are_ignored_and_acks_track_gaps() {
        let d = tempfile::tempdir().unwrap();
        let s = AlertStore::open(d.path()).unwrap();
        for seq in [1, 2, 3] {
            assert!(s.append(rec("a", seq, seq, 3)).unwrap());
        }
        assert!(!s.append(rec("a", 3, 3, 3)).unwrap());
        assert_eq!((s.len(), s.last_contiguous("a")), (3, 3));
        assert!(s.append(rec("a", 5, 5, 3)).unwrap());
        assert_eq!(s.last_contiguous("a"), 3);
        assert!(s.append(rec("a", 4, 4, 3)).unwrap());
        assert_eq!(s.last_contiguous("a"), 5);
    }

    #[test]
    fn query_filters_and_order() {
        let d = tempfile::tempdir().unwrap();
        let s = AlertStore::open(d.path()).unwrap();
        // Ten records per sensor at t = 0..10 s, sid alternating 3 and 9.
        for i in 0..10u64 {
            for sensor in ["b", "a"] {
                s.append(rec(sensor, i + 1, i * 1_000_000, if i % 2 == 0 { 3 } else { 9 })).unwrap();
            }
        }
        let all = s.query(&StoreQuery::default());
        assert_eq!(all.len(), 20);
        assert_eq!((all[0].sensor_id.as_str(), all[1].sensor_id.as_str()), ("a", "b"));
        let half = s.query(&StoreQuery { from_us: Some(0), to_us: Some(5_000_000), ..StoreQuery::default() });
        assert_eq!(half.len(), 10);
        assert!(half.iter().all(|r| r.alert.ts_us < 5_000_000));
        let sid3 = s.query(&StoreQuery { sid: Some(3), ..StoreQuery::default() });
        assert_eq!(sid3.len(), 10);
        assert!(sid3.iter().all(|r| r.alert.sid == 3));
        let lim = s.query(&StoreQuery { sensor_id: Some("b".into()), limit: Some(4), ..StoreQuery::default() });
        assert_eq!(lim.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert!(s.query(&StoreQuery { gid: Some(145), ..StoreQuery::default() }).is_empty());
    }

    #[test]
    fn reopen_rebuilds_index_across_day_segments() {
        let d = tempfile::tempdir().unwrap();
        let day = 86_400_000_000u64;
        {
            let s = AlertStore::open(d.path()).unwrap();
            s.append(rec("a", 1, 10, 3)).unwrap();
            s.append(rec("a", 2, day + 10, 3)).unwrap();
        }
        assert_eq!(segments(d.path()).unwrap().len(), 2);
        assert_eq!(segment_name(day), "alerts-1970-01-02.jsonl");
        let s = AlertStore::open(d.path()).unwrap();
        assert_eq!((s.len(), s.last_contiguous("a"), s.recovery().records), (2, 2, 2));
        assert!(!s.append(rec("a", 2, day + 10, 3)).unwrap());
    }

    #[test]
    fn torn_tail_is_cut_back_to_last_whole_record() {
        let d = tempfile::tempdir().unwrap();
        {
            let s = AlertStore::open(d.path()).unwrap();
            for seq in 1..=3 {
                s.append(rec("a", seq, seq, 3)).unwrap();
            }
        }
        let path = d.path().join(segment_name(1));
        let full = fs::read(&path).unwrap();
        let second_end = full.iter().enumerate().filter(|(_, b)| **b == b'\n').nth(1).unwrap().0 + 1;
        for cut in [second_end + 1, full.len() - 1] {
            fs::write(&path, &full[..cut]).unwrap();
            let s = AlertStore::open(d.path()).unwrap();
            assert_eq!(s.len(), 2);
            assert_eq!(s.recovery().truncated_bytes, (cut - second_end) as u64);
            assert_eq!(fs::read(&path).unwrap(), full[..second_end]);
            s.append(rec("a", 3, 3, 3)).unwrap();
            assert_eq!(fs::read(&path).unwrap(), full);
        }
    }
}
