//! Ingestion, indexing, and train/test splitting of timestamped rating data.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// One (user, item, rating, timestamp) event. `row` is the ordinal of the
/// event among the valid rows of the source file and survives filtering and
/// splitting, so split manifests stay stable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub timestamp: i64,
    pub row: usize,
}

/// Bijections between external string ids and dense indices.
#[derive(Debug, Default)]
pub struct Index {
    pub users: Vec<String>,
    pub items: Vec<String>,
    user_map: HashMap<String, usize>,
    item_map: HashMap<String, usize>,
}

impl Index {
    pub fn user_id(&self, dense: usize) -> &str {
        &self.users[dense]
    }

    pub fn item_id(&self, dense: usize) -> &str {
        &self.items[dense]
    }

    pub fn user_dense(&self, id: &str) -> Option<usize> {
        self.user_map.get(id).copied()
    }

    pub fn item_dense(&self, id: &str) -> Option<usize> {
        self.item_map.get(id).copied()
    }

    fn intern_user(&mut self, id: &str) -> usize {
        if let Some(&d) = self.user_map.get(id) {
            return d;
        }
        let d = self.users.len();
        self.users.push(id.to_string());
        self.user_map.insert(id.to_string(), d);
        d
    }

    fn intern_item(&mut self, id: &str) -> usize {
        if let Some(&d) = self.item_map.get(id) {
            return d;
        }
        let d = self.items.len();
        self.items.push(id.to_string());
        self.item_map.insert(id.to_string(), d);
        d
    }

    /// Index over synthetic ids u0..u{m-1} and i0..i{n-1}, dense id equal to
    /// the numeric suffix.
    pub fn with_ranges(m: usize, n: usize) -> Index {
        let mut index = Index::default();
        for i in 0..m {
            index.intern_user(&format!("u{i}"));
        }
        for j in 0..n {
            index.intern_item(&format!("i{j}"));
        }
        index
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub index: Arc<Index>,
    pub interactions: Vec<Interaction>,
}

impl Corpus {
    pub fn num_users(&self) -> usize {
        self.index.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.index.items.len()
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

/// Selects a CSV column by position or by header name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColSel {
    Position(usize),
    Name(String),
}

#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub delimiter: char,
    /// Skip the first row. Forced on when any column is selected by name.
    pub has_header: bool,
    pub user: ColSel,
    pub item: ColSel,
    pub rating: ColSel,
    pub timestamp: ColSel,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            delimiter: ',',
            has_header: false,
            user: ColSel::Position(0),
            item: ColSel::Position(1),
            rating: ColSel::Position(2),
            timestamp: ColSel::Position(3),
        }
    }
}

impl CsvSchema {
    fn uses_names(&self) -> bool {
        [&self.user, &self.item, &self.rating, &self.timestamp]
            .iter()
            .any(|c| matches!(c, ColSel::Name(_)))
    }
}

/// Corpus plus ingestion diagnostics.
#[derive(Debug)]
pub struct LoadOutcome {
    pub corpus: Corpus,
    /// Rows dropped for missing/malformed fields.
    pub skipped_rows: usize,
    /// Events sharing (user, item, timestamp) with an earlier event. Kept.
    pub duplicate_events: usize,
}

fn resolve(sel: &ColSel, header: Option<&[&str]>, path: &Path) -> Result<usize> {
    match sel {
        ColSel::Position(p) => Ok(*p),
        ColSel::Name(name) => {
            let header = header.ok_or_else(|| {
                Error::Config(format!(
                    "column `{name}` selected by name but file has no header"
                ))
            })?;
            header.iter().position(|h| h.trim() == name).ok_or_else(|| {
                Error::Data(format!(
                    "column `{name}` not found in header of {}",
                    path.display()
                ))
            })
        }
    }
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<LoadOutcome> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    load_csv_str(&text, schema, path)
}

fn load_csv_str(text: &str, schema: &CsvSchema, path: &Path) -> Result<LoadOutcome> {
    let mut lines = text.lines();
    let header_line;
    let header: Option<Vec<&str>> = if schema.has_header || schema.uses_names() {
        header_line = lines.next().unwrap_or("");
        Some(header_line.split(schema.delimiter).collect())
    } else {
        None
    };
    let user_col = resolve(&schema.user, header.as_deref(), path)?;
    let item_col = resolve(&schema.item, header.as_deref(), path)?;
    let rating_col = resolve(&schema.rating, header.as_deref(), path)?;
    let ts_col = resolve(&schema.timestamp, header.as_deref(), path)?;

    let mut index = Index::default();
    let mut interactions = Vec::new();
    let mut skipped = 0usize;
    let mut duplicates = 0usize;
    let mut seen: HashSet<(usize, usize, i64)> = HashSet::new();

    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(schema.delimiter).collect();
        let get = |col: usize| fields.get(col).map(|s| s.trim());
        let (user_id, item_id, rating_s, ts_s) =
            match (get(user_col), get(item_col), get(rating_col), get(ts_col)) {
                (Some(u), Some(i), Some(r), Some(t)) if !u.is_empty() && !i.is_empty() => {
                    (u, i, r, t)
                }
                _ => {
                    skipped += 1;
                    continue;
                }
            };
        let rating: f64 = match rating_s.parse() {
            Ok(r) => r,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        // Timestamps may be integers or day indices written as floats.
        let timestamp: i64 = match ts_s.parse::<i64>() {
            Ok(t) => t,
            Err(_) => match ts_s.parse::<f64>() {
                Ok(t) if t.is_finite() => t as i64,
                _ => {
                    skipped += 1;
                    continue;
                }
            },
        };
        if !rating.is_finite() {
            skipped += 1;
            continue;
        }
        let user = index.intern_user(user_id);
        let item = index.intern_item(item_id);
        if !seen.insert((user, item, timestamp)) {
            duplicates += 1;
        }
        let row = interactions.len();
        interactions.push(Interaction {
            user,
            item,
            rating,
            timestamp,
            row,
        });
    }

    if interactions.is_empty() {
        return Err(Error::Data(format!(
            "no valid rows in {} ({} skipped)",
            path.display(),
            skipped
        )));
    }
    Ok(LoadOutcome {
        corpus: Corpus {
            index: Arc::new(index),
            interactions,
        },
        skipped_rows: skipped,
        duplicate_events: duplicates,
    })
}

/// Keep only users with at least `min_events` interactions, then re-densify
/// both index sides so embedding tables stay compact.
pub fn filter_min_history(corpus: &Corpus, min_events: usize) -> Result<Corpus> {
    assert!(min_events >= 1);
    let mut counts = vec![0usize; corpus.num_users()];
    for it in &corpus.interactions {
        counts[it.user] += 1;
    }
    let mut index = Index::default();
    let mut interactions = Vec::with_capacity(corpus.len());
    for it in &corpus.interactions {
        if counts[it.user] < min_events {
            continue;
        }
        let user = index.intern_user(corpus.index.user_id(it.user));
        let item = index.intern_item(corpus.index.item_id(it.item));
        interactions.push(Interaction {
            user,
            item,
            rating: it.rating,
            timestamp: it.timestamp,
            row: it.row,
        });
    }
    if interactions.is_empty() {
        return Err(Error::Data(format!(
            "no users with at least {min_events} events"
        )));
    }
    Ok(Corpus {
        index: Arc::new(index),
        interactions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    SplitByTime,
    SplitByRandom,
    PerUserPrefix,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::SplitByTime => "time",
            Protocol::SplitByRandom => "random",
            Protocol::PerUserPrefix => "prefix",
        }
    }

    pub fn parse(s: &str) -> Option<Protocol> {
        match s {
            "time" => Some(Protocol::SplitByTime),
            "random" => Some(Protocol::SplitByRandom),
            "prefix" => Some(Protocol::PerUserPrefix),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitResult {
    pub train: Corpus,
    pub test: Corpus,
    pub protocol: Protocol,
    /// Users whose test side came out empty (allowed under the prefix
    /// protocol's ceiling rule, but counted).
    pub empty_test_users: usize,
}

fn chronological(mut events: Vec<Interaction>) -> Vec<Interaction> {
    events.sort_by_key(|it| (it.timestamp, it.row));
    events
}

fn make_split(
    corpus: &Corpus,
    train: Vec<Interaction>,
    test: Vec<Interaction>,
    protocol: Protocol,
    empty_test_users: usize,
) -> Result<SplitResult> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!(
            "degenerate split: {} train / {} test events",
            train.len(),
            test.len()
        )));
    }
    Ok(SplitResult {
        train: Corpus {
            index: Arc::clone(&corpus.index),
            interactions: chronological(train),
        },
        test: Corpus {
            index: Arc::clone(&corpus.index),
            interactions: chronological(test),
        },
        protocol,
        empty_test_users,
    })
}

/// Global chronological split: the earliest `floor(train_fraction * N)`
/// events train, the rest test. Timestamp ties break by input row order.
pub fn split_by_time(corpus: &Corpus, train_fraction: f64) -> Result<SplitResult> {
    check_fraction(train_fraction)?;
    let sorted = chronological(corpus.interactions.clone());
    let cut = (train_fraction * sorted.len() as f64).floor() as usize;
    let (train, test) = sorted.split_at(cut);
    make_split(
        corpus,
        train.to_vec(),
        test.to_vec(),
        Protocol::SplitByTime,
        0,
    )
}

/// Uniform random split under `seed`, same cardinalities as split_by_time.
pub fn split_by_random(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<SplitResult> {
    check_fraction(train_fraction)?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    Rng::from_seed(seed)
        .stream("split_by_random")
        .shuffle(&mut order);
    let cut = (train_fraction * order.len() as f64).floor() as usize;
    let mut in_train = vec![false; corpus.len()];
    for &i in &order[..cut] {
        in_train[i] = true;
    }
    let mut train = Vec::with_capacity(cut);
    let mut test = Vec::with_capacity(corpus.len() - cut);
    for (i, it) in corpus.interactions.iter().enumerate() {
        if in_train[i] {
            train.push(*it);
        } else {
            test.push(*it);
        }
    }
    make_split(corpus, train, test, Protocol::SplitByRandom, 0)
}

/// Per-user chronological split: the first `ceil(prefix_fraction * T_u)`
/// events of each user train, the remainder test. The ceiling guarantees at
/// least one train event per user; users left without test events are
/// counted, not rejected.
pub fn split_per_user_prefix(corpus: &Corpus, prefix_fraction: f64) -> Result<SplitResult> {
    check_fraction(prefix_fraction)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut empty_test_users = 0usize;
    for seq in sequences(corpus) {
        let t = seq.events.len();
        let cut = ((prefix_fraction * t as f64).ceil() as usize).min(t);
        if cut == t {
            empty_test_users += 1;
        }
        for (k, ev) in seq.events.iter().enumerate() {
            let it = Interaction {
                user: seq.user,
                item: ev.item,
                rating: ev.rating,
                timestamp: ev.timestamp,
                row: ev.row,
            };
            if k < cut {
                train.push(it);
            } else {
                test.push(it);
            }
        }
    }
    make_split(
        corpus,
        train,
        test,
        Protocol::PerUserPrefix,
        empty_test_users,
    )
}

fn check_fraction(f: f64) -> Result<()> {
    if !(0.0..1.0).contains(&f) || f == 0.0 {
        return Err(Error::Config(format!(
            "fraction must lie in (0, 1), got {f}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqEvent {
    pub item: usize,
    pub rating: f64,
    pub timestamp: i64,
    pub row: usize,
}

/// A user's events in ascending timestamp order, ties broken by input order.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSequence {
    pub user: usize,
    pub events: Vec<SeqEvent>,
}

impl UserSequence {
    pub fn items(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.item).collect()
    }
}

/// One sequence per user that has any events, sorted by dense user index.
pub fn sequences(corpus: &Corpus) -> Vec<UserSequence> {
    let mut per_user: Vec<Vec<SeqEvent>> = vec![Vec::new(); corpus.num_users()];
    for it in &corpus.interactions {
        per_user[it.user].push(SeqEvent {
            item: it.item,
            rating: it.rating,
            timestamp: it.timestamp,
            row: it.row,
        });
    }
    per_user
        .into_iter()
        .enumerate()
        .filter(|(_, evs)| !evs.is_empty())
        .map(|(user, mut events)| {
            events.sort_by_key(|e| (e.timestamp, e.row));
            UserSequence { user, events }
        })
        .collect()
}

/// Serialize a split as `train|test<TAB>row` lines preceded by `#key<TAB>value`
/// metadata, enabling bit-exact reuse without re-deciding the split.
pub fn write_manifest(split: &SplitResult, meta: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in meta {
        let _ = writeln!(out, "#{k}\t{v}");
    }
    let _ = writeln!(out, "#protocol\t{}", split.protocol.name());
    let mut rows: Vec<(usize, bool)> = split
        .train
        .interactions
        .iter()
        .map(|it| (it.row, true))
        .chain(split.test.interactions.iter().map(|it| (it.row, false)))
        .collect();
    rows.sort_unstable();
    for (row, is_train) in rows {
        let _ = writeln!(out, "{}\t{row}", if is_train { "train" } else { "test" });
    }
    out
}

#[derive(Debug)]
pub struct Manifest {
    pub meta: HashMap<String, String>,
    /// (row, assigned-to-train)
    pub rows: Vec<(usize, bool)>,
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut meta = HashMap::new();
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('\t') {
                meta.insert(k.to_string(), v.to_string());
            }
            continue;
        }
        let (side, row) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!(
                "manifest line {} is not `side<TAB>row`",
                lineno + 1
            ))
        })?;
        let row: usize = row
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("bad row index on manifest line {}", lineno + 1)))?;
        match side {
            "train" => rows.push((row, true)),
            "test" => rows.push((row, false)),
            other => {
                return Err(Error::Data(format!(
                    "unknown split side `{other}` on manifest line {}",
                    lineno + 1
                )))
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Data("manifest has no assignment rows".into()));
    }
    Ok(Manifest { meta, rows })
}

/// Re-apply a manifest's assignments to a (re-loaded, re-filtered) corpus.
pub fn apply_manifest(corpus: &Corpus, manifest: &Manifest) -> Result<SplitResult> {
    let assignment: HashMap<usize, bool> = manifest.rows.iter().copied().collect();
    let protocol = manifest
        .meta
        .get("protocol")
        .and_then(|p| Protocol::parse(p))
        .unwrap_or(Protocol::SplitByTime);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for it in &corpus.interactions {
        match assignment.get(&it.row) {
            Some(true) => train.push(*it),
            Some(false) => test.push(*it),
            None => {
                return Err(Error::Data(format!(
                    "corpus row {} missing from manifest; was the input or filter changed?",
                    it.row
                )))
            }
        }
    }
    make_split(corpus, train, test, protocol, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn load_str(text: &str, schema: &CsvSchema) -> LoadOutcome {
        load_csv_str(text, schema, &PathBuf::from("<test>")).unwrap()
    }

    fn synthetic_corpus(
        users: usize,
        events_per_user: impl Fn(usize) -> usize,
        seed: u64,
    ) -> Corpus {
        let mut rng = Rng::from_seed(seed);
        let mut index = Index::default();
        let mut interactions = Vec::new();
        for u in 0..users {
            let dense = index.intern_user(&format!("u{u}"));
            for k in 0..events_per_user(u) {
                let item = index.intern_item(&format!("i{}", rng.below(40)));
                let row = interactions.len();
                interactions.push(Interaction {
                    user: dense,
                    item,
                    rating: 1.0 + rng.below(5) as f64,
                    timestamp: rng.below(10_000) as i64,
                    row,
                });
                let _ = k;
            }
        }
        Corpus {
            index: Arc::new(index),
            interactions,
        }
    }

    #[test]
    fn load_counts_users_items_interactions() {
        let out = load_str(
            "u1,i1,4.0,100\nu1,i2,3.0,200\nu2,i3,5.0,50\nu2,i1,2.0,400\n",
            &CsvSchema::default(),
        );
        assert_eq!(out.corpus.num_users(), 2);
        assert_eq!(out.corpus.num_items(), 3);
        assert_eq!(out.corpus.len(), 4);
        assert_eq!(out.skipped_rows, 0);
    }

    #[test]
    fn load_skips_malformed_rating() {
        let out = load_str(
            "u1,i1,4.0,100\nu1,i2,bad,200\nu2,i3,5.0,50\n",
            &CsvSchema::default(),
        );
        assert_eq!(out.corpus.len(), 2);
        assert_eq!(out.skipped_rows, 1);
    }

    #[test]
    fn load_reports_duplicates_but_keeps_them() {
        let out = load_str(
            "u1,i1,4.0,100\nu1,i1,2.0,100\nu1,i2,3.0,200\n",
            &CsvSchema::default(),
        );
        assert_eq!(out.corpus.len(), 3);
        assert_eq!(out.duplicate_events, 1);
    }

    #[test]
    fn load_by_header_names() {
        let schema = CsvSchema {
            has_header: true,
            user: ColSel::Name("uid".into()),
            item: ColSel::Name("iid".into()),
            rating: ColSel::Name("r".into()),
            timestamp: ColSel::Name("ts".into()),
            ..CsvSchema::default()
        };
        let out = load_str("ts,r,iid,uid\n100,4.0,i1,u1\n200,3.0,i2,u1\n", &schema);
        assert_eq!(out.corpus.num_users(), 1);
        assert_eq!(out.corpus.num_items(), 2);
    }

    #[test]
    fn load_rejects_empty() {
        let err = load_csv_str("x,y\n", &CsvSchema::default(), &PathBuf::from("<t>"));
        assert!(err.is_err());
    }

    #[test]
    fn dense_indices_first_appearance_order() {
        let out = load_str(
            "b,i9,1.0,1\na,i3,1.0,2\nb,i3,1.0,3\n",
            &CsvSchema::default(),
        );
        assert_eq!(out.corpus.index.user_id(0), "b");
        assert_eq!(out.corpus.index.user_id(1), "a");
        assert_eq!(out.corpus.index.item_id(0), "i9");
    }

    #[test]
    fn filter_threshold() {
        let counts = [12usize, 9, 10];
        let corpus = synthetic_corpus(3, |u| counts[u], 1);
        let filtered = filter_min_history(&corpus, 10).unwrap();
        assert_eq!(filtered.num_users(), 2);
        assert_eq!(filtered.len(), 22);
        // Re-densified: surviving users are 0 and 1.
        assert!(filtered.interactions.iter().all(|it| it.user < 2));
    }

    #[test]
    fn filter_min_one_is_identity() {
        let corpus = synthetic_corpus(4, |_| 3, 2);
        let filtered = filter_min_history(&corpus, 1).unwrap();
        assert_eq!(filtered.len(), corpus.len());
        assert_eq!(filtered.num_users(), corpus.num_users());
    }

    #[test]
    fn filter_brute_force_count() {
        // 50 users with event counts 1..=50: exactly 41 have >= 10.
        let corpus = synthetic_corpus(50, |u| u + 1, 3);
        let expected = (0..50usize).filter(|u| u + 1 >= 10).count();
        let filtered = filter_min_history(&corpus, 10).unwrap();
        assert_eq!(filtered.num_users(), expected);
        assert_eq!(expected, 41);
    }

    #[test]
    fn time_split_cardinality() {
        let corpus = synthetic_corpus(10, |_| 10, 4);
        let split = split_by_time(&corpus, 0.9).unwrap();
        assert_eq!(split.train.len(), 90);
        assert_eq!(split.test.len(), 10);
    }

    #[test]
    fn time_split_two_events() {
        let mut corpus = synthetic_corpus(1, |_| 2, 5);
        corpus.interactions[0].timestamp = 1;
        corpus.interactions[1].timestamp = 2;
        let split = split_by_time(&corpus, 0.5).unwrap();
        assert_eq!(split.train.interactions[0].timestamp, 1);
        assert_eq!(split.test.interactions[0].timestamp, 2);
    }

    #[test]
    fn time_split_chronology() {
        let corpus = synthetic_corpus(50, |_| 20, 6);
        let split = split_by_time(&corpus, 0.8).unwrap();
        let max_train = split
            .train
            .interactions
            .iter()
            .map(|it| it.timestamp)
            .max()
            .unwrap();
        let min_test = split
            .test
            .interactions
            .iter()
            .map(|it| it.timestamp)
            .min()
            .unwrap();
        assert!(max_train <= min_test);
    }

    #[test]
    fn random_split_deterministic_and_seed_sensitive() {
        let corpus = synthetic_corpus(40, |_| 25, 7);
        let a = split_by_random(&corpus, 0.9, 11).unwrap();
        let b = split_by_random(&corpus, 0.9, 11).unwrap();
        assert_eq!(
            a.train
                .interactions
                .iter()
                .map(|i| i.row)
                .collect::<Vec<_>>(),
            b.train
                .interactions
                .iter()
                .map(|i| i.row)
                .collect::<Vec<_>>()
        );
        assert_eq!(a.train.len(), 900);

        let c = split_by_random(&corpus, 0.9, 12).unwrap();
        let rows_a: Vec<usize> = a.train.interactions.iter().map(|i| i.row).collect();
        let rows_c: Vec<usize> = c.train.interactions.iter().map(|i| i.row).collect();
        assert_ne!(rows_a, rows_c);
    }

    #[test]
    fn prefix_split_seven_three() {
        let corpus = synthetic_corpus(1, |_| 10, 8);
        let split = split_per_user_prefix(&corpus, 0.7).unwrap();
        assert_eq!(split.train.len(), 7);
        assert_eq!(split.test.len(), 3);
    }

    #[test]
    fn prefix_split_ceiling_edge() {
        // ceil(0.7 * 2) = 2: both events train, none test; user counted. A
        // second longer user keeps the split non-degenerate.
        let corpus = synthetic_corpus(2, |u| if u == 0 { 2 } else { 10 }, 9);
        let split = split_per_user_prefix(&corpus, 0.7).unwrap();
        assert_eq!(split.empty_test_users, 1);
        assert!(split.test.interactions.iter().all(|it| it.user == 1));
    }

    #[test]
    fn prefix_split_per_user_chronology() {
        let corpus = synthetic_corpus(100, |_| 12, 10);
        let split = split_per_user_prefix(&corpus, 0.7).unwrap();
        for u in 0..corpus.num_users() {
            let max_train = split
                .train
                .interactions
                .iter()
                .filter(|it| it.user == u)
                .map(|it| (it.timestamp, it.row))
                .max();
            let min_test = split
                .test
                .interactions
                .iter()
                .filter(|it| it.user == u)
                .map(|it| (it.timestamp, it.row))
                .min();
            if let (Some(a), Some(b)) = (max_train, min_test) {
                assert!(a <= b);
            }
        }
    }

    #[test]
    fn splits_partition_the_corpus() {
        let corpus = synthetic_corpus(30, |_| 15, 11);
        for split in [
            split_by_time(&corpus, 0.8).unwrap(),
            split_by_random(&corpus, 0.8, 5).unwrap(),
            split_per_user_prefix(&corpus, 0.8).unwrap(),
        ] {
            let mut rows: Vec<usize> = split
                .train
                .interactions
                .iter()
                .chain(&split.test.interactions)
                .map(|it| it.row)
                .collect();
            rows.sort_unstable();
            assert_eq!(rows, (0..corpus.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sequences_sorted_with_stable_ties() {
        let mut corpus = synthetic_corpus(1, |_| 3, 12);
        corpus.interactions[0].timestamp = 5;
        corpus.interactions[1].timestamp = 3;
        corpus.interactions[2].timestamp = 4;
        let seqs = sequences(&corpus);
        let ts: Vec<i64> = seqs[0].events.iter().map(|e| e.timestamp).collect();
        assert_eq!(ts, vec![3, 4, 5]);

        // Ties keep input order.
        for it in corpus.interactions.iter_mut() {
            it.timestamp = 7;
        }
        let seqs = sequences(&corpus);
        let rows: Vec<usize> = seqs[0].events.iter().map(|e| e.row).collect();
        assert_eq!(rows, vec![0, 1, 2]);
    }

    #[test]
    fn sequences_cover_all_interactions() {
        let corpus = synthetic_corpus(25, |u| 1 + u % 7, 13);
        let total: usize = sequences(&corpus).iter().map(|s| s.events.len()).sum();
        assert_eq!(total, corpus.len());
    }

    #[test]
    fn manifest_round_trip() {
        let corpus = synthetic_corpus(20, |_| 10, 14);
        let split = split_by_random(&corpus, 0.9, 3).unwrap();
        let text = write_manifest(&split, &[("input", "x.csv".into())]);
        let manifest = parse_manifest(&text).unwrap();
        assert_eq!(manifest.meta.get("input").unwrap(), "x.csv");
        let replayed = apply_manifest(&corpus, &manifest).unwrap();
        assert_eq!(replayed.train.len(), split.train.len());
        let rows = |c: &Corpus| c.interactions.iter().map(|i| i.row).collect::<Vec<_>>();
        assert_eq!(rows(&replayed.train), rows(&split.train));
        assert_eq!(rows(&replayed.test), rows(&split.test));
    }
}
