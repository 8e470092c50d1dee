//! Interaction ingestion, attribute tables, leave-one-out splits, and
//! negative-sampled training batches.
//!
//! External ids are re-indexed to dense 0-based indices in first-appearance
//! order, so reloading the same files always yields the same maps. Users with
//! fewer than three deduplicated interactions are filtered out, along with
//! URLs that end up with no interactions.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_INTERACTIONS_PER_USER: usize = 3;

/// Dense user index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UserId(pub usize);

/// Dense URL index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UrlId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: AttrKind,
    /// Initial embedding dimension for this attribute.
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum AttrKind {
    /// Declared vocabulary; index 0 is reserved for the "unknown" token.
    Categorical { vocab: Vec<String> },
    /// Power-of-two bucketization; `buckets` must cover the largest exponent
    /// the data needs plus the two leading intervals.
    Continuous { buckets: usize },
}

impl AttrSpec {
    /// Number of embedding rows this attribute needs.
    pub fn table_rows(&self) -> usize {
        match &self.kind {
            // +1 for the reserved unknown slot
            AttrKind::Categorical { vocab } => vocab.len() + 1,
            AttrKind::Continuous { buckets } => *buckets,
        }
    }
}

/// Declared attribute layout: `s` user attributes and `t` URL attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub user_attrs: Vec<AttrSpec>,
    pub url_attrs: Vec<AttrSpec>,
}

impl AttributeSchema {
    pub fn s(&self) -> usize {
        self.user_attrs.len()
    }

    pub fn t(&self) -> usize {
        self.url_attrs.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_attrs.is_empty() || self.url_attrs.is_empty() {
            return Err(Error::Schema(
                "schema needs at least one user and one URL attribute".into(),
            ));
        }
        for spec in self.user_attrs.iter().chain(&self.url_attrs) {
            if spec.dim == 0 {
                return Err(Error::Schema(format!(
                    "attribute {:?} has zero embedding dimension",
                    spec.name
                )));
            }
            if spec.table_rows() == 0 {
                return Err(Error::Schema(format!(
                    "attribute {:?} has an empty value range",
                    spec.name
                )));
            }
        }
        Ok(())
    }
}

/// Attribute value as stored per entity; continuous values keep the raw
/// number and are bucketized at embedding time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttrValue {
    Categorical(usize),
    Continuous(f64),
}

impl AttrValue {
    /// Embedding row for this value under its spec.
    pub fn embed_index(&self, spec: &AttrSpec) -> Result<usize> {
        match (self, &spec.kind) {
            (AttrValue::Categorical(i), AttrKind::Categorical { vocab }) => {
                if *i > vocab.len() {
                    return Err(Error::Schema(format!(
                        "categorical index {i} out of range for {:?}",
                        spec.name
                    )));
                }
                Ok(*i)
            }
            (AttrValue::Continuous(v), AttrKind::Continuous { buckets }) => {
                // values beyond the declared range share the last bucket
                Ok(bucketize_continuous(*v)?.min(buckets - 1))
            }
            _ => Err(Error::Schema(format!(
                "value kind does not match declared kind of {:?}",
                spec.name
            ))),
        }
    }

    fn unknown_for(spec: &AttrSpec) -> AttrValue {
        match &spec.kind {
            AttrKind::Categorical { .. } => AttrValue::Categorical(0),
            AttrKind::Continuous { .. } => AttrValue::Continuous(0.0),
        }
    }
}

/// Map a nonnegative value to its power-of-two interval: `[0,1) -> 0`,
/// `[1,2) -> 1`, `[2,4) -> 2`, and generally `[2^(k-1), 2^k) -> k`.
pub fn bucketize_continuous(v: f64) -> Result<usize> {
    if v < 0.0 || v.is_nan() {
        return Err(Error::Domain(format!("cannot bucketize negative value {v}")));
    }
    if v < 1.0 {
        return Ok(0);
    }
    Ok(v.log2().floor() as usize + 1)
}

/// One deduplicated (user, URL) interaction. `count` keeps the raw post
/// multiplicity for TF weighting; `timestamp`/`order` carry the latest raw
/// occurrence so recency ordering sees re-posts (ties between pairs break by
/// file order).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user: UserId,
    pub url: UrlId,
    pub timestamp: i64,
    pub order: usize,
    pub count: u32,
}

/// Users, URLs, implicit interactions, social edges, and attribute tables.
#[derive(Debug, Clone)]
pub struct InteractionDataset {
    user_ids: Vec<String>,
    url_ids: Vec<String>,
    user_index: HashMap<String, UserId>,
    url_index: HashMap<String, UrlId>,
    pub interactions: Vec<Interaction>,
    pub social_edges: Vec<(UserId, UserId)>,
    pub user_attrs: Vec<Vec<AttrValue>>,
    pub url_attrs: Vec<Vec<AttrValue>>,
    pub schema: Option<AttributeSchema>,
}

impl InteractionDataset {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_urls(&self) -> usize {
        self.url_ids.len()
    }

    pub fn user_external(&self, u: UserId) -> &str {
        &self.user_ids[u.0]
    }

    pub fn url_external(&self, c: UrlId) -> &str {
        &self.url_ids[c.0]
    }

    pub fn user_id(&self, external: &str) -> Option<UserId> {
        self.user_index.get(external).copied()
    }

    pub fn url_id(&self, external: &str) -> Option<UrlId> {
        self.url_index.get(external).copied()
    }

    /// Positive URL set per user (binary Y row).
    pub fn positive_sets(&self) -> Vec<HashSet<UrlId>> {
        let mut sets = vec![HashSet::new(); self.n_users()];
        for i in &self.interactions {
            sets[i.user.0].insert(i.url);
        }
        sets
    }

    /// Same maps and attributes, interactions restricted to the given list.
    pub fn restricted_to(&self, interactions: Vec<Interaction>) -> InteractionDataset {
        InteractionDataset {
            interactions,
            ..self.clone()
        }
    }

    /// Persist the dense id maps next to the other artifacts.
    pub fn write_id_maps(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = File::create(dir.join("user_map.csv"))?;
        writeln!(f, "user_id,index")?;
        for (i, ext) in self.user_ids.iter().enumerate() {
            writeln!(f, "{ext},{i}")?;
        }
        let mut f = File::create(dir.join("url_map.csv"))?;
        writeln!(f, "url_id,index")?;
        for (i, ext) in self.url_ids.iter().enumerate() {
            writeln!(f, "{ext},{i}")?;
        }
        Ok(())
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(f))
}

fn record_line(record: &csv::StringRecord) -> usize {
    record.position().map_or(0, |p| p.line() as usize)
}

fn csv_error(e: csv::Error) -> Error {
    let line = match e.position() {
        Some(p) => p.line() as usize,
        None => 0,
    };
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Load and deduplicate `interactions.csv` (`user_id,url_id,timestamp`; the
/// timestamp column may be omitted, in which case file order is time).
/// Filters users with fewer than three distinct URLs and re-indexes densely.
pub fn load_interactions(path: &Path) -> Result<InteractionDataset> {
    let mut reader = csv_reader(path)?;
    let headers = reader.headers().map_err(csv_error)?.clone();
    let has_ts = match headers.len() {
        2 => false,
        3 => true,
        n => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected 2 or 3 columns in interactions header, got {n}"),
            })
        }
    };

    struct RawRow {
        user: String,
        url: String,
        timestamp: i64,
        order: usize,
    }
    let mut rows = Vec::new();
    for (order, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let line = record_line(&record);
        let user = record.get(0).unwrap_or("").trim();
        let url = record.get(1).unwrap_or("").trim();
        if user.is_empty() || url.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "missing user or url column".into(),
            });
        }
        let timestamp = if has_ts {
            record
                .get(2)
                .unwrap_or("")
                .trim()
                .parse::<i64>()
                .map_err(|e| Error::Parse {
                    line,
                    msg: format!("bad timestamp: {e}"),
                })?
        } else {
            order as i64
        };
        rows.push(RawRow {
            user: user.to_string(),
            url: url.to_string(),
            timestamp,
            order,
        });
    }

    // distinct-url counts drive the minimum-history filter
    let mut per_user: HashMap<&str, HashSet<&str>> = HashMap::new();
    for r in &rows {
        per_user.entry(&r.user).or_default().insert(&r.url);
    }
    let keep: HashSet<&str> = per_user
        .iter()
        .filter(|(_, urls)| urls.len() >= MIN_INTERACTIONS_PER_USER)
        .map(|(u, _)| *u)
        .collect();

    let mut user_ids = Vec::new();
    let mut url_ids = Vec::new();
    let mut user_index: HashMap<String, UserId> = HashMap::new();
    let mut url_index: HashMap<String, UrlId> = HashMap::new();
    let mut merged: HashMap<(UserId, UrlId), Interaction> = HashMap::new();
    let mut pair_order = Vec::new();
    for r in &rows {
        if !keep.contains(r.user.as_str()) {
            continue;
        }
        let user = *user_index.entry(r.user.clone()).or_insert_with(|| {
            user_ids.push(r.user.clone());
            UserId(user_ids.len() - 1)
        });
        let url = *url_index.entry(r.url.clone()).or_insert_with(|| {
            url_ids.push(r.url.clone());
            UrlId(url_ids.len() - 1)
        });
        let key = (user, url);
        match merged.get_mut(&key) {
            Some(existing) => {
                existing.count += 1;
                if (r.timestamp, r.order) > (existing.timestamp, existing.order) {
                    existing.timestamp = r.timestamp;
                    existing.order = r.order;
                }
            }
            None => {
                pair_order.push(key);
                merged.insert(
                    key,
                    Interaction {
                        user,
                        url,
                        timestamp: r.timestamp,
                        order: r.order,
                        count: 1,
                    },
                );
            }
        }
    }
    let interactions: Vec<Interaction> = pair_order.iter().map(|k| merged[k]).collect();

    Ok(InteractionDataset {
        user_ids,
        url_ids,
        user_index,
        url_index,
        interactions,
        social_edges: Vec::new(),
        user_attrs: Vec::new(),
        url_attrs: Vec::new(),
        schema: None,
    })
}

/// Load `social.csv` (`follower_id,followee_id`). Edges touching unknown
/// users are dropped; returns the drop count.
pub fn load_social_edges(ds: &mut InteractionDataset, path: &Path) -> Result<usize> {
    let mut reader = csv_reader(path)?;
    let mut dropped = 0usize;
    let mut seen = HashSet::new();
    let mut edges = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record_line(&record);
        if record.len() < 2 {
            return Err(Error::Parse {
                line,
                msg: "expected follower_id,followee_id".into(),
            });
        }
        let follower = record.get(0).unwrap().trim();
        let followee = record.get(1).unwrap().trim();
        match (ds.user_id(follower), ds.user_id(followee)) {
            (Some(a), Some(b)) => {
                if a != b && seen.insert((a, b)) {
                    edges.push((a, b));
                }
            }
            _ => dropped += 1,
        }
    }
    ds.social_edges = edges;
    Ok(dropped)
}

/// Load attribute tables for users and URLs under the declared schema.
/// Entities missing from a file get the reserved unknown category / bucket 0.
pub fn load_attribute_tables(
    ds: &mut InteractionDataset,
    path_user: &Path,
    path_url: &Path,
    schema: &AttributeSchema,
) -> Result<()> {
    schema.validate()?;
    let user_attrs = load_attr_file(
        path_user,
        &schema.user_attrs,
        |ext| ds.user_index.get(ext).map(|u| u.0),
        ds.user_ids.len(),
    )?;
    let url_attrs = load_attr_file(
        path_url,
        &schema.url_attrs,
        |ext| ds.url_index.get(ext).map(|c| c.0),
        ds.url_ids.len(),
    )?;
    ds.user_attrs = user_attrs;
    ds.url_attrs = url_attrs;
    ds.schema = Some(schema.clone());
    Ok(())
}

fn load_attr_file(
    path: &Path,
    specs: &[AttrSpec],
    lookup: impl Fn(&str) -> Option<usize>,
    n_entities: usize,
) -> Result<Vec<Vec<AttrValue>>> {
    let mut reader = csv_reader(path)?;
    let headers = reader.headers().map_err(csv_error)?.clone();
    // first column is the entity id; the rest must name schema attributes
    let mut col_of_attr = Vec::with_capacity(specs.len());
    for spec in specs {
        let col = headers
            .iter()
            .position(|h| h.trim() == spec.name)
            .ok_or_else(|| {
                Error::Schema(format!(
                    "attribute column {:?} missing from {}",
                    spec.name,
                    path.display()
                ))
            })?;
        col_of_attr.push(col);
    }

    let mut table: Vec<Vec<AttrValue>> = (0..n_entities)
        .map(|_| specs.iter().map(AttrValue::unknown_for).collect())
        .collect();

    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record_line(&record);
        let ext = record.get(0).unwrap_or("").trim();
        let Some(idx) = lookup(ext) else {
            // attribute rows for filtered-out entities are ignored
            continue;
        };
        for (a, spec) in specs.iter().enumerate() {
            let raw = record.get(col_of_attr[a]).unwrap_or("").trim();
            table[idx][a] = parse_attr_value(raw, spec).map_err(|e| match e {
                Error::Schema(msg) => Error::Schema(format!("line {line}: {msg}")),
                other => other,
            })?;
        }
    }
    Ok(table)
}

fn parse_attr_value(raw: &str, spec: &AttrSpec) -> Result<AttrValue> {
    match &spec.kind {
        AttrKind::Categorical { vocab } => {
            if raw.is_empty() {
                return Ok(AttrValue::Categorical(0));
            }
            match vocab.iter().position(|v| v == raw) {
                Some(i) => Ok(AttrValue::Categorical(i + 1)),
                None => Err(Error::Schema(format!(
                    "value {raw:?} outside declared vocabulary of {:?}",
                    spec.name
                ))),
            }
        }
        AttrKind::Continuous { .. } => {
            if raw.is_empty() {
                return Ok(AttrValue::Continuous(0.0));
            }
            let v: f64 = raw.parse().map_err(|_| {
                Error::Schema(format!(
                    "value {raw:?} is not numeric for continuous attribute {:?}",
                    spec.name
                ))
            })?;
            // validates nonnegativity up front
            bucketize_continuous(v)?;
            Ok(AttrValue::Continuous(v))
        }
    }
}

/// Leave-one-out split: per user the latest interaction is test, the second
/// latest validation, the rest train. Evaluation candidates are fixed at
/// split time.
#[derive(Debug, Clone)]
pub struct SplitSet {
    pub train: Vec<Interaction>,
    /// One held-out interaction per user, indexed by dense user id.
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
    /// Fixed eval negatives per user.
    pub eval_negatives: Vec<Vec<UrlId>>,
    /// Full positive set per user (train + validation + test).
    pub positives: Vec<HashSet<UrlId>>,
    pub num_eval_negatives: usize,
}

impl SplitSet {
    /// Candidate list for a user's test instance: the positive plus the
    /// fixed negatives.
    pub fn test_candidates(&self, u: UserId) -> Vec<UrlId> {
        let mut c = Vec::with_capacity(1 + self.num_eval_negatives);
        c.push(self.test[u.0].url);
        c.extend_from_slice(&self.eval_negatives[u.0]);
        c
    }

    /// Candidates for the validation instance; mirrors the test protocol and
    /// shares the fixed negatives (none of them is a positive of the user).
    pub fn validation_candidates(&self, u: UserId) -> Vec<UrlId> {
        let mut c = Vec::with_capacity(1 + self.num_eval_negatives);
        c.push(self.validation[u.0].url);
        c.extend_from_slice(&self.eval_negatives[u.0]);
        c
    }

    /// Train-only view of the dataset, used for graph construction so held
    /// out interactions never leak into edge weights.
    pub fn train_view(&self, ds: &InteractionDataset) -> InteractionDataset {
        ds.restricted_to(self.train.clone())
    }
}

pub fn split_leave_one_out(
    ds: &InteractionDataset,
    num_eval_negatives: usize,
    seed: u64,
) -> Result<SplitSet> {
    let n = ds.n_users();
    let m = ds.n_urls();
    let mut per_user: Vec<Vec<Interaction>> = vec![Vec::new(); n];
    for i in &ds.interactions {
        per_user[i.user.0].push(*i);
    }

    let mut train = Vec::new();
    let mut validation = Vec::with_capacity(n);
    let mut test = Vec::with_capacity(n);
    let mut positives = vec![HashSet::new(); n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval_negatives = Vec::with_capacity(n);

    for u in 0..n {
        let items = &mut per_user[u];
        if items.len() < MIN_INTERACTIONS_PER_USER {
            return Err(Error::Split(format!(
                "user {} has {} interactions, need at least {}",
                ds.user_external(UserId(u)),
                items.len(),
                MIN_INTERACTIONS_PER_USER
            )));
        }
        items.sort_by_key(|i| (i.timestamp, i.order));
        let t = items.pop().unwrap();
        let v = items.pop().unwrap();
        positives[u].extend(items.iter().map(|i| i.url));
        positives[u].insert(v.url);
        positives[u].insert(t.url);
        train.extend_from_slice(items);
        validation.push(v);
        test.push(t);

        // uniform sample without replacement from the non-interacted URLs
        let mut complement: Vec<UrlId> = (0..m)
            .map(UrlId)
            .filter(|c| !positives[u].contains(c))
            .collect();
        if complement.len() < num_eval_negatives {
            return Err(Error::Split(format!(
                "user {} has only {} non-interacted URLs, cannot sample {} negatives",
                ds.user_external(UserId(u)),
                complement.len(),
                num_eval_negatives
            )));
        }
        for k in 0..num_eval_negatives {
            let pick = rng.gen_range(k..complement.len());
            complement.swap(k, pick);
        }
        complement.truncate(num_eval_negatives);
        eval_negatives.push(complement);
    }

    Ok(SplitSet {
        train,
        validation,
        test,
        eval_negatives,
        positives,
        num_eval_negatives,
    })
}

/// One labeled training instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledInstance {
    pub user: UserId,
    pub url: UrlId,
    pub label: f64,
}

/// Shuffled epoch of training instances: every train positive followed by
/// `neg_ratio` uniform negatives drawn from the user's non-interacted URLs.
pub fn epoch_instances(
    split: &SplitSet,
    n_urls: usize,
    neg_ratio: usize,
    seed: u64,
) -> Result<Vec<LabeledInstance>> {
    if neg_ratio < 1 {
        return Err(Error::Config(format!(
            "neg_ratio must be at least 1, got {neg_ratio}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    for k in (1..order.len()).rev() {
        let pick = rng.gen_range(0..=k);
        order.swap(k, pick);
    }

    let mut complements: HashMap<usize, Vec<UrlId>> = HashMap::new();
    let mut out = Vec::with_capacity(split.train.len() * (1 + neg_ratio));
    for idx in order {
        let pos = split.train[idx];
        let u = pos.user.0;
        let complement = complements.entry(u).or_insert_with(|| {
            (0..n_urls)
                .map(UrlId)
                .filter(|c| !split.positives[u].contains(c))
                .collect()
        });
        if complement.is_empty() {
            return Err(Error::Split(format!(
                "user index {u} interacted with every URL, cannot sample negatives"
            )));
        }
        out.push(LabeledInstance {
            user: pos.user,
            url: pos.url,
            label: 1.0,
        });
        for _ in 0..neg_ratio {
            let pick = complement[rng.gen_range(0..complement.len())];
            out.push(LabeledInstance {
                user: pos.user,
                url: pick,
                label: 0.0,
            });
        }
    }
    Ok(out)
}

/// First `batch_size` instances of a fresh epoch stream.
pub fn sample_training_batch(
    split: &SplitSet,
    n_urls: usize,
    batch_size: usize,
    neg_ratio: usize,
    seed: u64,
) -> Result<Vec<LabeledInstance>> {
    let mut all = epoch_instances(split, n_urls, neg_ratio, seed)?;
    all.truncate(batch_size);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn write_file(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, content).unwrap();
        p
    }

    fn toy_schema() -> AttributeSchema {
        AttributeSchema {
            user_attrs: vec![
                AttrSpec {
                    name: "kind".into(),
                    kind: AttrKind::Categorical {
                        vocab: vec!["a".into(), "b".into()],
                    },
                    dim: 4,
                },
                AttrSpec {
                    name: "followers".into(),
                    kind: AttrKind::Continuous { buckets: 12 },
                    dim: 4,
                },
            ],
            url_attrs: vec![
                AttrSpec {
                    name: "site".into(),
                    kind: AttrKind::Categorical {
                        vocab: vec!["x".into(), "y".into()],
                    },
                    dim: 4,
                },
                AttrSpec {
                    name: "posts".into(),
                    kind: AttrKind::Continuous { buckets: 12 },
                    dim: 4,
                },
            ],
        }
    }

    #[test]
    fn bucketize_matches_interval_rule() {
        assert_eq!(bucketize_continuous(0.4).unwrap(), 0);
        assert_eq!(bucketize_continuous(1.0).unwrap(), 1);
        assert_eq!(bucketize_continuous(5.0).unwrap(), 3);
        assert_eq!(bucketize_continuous(0.0).unwrap(), 0);
        assert!(bucketize_continuous(-0.1).is_err());
    }

    proptest! {
        #[test]
        fn bucketize_brackets_powers_of_two(v in 1.0f64..1e12) {
            let b = bucketize_continuous(v).unwrap();
            prop_assert!(b >= 1);
            prop_assert!(2f64.powi(b as i32 - 1) <= v);
            prop_assert!(v < 2f64.powi(b as i32));
        }

        #[test]
        fn bucketize_is_monotone(a in 0.0f64..1e9, b in 0.0f64..1e9) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(bucketize_continuous(lo).unwrap() <= bucketize_continuous(hi).unwrap());
        }
    }

    #[test]
    fn duplicate_pairs_are_merged() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "i.csv",
            "user_id,url_id,timestamp\nu1,A,1\nu1,B,2\nu1,A,9\nu1,C,3\n",
        );
        let ds = load_interactions(&p).unwrap();
        assert_eq!(ds.interactions.len(), 3);
        let a = ds
            .interactions
            .iter()
            .find(|i| ds.url_external(i.url) == "A")
            .unwrap();
        assert_eq!(a.count, 2);
        assert_eq!(a.timestamp, 9);
    }

    #[test]
    fn malformed_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "i.csv",
            "user_id,url_id,timestamp\nu1,A,1\nu1,,2\nu1,C,3\n",
        );
        match load_interactions(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn short_history_users_are_filtered() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "i.csv",
            "user_id,url_id,timestamp\nu1,A,1\nu1,B,2\nu1,C,3\nu2,D,1\n",
        );
        let ds = load_interactions(&p).unwrap();
        assert_eq!(ds.n_users(), 1);
        // url D only belonged to the filtered user and is gone
        assert_eq!(ds.n_urls(), 3);
        assert!(ds.url_id("D").is_none());
    }

    #[test]
    fn id_maps_are_stable_across_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "i.csv",
            "user_id,url_id,timestamp\nu2,B,5\nu2,A,1\nu1,A,2\nu1,C,3\nu1,B,9\nu2,C,7\n",
        );
        let a = load_interactions(&p).unwrap();
        let b = load_interactions(&p).unwrap();
        assert_eq!(a.user_ids, b.user_ids);
        assert_eq!(a.url_ids, b.url_ids);
    }

    #[test]
    fn social_edges_drop_unknown_users() {
        let dir = tempfile::tempdir().unwrap();
        let pi = write_file(
            dir.path(),
            "i.csv",
            "user_id,url_id,timestamp\nu1,A,1\nu1,B,2\nu1,C,3\nu2,A,1\nu2,B,2\nu2,C,4\n",
        );
        let ps = write_file(
            dir.path(),
            "s.csv",
            "follower_id,followee_id\nu1,u2\nu1,ghost\n",
        );
        let mut ds = load_interactions(&pi).unwrap();
        let dropped = load_social_edges(&mut ds, &ps).unwrap();
        assert_eq!(dropped, 1);
        assert_eq!(ds.social_edges.len(), 1);
    }

    #[test]
    fn empty_social_file_is_fine() {
        let dir = tempfile::tempdir().unwrap();
        let pi = write_file(
            dir.path(),
            "i.csv",
            "user_id,url_id,timestamp\nu1,A,1\nu1,B,2\nu1,C,3\n",
        );
        let ps = write_file(dir.path(), "s.csv", "follower_id,followee_id\n");
        let mut ds = load_interactions(&pi).unwrap();
        assert_eq!(load_social_edges(&mut ds, &ps).unwrap(), 0);
        assert!(ds.social_edges.is_empty());
    }

    #[test]
    fn attributes_fill_missing_and_reject_unknown_vocab() {
        let dir = tempfile::tempdir().unwrap();
        let pi = write_file(
            dir.path(),
            "i.csv",
            "user_id,url_id,timestamp\nu1,A,1\nu1,B,2\nu1,C,3\n",
        );
        let pu = write_file(dir.path(), "ua.csv", "user_id,kind,followers\nu1,a,1500\n");
        // url B missing entirely; url C has an empty category
        let pc = write_file(dir.path(), "ca.csv", "url_id,site,posts\nA,x,3\nC,,1\n");
        let mut ds = load_interactions(&pi).unwrap();
        load_attribute_tables(&mut ds, &pu, &pc, &toy_schema()).unwrap();
        assert_eq!(ds.user_attrs[0][0], AttrValue::Categorical(1));
        assert_eq!(ds.user_attrs[0][1], AttrValue::Continuous(1500.0));
        let b = ds.url_id("B").unwrap();
        assert_eq!(ds.url_attrs[b.0][0], AttrValue::Categorical(0));
        let c = ds.url_id("C").unwrap();
        assert_eq!(ds.url_attrs[c.0][0], AttrValue::Categorical(0));

        let bad = write_file(dir.path(), "bad.csv", "user_id,kind,followers\nu1,zzz,5\n");
        let err = load_attribute_tables(&mut ds, &bad, &pc, &toy_schema());
        assert!(matches!(err, Err(Error::Schema(_))));
    }

    #[test]
    fn wrong_kind_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let pi = write_file(
            dir.path(),
            "i.csv",
            "user_id,url_id,timestamp\nu1,A,1\nu1,B,2\nu1,C,3\n",
        );
        let pu = write_file(dir.path(), "ua.csv", "user_id,kind,followers\nu1,a,lots\n");
        let pc = write_file(dir.path(), "ca.csv", "url_id,site,posts\n");
        let mut ds = load_interactions(&pi).unwrap();
        let err = load_attribute_tables(&mut ds, &pu, &pc, &toy_schema());
        assert!(matches!(err, Err(Error::Schema(_))));
    }

    fn dataset_with(users: &[(&str, &[(&str, i64)])]) -> InteractionDataset {
        let dir = tempfile::tempdir().unwrap();
        let mut content = String::from("user_id,url_id,timestamp\n");
        for (u, items) in users {
            for (c, t) in *items {
                content.push_str(&format!("{u},{c},{t}\n"));
            }
        }
        let p = write_file(dir.path(), "i.csv", &content);
        load_interactions(&p).unwrap()
    }

    #[test]
    fn split_holds_out_latest_and_second_latest() {
        let ds = dataset_with(&[("u1", &[("A", 1), ("B", 2), ("C", 3)])]);
        let split = split_leave_one_out(&ds, 0, 7).unwrap();
        assert_eq!(ds.url_external(split.test[0].url), "C");
        assert_eq!(ds.url_external(split.validation[0].url), "B");
        assert_eq!(split.train.len(), 1);
        assert_eq!(ds.url_external(split.train[0].url), "A");
    }

    #[test]
    fn split_negatives_are_forced_when_exact() {
        // u1 interacts with 3 of 5 URLs; the other 2 are the only negatives
        let ds = dataset_with(&[
            ("u1", &[("A", 1), ("B", 2), ("C", 3)]),
            ("u2", &[("D", 1), ("E", 2), ("A", 3)]),
        ]);
        let split = split_leave_one_out(&ds, 2, 3).unwrap();
        let mut negs: Vec<&str> = split.eval_negatives[0]
            .iter()
            .map(|c| ds.url_external(*c))
            .collect();
        negs.sort();
        assert_eq!(negs, vec!["D", "E"]);
    }

    #[test]
    fn split_errors_when_negatives_unavailable() {
        let ds = dataset_with(&[("u1", &[("A", 1), ("B", 2), ("C", 3)])]);
        assert!(matches!(
            split_leave_one_out(&ds, 1, 3),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn split_is_deterministic() {
        let ds = dataset_with(&[
            ("u1", &[("A", 1), ("B", 2), ("C", 3)]),
            ("u2", &[("D", 4), ("E", 2), ("A", 3)]),
        ]);
        let a = split_leave_one_out(&ds, 2, 42).unwrap();
        let b = split_leave_one_out(&ds, 2, 42).unwrap();
        assert_eq!(a.eval_negatives, b.eval_negatives);
    }

    #[test]
    fn batch_groups_positive_with_negatives() {
        let ds = dataset_with(&[
            ("u1", &[("A", 1), ("B", 2), ("C", 3)]),
            ("u2", &[("D", 1), ("E", 2), ("F", 3), ("G", 4), ("H", 5)]),
        ]);
        let split = split_leave_one_out(&ds, 0, 1).unwrap();
        // u1 contributes exactly one train positive
        let batch = sample_training_batch(&split, ds.n_urls(), 5, 4, 9).unwrap();
        assert_eq!(batch.len(), 5);
        assert_eq!(batch.iter().filter(|i| i.label == 1.0).count(), 1);
        let pos = batch.iter().find(|i| i.label == 1.0).unwrap();
        for neg in batch.iter().filter(|i| i.label == 0.0) {
            assert_eq!(neg.user, pos.user);
        }
    }

    #[test]
    fn zero_neg_ratio_is_config_error() {
        let ds = dataset_with(&[("u1", &[("A", 1), ("B", 2), ("C", 3)])]);
        let split = split_leave_one_out(&ds, 0, 1).unwrap();
        assert!(matches!(
            sample_training_batch(&split, ds.n_urls(), 5, 0, 9),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn negatives_never_hit_positive_set() {
        // membership oracle over at least 10^4 draws
        let ds = dataset_with(&[
            ("u1", &[("A", 1), ("B", 2), ("C", 3)]),
            ("u2", &[("C", 1), ("D", 2), ("E", 3), ("F", 4)]),
            ("u3", &[("A", 5), ("D", 1), ("F", 2)]),
        ]);
        let split = split_leave_one_out(&ds, 1, 3).unwrap();
        let mut draws = 0usize;
        for seed in 0..700 {
            let epoch = epoch_instances(&split, ds.n_urls(), 4, seed).unwrap();
            for inst in epoch.iter().filter(|i| i.label == 0.0) {
                assert!(
                    !split.positives[inst.user.0].contains(&inst.url),
                    "negative collided with positive set"
                );
                draws += 1;
            }
        }
        assert!(draws >= 10_000, "only {draws} negative draws exercised");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn leave_one_out_ordering_holds(n_users in 1usize..6, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut content = String::from("user_id,url_id,timestamp\n");
            for u in 0..n_users {
                let k = rng.gen_range(3usize..8);
                let mut used = HashSet::new();
                while used.len() < k {
                    let c = rng.gen_range(0..12u32);
                    if used.insert(c) {
                        content.push_str(&format!("u{u},c{c},{}\n", rng.gen_range(0i64..1000)));
                    }
                }
            }
            let dir = tempfile::tempdir().unwrap();
            let p = write_file(dir.path(), "i.csv", &content);
            let ds = load_interactions(&p).unwrap();
            let split = split_leave_one_out(&ds, 0, seed).unwrap();
            for u in 0..ds.n_users() {
                let tt = split.test[u].timestamp;
                let tv = split.validation[u].timestamp;
                prop_assert!(tt >= tv);
                for tr in split.train.iter().filter(|i| i.user.0 == u) {
                    prop_assert!(tr.timestamp <= tv);
                }
            }
        }
    }
}
