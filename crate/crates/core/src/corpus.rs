//! User image collections: ingestion, activity filtering, background
//! selection and chronological train/test splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

/// One posted image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub user_id: String,
    pub image_id: String,
    /// Seconds since the epoch.
    pub timestamp: u64,
    /// Category label. Only metric training and mAP evaluation read it.
    pub label: Option<String>,
    pub features: Vec<f64>,
}

impl ImageRecord {
    fn chrono_key(&self) -> (u64, &str) {
        (self.timestamp, self.image_id.as_str())
    }
}

/// Per-user image sequences, each sorted by timestamp with ties broken by
/// image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserCorpus {
    users: BTreeMap<String, Vec<ImageRecord>>,
    feature_dim: usize,
}

impl UserCorpus {
    /// Builds a corpus from loose records, enforcing the fixed feature
    /// dimension and `(user_id, image_id)` uniqueness.
    pub fn from_records(records: impl IntoIterator<Item = ImageRecord>) -> Result<Self> {
        let mut users: BTreeMap<String, Vec<ImageRecord>> = BTreeMap::new();
        let mut feature_dim = None;
        let mut seen = BTreeSet::new();
        for (i, r) in records.into_iter().enumerate() {
            let dim = *feature_dim.get_or_insert(r.features.len());
            if r.features.len() != dim {
                return Err(Error::FeatureDim {
                    line: i + 1,
                    expected: dim,
                    found: r.features.len(),
                });
            }
            if !seen.insert((r.user_id.clone(), r.image_id.clone())) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate image {} for user {}", r.image_id, r.user_id),
                });
            }
            users.entry(r.user_id.clone()).or_default().push(r);
        }
        Ok(Self::from_groups(users, feature_dim.unwrap_or(0)))
    }

    fn from_groups(mut users: BTreeMap<String, Vec<ImageRecord>>, feature_dim: usize) -> Self {
        users.retain(|_, v| !v.is_empty());
        for seq in users.values_mut() {
            seq.sort_by(|a, b| a.chrono_key().cmp(&b.chrono_key()));
        }
        UserCorpus { users, feature_dim }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_images(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn user(&self, user_id: &str) -> Option<&[ImageRecord]> {
        self.users.get(user_id).map(Vec::as_slice)
    }

    pub fn user_ids(&self) -> impl Iterator<Item = &str> {
        self.users.keys().map(String::as_str)
    }

    /// Users in ascending id order.
    pub fn users(&self) -> impl Iterator<Item = (&str, &[ImageRecord])> {
        self.users.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// All records, users in id order, each user chronological.
    pub fn records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.users.values().flatten()
    }

    /// Replaces every record's feature vector, keeping ids, order and labels.
    pub fn map_features<F>(&self, mut f: F) -> Result<UserCorpus>
    where
        F: FnMut(&ImageRecord) -> Result<Vec<f64>>,
    {
        let mut dim = None;
        let mut users = BTreeMap::new();
        for (uid, seq) in &self.users {
            let mut out = Vec::with_capacity(seq.len());
            for r in seq {
                let features = f(r)?;
                let d = *dim.get_or_insert(features.len());
                crate::linalg::check_dim(d, features.len())?;
                out.push(ImageRecord {
                    features,
                    ..r.clone()
                });
            }
            users.insert(uid.clone(), out);
        }
        Ok(UserCorpus {
            users,
            feature_dim: dim.unwrap_or(0),
        })
    }

    /// Keeps the users for which `keep` returns true.
    pub fn retain_users<F: FnMut(&str, &[ImageRecord]) -> bool>(&self, mut keep: F) -> UserCorpus {
        UserCorpus {
            users: self
                .users
                .iter()
                .filter(|(k, v)| keep(k, v))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            feature_dim: self.feature_dim,
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in self.records() {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    /// Guesses from the file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(CorpusFormat::Jsonl),
            "csv" => Ok(CorpusFormat::Csv),
            other => Err(Error::InvalidInput(format!("unknown corpus format `{other}`"))),
        }
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<UserCorpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        CorpusFormat::Jsonl => read_jsonl(BufReader::new(file)),
        CorpusFormat::Csv => read_csv(file),
    }
}

/// Reads one JSON record per line. Blank lines and lines starting with `#`
/// are skipped.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<UserCorpus> {
    let mut users: BTreeMap<String, Vec<ImageRecord>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        add_record(&mut users, &mut seen, &mut dim, rec, line_no)?;
    }
    Ok(UserCorpus::from_groups(users, dim.unwrap_or(0)))
}

/// Reads `user_id,image_id,timestamp,label,f0..f{F-1}`; an empty label is null.
pub fn read_csv<R: Read>(reader: R) -> Result<UserCorpus> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let header_err = |message: String| Error::Parse { line: 1, message };
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(header_err(e.to_string())),
    };
    if headers.is_empty() {
        return Ok(UserCorpus::default());
    }
    let fixed = ["user_id", "image_id", "timestamp", "label"];
    if headers.len() < fixed.len() || fixed.iter().zip(headers.iter()).any(|(a, b)| *a != b) {
        return Err(header_err(format!(
            "expected header starting with {}",
            fixed.join(",")
        )));
    }
    for (j, h) in headers.iter().skip(fixed.len()).enumerate() {
        if h != format!("f{j}") {
            return Err(header_err(format!("feature column {j} should be named f{j}, found `{h}`")));
        }
    }
    let dim = headers.len() - fixed.len();

    let mut users: BTreeMap<String, Vec<ImageRecord>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let mut corpus_dim = Some(dim);
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line_no = row.position().map_or(0, |p| p.line() as usize);
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        if row.len() < fixed.len() {
            return Err(parse_err(format!("expected at least {} fields", fixed.len())));
        }
        let timestamp = row[2]
            .trim()
            .parse::<u64>()
            .map_err(|e| parse_err(format!("timestamp: {e}")))?;
        let label = (!row[3].is_empty()).then(|| row[3].to_string());
        let features = row
            .iter()
            .skip(fixed.len())
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(format!("feature: {e}")))?;
        let rec = ImageRecord {
            user_id: row[0].to_string(),
            image_id: row[1].to_string(),
            timestamp,
            label,
            features,
        };
        add_record(&mut users, &mut seen, &mut corpus_dim, rec, line_no)?;
    }
    Ok(UserCorpus::from_groups(users, dim))
}

fn add_record(
    users: &mut BTreeMap<String, Vec<ImageRecord>>,
    seen: &mut BTreeSet<(String, String)>,
    dim: &mut Option<usize>,
    rec: ImageRecord,
    line: usize,
) -> Result<()> {
    let expected = *dim.get_or_insert(rec.features.len());
    if rec.features.len() != expected {
        return Err(Error::FeatureDim {
            line,
            expected,
            found: rec.features.len(),
        });
    }
    if rec.features.iter().any(|x| !x.is_finite()) {
        return Err(Error::Parse {
            line,
            message: "non-finite feature value".into(),
        });
    }
    if !seen.insert((rec.user_id.clone(), rec.image_id.clone())) {
        return Err(Error::Parse {
            line,
            message: format!("duplicate image {} for user {}", rec.image_id, rec.user_id),
        });
    }
    users.entry(rec.user_id.clone()).or_default().push(rec);
    Ok(())
}

/// Keeps users with at least `min_pins` images and at least one image posted
/// at or after `cutoff_time`.
pub fn filter_active(corpus: &UserCorpus, min_pins: usize, cutoff_time: u64) -> UserCorpus {
    corpus.retain_users(|_, seq| {
        seq.len() >= min_pins && seq.iter().any(|r| r.timestamp >= cutoff_time)
    })
}

/// Seeded uniform sample of `n_users` users without replacement. Returns
/// `(background, remainder)`.
pub fn select_background(
    corpus: &UserCorpus,
    n_users: usize,
    seed: u64,
) -> Result<(UserCorpus, UserCorpus)> {
    let total = corpus.n_users();
    if n_users > total {
        return Err(Error::InsufficientData(format!(
            "requested {n_users} background users from a population of {total}"
        )));
    }
    let mut rng = seed::rng(seed);
    let picked: BTreeSet<usize> = index::sample(&mut rng, total, n_users).into_iter().collect();
    let ids: BTreeSet<&str> = corpus
        .user_ids()
        .enumerate()
        .filter(|(i, _)| picked.contains(i))
        .map(|(_, id)| id)
        .collect();
    let background = corpus.retain_users(|id, _| ids.contains(id));
    let remainder = corpus.retain_users(|id, _| !ids.contains(id));
    Ok((background, remainder))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub sample_size: usize,
    pub test_size: usize,
    pub train_size: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            sample_size: 100,
            test_size: 50,
            train_size: 50,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size == 0 || self.test_size == 0 || self.train_size == 0 {
            return Err(Error::InvalidInput("split sizes must be positive".into()));
        }
        if self.train_size + self.test_size > self.sample_size {
            return Err(Error::InvalidInput(format!(
                "train_size {} + test_size {} exceeds sample_size {}",
                self.train_size, self.test_size, self.sample_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<'a> {
    pub train: Vec<&'a ImageRecord>,
    pub test: Vec<&'a ImageRecord>,
}

/// Subsamples `sample_size` records (seeded per user), keeps them in
/// chronological order, and takes the first `train_size` as train and the
/// last `test_size` as test.
///
/// The subsample depends only on `spec.seed`, the user id and
/// `sample_size`, so varying `train_size` leaves the test side unchanged.
pub fn chronological_split<'a>(records: &'a [ImageRecord], spec: &SplitSpec) -> Result<Split<'a>> {
    spec.validate()?;
    let user_id = records.first().map_or("", |r| r.user_id.as_str());
    if records.len() < spec.sample_size {
        return Err(Error::User {
            user_id: user_id.to_string(),
            message: format!(
                "has {} records, split needs {}",
                records.len(),
                spec.sample_size
            ),
        });
    }
    let mut rng = seed::rng(seed::derive(spec.seed, user_id));
    let mut picked = index::sample(&mut rng, records.len(), spec.sample_size).into_vec();
    picked.sort_unstable();
    let sample: Vec<&ImageRecord> = picked.into_iter().map(|i| &records[i]).collect();
    let train = sample[..spec.train_size].to_vec();
    let test = sample[spec.sample_size - spec.test_size..].to_vec();
    Ok(Split { train, test })
}
