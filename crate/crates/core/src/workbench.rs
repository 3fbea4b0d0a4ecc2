//! Dataset ingestion and run-directory persistence.
//!
//! Run directory layout:
//!
//! ```text
//! run.json                 manifest
//! checkpoints/t{t}_w{w}.json
//! checkpoints/final.json
//! history.jsonl            one record per inner iteration
//! grades.jsonl             grade cache, append-only
//! final_guideline.json
//! ```
//!
//! Embedding caches live beside the dataset they were computed for.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{GatewayError, WorkbenchError};
use crate::gateway::Gateway;
use crate::model::{AnswerSample, Guideline, LabeledSample, RunConfig, Score, ScoreScale};
use crate::optimizer::{IterationRecord, RunCheckpoint, CHECKPOINT_SCHEMA_VERSION};
use crate::rng::{substream, Stream};

pub const MANIFEST_FILE: &str = "run.json";
pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const GRADES_FILE: &str = "grades.jsonl";
pub const FINAL_GUIDELINE_FILE: &str = "final_guideline.json";
pub const LOCK_FILE: &str = ".lock";

/// Train/val/test proportions for records without an explicit split.
pub const SPLIT_RATIO: [f64; 3] = [0.7, 0.1, 0.2];

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> WorkbenchError + '_ {
    move |source| WorkbenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path) -> impl Fn(serde_json::Error) -> WorkbenchError + '_ {
    move |source| WorkbenchError::Json {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[serde(alias = "validation", alias = "dev")]
    Val,
    Test,
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub question_id: String,
    pub answer_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Score>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rater_meta: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Answers to one question with optional labels and split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub question_id: String,
    pub samples: Vec<AnswerSample>,
    pub labels: BTreeMap<String, Score>,
    pub rater_meta: BTreeMap<String, String>,
    pub splits: Splits,
    /// SHA-256 of the file bytes.
    pub content_hash: String,
}

impl DatasetBundle {
    fn sample(&self, id: &str) -> &AnswerSample {
        self.samples
            .iter()
            .find(|s| s.id == id)
            .expect("split ids exist in the bundle")
    }

    pub fn answers(&self, split: Split) -> Vec<AnswerSample> {
        self.splits
            .get(split)
            .iter()
            .map(|id| self.sample(id).clone())
            .collect()
    }

    /// Samples of `split` with their labels; every one must be labeled.
    pub fn labeled(&self, split: Split) -> Result<Vec<LabeledSample>, WorkbenchError> {
        self.splits
            .get(split)
            .iter()
            .map(|id| self.labeled_sample(id))
            .collect()
    }

    /// Every sample, in file order, with its label.
    pub fn all_labeled(&self) -> Result<Vec<LabeledSample>, WorkbenchError> {
        self.samples.iter().map(|s| self.labeled_sample(&s.id)).collect()
    }

    fn labeled_sample(&self, id: &str) -> Result<LabeledSample, WorkbenchError> {
        let label = *self
            .labels
            .get(id)
            .ok_or_else(|| WorkbenchError::MissingLabel(id.to_string()))?;
        Ok(LabeledSample {
            sample: self.sample(id).clone(),
            label,
            rater_meta: self.rater_meta.get(id).cloned(),
        })
    }
}

/// Parse a line-delimited dataset file.
pub fn load_dataset(path: &Path, scale: &ScoreScale, seed: u64) -> Result<DatasetBundle, WorkbenchError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|e| WorkbenchError::Invalid(format!("{}: not UTF-8: {e}", path.display())))?;
    let mut bundle = parse_dataset(&text, scale, seed)?;
    bundle.content_hash = sha256_hex(&bytes);
    Ok(bundle)
}

/// Parse dataset records from text. Records without a split are shuffled
/// with the split substream of `seed` and cut 7:1:2.
pub fn parse_dataset(text: &str, scale: &ScoreScale, seed: u64) -> Result<DatasetBundle, WorkbenchError> {
    let mut question_id: Option<String> = None;
    let mut samples = Vec::new();
    let mut labels = BTreeMap::new();
    let mut rater_meta = BTreeMap::new();
    let mut splits = Splits::default();
    let mut unassigned = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| WorkbenchError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.id.is_empty() {
            return Err(WorkbenchError::Parse {
                line: line_no,
                message: "empty id".into(),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(WorkbenchError::DuplicateId {
                line: line_no,
                id: rec.id,
            });
        }
        match &question_id {
            None => question_id = Some(rec.question_id.clone()),
            Some(q) if *q != rec.question_id => {
                return Err(WorkbenchError::MixedQuestions {
                    line: line_no,
                    expected: q.clone(),
                    found: rec.question_id,
                })
            }
            Some(_) => {}
        }
        if let Some(label) = rec.label {
            if !scale.contains(label) {
                return Err(WorkbenchError::UnknownLabel { line: line_no, label });
            }
            labels.insert(rec.id.clone(), label);
        }
        if let Some(meta) = rec.rater_meta {
            rater_meta.insert(rec.id.clone(), meta);
        }
        match rec.split {
            Some(split) => splits.get_mut(split).push(rec.id.clone()),
            None => unassigned.push(rec.id.clone()),
        }
        samples.push(AnswerSample::new(rec.id, rec.question_id, rec.answer_text));
    }
    let question_id =
        question_id.ok_or_else(|| WorkbenchError::Invalid("dataset has no records".into()))?;

    let n = unassigned.len();
    unassigned.shuffle(&mut substream(seed, Stream::Split));
    let n_train = ((n as f64 * SPLIT_RATIO[0]).round() as usize).min(n);
    let n_val = ((n as f64 * SPLIT_RATIO[1]).round() as usize).min(n - n_train);
    for (i, id) in unassigned.into_iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        splits.get_mut(split).push(id);
    }

    Ok(DatasetBundle {
        question_id,
        samples,
        labels,
        rater_meta,
        splits,
        content_hash: sha256_hex(text.as_bytes()),
    })
}

/// Human annotations `{id, label}`, one per line.
pub fn load_annotations(path: &Path, scale: &ScoreScale) -> Result<BTreeMap<String, Score>, WorkbenchError> {
    #[derive(Deserialize)]
    struct Annotation {
        id: String,
        label: Score,
    }
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = serde_json::from_str(&line).map_err(|e| WorkbenchError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !scale.contains(a.label) {
            return Err(WorkbenchError::UnknownLabel {
                line: i + 1,
                label: a.label,
            });
        }
        if out.insert(a.id.clone(), a.label).is_some() {
            return Err(WorkbenchError::DuplicateId { line: i + 1, id: a.id });
        }
    }
    Ok(out)
}

/// Guideline from a JSON file. A document with a top-level `guideline`
/// object (such as a training result) is unwrapped.
pub fn load_guideline(path: &Path) -> Result<Guideline, WorkbenchError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut value: Value = serde_json::from_str(&text).map_err(json_err(path))?;
    if let Some(inner) = value.get_mut("guideline") {
        value = inner.take();
    }
    let g: Guideline = serde_json::from_value(value).map_err(json_err(path))?;
    g.check()
        .map_err(|e| WorkbenchError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(g)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, WorkbenchError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(json_err(path))
}

/// Pretty JSON written to a temporary sibling, then renamed into place.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), WorkbenchError> {
    let mut text = serde_json::to_string_pretty(value).map_err(json_err(path))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), WorkbenchError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), WorkbenchError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).map_err(json_err(path))?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, WorkbenchError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(WorkbenchError::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Training,
    Adaptation,
    Grading,
}

/// Identity of a run. Carries no timestamps so that reruns write identical
/// bytes; wall-clock data lives in `timings.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub stage: Stage,
    pub config: RunConfig,
    pub dataset_hash: String,
    pub guideline_hash: String,
    pub backend: String,
}

impl RunManifest {
    pub fn new(
        stage: Stage,
        config: RunConfig,
        dataset_hash: String,
        guideline_hash: String,
        backend: String,
    ) -> Self {
        let seed = format!("{stage:?}\0{dataset_hash}\0{guideline_hash}\0{}", config.rng_seed);
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            run_id: sha256_hex(seed.as_bytes())[..12].to_string(),
            stage,
            config,
            dataset_hash,
            guideline_hash,
            backend,
        }
    }

    /// Compare against a manifest already in `dir`, or write this one.
    pub fn establish(&self, dir: &Path, resume: bool) -> Result<(), WorkbenchError> {
        let path = dir.join(MANIFEST_FILE);
        if resume && path.exists() {
            let existing: RunManifest = read_json(&path)?;
            if existing.schema_version != self.schema_version {
                return Err(WorkbenchError::SchemaVersion {
                    found: existing.schema_version,
                    expected: self.schema_version,
                });
            }
            for (what, a, b) in [
                ("dataset", &existing.dataset_hash, &self.dataset_hash),
                ("guideline", &existing.guideline_hash, &self.guideline_hash),
            ] {
                if a != b {
                    return Err(WorkbenchError::HashMismatch {
                        what,
                        expected: a.clone(),
                        found: b.clone(),
                    });
                }
            }
            return Ok(());
        }
        write_json_atomic(&path, self)
    }
}

pub fn grades_path(dir: &Path) -> PathBuf {
    dir.join(GRADES_FILE)
}

fn checkpoint_name(ckpt: &RunCheckpoint) -> String {
    match (&ckpt.result, ckpt.history.last()) {
        (Some(_), _) => FINAL_CHECKPOINT.to_string(),
        (None, Some(r)) => format!("t{}_w{}.json", r.t, r.w),
        (None, None) => "t0_w0.json".to_string(),
    }
}

pub fn save_checkpoint(dir: &Path, ckpt: &RunCheckpoint) -> Result<PathBuf, WorkbenchError> {
    let path = dir.join(CHECKPOINTS_DIR).join(checkpoint_name(ckpt));
    write_json_atomic(&path, ckpt)?;
    Ok(path)
}

/// Read a checkpoint, checking its schema version before decoding the rest.
pub fn load_checkpoint(path: &Path) -> Result<RunCheckpoint, WorkbenchError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let value: Value = serde_json::from_str(&text).map_err(json_err(path))?;
    let found = value
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| WorkbenchError::Invalid(format!("{}: missing schema_version", path.display())))?;
    if found != u64::from(CHECKPOINT_SCHEMA_VERSION) {
        return Err(WorkbenchError::SchemaVersion {
            found: found as u32,
            expected: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    serde_json::from_value(value).map_err(json_err(path))
}

fn parse_coords(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix('t')?.strip_suffix(".json")?;
    let (t, w) = rest.split_once("_w")?;
    Some((t.parse().ok()?, w.parse().ok()?))
}

/// The final checkpoint if present, else the one with the largest (t, w).
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>, WorkbenchError> {
    let ckdir = dir.join(CHECKPOINTS_DIR);
    if !ckdir.exists() {
        return Ok(None);
    }
    let final_path = ckdir.join(FINAL_CHECKPOINT);
    if final_path.exists() {
        return Ok(Some(final_path));
    }
    let mut best: Option<((usize, usize), PathBuf)> = None;
    for entry in fs::read_dir(&ckdir).map_err(io_err(&ckdir))? {
        let entry = entry.map_err(io_err(&ckdir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(c) = parse_coords(&name) {
            if best.as_ref().is_none_or(|(b, _)| c > *b) {
                best = Some((c, entry.path()));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Prepare `dir` for a fresh run. Refuses when checkpoints already exist;
/// leftovers of a run that never checkpointed are removed.
pub fn prepare_fresh_run(dir: &Path) -> Result<(), WorkbenchError> {
    if latest_checkpoint(dir)?.is_some() {
        return Err(WorkbenchError::Invalid(format!(
            "{} already holds checkpoints; resume it or use another run directory",
            dir.display()
        )));
    }
    for name in [HISTORY_FILE, GRADES_FILE, FINAL_GUIDELINE_FILE] {
        let p = dir.join(name);
        if p.exists() {
            fs::remove_file(&p).map_err(io_err(&p))?;
        }
    }
    Ok(())
}

pub fn write_history(dir: &Path, history: &[IterationRecord]) -> Result<(), WorkbenchError> {
    write_jsonl(&dir.join(HISTORY_FILE), history)
}

pub fn append_timing(path: &Path, t: usize, w: usize, ms: u64) -> Result<(), WorkbenchError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    writeln!(f, "{}", serde_json::json!({"t": t, "w": w, "wall_clock_ms": ms})).map_err(io_err(path))
}

/// Embeddings keyed by backend and answer text, stored as TSV
/// (`key<TAB>comma-separated floats`).
#[derive(Debug)]
pub struct EmbeddingCache {
    path: PathBuf,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn open(path: &Path) -> Result<Self, WorkbenchError> {
        let mut vectors = HashMap::new();
        if path.exists() {
            let file = File::open(path).map_err(io_err(path))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err(path))?;
                let bad = |message: String| WorkbenchError::Parse { line: i + 1, message };
                let (key, values) = line
                    .split_once('\t')
                    .ok_or_else(|| bad("expected key<TAB>values".into()))?;
                let v = values
                    .split(',')
                    .map(|x| x.parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| bad(e.to_string()))?;
                vectors.insert(key.to_string(), v);
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            vectors,
        })
    }

    /// Cache file beside `dataset`, named by the dataset's content hash.
    pub fn beside(dataset: &Path, content_hash: &str) -> Result<Self, WorkbenchError> {
        let stem = dataset
            .file_stem()
            .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
        let name = format!("{stem}.emb-{}.tsv", &content_hash[..content_hash.len().min(12)]);
        Self::open(&dataset.with_file_name(name))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    fn key(backend: &str, text: &str) -> String {
        sha256_hex(format!("{backend}\0{text}").as_bytes())[..32].to_string()
    }

    /// Fill in missing embeddings, computing and persisting cache misses.
    pub fn attach(&mut self, gateway: &Gateway, samples: &mut [AnswerSample]) -> Result<(), WorkbenchError> {
        let backend = gateway.descriptor();
        let mut fresh: Vec<(String, Vec<f64>)> = Vec::new();
        for s in samples.iter_mut().filter(|s| s.embedding.is_none()) {
            let key = Self::key(&backend, &s.answer_text);
            let v = match self.vectors.get(&key) {
                Some(v) => v.clone(),
                None => {
                    let v = gateway.embed(&s.answer_text).map_err(|e: GatewayError| {
                        WorkbenchError::Invalid(format!("embedding {}: {e}", s.id))
                    })?;
                    self.vectors.insert(key.clone(), v.clone());
                    fresh.push((key, v.clone()));
                    v
                }
            };
            s.embedding = Some(v);
        }
        if fresh.is_empty() {
            return Ok(());
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io_err(&self.path))?;
        let mut w = BufWriter::new(file);
        for (key, v) in fresh {
            let values: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{key}\t{}", values.join(",")).map_err(io_err(&self.path))?;
        }
        w.flush().map_err(io_err(&self.path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, label: Option<Score>) -> String {
        let mut v = serde_json::json!({"id": id, "question_id": "q1", "answer_text": format!("answer {id}")});
        if let Some(l) = label {
            v["label"] = l.into();
        }
        v.to_string()
    }

    fn ten() -> String {
        (0..10).map(|i| record(&format!("r{i}"), Some(i % 3)) + "\n").collect()
    }

    #[test]
    fn seven_one_two_split() {
        let b = parse_dataset(&ten(), &ScoreScale::default(), 42).unwrap();
        assert_eq!(
            (b.splits.train.len(), b.splits.val.len(), b.splits.test.len()),
            (7, 1, 2)
        );
        let again = parse_dataset(&ten(), &ScoreScale::default(), 42).unwrap();
        assert_eq!(b.splits, again.splits);
    }

    #[test]
    fn explicit_splits_are_kept() {
        let text = format!(
            "{}\n{}\n",
            r#"{"id":"a","question_id":"q","answer_text":"x","label":1,"split":"test"}"#,
            r#"{"id":"b","question_id":"q","answer_text":"y","split":"validation"}"#
        );
        let b = parse_dataset(&text, &ScoreScale::default(), 0).unwrap();
        assert_eq!(b.splits.test, ["a"]);
        assert_eq!(b.splits.val, ["b"]);
        assert!(matches!(b.labeled(Split::Val), Err(WorkbenchError::MissingLabel(id)) if id == "b"));
        assert_eq!(b.answers(Split::Val)[0].answer_text, "y");
    }

    #[test]
    fn line_accurate_errors() {
        let s = ScoreScale::default();
        let dup = format!("{}\n\n{}\n", record("a", None), record("a", None));
        assert!(matches!(
            parse_dataset(&dup, &s, 0),
            Err(WorkbenchError::DuplicateId { line: 3, .. })
        ));
        let bad = format!("{}\n{}\n", record("a", Some(1)), record("b", Some(3)));
        assert!(matches!(
            parse_dataset(&bad, &s, 0),
            Err(WorkbenchError::UnknownLabel { line: 2, label: 3 })
        ));
        assert!(matches!(
            parse_dataset("{not json}\n", &s, 0),
            Err(WorkbenchError::Parse { line: 1, .. })
        ));
        let mixed = format!(
            "{}\n{}\n",
            record("a", None),
            r#"{"id":"b","question_id":"q2","answer_text":"x"}"#
        );
        assert!(matches!(
            parse_dataset(&mixed, &s, 0),
            Err(WorkbenchError::MixedQuestions { line: 2, .. })
        ));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(WorkbenchError::Locked(_))));
        drop(lock);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn checkpoint_names_order_numerically() {
        assert_eq!(parse_coords("t10_w2.json"), Some((10, 2)));
        assert_eq!(parse_coords("final.json"), None);
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join(CHECKPOINTS_DIR);
        fs::create_dir_all(&ck).unwrap();
        for n in ["t2_w0.json", "t10_w1.json", "t9_w2.json"] {
            fs::write(ck.join(n), "{}").unwrap();
        }
        assert_eq!(
            latest_checkpoint(dir.path()).unwrap().unwrap(),
            ck.join("t10_w1.json")
        );
    }

    #[test]
    fn schema_version_is_checked_first() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"schema_version": 2, "other": true}"#).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(WorkbenchError::SchemaVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn embedding_cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        let gw = Gateway::mock();
        let mut samples = vec![AnswerSample::new("a", "q", "ratio proportional")];
        EmbeddingCache::open(&path).unwrap().attach(&gw, &mut samples).unwrap();
        let first = samples[0].embedding.clone().unwrap();
        let mut again = vec![AnswerSample::new("a", "q", "ratio proportional")];
        let mut cache = EmbeddingCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
        cache.attach(&gw, &mut again).unwrap();
        assert_eq!(again[0].embedding.as_ref().unwrap(), &first);
        assert_eq!(gw.stats().embed_attempts, 1);
    }
}
