//! Grades keyed by (guideline content id, sample id).

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::Agents;
use crate::error::{AgentError, WorkbenchError};
use crate::model::{AnswerSample, GradingOutput, Guideline};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeEntry {
    pub guideline: String,
    pub sample: String,
    pub output: GradingOutput,
}

/// Append-only grade store. Entries are kept in insertion order so the
/// persisted log is identical across runs with the same seed.
#[derive(Debug, Default, Clone)]
pub struct GradeCache {
    entries: Vec<GradeEntry>,
    index: HashMap<(String, String), usize>,
    flushed: usize,
}

impl GradeCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, guideline: &str, sample: &str) -> Option<&GradingOutput> {
        self.index
            .get(&(guideline.to_string(), sample.to_string()))
            .map(|&i| &self.entries[i].output)
    }

    pub fn insert(&mut self, guideline: &str, sample: &str, output: GradingOutput) {
        let key = (guideline.to_string(), sample.to_string());
        if self.index.contains_key(&key) {
            return;
        }
        self.index.insert(key, self.entries.len());
        self.entries.push(GradeEntry {
            guideline: guideline.to_string(),
            sample: sample.to_string(),
            output,
        });
    }

    /// Grade `samples` under `g`, calling the grader only for misses.
    /// Failures are returned but never cached.
    pub fn grade(
        &mut self,
        agents: &Agents,
        g: &Guideline,
        samples: &[&AnswerSample],
    ) -> Vec<Result<GradingOutput, AgentError>> {
        let gid = g.content_id();
        let misses: Vec<&AnswerSample> = samples
            .iter()
            .copied()
            .filter(|s| self.get(&gid, &s.id).is_none())
            .collect();
        let mut fresh: HashMap<&str, Result<GradingOutput, AgentError>> = misses
            .iter()
            .map(|s| s.id.as_str())
            .zip(agents.grade_all(&misses, g))
            .collect();
        for s in &misses {
            if let Some(Ok(out)) = fresh.get(s.id.as_str()) {
                self.insert(&gid, &s.id, out.clone());
            }
        }
        samples
            .iter()
            .map(|s| match self.get(&gid, &s.id) {
                Some(out) => Ok(out.clone()),
                // Sample ids are unique within a dataset, so each failure is taken once.
                None => fresh.remove(s.id.as_str()).unwrap_or_else(|| {
                    Err(AgentError::Unparseable {
                        attempts: 0,
                        last: String::new(),
                    })
                }),
            })
            .collect()
    }

    /// Append entries added since the last flush to `path`.
    pub fn flush(&mut self, path: &Path) -> Result<(), WorkbenchError> {
        let io = |source| WorkbenchError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        let mut w = BufWriter::new(file);
        for e in &self.entries[self.flushed..] {
            let line = serde_json::to_string(e).map_err(|source| WorkbenchError::Json {
                path: path.to_path_buf(),
                source,
            })?;
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)?;
        self.flushed = self.entries.len();
        Ok(())
    }

    /// Load the first `len` entries of `path` and truncate the file to them,
    /// dropping anything written after the checkpoint that recorded `len`.
    pub fn restore(path: &Path, len: usize) -> Result<Self, WorkbenchError> {
        let io = |source| WorkbenchError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut cache = Self::default();
        if len > 0 {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (i, line) in reader.lines().take(len).enumerate() {
                let line = line.map_err(io)?;
                let e: GradeEntry =
                    serde_json::from_str(&line).map_err(|err| WorkbenchError::Parse {
                        line: i + 1,
                        message: format!("{}: {err}", path.display()),
                    })?;
                cache.insert(&e.guideline, &e.sample, e.output);
            }
            if cache.len() != len {
                return Err(WorkbenchError::Invalid(format!(
                    "{} holds {} grades, checkpoint expects {len}",
                    path.display(),
                    cache.len()
                )));
            }
        }
        cache.flushed = cache.len();
        let mut file = File::create(path).map_err(io)?;
        let mut w = BufWriter::new(&mut file);
        for e in &cache.entries {
            let line = serde_json::to_string(e).map_err(|source| WorkbenchError::Json {
                path: path.to_path_buf(),
                source,
            })?;
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)?;
        Ok(cache)
    }
}
