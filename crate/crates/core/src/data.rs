//! Users, jobs, interaction logs, and their JSON-Lines files.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::schema::{fold_term, vectorize_terms, BlockSchema, BlockTerms, FieldVector};

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub user_id: String,
    pub terms: BlockTerms,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobPosting {
    pub job_id: String,
    pub terms: BlockTerms,
}

/// Event types, ordered by interaction strength.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Impression,
    View,
    Apply,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: String,
    pub job_id: String,
    pub action: Action,
    pub position: u32,
    pub day: i64,
}

/// Half-open day range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[i64; 2]", into = "[i64; 2]")]
pub struct DayWindow {
    pub start: i64,
    pub end: i64,
}

impl DayWindow {
    pub fn new(start: i64, end: i64) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, day: i64) -> bool {
        day >= self.start && day < self.end
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

impl From<[i64; 2]> for DayWindow {
    fn from(v: [i64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<DayWindow> for [i64; 2] {
    fn from(w: DayWindow) -> Self {
        [w.start, w.end]
    }
}

/// Items read from a file plus the number of out-of-vocabulary terms dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded<T> {
    pub items: Vec<T>,
    pub dropped_terms: usize,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn load_termed(
    path: &Path,
    schema: &BlockSchema,
    id_key: &str,
) -> Result<Loaded<(String, BlockTerms)>> {
    let mut items = Vec::new();
    let mut dropped = 0;
    let mut seen = HashSet::new();
    for (line_no, line) in read_lines(path)? {
        let value: Value =
            serde_json::from_str(&line).map_err(|e| parse_err(path, line_no, e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| parse_err(path, line_no, "expected a JSON object"))?;
        let id = obj
            .get(id_key)
            .and_then(Value::as_str)
            .ok_or_else(|| parse_err(path, line_no, format!("missing string `{id_key}`")))?;
        if id.is_empty() {
            return Err(Error::Validation(format!(
                "{}:{line_no}: empty {id_key}",
                path.display()
            )));
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::Validation(format!(
                "{}:{line_no}: duplicate {id_key} `{id}`",
                path.display()
            )));
        }
        if let Some(k) = obj
            .keys()
            .find(|k| k.as_str() != id_key && schema.block_index(k).is_none())
        {
            return Err(parse_err(path, line_no, format!("unknown block `{k}`")));
        }
        let mut terms: BlockTerms = vec![Vec::new(); schema.num_blocks()];
        for (b, slot) in terms.iter_mut().enumerate() {
            let Some(raw) = obj.get(schema.block_name(b)) else {
                continue;
            };
            let arr = raw.as_array().ok_or_else(|| {
                parse_err(
                    path,
                    line_no,
                    format!("block `{}` must be an array", schema.block_name(b)),
                )
            })?;
            for t in arr {
                let t = t
                    .as_str()
                    .ok_or_else(|| parse_err(path, line_no, "terms must be strings"))?;
                if schema.term_index(b, t).is_some() {
                    slot.push(fold_term(t));
                } else {
                    log::warn!(
                        "{}:{line_no}: dropping unknown term `{t}` in block `{}`",
                        path.display(),
                        schema.block_name(b)
                    );
                    dropped += 1;
                }
            }
        }
        items.push((id.to_string(), terms));
    }
    Ok(Loaded {
        items,
        dropped_terms: dropped,
    })
}

pub fn load_users(path: &Path, schema: &BlockSchema) -> Result<Loaded<UserProfile>> {
    let l = load_termed(path, schema, "user_id")?;
    Ok(Loaded {
        items: l
            .items
            .into_iter()
            .map(|(user_id, terms)| UserProfile { user_id, terms })
            .collect(),
        dropped_terms: l.dropped_terms,
    })
}

pub fn load_jobs(path: &Path, schema: &BlockSchema) -> Result<Loaded<JobPosting>> {
    let l = load_termed(path, schema, "job_id")?;
    Ok(Loaded {
        items: l
            .items
            .into_iter()
            .map(|(job_id, terms)| JobPosting { job_id, terms })
            .collect(),
        dropped_terms: l.dropped_terms,
    })
}

pub fn load_events(path: &Path) -> Result<Vec<InteractionEvent>> {
    let mut out = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let e: InteractionEvent =
            serde_json::from_str(&line).map_err(|e| parse_err(path, line_no, e.to_string()))?;
        if e.action == Action::Impression && e.position == 0 {
            return Err(Error::Validation(format!(
                "{}:{line_no}: impression position must be >= 1",
                path.display()
            )));
        }
        out.push(e);
    }
    Ok(out)
}

fn termed_line(out: &mut String, id_key: &str, id: &str, terms: &BlockTerms, schema: &BlockSchema) {
    out.push('{');
    let _ = write!(out, "\"{id_key}\":{}", Value::from(id));
    for b in 0..schema.num_blocks() {
        let list = terms.get(b).cloned().unwrap_or_default();
        let _ = write!(
            out,
            ",{}:{}",
            Value::from(schema.block_name(b)),
            Value::from(list)
        );
    }
    out.push_str("}\n");
}

/// Canonical JSON-Lines form: id first, then every block in schema order.
pub fn users_to_jsonl(users: &[UserProfile], schema: &BlockSchema) -> String {
    let mut out = String::new();
    for u in users {
        termed_line(&mut out, "user_id", &u.user_id, &u.terms, schema);
    }
    out
}

pub fn jobs_to_jsonl(jobs: &[JobPosting], schema: &BlockSchema) -> String {
    let mut out = String::new();
    for j in jobs {
        termed_line(&mut out, "job_id", &j.job_id, &j.terms, schema);
    }
    out
}

pub fn events_to_jsonl(events: &[InteractionEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    out
}

/// Users, jobs, and events with id indexes and precomputed field vectors.
///
/// Immutable after construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: BlockSchema,
    pub users: Vec<UserProfile>,
    pub jobs: Vec<JobPosting>,
    pub events: Vec<InteractionEvent>,
    user_index: HashMap<String, usize>,
    job_index: HashMap<String, usize>,
    profiles: Vec<FieldVector>,
    job_vectors: Vec<FieldVector>,
}

impl Dataset {
    pub fn new(
        schema: BlockSchema,
        users: Vec<UserProfile>,
        jobs: Vec<JobPosting>,
        events: Vec<InteractionEvent>,
    ) -> Result<Self> {
        let mut user_index = HashMap::with_capacity(users.len());
        for (i, u) in users.iter().enumerate() {
            if u.user_id.is_empty() {
                return Err(Error::Validation("empty user_id".into()));
            }
            if user_index.insert(u.user_id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate user_id `{}`", u.user_id)));
            }
        }
        let mut job_index = HashMap::with_capacity(jobs.len());
        for (i, j) in jobs.iter().enumerate() {
            if j.job_id.is_empty() {
                return Err(Error::Validation("empty job_id".into()));
            }
            if job_index.insert(j.job_id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate job_id `{}`", j.job_id)));
            }
        }
        for e in &events {
            if !user_index.contains_key(&e.user_id) {
                return Err(Error::DanglingReference {
                    kind: "user",
                    id: e.user_id.clone(),
                });
            }
            if !job_index.contains_key(&e.job_id) {
                return Err(Error::DanglingReference {
                    kind: "job",
                    id: e.job_id.clone(),
                });
            }
        }
        let profiles = users.iter().map(|u| vectorize_terms(&u.terms, &schema)).collect();
        let job_vectors = jobs.iter().map(|j| vectorize_terms(&j.terms, &schema)).collect();
        Ok(Self {
            schema,
            users,
            jobs,
            events,
            user_index,
            job_index,
            profiles,
            job_vectors,
        })
    }

    /// Loads `schema.json`, `users.jsonl`, `jobs.jsonl`, `events.jsonl` from one directory.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let schema = BlockSchema::load(&dir.join("schema.json"))?;
        let users = load_users(&dir.join("users.jsonl"), &schema)?.items;
        let jobs = load_jobs(&dir.join("jobs.jsonl"), &schema)?.items;
        let events = load_events(&dir.join("events.jsonl"))?;
        Self::new(schema, users, jobs, events)
    }

    pub fn user_offset(&self, user_id: &str) -> Option<usize> {
        self.user_index.get(user_id).copied()
    }

    pub fn job_offset(&self, job_id: &str) -> Option<usize> {
        self.job_index.get(job_id).copied()
    }

    /// Profile-derived vector `u_p` for a user offset.
    pub fn profile(&self, user: usize) -> &FieldVector {
        &self.profiles[user]
    }

    pub fn job_vector(&self, job: usize) -> &FieldVector {
        &self.job_vectors[job]
    }

    pub fn job_vectors(&self) -> &[FieldVector] {
        &self.job_vectors
    }

    pub fn events_in(&self, window: DayWindow) -> impl Iterator<Item = &InteractionEvent> {
        self.events.iter().filter(move |e| window.contains(e.day))
    }
}
