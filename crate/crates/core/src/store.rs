//! File-backed stores for learned user fields and trained models.
//!
//! Every write goes to a temporary file in the target directory and is renamed
//! into place, so readers see either the old or the new complete file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::features::FeatureSpace;
use crate::hash::digest_str;
use crate::hier::{HierModelFile, UserLatents};
use crate::schema::{BlockSchema, FieldVector};

/// A temporary sibling of `target` that replaces it on [`StagedFile::commit`].
/// Dropping it uncommitted removes the temporary and leaves `target` untouched.
pub struct StagedFile {
    target: PathBuf,
    temp: PathBuf,
    file: Option<fs::File>,
}

impl StagedFile {
    pub fn create(target: &Path) -> Result<Self> {
        let dir = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let name = target
            .file_name()
            .ok_or_else(|| Error::Config(format!("{} is not a file path", target.display())))?
            .to_string_lossy();
        let temp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
        let file = fs::File::create(&temp).map_err(|e| Error::io(&temp, e))?;
        Ok(Self {
            target: target.to_path_buf(),
            temp,
            file: Some(file),
        })
    }

    pub fn write_all(&mut self, bytes: &[u8]) -> Result<()> {
        let file = self.file.as_mut().expect("staged file is open until commit");
        file.write_all(bytes).map_err(|e| Error::io(&self.temp, e))
    }

    pub fn temp_path(&self) -> &Path {
        &self.temp
    }

    pub fn commit(mut self) -> Result<()> {
        let file = self.file.take().expect("staged file is open until commit");
        file.sync_all().map_err(|e| Error::io(&self.temp, e))?;
        drop(file);
        fs::rename(&self.temp, &self.target).map_err(|e| Error::io(&self.target, e))
    }
}

impl Drop for StagedFile {
    fn drop(&mut self) {
        if self.file.take().is_some() {
            let _ = fs::remove_file(&self.temp);
        }
    }
}

/// Writes `bytes` to `path` through a [`StagedFile`].
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut staged = StagedFile::create(path)?;
    staged.write_all(bytes)?;
    staged.commit()
}

/// Where a user's serving fields came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldSource {
    Learned,
    ProfileFallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredFields {
    pub u_v: FieldVector,
    pub u_a: FieldVector,
    pub updated_day: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct StoreHeader {
    model: String,
    schema_hash: String,
    feature_config_hash: String,
}

/// `user_id -> (u_v, u_a, updated_day)`, persisted as JSON Lines: one header
/// line with the model name and hashes, then one record per user in id order.
#[derive(Debug, Clone)]
pub struct UserFieldsStore {
    path: PathBuf,
    schema: BlockSchema,
    header: StoreHeader,
    records: BTreeMap<String, StoredFields>,
}

impl UserFieldsStore {
    /// Opens the store at `path`, or an empty one if the file does not exist.
    /// An existing file written for another model, schema, or feature config is an error.
    pub fn open(path: &Path, model: &str, schema: &BlockSchema, features: &FeatureSpace) -> Result<Self> {
        let header = StoreHeader {
            model: model.to_string(),
            schema_hash: schema.hash(),
            feature_config_hash: features.config().hash(),
        };
        let mut store = Self {
            path: path.to_path_buf(),
            schema: schema.clone(),
            header,
            records: BTreeMap::new(),
        };
        if !path.exists() {
            return Ok(store);
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let corrupt = |line: usize, message: String| Error::CorruptRecord {
            path: path.to_path_buf(),
            message: format!("line {line}: {message}"),
        };
        if let Some((i, first)) = lines.next() {
            let found: StoreHeader = serde_json::from_str(first).map_err(|e| corrupt(i + 1, e.to_string()))?;
            store.check_header(&found)?;
        }
        for (i, line) in lines {
            let v: Value = serde_json::from_str(line).map_err(|e| corrupt(i + 1, e.to_string()))?;
            let (user_id, fields) = store.record_from_json(&v).map_err(|e| corrupt(i + 1, e.to_string()))?;
            store.records.insert(user_id, fields);
        }
        Ok(store)
    }

    fn check_header(&self, found: &StoreHeader) -> Result<()> {
        let pairs = [
            ("fields store model", &self.header.model, &found.model),
            ("fields store schema", &self.header.schema_hash, &found.schema_hash),
            ("fields store feature config", &self.header.feature_config_hash, &found.feature_config_hash),
        ];
        for (what, expected, found) in pairs {
            if expected != found {
                return Err(Error::HashMismatch {
                    what,
                    expected: expected.clone(),
                    found: found.clone(),
                });
            }
        }
        Ok(())
    }

    fn record_from_json(&self, v: &Value) -> Result<(String, StoredFields)> {
        let user_id = v
            .get("user_id")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Validation("missing user_id".into()))?;
        let vector = |k: &str| {
            v.get(k)
                .ok_or_else(|| Error::Validation(format!("missing {k}")))
                .and_then(|x| self.schema.vector_from_json(x))
        };
        let updated_day = v
            .get("updated_day")
            .and_then(Value::as_i64)
            .ok_or_else(|| Error::Validation("missing updated_day".into()))?;
        Ok((
            user_id.to_string(),
            StoredFields {
                u_v: vector("u_v")?,
                u_a: vector("u_a")?,
                updated_day,
            },
        ))
    }

    fn serialize(&self, records: &BTreeMap<String, StoredFields>) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for (user_id, f) in records {
            let line = serde_json::json!({
                "user_id": user_id,
                "u_v": self.schema.vector_to_json(&f.u_v),
                "u_a": self.schema.vector_to_json(&f.u_a),
                "updated_day": f.updated_day,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn model(&self) -> &str {
        &self.header.model
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes the merged store to a staged file without replacing the current one.
    /// Later entries in `batch` win over earlier ones and over stored records.
    pub fn stage_push(&self, batch: &[UserLatents], day: i64) -> Result<PendingPush> {
        let d = self.schema.dim();
        let mut records = self.records.clone();
        for lat in batch {
            for v in [&lat.u_v, &lat.u_a] {
                if v.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: v.len(),
                    });
                }
            }
            records.insert(
                lat.user_id.clone(),
                StoredFields {
                    u_v: lat.u_v.clone(),
                    u_a: lat.u_a.clone(),
                    updated_day: day,
                },
            );
        }
        let mut staged = StagedFile::create(&self.path)?;
        staged.write_all(self.serialize(&records).as_bytes())?;
        Ok(PendingPush {
            staged,
            records,
            written: batch.len(),
        })
    }

    /// Pushes `batch` and returns the number of records written. An empty
    /// batch leaves the file untouched.
    pub fn push(&mut self, batch: &[UserLatents], day: i64) -> Result<usize> {
        if batch.is_empty() {
            return Ok(0);
        }
        let pending = self.stage_push(batch, day)?;
        let written = pending.written;
        self.records = pending.commit()?;
        Ok(written)
    }

    /// The stored record, or `None` if the user has none.
    pub fn get(&self, user_id: &str) -> Option<&StoredFields> {
        self.records.get(user_id)
    }

    /// Learned fields when present, otherwise the profile on both layers.
    pub fn get_user_fields(&self, user_id: &str, profile: &FieldVector) -> (FieldVector, FieldVector, FieldSource) {
        match self.get(user_id) {
            Some(f) => (f.u_v.clone(), f.u_a.clone(), FieldSource::Learned),
            None => (profile.clone(), profile.clone(), FieldSource::ProfileFallback),
        }
    }
}

/// A push written to disk but not yet renamed into place.
pub struct PendingPush {
    staged: StagedFile,
    records: BTreeMap<String, StoredFields>,
    written: usize,
}

impl PendingPush {
    pub fn temp_path(&self) -> &Path {
        self.staged.temp_path()
    }

    fn commit(self) -> Result<BTreeMap<String, StoredFields>> {
        self.staged.commit()?;
        Ok(self.records)
    }
}

/// `meta.json` next to each model blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model: String,
    pub schema_hash: String,
    pub feature_config_hash: String,
    pub blob_sha256: String,
}

/// `model_store/<name>/{blob.json, meta.json}`.
#[derive(Debug, Clone)]
pub struct ModelStore {
    root: PathBuf,
}

impl ModelStore {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    fn entry(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn save(&self, model: &HierModelFile) -> Result<()> {
        let dir = self.entry(&model.model);
        let blob = serde_json::to_string_pretty(model).expect("model serializes") + "\n";
        let meta = ModelMeta {
            model: model.model.clone(),
            schema_hash: model.schema_hash.clone(),
            feature_config_hash: model.feature_config_hash.clone(),
            blob_sha256: digest_str(&blob),
        };
        // Blob first: a reader holding the old meta sees a digest mismatch, never a silent mix.
        write_atomic(&dir.join("blob.json"), blob.as_bytes())?;
        write_atomic(
            &dir.join("meta.json"),
            (serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n").as_bytes(),
        )
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entry(name).join("meta.json").exists()
    }

    /// Loads a model and checks it against the current schema and feature config.
    pub fn load(&self, name: &str, schema: &BlockSchema, features: &FeatureSpace) -> Result<HierModelFile> {
        let dir = self.entry(name);
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Err(Error::MissingModel(name.to_string()));
        }
        let read = |p: PathBuf| fs::read_to_string(&p).map_err(|e| Error::io(&p, e));
        let meta_text = read(meta_path.clone())?;
        let meta: ModelMeta = serde_json::from_str(&meta_text).map_err(|e| Error::CorruptRecord {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;
        let blob_path = dir.join("blob.json");
        let blob = read(blob_path.clone())?;
        let digest = digest_str(&blob);
        if digest != meta.blob_sha256 {
            return Err(Error::HashMismatch {
                what: "model blob",
                expected: meta.blob_sha256,
                found: digest,
            });
        }
        let model: HierModelFile = serde_json::from_str(&blob).map_err(|e| Error::CorruptRecord {
            path: blob_path,
            message: e.to_string(),
        })?;
        model.check_hashes(schema, features)?;
        Ok(model)
    }
}
