//! Single-directory, versioned, human-readable scenario database.
//!
//! Layout:
//! ```text
//! <root>/taxonomy.json          registered tag trees
//! <root>/scenarios/<id>.json    one document per scenario
//! <root>/logs/<id>.json         ingested driving logs
//! <root>/decomp/<log-id>.json   per-log events and activities
//! <root>/classes/<name>.json    scenario classes with fitted densities
//! ```
//! Every document carries a schema version field `"v": 1` and is written in
//! canonical form (sorted keys, shortest-round-trip floats), so identical
//! content always produces identical bytes. Scenario ids are content
//! addressed, which makes ingestion idempotent.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{content_id, to_canonical_json_pretty};
use crate::scenario::{ScenarioError, ScenarioRecord};
use crate::tags::{default_taxonomy, TagError, TagQuery, TagRef, TagTree, Taxonomy};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DbError {
    #[error("storage failure: {0}")]
    StorageFailure(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error(transparent)]
    InvariantViolation(#[from] ScenarioError),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error("document '{0}' not found")]
    NotFound(String),
    #[error("unsupported schema version {found} in '{path}' (expected {SCHEMA_VERSION})")]
    VersionMismatch { path: String, found: u32 },
}

#[derive(Serialize, Deserialize)]
struct Document<T> {
    v: u32,
    #[serde(flatten)]
    body: T,
}

/// Handle to a scenario database directory. All stored values are immutable
/// documents; concurrent readers are safe, writers must be exclusive.
#[derive(Debug, Clone)]
pub struct ScenarioDb {
    root: PathBuf,
}

impl ScenarioDb {
    /// Opens a database directory, creating it (with the default taxonomy)
    /// when absent.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, DbError> {
        let db = Self { root: root.into() };
        for dir in ["scenarios", "logs", "decomp", "classes"] {
            fs::create_dir_all(db.root.join(dir))?;
        }
        if !db.taxonomy_path().exists() {
            db.write_doc(&db.taxonomy_path(), &default_taxonomy())?;
        }
        Ok(db)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn taxonomy_path(&self) -> PathBuf {
        self.root.join("taxonomy.json")
    }

    fn scenario_path(&self, id: &str) -> PathBuf {
        self.root.join("scenarios").join(format!("{id}.json"))
    }

    fn write_doc<T: Serialize>(&self, path: &Path, body: &T) -> Result<(), DbError> {
        let doc = Document {
            v: SCHEMA_VERSION,
            body,
        };
        let text = to_canonical_json_pretty(&doc)?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text.as_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    fn read_doc<T: DeserializeOwned>(&self, path: &Path) -> Result<T, DbError> {
        if !path.exists() {
            return Err(DbError::NotFound(path.display().to_string()));
        }
        let text = fs::read_to_string(path)?;
        let doc: Document<T> = serde_json::from_str(&text)?;
        if doc.v != SCHEMA_VERSION {
            return Err(DbError::VersionMismatch {
                path: path.display().to_string(),
                found: doc.v,
            });
        }
        Ok(doc.body)
    }

    // ---- taxonomy ----

    pub fn taxonomy(&self) -> Result<Taxonomy, DbError> {
        self.read_doc(&self.taxonomy_path())
    }

    /// Registers a tag tree and persists the taxonomy. Returns the tree id.
    pub fn register_tree(&self, tree: TagTree) -> Result<String, DbError> {
        let mut taxonomy = self.taxonomy()?;
        let id = taxonomy.register_tree(tree)?;
        self.write_doc(&self.taxonomy_path(), &taxonomy)?;
        Ok(id)
    }

    pub fn replace_taxonomy(&self, taxonomy: &Taxonomy) -> Result<(), DbError> {
        for tree in taxonomy.trees.values() {
            tree.validate()?;
        }
        self.write_doc(&self.taxonomy_path(), taxonomy)
    }

    // ---- scenarios ----

    /// Stores a scenario after checking its invariants and tag assignment.
    /// The id is the hash of the canonical content, so storing identical
    /// content twice returns the same id without rewriting.
    pub fn store_scenario(&self, record: &ScenarioRecord) -> Result<String, DbError> {
        record.validate()?;
        let taxonomy = self.taxonomy()?;
        taxonomy.check_mutual_exclusion(&record.tags)?;
        let mut content = record.clone();
        content.id = String::new();
        let id = content_id(&content)?;
        content.id = id.clone();
        let path = self.scenario_path(&id);
        if !path.exists() {
            self.write_doc(&path, &content)?;
        }
        Ok(id)
    }

    pub fn fetch_scenario(&self, id: &str) -> Result<ScenarioRecord, DbError> {
        self.read_doc(&self.scenario_path(id))
    }

    /// Attaches tags to a stored scenario, enforcing the per-layer mutual
    /// exclusion rule over the combined set. Returns the updated record
    /// under its new content id (the old document is removed).
    pub fn assign_tags(
        &self,
        id: &str,
        tags: &BTreeSet<TagRef>,
    ) -> Result<ScenarioRecord, DbError> {
        let mut record = self.fetch_scenario(id)?;
        let taxonomy = self.taxonomy()?;
        let mut combined = record.tags.clone();
        combined.extend(tags.iter().cloned());
        taxonomy.check_mutual_exclusion(&combined)?;
        record.tags = combined;
        let new_id = self.store_scenario(&record)?;
        if new_id != id {
            fs::remove_file(self.scenario_path(id))?;
        }
        record.id = new_id;
        Ok(record)
    }

    pub fn list_scenarios(&self) -> Result<Vec<String>, DbError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(self.root.join("scenarios"))? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(id) = name.strip_suffix(".json") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Evaluates a tag query over all stored scenarios. A parent tag matches
    /// itself and all descendants. Result ids are sorted.
    pub fn query_scenarios(&self, query: &TagQuery) -> Result<Vec<String>, DbError> {
        let taxonomy = self.taxonomy()?;
        let mut hits = Vec::new();
        for id in self.list_scenarios()? {
            let record = self.fetch_scenario(&id)?;
            if query.eval(&taxonomy, &record.tags)? {
                hits.push(id);
            }
        }
        Ok(hits)
    }

    /// Database-wide invariant audit. Returns one message per violation.
    pub fn audit(&self) -> Result<Vec<String>, DbError> {
        let taxonomy = self.taxonomy()?;
        let mut violations = Vec::new();
        for tree in taxonomy.trees.values() {
            if let Err(e) = tree.validate() {
                violations.push(format!("taxonomy tree '{}': {e}", tree.name));
            }
        }
        for id in self.list_scenarios()? {
            let record = match self.fetch_scenario(&id) {
                Ok(r) => r,
                Err(e) => {
                    violations.push(format!("scenario {id}: unreadable: {e}"));
                    continue;
                }
            };
            if record.id != id {
                violations.push(format!("scenario {id}: stored id mismatch '{}'", record.id));
            }
            if let Err(e) = record.validate() {
                violations.push(format!("scenario {id}: {e}"));
            }
            if let Err(e) = taxonomy.check_mutual_exclusion(&record.tags) {
                violations.push(format!("scenario {id}: {e}"));
            }
        }
        Ok(violations)
    }

    // ---- generic named documents (logs, decompositions, classes) ----

    pub fn store_log(&self, log: &crate::ingest::DrivingLog) -> Result<String, DbError> {
        let id = if log.source_id.is_empty() {
            content_id(log)?
        } else {
            log.source_id.clone()
        };
        self.write_doc(&self.root.join("logs").join(format!("{id}.json")), log)?;
        Ok(id)
    }

    pub fn load_log(&self, id: &str) -> Result<crate::ingest::DrivingLog, DbError> {
        self.read_doc(&self.root.join("logs").join(format!("{id}.json")))
    }

    pub fn list_logs(&self) -> Result<Vec<String>, DbError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(self.root.join("logs"))? {
            let name = entry?.file_name().to_string_lossy().to_string();
            if let Some(id) = name.strip_suffix(".json") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn store_decomposition(
        &self,
        log_id: &str,
        decomp: &crate::decompose::LogDecomposition,
    ) -> Result<(), DbError> {
        self.write_doc(
            &self.root.join("decomp").join(format!("{log_id}.json")),
            decomp,
        )
    }

    pub fn load_decomposition(
        &self,
        log_id: &str,
    ) -> Result<crate::decompose::LogDecomposition, DbError> {
        self.read_doc(&self.root.join("decomp").join(format!("{log_id}.json")))
    }

    pub fn store_class(&self, doc: &crate::mining::ClassDocument) -> Result<(), DbError> {
        self.write_doc(
            &self.root.join("classes").join(format!("{}.json", doc.class.name)),
            doc,
        )
    }

    pub fn load_class(&self, name: &str) -> Result<crate::mining::ClassDocument, DbError> {
        self.read_doc(&self.root.join("classes").join(format!("{name}.json")))
    }
}
