//! Durable feedback store on SQLite.
//!
//! ```sql
//! CREATE TABLE feedback (
//!     feedback_id     TEXT PRIMARY KEY,
//!     image_id        TEXT NOT NULL,
//!     kind            TEXT NOT NULL CHECK (kind IN ('wrong_label', 'wrong_evidence')),
//!     suggested_label INTEGER,
//!     prototype_id    INTEGER,
//!     comment         TEXT,
//!     created_at      TEXT NOT NULL,   -- RFC 3339, UTC
//!     model_version   TEXT NOT NULL,
//!     image_class     INTEGER NOT NULL -- catalog label of the image when submitted
//! );
//! ```
//!
//! The database runs in WAL mode with `synchronous = FULL`, so an insert
//! that returns has been committed durably.

use std::path::Path;

use parking_lot::Mutex;
use rusqlite::{params, Connection, OptionalExtension, Row};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    WrongLabel,
    WrongEvidence,
}

impl FeedbackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackKind::WrongLabel => "wrong_label",
            FeedbackKind::WrongEvidence => "wrong_evidence",
        }
    }

    fn parse(s: &str) -> rusqlite::Result<Self> {
        match s {
            "wrong_label" => Ok(FeedbackKind::WrongLabel),
            "wrong_evidence" => Ok(FeedbackKind::WrongEvidence),
            other => Err(rusqlite::Error::InvalidColumnType(
                0,
                format!("unknown feedback kind {other}"),
                rusqlite::types::Type::Text,
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub feedback_id: String,
    pub image_id: String,
    pub kind: FeedbackKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suggested_label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prototype_id: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    pub created_at: String,
    pub model_version: String,
    pub image_class: usize,
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS feedback (
    feedback_id     TEXT PRIMARY KEY,
    image_id        TEXT NOT NULL,
    kind            TEXT NOT NULL CHECK (kind IN ('wrong_label', 'wrong_evidence')),
    suggested_label INTEGER,
    prototype_id    INTEGER,
    comment         TEXT,
    created_at      TEXT NOT NULL,
    model_version   TEXT NOT NULL,
    image_class     INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS feedback_by_version ON feedback (model_version);
";

const COLUMNS: &str =
    "feedback_id, image_id, kind, suggested_label, prototype_id, comment, created_at, model_version, image_class";

fn from_row(row: &Row<'_>) -> rusqlite::Result<FeedbackRecord> {
    let kind: String = row.get(2)?;
    Ok(FeedbackRecord {
        feedback_id: row.get(0)?,
        image_id: row.get(1)?,
        kind: FeedbackKind::parse(&kind)?,
        suggested_label: row.get::<_, Option<i64>>(3)?.map(|v| v as usize),
        prototype_id: row.get::<_, Option<i64>>(4)?.map(|v| v as usize),
        comment: row.get(5)?,
        created_at: row.get(6)?,
        model_version: row.get(7)?,
        image_class: row.get::<_, i64>(8)? as usize,
    })
}

/// Writes are serialised through one connection.
#[derive(Debug)]
pub struct FeedbackStore {
    conn: Mutex<Connection>,
}

impl FeedbackStore {
    pub fn open(path: impl AsRef<Path>) -> rusqlite::Result<Self> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        Self::init(conn)
    }

    pub fn in_memory() -> rusqlite::Result<Self> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> rusqlite::Result<Self> {
        conn.pragma_update(None, "synchronous", "FULL")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self { conn: Mutex::new(conn) })
    }

    /// Inserts inside a transaction; returns once committed.
    pub fn insert(&self, record: &FeedbackRecord) -> rusqlite::Result<()> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction()?;
        tx.execute(
            &format!("INSERT INTO feedback ({COLUMNS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)"),
            params![
                record.feedback_id,
                record.image_id,
                record.kind.as_str(),
                record.suggested_label.map(|v| v as i64),
                record.prototype_id.map(|v| v as i64),
                record.comment,
                record.created_at,
                record.model_version,
                record.image_class as i64,
            ],
        )?;
        tx.commit()
    }

    pub fn get(&self, feedback_id: &str) -> rusqlite::Result<Option<FeedbackRecord>> {
        let conn = self.conn.lock();
        conn.query_row(
            &format!("SELECT {COLUMNS} FROM feedback WHERE feedback_id = ?1"),
            [feedback_id],
            from_row,
        )
        .optional()
    }

    /// Records for one model version, oldest first.
    pub fn list(&self, model_version: &str) -> rusqlite::Result<Vec<FeedbackRecord>> {
        let conn = self.conn.lock();
        let mut stmt = conn.prepare(&format!(
            "SELECT {COLUMNS} FROM feedback WHERE model_version = ?1 ORDER BY created_at, feedback_id"
        ))?;
        let rows = stmt.query_map([model_version], from_row)?;
        rows.collect()
    }

    pub fn count(&self) -> rusqlite::Result<usize> {
        let conn = self.conn.lock();
        conn.query_row("SELECT COUNT(*) FROM feedback", [], |r| r.get::<_, i64>(0))
            .map(|n| n as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, kind: FeedbackKind) -> FeedbackRecord {
        FeedbackRecord {
            feedback_id: id.into(),
            image_id: "img".into(),
            kind,
            suggested_label: (kind == FeedbackKind::WrongLabel).then_some(2),
            prototype_id: (kind == FeedbackKind::WrongEvidence).then_some(7),
            comment: Some("looks like sand".into()),
            created_at: "2024-01-01T00:00:00Z".into(),
            model_version: "v1".into(),
            image_class: 1,
        }
    }

    #[test]
    fn round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fb.sqlite");
        {
            let store = FeedbackStore::open(&path).unwrap();
            store.insert(&record("a", FeedbackKind::WrongLabel)).unwrap();
            store.insert(&record("b", FeedbackKind::WrongEvidence)).unwrap();
        }
        let store = FeedbackStore::open(&path).unwrap();
        assert_eq!(store.get("a").unwrap().unwrap(), record("a", FeedbackKind::WrongLabel));
        assert_eq!(store.list("v1").unwrap().len(), 2);
        assert!(store.list("v2").unwrap().is_empty());
        assert!(store.get("zzz").unwrap().is_none());
    }

    #[test]
    fn duplicate_id_rejected() {
        let store = FeedbackStore::in_memory().unwrap();
        store.insert(&record("a", FeedbackKind::WrongLabel)).unwrap();
        assert!(store.insert(&record("a", FeedbackKind::WrongLabel)).is_err());
        assert_eq!(store.count().unwrap(), 1);
    }
}
