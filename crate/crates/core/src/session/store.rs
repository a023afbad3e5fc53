//! Session directory layout:
//!
//! ```text
//! <dir>/session.json      everything except pixels and vectors
//! <dir>/embeddings.json   raw f32 vectors (embeddings file format)
//! <dir>/cache.json        [{"text", "image_id", "score"}]
//! <dir>/images/<id>.png
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use super::{EmbeddingStore, Result, Session, SessionError, SimilarityCache};
use crate::embedding::EmbeddingTable;

pub const SESSION_FILE: &str = "session.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.json";
pub const CACHE_FILE: &str = "cache.json";
pub const IMAGES_DIR: &str = "images";

const KNOWN_KEYS: [&str; 7] = ["id", "name", "config", "anchors", "images", "tree", "version"];

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(value).map_err(|e| SessionError::Format(e.to_string()))
}

pub fn save_session(session: &Session, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGES_DIR))?;
    let table = session.embeddings.table();
    if table.dim > 0 {
        let json = to_json(&table.to_file())?;
        write_atomic(&dir.join(EMBEDDINGS_FILE), &json)?;
    }
    write_atomic(&dir.join(CACHE_FILE), &to_json(&session.similarity_cache.rows())?)?;
    // Session file last: it is what marks the directory as a session.
    write_atomic(&dir.join(SESSION_FILE), &to_json(session)?)?;
    Ok(())
}

pub fn load_session(dir: &Path) -> Result<Session> {
    let path = dir.join(SESSION_FILE);
    if !path.is_file() {
        return Err(SessionError::Format(format!("{} has no {SESSION_FILE}", dir.display())));
    }
    let mut doc: Value = serde_json::from_slice(&fs::read(&path)?)
        .map_err(|e| SessionError::Format(format!("{}: {e}", path.display())))?;
    if let Some(obj) = doc.as_object_mut() {
        let unknown: Vec<String> = obj
            .keys()
            .filter(|k| !KNOWN_KEYS.contains(&k.as_str()))
            .cloned()
            .collect();
        for key in unknown {
            log::warn!("ignoring unknown field `{key}` in {}", path.display());
            obj.remove(&key);
        }
    }
    let mut session: Session =
        serde_json::from_value(doc).map_err(|e| SessionError::Format(format!("{}: {e}", path.display())))?;

    let emb_path = dir.join(EMBEDDINGS_FILE);
    if emb_path.is_file() {
        session.embeddings = EmbeddingStore::from_table(EmbeddingTable::read(&emb_path)?)?;
    }
    let cache_path = dir.join(CACHE_FILE);
    if cache_path.is_file() {
        let rows = serde_json::from_slice(&fs::read(&cache_path)?)
            .map_err(|e| SessionError::Format(format!("{}: {e}", cache_path.display())))?;
        session.similarity_cache = SimilarityCache::from_rows(rows)?;
    }

    session.check_integrity()?;
    for rec in &session.images {
        if !dir.join(&rec.file_ref).is_file() {
            return Err(SessionError::Format(format!("image file {} is missing", rec.file_ref)));
        }
    }
    Ok(session)
}
