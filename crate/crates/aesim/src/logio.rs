//! Line-delimited persistence for session logs, catalogs, and small CSV
//! artifacts (training curves, trends, propensity tables).
//!
//! Session logs and catalogs are JSON lines, one record per line, each
//! carrying `schema_version`. Catalog files start with a header line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{Catalog, Item, SessionLog, SCHEMA_VERSION};

pub fn save_sessions(path: &Path, sessions: &[SessionLog]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in sessions {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_sessions(path: &Path) -> Result<Vec<SessionLog>> {
    let f = File::open(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SessionLog = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported session schema_version {}",
                s.schema_version
            )));
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CatalogHeader {
    schema_version: u32,
    n_categories: usize,
    discrete_cardinalities: Vec<u32>,
    dense_width: usize,
    n_items: usize,
}

pub fn save_catalog(path: &Path, catalog: &Catalog) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = CatalogHeader {
        schema_version: SCHEMA_VERSION,
        n_categories: catalog.n_categories,
        discrete_cardinalities: catalog.discrete_cardinalities.clone(),
        dense_width: catalog.dense_width,
        n_items: catalog.items.len(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    for item in &catalog.items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_catalog(path: &Path) -> Result<Catalog> {
    let f = File::open(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(f).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format("empty catalog file".into()))??;
    let header: CatalogHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::Format(e.to_string()))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported catalog schema_version {}",
            header.schema_version
        )));
    }
    let mut items = Vec::with_capacity(header.n_items);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: Item = serde_json::from_str(&line).map_err(|e| Error::Format(e.to_string()))?;
        items.push(item);
    }
    if items.len() != header.n_items {
        return Err(Error::Format(format!(
            "catalog header promises {} items, found {}",
            header.n_items,
            items.len()
        )));
    }
    Catalog::new(
        header.n_categories,
        header.discrete_cardinalities,
        header.dense_width,
        items,
    )
}

/// step,value records for training curves and similar series.
pub fn save_curve(path: &Path, header: &str, rows: &[(u64, f64)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for (step, value) in rows {
        writeln!(w, "{step},{value:.12e}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_catalog, Action, Origin};
    use tempfile::tempdir;

    #[test]
    fn sessions_round_trip() {
        let dir = tempdir().unwrap();
        let cat = generate_catalog(20, 2, &[4], 3, 1).unwrap();
        let id = cat.items.iter().find(|i| i.category == 0).unwrap().item_id;
        let s = SessionLog::new(
            &cat,
            Origin::Oracle,
            vec![0.25, -1.5],
            0,
            vec![id],
            vec![Action::Purchase],
        )
        .unwrap();
        let path = dir.path().join("sessions.jsonl");
        save_sessions(&path, &[s.clone()]).unwrap();
        let loaded = load_sessions(&path).unwrap();
        assert_eq!(loaded, vec![s]);
    }

    #[test]
    fn catalog_round_trip() {
        let dir = tempdir().unwrap();
        let cat = generate_catalog(50, 4, &[4, 8], 5, 3).unwrap();
        let path = dir.path().join("catalog.jsonl");
        save_catalog(&path, &cat).unwrap();
        let loaded = load_catalog(&path).unwrap();
        assert_eq!(loaded.items, cat.items);
        assert_eq!(loaded.n_categories, cat.n_categories);
    }

    #[test]
    fn missing_file_is_a_missing_artifact() {
        assert!(matches!(
            load_sessions(Path::new("/nonexistent/x.jsonl")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
