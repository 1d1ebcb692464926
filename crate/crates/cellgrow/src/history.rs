//! Per-generation, per-species CSV log and reports derived from it.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;

use cellgrow_core::engine::GenerationRecord;
use cellgrow_core::genome::Fitness;
use serde::{Deserialize, Serialize};

pub const HISTORY_HEADER: &str = "generation,species_id,size,best_incomplete,best_complete,T,N,evaluations_this_gen";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub generation: u32,
    pub species_id: u64,
    pub size: u32,
    pub best_incomplete: Option<Fitness>,
    pub best_complete: Option<Fitness>,
    #[serde(rename = "T")]
    pub tpg: u32,
    #[serde(rename = "N")]
    pub npi: u32,
    pub evaluations_this_gen: u32,
}

pub fn rows(record: &GenerationRecord) -> Vec<HistoryRow> {
    record
        .species
        .iter()
        .map(|s| HistoryRow {
            generation: record.generation,
            species_id: s.species_id,
            size: s.size,
            best_incomplete: s.best_incomplete,
            best_complete: s.best_complete,
            tpg: record.tpg,
            npi: record.npi,
            evaluations_this_gen: record.evaluations,
        })
        .collect()
}

fn write_rows<W: Write>(out: W, records: &[GenerationRecord], header: bool) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    if header && records.iter().all(|r| r.species.is_empty()) {
        w.write_record(HISTORY_HEADER.split(','))?;
    }
    for record in records {
        for row in rows(record) {
            w.serialize(row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the full log, replacing any existing file.
pub fn write_history(path: &Path, records: &[GenerationRecord]) -> io::Result<()> {
    write_rows(File::create(path)?, records, true).map_err(io::Error::other)
}

/// Appends one generation's rows to an existing log.
pub fn append_history(path: &Path, record: &GenerationRecord) -> io::Result<()> {
    let file = OpenOptions::new().append(true).open(path)?;
    write_rows(file, std::slice::from_ref(record), false).map_err(io::Error::other)
}

pub fn history_csv(records: &[GenerationRecord]) -> String {
    let mut buf = Vec::new();
    write_rows(&mut buf, records, true).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is UTF-8")
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>, csv::Error> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(HISTORY_HEADER.split(',')) {
        return Err(csv::Error::from(io::Error::new(io::ErrorKind::InvalidData, "unexpected history header")));
    }
    r.deserialize().collect()
}

/// Rows grouped by generation, for plotting per-species fitness curves.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationSummary {
    pub generation: u32,
    #[serde(rename = "T")]
    pub tpg: u32,
    #[serde(rename = "N")]
    pub npi: u32,
    pub evaluations: u32,
    pub best_incomplete: Option<Fitness>,
    pub species: Vec<SpeciesSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeciesSummary {
    pub id: u64,
    pub size: u32,
    pub best_incomplete: Option<Fitness>,
    pub best_complete: Option<Fitness>,
}

pub fn summarize(rows: &[HistoryRow]) -> Vec<GenerationSummary> {
    let mut out: Vec<GenerationSummary> = Vec::new();
    for row in rows {
        if out.last().is_none_or(|g| g.generation != row.generation) {
            out.push(GenerationSummary {
                generation: row.generation,
                tpg: row.tpg,
                npi: row.npi,
                evaluations: row.evaluations_this_gen,
                best_incomplete: None,
                species: Vec::new(),
            });
        }
        let g = out.last_mut().expect("pushed above");
        g.best_incomplete = g.best_incomplete.max(row.best_incomplete);
        g.species.push(SpeciesSummary {
            id: row.species_id,
            size: row.size,
            best_incomplete: row.best_incomplete,
            best_complete: row.best_complete,
        });
    }
    out
}

/// Re-emits rows in the canonical CSV layout.
pub fn rows_csv(rows: &[HistoryRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(HISTORY_HEADER.split(',')).expect("writing to memory");
    }
    for row in rows {
        w.serialize(row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv output is UTF-8")
}
