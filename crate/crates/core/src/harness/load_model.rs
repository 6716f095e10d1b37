//! Load levels derived from RODS-style passenger arrival counts: per
//! station, per 15-minute interval. The average load is the mean of the
//! per-station maxima; the maximum load is the single busiest interval,
//! both converted to requests per second and rounded up.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const INTERVAL_SECONDS: u64 = 15 * 60;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RodsRow {
    pub station_id: String,
    pub interval_start: String,
    pub arrivals: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadModel {
    pub rows: Vec<RodsRow>,
    pub station_count: usize,
    /// ceil( sum_s max_t I_s / (|S| * 900) ), requests per second.
    pub load_avg: u64,
    /// ceil( max_s max_t I_s / 900 ), requests per second.
    pub load_max: u64,
}

#[derive(Debug, Error)]
pub enum LoadModelError {
    #[error("rods csv parse failure at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("negative arrivals at line {line}")]
    NegativeArrivals { line: usize },
    #[error("empty dataset")]
    Empty,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn div_ceil(num: u64, den: u64) -> u64 {
    num.div_ceil(den)
}

/// Parse `station_id,interval_start,arrivals` and evaluate both load levels.
pub fn load_rods<R: Read>(reader: R) -> Result<LoadModel, LoadModelError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut rows = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| LoadModelError::Parse {
            line,
            reason: e.to_string(),
        })?;
        if record.len() != 3 {
            return Err(LoadModelError::Parse {
                line,
                reason: format!("expected 3 fields, got {}", record.len()),
            });
        }
        let arrivals_raw = record[2].trim();
        if arrivals_raw.starts_with('-') {
            return Err(LoadModelError::NegativeArrivals { line });
        }
        let arrivals: u64 = arrivals_raw.parse().map_err(|e| LoadModelError::Parse {
            line,
            reason: format!("bad arrivals: {e}"),
        })?;
        rows.push(RodsRow {
            station_id: record[0].trim().to_string(),
            interval_start: record[1].trim().to_string(),
            arrivals,
        });
    }
    if rows.is_empty() {
        return Err(LoadModelError::Empty);
    }
    let mut per_station_max: HashMap<&str, u64> = HashMap::new();
    for row in &rows {
        let entry = per_station_max.entry(row.station_id.as_str()).or_insert(0);
        *entry = (*entry).max(row.arrivals);
    }
    let station_count = per_station_max.len();
    let sum_of_maxima: u64 = per_station_max.values().sum();
    let busiest: u64 = per_station_max.values().copied().max().unwrap_or(0);
    let load_avg = div_ceil(sum_of_maxima, station_count as u64 * INTERVAL_SECONDS);
    let load_max = div_ceil(busiest, INTERVAL_SECONDS);
    Ok(LoadModel {
        rows,
        station_count,
        load_avg,
        load_max,
    })
}

pub fn load_rods_file(path: &Path) -> Result<LoadModel, LoadModelError> {
    let file = std::fs::File::open(path)?;
    load_rods(file)
}
