//! Interchange formats: a flat CSV (`user_id,loc_id,x,y,w,d,dur,timestamp`),
//! a JSONL mirror with the same fields, and the on-disk dataset directory
//! layout (`records.csv` + `records.jsonl` + `locations.csv` + `meta.json`).
//!
//! Parsing is line-oriented so every error can name the offending line and
//! field. Floats are written with Rust's shortest round-trip formatting,
//! which makes generated files byte-stable across runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetMeta, Location, Record};
use crate::error::{Error, Result};

pub const RECORDS_CSV_HEADER: &str = "user_id,loc_id,x,y,w,d,dur,timestamp";
pub const LOCATIONS_CSV_HEADER: &str = "loc_id,x,y,category";

#[derive(Serialize, Deserialize)]
struct RecordRow<'a> {
    user_id: std::borrow::Cow<'a, str>,
    loc_id: u64,
    x: f64,
    y: f64,
    w: u8,
    d: u8,
    dur: f64,
    timestamp: i64,
}

fn parse_field<T: std::str::FromStr>(
    raw: &str,
    path: &str,
    line: usize,
    field: &str,
) -> Result<T> {
    raw.trim().parse::<T>().map_err(|_| Error::Parse {
        path: path.to_string(),
        line,
        field: field.to_string(),
        msg: format!("cannot parse `{raw}`"),
    })
}

fn validate_at(r: &Record, path: &str, line: usize) -> Result<()> {
    r.validate().map_err(|(field, msg)| Error::Validation {
        path: path.to_string(),
        line,
        field: field.to_string(),
        msg,
    })
}

/// Render all user records as CSV, users in sorted id order.
pub fn records_to_csv(users: &BTreeMap<String, Vec<Record>>) -> String {
    let mut out = String::new();
    out.push_str(RECORDS_CSV_HEADER);
    out.push('\n');
    for (user, records) in users {
        for r in records {
            let _ = writeln!(
                out,
                "{user},{},{},{},{},{},{},{}",
                r.loc, r.x, r.y, r.weekday, r.hour, r.duration, r.timestamp
            );
        }
    }
    out
}

pub fn records_from_csv(text: &str, path: &str) -> Result<BTreeMap<String, Vec<Record>>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == RECORDS_CSV_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                path: path.to_string(),
                line: 1,
                field: "header".to_string(),
                msg: format!("expected `{RECORDS_CSV_HEADER}`, got `{header}`"),
            })
        }
        None => return Err(Error::data(format!("{path}: empty records file"))),
    }
    let mut users: BTreeMap<String, Vec<Record>> = BTreeMap::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Parse {
                path: path.to_string(),
                line,
                field: "record".to_string(),
                msg: format!("expected 8 comma-separated fields, got {}", fields.len()),
            });
        }
        let record = Record {
            loc: parse_field(fields[1], path, line, "loc_id")?,
            x: parse_field(fields[2], path, line, "x")?,
            y: parse_field(fields[3], path, line, "y")?,
            weekday: parse_field(fields[4], path, line, "w")?,
            hour: parse_field(fields[5], path, line, "d")?,
            duration: parse_field(fields[6], path, line, "dur")?,
            timestamp: parse_field(fields[7], path, line, "timestamp")?,
        };
        validate_at(&record, path, line)?;
        users.entry(fields[0].trim().to_string()).or_default().push(record);
    }
    for records in users.values_mut() {
        records.sort_by_key(|r| r.timestamp);
    }
    Ok(users)
}

/// JSONL mirror of the CSV schema; one record object per line.
pub fn records_to_jsonl(users: &BTreeMap<String, Vec<Record>>) -> String {
    let mut out = String::new();
    for (user, records) in users {
        for r in records {
            let row = RecordRow {
                user_id: user.as_str().into(),
                loc_id: r.loc,
                x: r.x,
                y: r.y,
                w: r.weekday,
                d: r.hour,
                dur: r.duration,
                timestamp: r.timestamp,
            };
            out.push_str(&serde_json::to_string(&row).expect("record row serializes"));
            out.push('\n');
        }
    }
    out
}

pub fn records_from_jsonl(text: &str, path: &str) -> Result<BTreeMap<String, Vec<Record>>> {
    let mut users: BTreeMap<String, Vec<Record>> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let row: RecordRow = serde_json::from_str(raw).map_err(|e| Error::Parse {
            path: path.to_string(),
            line,
            field: "record".to_string(),
            msg: e.to_string(),
        })?;
        let record = Record {
            loc: row.loc_id,
            x: row.x,
            y: row.y,
            weekday: row.w,
            hour: row.d,
            duration: row.dur,
            timestamp: row.timestamp,
        };
        validate_at(&record, path, line)?;
        users.entry(row.user_id.into_owned()).or_default().push(record);
    }
    for records in users.values_mut() {
        records.sort_by_key(|r| r.timestamp);
    }
    Ok(users)
}

pub fn locations_to_csv(locations: &[Location]) -> String {
    let mut out = String::new();
    out.push_str(LOCATIONS_CSV_HEADER);
    out.push('\n');
    for l in locations {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            l.id,
            l.x,
            l.y,
            l.category.as_deref().unwrap_or("")
        );
    }
    out
}

pub fn locations_from_csv(text: &str, path: &str) -> Result<Vec<Location>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == LOCATIONS_CSV_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                path: path.to_string(),
                line: 1,
                field: "header".to_string(),
                msg: format!("expected `{LOCATIONS_CSV_HEADER}`, got `{header}`"),
            })
        }
        None => return Err(Error::data(format!("{path}: empty locations file"))),
    }
    let mut locations = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.splitn(4, ',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.to_string(),
                line,
                field: "location".to_string(),
                msg: format!("expected 4 comma-separated fields, got {}", fields.len()),
            });
        }
        let category = fields[3].trim();
        locations.push(Location {
            id: parse_field(fields[0], path, line, "loc_id")?,
            x: parse_field(fields[1], path, line, "x")?,
            y: parse_field(fields[2], path, line, "y")?,
            category: if category.is_empty() {
                None
            } else {
                Some(category.to_string())
            },
        });
    }
    Ok(locations)
}

/// Write a dataset directory: records in both interchange formats, the
/// location universe, and metadata (including normalization stats, if any).
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("records.csv"), records_to_csv(&ds.users))?;
    fs::write(dir.join("records.jsonl"), records_to_jsonl(&ds.users))?;
    fs::write(dir.join("locations.csv"), locations_to_csv(&ds.locations))?;
    let meta = serde_json::to_string_pretty(&ds.meta)?;
    fs::write(dir.join("meta.json"), meta + "\n")?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`]. Prefers the CSV
/// records; falls back to the JSONL mirror if the CSV is absent. The loaded
/// dataset is fully validated.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = if meta_path.exists() {
        serde_json::from_str(&fs::read_to_string(&meta_path)?)?
    } else {
        DatasetMeta::default()
    };
    let loc_path = dir.join("locations.csv");
    if !loc_path.exists() {
        return Err(Error::data(format!(
            "{}: missing locations.csv",
            dir.display()
        )));
    }
    let locations = locations_from_csv(&fs::read_to_string(&loc_path)?, &loc_path.display().to_string())?;
    let csv_path = dir.join("records.csv");
    let jsonl_path = dir.join("records.jsonl");
    let users = if csv_path.exists() {
        records_from_csv(&fs::read_to_string(&csv_path)?, &csv_path.display().to_string())?
    } else if jsonl_path.exists() {
        records_from_jsonl(&fs::read_to_string(&jsonl_path)?, &jsonl_path.display().to_string())?
    } else {
        return Err(Error::data(format!(
            "{}: missing records.csv / records.jsonl",
            dir.display()
        )));
    };
    let ds = Dataset {
        locations,
        users,
        meta,
    };
    ds.validate()?;
    Ok(ds)
}
