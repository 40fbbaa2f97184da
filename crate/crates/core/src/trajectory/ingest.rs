//! Delimited-file ingestion for location pings, the place registry and assignments.

use std::io::Read;

use chrono::{DateTime, NaiveDateTime};
use csv::StringRecord;
use serde::Serialize;

use super::types::{Assignment, Campaign, CategoryRegistry, Group, LocationRecord, Place};
use crate::error::{Error, Result};

/// A row that failed to parse.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

/// Parsed items plus the rows that were rejected.
#[derive(Clone, Debug)]
pub struct Ingested<T> {
    pub items: Vec<T>,
    pub rejected: Vec<RowError>,
}

/// Share of malformed rows above which ingestion aborts.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

fn parse_delimited<R, T, F>(reader: R, delimiter: u8, header_key: &str, mut parse: F) -> Result<Ingested<T>>
where
    R: Read,
    F: FnMut(&StringRecord) -> std::result::Result<T, String>,
{
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .delimiter(delimiter)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut items = Vec::new();
    let mut rejected = Vec::new();
    let mut total = 0usize;
    for (idx, row) in rdr.records().enumerate() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(idx + 1);
                total += 1;
                rejected.push(RowError { line, message: e.to_string() });
                continue;
            }
        };
        let line = row.position().map(|p| p.line() as usize).unwrap_or(idx + 1);
        if row.iter().all(str::is_empty) {
            continue;
        }
        if idx == 0 && row.get(0).is_some_and(|f| f.eq_ignore_ascii_case(header_key)) {
            continue;
        }
        total += 1;
        match parse(&row) {
            Ok(item) => items.push(item),
            Err(message) => rejected.push(RowError { line, message }),
        }
    }

    if total > 0 && rejected.len() as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(Error::TooManyMalformed {
            bad: rejected.len(),
            total,
            first: rejected
                .first()
                .map(|r| format!("line {}: {}", r.line, r.message))
                .unwrap_or_default(),
        });
    }
    Ok(Ingested { items, rejected })
}

fn field<'a>(row: &'a StringRecord, i: usize, name: &str) -> std::result::Result<&'a str, String> {
    match row.get(i) {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(format!("missing field `{name}`")),
    }
}

fn parse_f64(s: &str, name: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{name}` is not a number: `{s}`"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{name}` is not finite"))
    }
}

fn parse_coord(row: &StringRecord, lat_i: usize, lon_i: usize) -> std::result::Result<(f64, f64), String> {
    let lat = parse_f64(field(row, lat_i, "lat")?, "lat")?;
    let lon = parse_f64(field(row, lon_i, "lon")?, "lon")?;
    if !(-90.0..=90.0).contains(&lat) {
        return Err(format!("latitude {lat} out of [-90, 90]"));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(format!("longitude {lon} out of [-180, 180]"));
    }
    Ok((lat, lon))
}

/// Parses an epoch-seconds or ISO-8601 timestamp into UTC seconds.
///
/// Timestamps without an offset are taken as UTC.
pub fn parse_timestamp(s: &str) -> std::result::Result<i64, String> {
    if let Ok(v) = s.parse::<i64>() {
        return Ok(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    Err(format!("unrecognised timestamp `{s}`"))
}

/// Reads `user_id, timestamp, lat, lon` rows.
///
/// Output is sorted by `(user_id, timestamp)` with identical tuples removed.
pub fn ingest_records<R: Read>(reader: R) -> Result<Ingested<LocationRecord>> {
    ingest_records_with(reader, b',')
}

pub fn ingest_records_with<R: Read>(reader: R, delimiter: u8) -> Result<Ingested<LocationRecord>> {
    let mut out = parse_delimited(reader, delimiter, "user_id", |row| {
        if row.len() != 4 {
            return Err(format!("expected 4 fields, found {}", row.len()));
        }
        let user_id = field(row, 0, "user_id")?.to_string();
        let timestamp = parse_timestamp(field(row, 1, "timestamp")?)?;
        let (lat, lon) = parse_coord(row, 2, 3)?;
        Ok(LocationRecord { user_id, timestamp, lat, lon })
    })?;
    sort_and_dedup(&mut out.items);
    Ok(out)
}

/// Sorts by `(user_id, timestamp, lat, lon)` and drops exact duplicates.
pub fn sort_and_dedup(records: &mut Vec<LocationRecord>) {
    records.sort_by(|a, b| {
        a.user_id
            .cmp(&b.user_id)
            .then(a.timestamp.cmp(&b.timestamp))
            .then(a.lat.total_cmp(&b.lat))
            .then(a.lon.total_cmp(&b.lon))
    });
    records.dedup();
}

/// Reads `place_id, lat, lon, category, fine_category` rows, checking labels against `registry`.
pub fn read_places<R: Read>(reader: R, registry: &CategoryRegistry) -> Result<Ingested<Place>> {
    parse_delimited(reader, b',', "place_id", |row| {
        if row.len() != 5 {
            return Err(format!("expected 5 fields, found {}", row.len()));
        }
        let place_id = field(row, 0, "place_id")?.to_string();
        let (lat, lon) = parse_coord(row, 1, 2)?;
        let category = field(row, 3, "category")?.parse().map_err(|e: Error| e.to_string())?;
        let fine_category = field(row, 4, "fine_category")?.to_string();
        registry.check(category, &fine_category).map_err(|e| e.to_string())?;
        Ok(Place { place_id, lat, lon, category, fine_category })
    })
}

/// Reads `campaign_id,target_place_id,start,end` rows; start and end take any timestamp form.
pub fn read_campaigns<R: Read>(reader: R) -> Result<Ingested<Campaign>> {
    parse_delimited(reader, b',', "campaign_id", |row| {
        if row.len() != 4 {
            return Err(format!("expected 4 fields, found {}", row.len()));
        }
        let start = parse_timestamp(field(row, 2, "start")?)?;
        let end = parse_timestamp(field(row, 3, "end")?)?;
        if end < start {
            return Err(format!("campaign ends ({end}) before it starts ({start})"));
        }
        Ok(Campaign {
            campaign_id: field(row, 0, "campaign_id")?.to_string(),
            target_place_id: field(row, 1, "target_place_id")?.to_string(),
            start,
            end,
        })
    })
}

/// Reads `user_id, campaign_id, group` rows.
pub fn read_assignments<R: Read>(reader: R) -> Result<Ingested<Assignment>> {
    parse_delimited(reader, b',', "user_id", |row| {
        if row.len() != 3 {
            return Err(format!("expected 3 fields, found {}", row.len()));
        }
        Ok(Assignment {
            user_id: field(row, 0, "user_id")?.to_string(),
            campaign_id: field(row, 1, "campaign_id")?.to_string(),
            group: field(row, 2, "group")?.parse::<Group>().map_err(|e| e.to_string())?,
        })
    })
}
