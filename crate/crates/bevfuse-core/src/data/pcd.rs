//! ASCII point-cloud (.pcd) importer for radar tables.
//!
//! The header's FIELDS line names the columns; the caller maps x, y,
//! radar cross section and the two ego-motion-compensated velocity
//! components to column names. The stored Doppler is the radial projection
//! of that compensated velocity onto the point's bearing, so an
//! approaching target yields a negative value.

use std::path::Path;

use crate::radar::{EgoPose, RadarReturn, RadarSweep};

use super::{DataError, Result};

/// Column names for the fields the importer needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PcdFieldMap {
    pub x: String,
    pub y: String,
    pub rcs: String,
    /// Compensated velocity components.
    pub vx: String,
    pub vy: String,
}

impl Default for PcdFieldMap {
    fn default() -> Self {
        PcdFieldMap {
            x: "x".into(),
            y: "y".into(),
            rcs: "rcs".into(),
            vx: "vx_comp".into(),
            vy: "vy_comp".into(),
        }
    }
}

pub fn import_ascii_pcd(path: &Path, map: &PcdFieldMap) -> Result<RadarSweep> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => DataError::BinaryPcd,
            _ => DataError::Io(e),
        })?;
    parse_ascii_pcd(&text, map)
}

pub(crate) fn parse_ascii_pcd(text: &str, map: &PcdFieldMap) -> Result<RadarSweep> {
    let bad = |msg: String| DataError::BadPointCloud(msg);
    let mut fields: Option<Vec<String>> = None;
    let mut declared_points: Option<usize> = None;
    let mut data_start: Option<usize> = None;

    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let key = toks.next().unwrap_or("");
        match key.to_ascii_uppercase().as_str() {
            "FIELDS" => fields = Some(toks.map(|t| t.to_string()).collect()),
            "POINTS" => {
                declared_points = Some(
                    toks.next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| bad("bad POINTS line".into()))?,
                )
            }
            "DATA" => {
                match toks.next() {
                    Some("ascii") => {}
                    Some("binary") | Some("binary_compressed") => return Err(DataError::BinaryPcd),
                    other => return Err(bad(format!("unsupported DATA kind {other:?}"))),
                }
                data_start = Some(i + 1);
                break;
            }
            // VERSION / SIZE / TYPE / COUNT / WIDTH / HEIGHT / VIEWPOINT: no
            // information the importer needs beyond the checks above.
            _ => {}
        }
    }
    let fields = fields.ok_or_else(|| bad("no FIELDS line before DATA".into()))?;
    let data_start = data_start.ok_or_else(|| bad("no DATA line".into()))?;

    let col = |name: &String| -> Result<usize> {
        fields
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| DataError::MissingField(name.clone()))
    };
    let (cx, cy, crcs, cvx, cvy) =
        (col(&map.x)?, col(&map.y)?, col(&map.rcs)?, col(&map.vx)?, col(&map.vy)?);

    let mut points = Vec::new();
    for (row, line) in lines[data_start..].iter().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if !line.is_ascii() {
            return Err(DataError::BinaryPcd);
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != fields.len() {
            return Err(bad(format!(
                "row {row}: {} columns, header declares {}",
                toks.len(),
                fields.len()
            )));
        }
        let num = |c: usize| -> Result<f64> {
            toks[c]
                .parse::<f64>()
                .map_err(|_| bad(format!("row {row}: cannot parse \"{}\"", toks[c])))
        };
        let (x, y) = (num(cx)?, num(cy)?);
        let (vx, vy) = (num(cvx)?, num(cvy)?);
        let r = (x * x + y * y).sqrt();
        // Radial projection; a point at the origin has no bearing.
        let v_d = if r > 0.0 { (vx * x + vy * y) / r } else { 0.0 };
        points.push(RadarReturn { x, y, rcs: num(crcs)?, v_d });
    }
    if let Some(n) = declared_points {
        if n != points.len() {
            return Err(bad(format!("POINTS declares {n}, payload has {}", points.len())));
        }
    }
    Ok(RadarSweep { timestamp_us: 0, pose: EgoPose::IDENTITY, points })
}
