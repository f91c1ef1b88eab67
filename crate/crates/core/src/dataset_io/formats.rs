//! On-disk formats for adjacency lists and readings.
//!
//! Adjacency: line 1 holds comma-separated node ids, then one
//! `src_id,dst_id,weight` per line.
//!
//! Readings (text): header `timestamp,node_id:feature,...`, one row per step.
//! Empty cells are missing.
//!
//! Readings (binary): `STTS1`, little-endian `u32 n_steps, u32 n_nodes,
//! u32 n_features, u64 start (unix seconds), u32 interval (seconds)`, then
//! `n_steps·n_nodes·n_features` row-major `f64`, then the mask packed
//! LSB-first into `⌈len/8⌉` bytes.

use super::{RoadGraph, TrafficSeries};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use chrono::{DateTime, NaiveDateTime, Utc};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const BINARY_MAGIC: &[u8; 5] = b"STTS1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadingsOptions {
    /// Text cells exactly equal to this value are treated as missing.
    pub sentinel: Option<f64>,
}

impl Default for ReadingsOptions {
    fn default() -> Self {
        Self { sentinel: Some(0.0) }
    }
}

pub fn load_adjacency(path: &Path) -> Result<RoadGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "missing node id header"))?;
    let ids: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    if index.len() != ids.len() {
        return Err(Error::parse(path, 1, "node ids must be unique"));
    }
    let n = ids.len();
    let mut adjacency = Matrix::zeros(n, n);
    let mut seen = vec![false; n * n];
    for (lineno, line) in lines {
        let lineno = lineno + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, lineno, "expected `src_id,dst_id,weight`"));
        }
        let lookup = |id: &str| {
            index.get(id).copied().ok_or_else(|| Error::parse(path, lineno, format!("unknown node id `{id}`")))
        };
        let (src, dst) = (lookup(fields[0])?, lookup(fields[1])?);
        let weight: f64 =
            fields[2].parse().map_err(|_| Error::parse(path, lineno, format!("bad weight `{}`", fields[2])))?;
        if !weight.is_finite() || weight < 0.0 {
            return Err(Error::parse(
                path,
                lineno,
                format!("edge weight must be finite and nonnegative, got {weight}"),
            ));
        }
        if std::mem::replace(&mut seen[src * n + dst], true) {
            return Err(Error::parse(path, lineno, format!("duplicate edge ({}, {})", fields[0], fields[1])));
        }
        adjacency[(src, dst)] = weight;
    }
    RoadGraph::new(ids, adjacency)
}

pub fn write_adjacency(path: &Path, graph: &RoadGraph) -> Result<()> {
    let mut out = graph.node_ids().join(",");
    out.push('\n');
    let n = graph.n_nodes();
    for i in 0..n {
        for j in 0..n {
            let w = graph.weight(i, j);
            if w != 0.0 {
                let _ = writeln!(out, "{},{},{}", graph.node_ids()[i], graph.node_ids()[j], w);
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads text or binary readings, detected by the binary magic.
pub fn load_readings(path: &Path, graph: &RoadGraph, options: ReadingsOptions) -> Result<TrafficSeries> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        load_binary(path, &bytes, graph)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::parse(path, 1, "readings file is not UTF-8 text"))?;
        load_text(path, &text, graph, options)
    }
}

fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S").ok().map(|dt| dt.and_utc().timestamp())
}

fn format_timestamp(ts: i64) -> String {
    match DateTime::<Utc>::from_timestamp(ts, 0) {
        Some(dt) => dt.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        None => ts.to_string(),
    }
}

fn load_text(path: &Path, text: &str, graph: &RoadGraph, options: ReadingsOptions) -> Result<TrafficSeries> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty readings file"))?;
    let mut cols = header.split(',').map(str::trim);
    if cols.next() != Some("timestamp") {
        return Err(Error::parse(path, 1, "first column must be `timestamp`"));
    }
    let mut features: Vec<String> = Vec::new();
    let mut column_targets: Vec<(usize, String)> = Vec::new();
    for col in cols {
        let (node, feature) = col
            .rsplit_once(':')
            .ok_or_else(|| Error::parse(path, 1, format!("column `{col}` is not `node_id:feature`")))?;
        let ni = graph
            .index_of(node)
            .ok_or_else(|| Error::Data(format!("readings column node `{node}` is not in the road graph")))?;
        if !features.iter().any(|f| f == feature) {
            features.push(feature.to_string());
        }
        column_targets.push((ni, feature.to_string()));
    }
    let (n_nodes, n_features) = (graph.n_nodes(), features.len());
    if n_features == 0 || column_targets.len() != n_nodes * n_features {
        return Err(Error::Data(format!(
            "readings have {} data columns; expected {n_nodes} nodes × {n_features} features",
            column_targets.len()
        )));
    }
    let mut column_offset = Vec::with_capacity(column_targets.len());
    let mut filled = vec![false; n_nodes * n_features];
    for (ni, feature) in &column_targets {
        let fi = features.iter().position(|f| f == feature).unwrap_or_default();
        let off = ni * n_features + fi;
        if std::mem::replace(&mut filled[off], true) {
            return Err(Error::Data(format!(
                "column for node `{}` feature `{feature}` repeats",
                graph.node_ids()[*ni]
            )));
        }
        column_offset.push(off);
    }
    let per_step = n_nodes * n_features;
    let mut values = Vec::new();
    let mut mask = Vec::new();
    let mut stamps: Vec<i64> = Vec::new();
    for (lineno, line) in lines {
        let lineno = lineno + 1;
        let mut fields = line.split(',');
        let ts_field = fields.next().unwrap_or_default().trim();
        let ts = parse_timestamp(ts_field)
            .ok_or_else(|| Error::parse(path, lineno, format!("bad timestamp `{ts_field}`")))?;
        let base = values.len();
        values.resize(base + per_step, 0.0);
        mask.resize(base + per_step, false);
        let mut n_cells = 0;
        for (cell, &off) in fields.zip(&column_offset) {
            n_cells += 1;
            let cell = cell.trim();
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::parse(path, lineno, format!("bad reading `{cell}`")))?;
            let missing = v.is_nan() || options.sentinel == Some(v);
            if !missing {
                values[base + off] = v;
                mask[base + off] = true;
            }
        }
        if n_cells != per_step {
            return Err(Error::parse(path, lineno, format!("expected {per_step} readings, found {n_cells}")));
        }
        stamps.push(ts);
    }
    if stamps.is_empty() {
        return Err(Error::Data("readings file has no rows".into()));
    }
    let interval = if stamps.len() > 1 { stamps[1] - stamps[0] } else { 300 };
    if interval <= 0 || interval > i64::from(u32::MAX) {
        return Err(Error::Data("timestamps must be strictly increasing".into()));
    }
    if let Some(w) = stamps.windows(2).position(|w| w[1] - w[0] != interval) {
        return Err(Error::Data(format!(
            "non-uniform interval at row {}: {} s instead of {interval} s",
            w + 2,
            stamps[w + 1] - stamps[w]
        )));
    }
    TrafficSeries::new(stamps.len(), n_nodes, n_features, values, mask, interval as u32, stamps[0])?
        .with_feature_names(features)
}

pub fn write_readings_text(path: &Path, graph: &RoadGraph, series: &TrafficSeries) -> Result<()> {
    check_graph(graph, series)?;
    let mut out = String::from("timestamp");
    for id in graph.node_ids() {
        for f in &series.feature_names {
            let _ = write!(out, ",{id}:{f}");
        }
    }
    out.push('\n');
    let per_step = series.n_nodes() * series.n_features();
    for t in 0..series.n_steps() {
        out.push_str(&format_timestamp(series.timestamp(t)));
        for k in 0..per_step {
            let off = t * per_step + k;
            out.push(',');
            if series.mask()[off] {
                let _ = write!(out, "{}", series.values()[off]);
            }
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn check_graph(graph: &RoadGraph, series: &TrafficSeries) -> Result<()> {
    if graph.n_nodes() != series.n_nodes() {
        return Err(Error::Data(format!(
            "series has {} nodes but the road graph has {}",
            series.n_nodes(),
            graph.n_nodes()
        )));
    }
    Ok(())
}

pub fn write_readings_binary(path: &Path, series: &TrafficSeries) -> Result<()> {
    let len = series.values().len();
    let mut buf = Vec::with_capacity(29 + len * 8 + len.div_ceil(8));
    buf.extend_from_slice(BINARY_MAGIC);
    for v in [series.n_steps(), series.n_nodes(), series.n_features()] {
        let v = u32::try_from(v).map_err(|_| Error::Data("series dimension exceeds u32".into()))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(series.start_time as u64).to_le_bytes());
    buf.extend_from_slice(&series.interval_secs.to_le_bytes());
    for v in series.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut packed = vec![0u8; len.div_ceil(8)];
    for (i, &m) in series.mask().iter().enumerate() {
        if m {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    buf.extend_from_slice(&packed);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn load_binary(path: &Path, bytes: &[u8], graph: &RoadGraph) -> Result<TrafficSeries> {
    let truncated = || Error::parse(path, 0, "binary readings file is truncated");
    let u32_at = |o: usize| -> Result<u32> {
        Ok(u32::from_le_bytes(bytes.get(o..o + 4).ok_or_else(truncated)?.try_into().unwrap_or_default()))
    };
    let n_steps = u32_at(5)? as usize;
    let n_nodes = u32_at(9)? as usize;
    let n_features = u32_at(13)? as usize;
    let start = u64::from_le_bytes(bytes.get(17..25).ok_or_else(truncated)?.try_into().unwrap_or_default()) as i64;
    let interval = u32_at(25)?;
    if n_nodes != graph.n_nodes() {
        return Err(Error::Data(format!(
            "binary readings have {n_nodes} nodes but the road graph has {}",
            graph.n_nodes()
        )));
    }
    let len = n_steps * n_nodes * n_features;
    let values_end = 29 + len * 8;
    let data = bytes.get(29..values_end).ok_or_else(truncated)?;
    let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap_or_default())).collect();
    let packed = bytes.get(values_end..values_end + len.div_ceil(8)).ok_or_else(truncated)?;
    let mask = (0..len).map(|i| packed[i / 8] & (1 << (i % 8)) != 0).collect();
    TrafficSeries::new(n_steps, n_nodes, n_features, values, mask, interval, start)
}
