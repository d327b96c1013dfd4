//! Drive logs as line-delimited JSON, one file per route.
//!
//! ```text
//! {"route_id":"r1","kind":"step","x":0.0,"y":0.0,"on_road":true,"route_length":120.0}
//! {"route_id":"r1","kind":"step","x":4.0,"y":0.5,"on_road":true}
//! {"route_id":"r1","kind":"infraction","infraction_type":"red_light"}
//! ```
//!
//! `route_length` (metres) must appear on at least one record of the file
//! and agree wherever it is repeated.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skge_core::scoring::{driving_score, DriveLog, Infraction, RouteScore, ScoreSummary, Step};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Step,
    Infraction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub route_id: String,
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_road: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infraction_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route_length: Option<f64>,
}

pub fn parse_log(text: &str, path: &Path) -> Result<DriveLog> {
    let bad = |line: usize, m: String| CliError::corrupt(path, format!("line {line}: {m}"));
    let mut route_id: Option<String> = None;
    let mut length: Option<f64> = None;
    let mut steps = Vec::new();
    let mut infractions = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let ln = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let r: LogRecord = serde_json::from_str(line).map_err(|e| bad(ln, e.to_string()))?;
        match &route_id {
            None => route_id = Some(r.route_id.clone()),
            Some(id) if *id != r.route_id => {
                return Err(bad(ln, format!("route {} in a file for route {id}", r.route_id)));
            }
            Some(_) => {}
        }
        if let Some(l) = r.route_length {
            if length.is_some_and(|prev| prev != l) {
                return Err(bad(ln, format!("route_length {l} disagrees with earlier {}", length.unwrap())));
            }
            length = Some(l);
        }
        match r.kind {
            Kind::Step => {
                let (Some(x), Some(y), Some(on_road)) = (r.x, r.y, r.on_road) else {
                    return Err(bad(ln, "step needs x, y and on_road".into()));
                };
                steps.push(Step { x, y, on_road });
            }
            Kind::Infraction => {
                let t = r
                    .infraction_type
                    .as_deref()
                    .ok_or_else(|| bad(ln, "infraction needs infraction_type".into()))?;
                infractions.push(t.parse::<Infraction>().map_err(|e| bad(ln, e.to_string()))?);
            }
        }
    }
    let route_id = route_id.ok_or_else(|| CliError::corrupt(path, "log has no records"))?;
    let route_length = length.ok_or_else(|| CliError::corrupt(path, "no record carries route_length"))?;
    let log = DriveLog {
        route_id,
        route_length,
        steps,
        infractions,
    };
    log.validate().map_err(|e| CliError::corrupt(path, e.to_string()))?;
    Ok(log)
}

/// The canonical line-delimited form of `log`.
pub fn to_jsonl(log: &DriveLog) -> String {
    let mut out = String::new();
    let mut first = true;
    let mut push = |r: LogRecord| {
        out.push_str(&serde_json::to_string(&r).expect("plain struct serializes"));
        out.push('\n');
    };
    for s in &log.steps {
        push(LogRecord {
            route_id: log.route_id.clone(),
            kind: Kind::Step,
            x: Some(s.x),
            y: Some(s.y),
            on_road: Some(s.on_road),
            infraction_type: None,
            route_length: first.then_some(log.route_length),
        });
        first = false;
    }
    for k in &log.infractions {
        push(LogRecord {
            route_id: log.route_id.clone(),
            kind: Kind::Infraction,
            x: None,
            y: None,
            on_road: None,
            infraction_type: Some(k.as_str().into()),
            route_length: first.then_some(log.route_length),
        });
        first = false;
    }
    out
}

/// Every `*.jsonl` log under `dir`, sorted by file name.
pub fn load_logs(dir: &Path) -> Result<Vec<DriveLog>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::usage(format!("{}: no .jsonl drive logs found", dir.display())));
    }
    let mut logs = Vec::with_capacity(files.len());
    for f in &files {
        let text = fs::read_to_string(f).map_err(CliError::io(f))?;
        let log = parse_log(&text, f)?;
        if logs.iter().any(|l: &DriveLog| l.route_id == log.route_id) {
            return Err(CliError::corrupt(f, format!("route {} appears in two files", log.route_id)));
        }
        logs.push(log);
    }
    Ok(logs)
}

/// Reads `route_id,rc,ip` rows of already aggregated routes. A header row
/// starting with `route_id` is skipped.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<RouteScore>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("route_id")) {
            continue;
        }
        let bad = |m: &str| CliError::corrupt(path, format!("line {}: {m}", n + 1));
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, rc, ip] = cols[..] else {
            return Err(bad("expected route_id,rc,ip"));
        };
        let rc: f64 = rc.parse().map_err(|_| bad("rc is not a number"))?;
        let ip: f64 = ip.parse().map_err(|_| bad("ip is not a number"))?;
        if !(0.0..=100.0).contains(&rc) || !(0.0..=1.0).contains(&ip) {
            return Err(bad("rc must lie in [0, 100] and ip in [0, 1]"));
        }
        out.push(RouteScore {
            route_id: id.to_string(),
            rc,
            ip,
            ds: rc * ip,
        });
    }
    if out.is_empty() {
        return Err(CliError::corrupt(path, "no routes listed"));
    }
    Ok(out)
}

pub fn summarize(routes: Vec<RouteScore>) -> Result<ScoreSummary> {
    let pairs: Vec<(f64, f64)> = routes.iter().map(|r| (r.rc, r.ip)).collect();
    let ds = driving_score(&pairs)?;
    let n = routes.len() as f64;
    Ok(ScoreSummary {
        mean_rc: routes.iter().map(|r| r.rc).sum::<f64>() / n,
        mean_ip: routes.iter().map(|r| r.ip).sum::<f64>() / n,
        ds,
        routes,
    })
}

pub fn format_table(s: &ScoreSummary) -> String {
    let w = s.routes.iter().map(|r| r.route_id.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<w$}  {:>9}  {:>7}  {:>9}\n", "route", "RC", "IP", "DS");
    for r in &s.routes {
        out.push_str(&format!("{:<w$}  {:>9.4}  {:>7.4}  {:>9.4}\n", r.route_id, r.rc, r.ip, r.ds));
    }
    out.push_str(&format!("{:<w$}  {:>9.4}  {:>7.4}  {:>9.4}\n", "mean", s.mean_rc, s.mean_ip, s.ds));
    out
}
