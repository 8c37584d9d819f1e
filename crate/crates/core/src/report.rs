//! Report records and their lossless text serialization.
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! parsing a report back yields bit-identical values.

use crate::error::{Error, Result};
use crate::metrics::IoUReport;

pub const CSV_HEADER: &str = "scene_id,mode,miou,loss_pre,loss_post,seconds";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(field: &str, what: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| Error::FormatError {
        line: 0,
        reason: format!("bad {what} value '{field}'"),
    })
}

/// One scene evaluated in one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scene_id: usize,
    pub mode: String,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_window_losses: Vec<(Option<f64>, Option<f64>)>,
    pub runtime_seconds: Option<f64>,
}

impl EvalReport {
    pub fn new(scene_id: usize, mode: impl Into<String>, iou: &IoUReport) -> EvalReport {
        EvalReport {
            scene_id,
            mode: mode.into(),
            miou: iou.miou,
            per_class_iou: iou.per_class.clone(),
            per_window_losses: Vec::new(),
            runtime_seconds: None,
        }
    }

    pub fn mean_loss_pre(&self) -> Option<f64> {
        mean(self.per_window_losses.iter().filter_map(|(pre, _)| *pre))
    }

    pub fn mean_loss_post(&self) -> Option<f64> {
        mean(self.per_window_losses.iter().filter_map(|(_, post)| *post))
    }

    /// Aggregate CSV row; absent values stay empty.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.scene_id,
            self.mode,
            self.miou,
            fmt_opt(self.mean_loss_pre()),
            fmt_opt(self.mean_loss_post()),
            fmt_opt(self.runtime_seconds),
        )
    }

    /// Key-value serialization of the full record.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("scene_id = {}\n", self.scene_id));
        out.push_str(&format!("mode = {}\n", self.mode));
        out.push_str(&format!("miou = {}\n", self.miou));
        for (j, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => out.push_str(&format!("iou_{j} = {v}\n")),
                None => out.push_str(&format!("iou_{j} = absent\n")),
            }
        }
        out.push_str(&format!("windows = {}\n", self.per_window_losses.len()));
        for (i, (pre, post)) in self.per_window_losses.iter().enumerate() {
            out.push_str(&format!(
                "window_{i} = {} {}\n",
                pre.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                post.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            ));
        }
        match self.runtime_seconds {
            Some(v) => out.push_str(&format!("seconds = {v}\n")),
            None => out.push_str("seconds = absent\n"),
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<EvalReport> {
        let mut fields = std::collections::BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::FormatError {
                line: idx + 1,
                reason: "expected 'key = value'".into(),
            })?;
            fields.insert(key.trim().to_string(), value.trim().to_string());
        }
        let get = |key: &str| -> Result<String> {
            fields.get(key).cloned().ok_or_else(|| Error::FormatError {
                line: 0,
                reason: format!("missing key '{key}'"),
            })
        };
        let scene_id = get("scene_id")?.parse().map_err(|_| Error::FormatError {
            line: 0,
            reason: "bad scene_id".into(),
        })?;
        let mode = get("mode")?;
        let miou: f64 = get("miou")?.parse().map_err(|_| Error::FormatError {
            line: 0,
            reason: "bad miou".into(),
        })?;
        let mut per_class_iou = Vec::new();
        while let Some(v) = fields.get(&format!("iou_{}", per_class_iou.len())) {
            per_class_iou.push(if v == "absent" {
                None
            } else {
                Some(v.parse().map_err(|_| Error::FormatError {
                    line: 0,
                    reason: format!("bad iou value '{v}'"),
                })?)
            });
        }
        let window_count: usize = get("windows")?.parse().map_err(|_| Error::FormatError {
            line: 0,
            reason: "bad window count".into(),
        })?;
        let mut per_window_losses = Vec::with_capacity(window_count);
        for i in 0..window_count {
            let line = get(&format!("window_{i}"))?;
            let mut parts = line.split_whitespace();
            let mut next = |what: &str| -> Result<Option<f64>> {
                let field = parts.next().ok_or(Error::FormatError {
                    line: 0,
                    reason: format!("missing {what}"),
                })?;
                if field == "-" {
                    Ok(None)
                } else {
                    parse_opt(field, what)
                }
            };
            per_window_losses.push((next("loss_pre")?, next("loss_post")?));
        }
        let seconds_raw = get("seconds")?;
        let runtime_seconds = if seconds_raw == "absent" {
            None
        } else {
            parse_opt(&seconds_raw, "seconds")?
        };
        Ok(EvalReport {
            scene_id,
            mode,
            miou,
            per_class_iou,
            per_window_losses,
            runtime_seconds,
        })
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}
