//! Per-iteration metrics table (CSV with a header row).

use std::path::Path;

use anyhow::{bail, Context, Result};

use noisediv::optimizer::IterationRecord;

pub const WALL_TIME: &str = "wall_time";

/// Column names for a run logging `monitors`; `member` is present for
/// sequential builds.
pub fn columns(monitors: &[String], member: bool) -> Vec<String> {
    let mut cols = vec!["iteration".to_string()];
    if member {
        cols.push("member".into());
    }
    for c in [
        "total",
        "reward_mean",
        "reward_min",
        "quality_hinge",
        "diversity_hinge",
        "reg_term",
        "v_b",
    ] {
        cols.push(c.into());
    }
    cols.extend(monitors.iter().map(|m| format!("div_{m}")));
    for c in ["grad_norm", "clipped_norm", "delta_l2", "band_low", "band_mid", "band_high", "reverted", WALL_TIME] {
        cols.push(c.into());
    }
    cols
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn row(rec: &IterationRecord, iteration: usize, member: Option<usize>, monitors: &[String]) -> Vec<String> {
    let b = &rec.breakdown;
    let mut out = vec![iteration.to_string()];
    if let Some(m) = member {
        out.push(m.to_string());
    }
    for v in [b.total, b.reward_mean, b.min_reward, b.quality_hinge, b.diversity_hinge, b.reg_term, b.v_b] {
        out.push(num(v));
    }
    for m in monitors {
        out.push(rec.monitors.get(m).map_or_else(String::new, |v| num(*v)));
    }
    out.push(num(rec.grad_norm));
    out.push(num(rec.clipped_norm));
    out.push(num(rec.delta_l2));
    match rec.bands {
        Some(e) => out.extend(e.iter().map(|v| num(*v))),
        None => out.extend(std::iter::repeat_n(String::new(), 3)),
    }
    out.push(u8::from(rec.reverted).to_string());
    out.push(format!("{:.6}", rec.wall_time.0));
    out
}

pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// A numeric CSV table; empty cells read as NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let vals = rec
                .iter()
                .zip(&header)
                .map(|(cell, col)| {
                    if cell.is_empty() {
                        Ok(f64::NAN)
                    } else {
                        cell.parse::<f64>()
                            .with_context(|| format!("row {}, column `{col}`: `{cell}` is not a number", i + 1))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(vals);
        }
        Ok(Self { header, rows })
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Column indices for `names`, or an error naming every missing one.
    pub fn require(&self, names: &[&str]) -> Result<Vec<usize>> {
        let missing: Vec<&str> = names.iter().copied().filter(|n| self.index(n).is_none()).collect();
        if !missing.is_empty() {
            bail!("table lacks column(s): {}", missing.join(", "));
        }
        Ok(names.iter().map(|n| self.index(n).unwrap()).collect())
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[i]).collect()
    }
}
