//! CSV tables with sibling JSON manifests.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so output
//! is byte-stable across runs. Non-finite values appear as `inf`, `-inf` and
//! `nan`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::matrix_to_pairs;
use crate::error::Result;
use crate::extraction::MasterEquationSeries;
use crate::operators::gell_mann_basis;
use crate::propagation::{ComparisonReport, Trajectory};

pub fn format_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        // Display already renders ±∞ as `inf`/`-inf`.
        format!("{x}")
    }
}

/// Column-oriented table.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<String>>,
}

impl Table {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, values: &[f64]) -> &mut Self {
        self.push_raw(name, values.iter().map(|&x| format_f64(x)).collect())
    }

    pub fn push_raw(&mut self, name: impl Into<String>, values: Vec<String>) -> &mut Self {
        if let Some(first) = self.columns.first() {
            assert_eq!(first.len(), values.len(), "column length mismatch");
        }
        self.headers.push(name.into());
        self.columns.push(values);
        self
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.headers)?;
        for i in 0..self.rows() {
            w.write_record(self.columns.iter().map(|c| c[i].as_str()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `foo/bar.csv` → `foo/bar.json`.
pub fn manifest_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Write `table` to `path` and its manifest beside it. The manifest records
/// the column names alongside `meta`.
pub fn write_table_with_manifest(path: &Path, table: &Table, mut meta: Value) -> Result<()> {
    table.write(path)?;
    if let Value::Object(map) = &mut meta {
        map.insert("columns".into(), json!(table.headers));
        map.insert("rows".into(), json!(table.rows()));
        map.insert(
            "number_format".into(),
            json!("shortest round-trip decimal; non-finite values as inf, -inf, nan"),
        );
    }
    write_json(&manifest_path(path), &meta)
}

/// `t`, then each channel followed by `<name>_se` when a standard error exists.
pub fn trajectory_table(traj: &Trajectory) -> Table {
    let mut table = Table::new();
    table.push("t", traj.grid.times());
    for ch in &traj.channels {
        table.push(ch.name.clone(), &ch.values);
        if let Some(se) = &ch.se {
            table.push(format!("{}_se", ch.name), se);
        }
    }
    table
}

/// `t`, `singular`, `gamma_1..` (continuity-tracked order), `h_1..` (Gell-Mann coefficients of `H_eff`).
/// Flagged rows carry `inf` in `singular` and `nan` in the value columns.
pub fn master_equation_table(me: &MasterEquationSeries) -> Result<Table> {
    let basis = gell_mann_basis(me.dim)?;
    let n = basis.len() - 1;
    let mut table = Table::new();
    table.push("t", me.grid.times());
    table.push_raw(
        "singular",
        me.points.iter().map(|p| if p.is_some() { "0".into() } else { "inf".into() }).collect(),
    );
    for k in 0..n {
        let col: Vec<f64> = me.points.iter().map(|p| p.as_ref().map_or(f64::NAN, |p| p.rates[k])).collect();
        table.push(format!("gamma_{}", k + 1), &col);
    }
    for m in 1..=n {
        let col: Vec<f64> = me
            .points
            .iter()
            .map(|p| p.as_ref().map_or(f64::NAN, |p| basis.coefficients(&p.h_eff)[m].re))
            .collect();
        table.push(format!("h_{m}"), &col);
    }
    Ok(table)
}

/// Full operator content of a master-equation series, complex entries as `[re, im]`.
pub fn master_equation_json(me: &MasterEquationSeries) -> Value {
    let points: Vec<Value> = me
        .grid
        .times()
        .iter()
        .zip(&me.points)
        .map(|(&t, p)| match p {
            None => json!({ "t": t, "singular": true }),
            Some(p) => json!({
                "t": t,
                "singular": false,
                "h_eff": matrix_to_pairs(&p.h_eff),
                "gamma": matrix_to_pairs(&p.gamma),
                "rates": p.rates,
                "lindblads": p.lindblads.iter().map(matrix_to_pairs).collect::<Vec<_>>(),
            }),
        })
        .collect();
    json!({
        "dim": me.dim,
        "omega0": me.omega0,
        "provenance": me.provenance,
        "points": points,
    })
}

/// `t`, then `<channel>_dev` and `<channel>_band` for each compared channel.
pub fn comparison_table(times: &[f64], report: &ComparisonReport) -> Table {
    let mut table = Table::new();
    table.push("t", times);
    for ch in &report.channels {
        table.push(format!("{}_dev", ch.name), &ch.deviations);
        table.push(format!("{}_band", ch.name), &ch.band);
    }
    table
}

/// Per-channel summary without the pointwise arrays.
pub fn comparison_summary(report: &ComparisonReport) -> Value {
    json!({
        "tolerance": report.tolerance,
        "pass": report.pass,
        "channels": report.channels.iter().map(|c| json!({
            "name": c.name,
            "sup_norm": c.sup_norm,
            "violations": c.violations,
            "pass": c.pass,
        })).collect::<Vec<_>>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_non_finite() {
        assert_eq!(format_f64(f64::INFINITY), "inf");
        assert_eq!(format_f64(f64::NEG_INFINITY), "-inf");
        assert_eq!(format_f64(f64::NAN), "nan");
        assert_eq!(format_f64(0.1), "0.1");
        let x = 1.0 / 3.0;
        assert_eq!(format_f64(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn table_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/a.csv");
        let mut t = Table::new();
        t.push("t", &[0.0, 0.5]).push("x", &[1.0, f64::INFINITY]);
        write_table_with_manifest(&path, &t, json!({ "command": "test" })).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "t,x\n0,1\n0.5,inf\n");
        let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("sub/a.json")).unwrap()).unwrap();
        assert_eq!(m["columns"], json!(["t", "x"]));
        assert_eq!(m["command"], "test");
    }
}
