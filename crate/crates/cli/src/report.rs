//! CSV and JSON output.

use std::io::Write;
use std::path::Path;

use lutmoe::cost::MacReport;
use lutmoe::SweepPoint;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const SWEEP_COLUMNS: [&str; 10] = ["arch", "variant", "multiplier", "m_total", "m_eff", "f_apx", "p_norm", "top1", "retrained", "seed"];

fn csv_err(e: csv::Error) -> CliError {
    CliError::Config(format!("CSV output: {e}"))
}

pub fn sweep_csv(rows: &[SweepPoint]) -> Result<Vec<u8>> {
    // explicit header so an empty sweep still has one
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(SWEEP_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Config(e.to_string()))
}

/// Parse sweep rows; errors carry the 1-based line number.
pub fn parse_sweep_csv(bytes: &[u8], origin: &str) -> Result<Vec<SweepPoint>> {
    let mut rd = csv::Reader::from_reader(bytes);
    let parse_err = |line: u64, msg: String| CliError::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let headers = rd.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != SWEEP_COLUMNS {
        return Err(parse_err(1, format!("header must be {}", SWEEP_COLUMNS.join(","))));
    }
    let mut rows = Vec::new();
    for rec in rd.deserialize::<SweepPoint>() {
        let row = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Two columns, `p_norm,top1`, for external plotting.
pub fn plot_data(rows: &[SweepPoint]) -> Vec<u8> {
    let mut out = b"p_norm,top1\n".to_vec();
    for r in rows {
        writeln!(out, "{},{}", r.p_norm, r.top1).expect("write to vec");
    }
    out
}

#[derive(Debug, Serialize)]
struct CountRow<'a> {
    arch: &'a str,
    variant: String,
    experts: usize,
    m_total: u64,
    m_eff: u64,
    m_approx: u64,
    f_apx: f64,
    router_macs: u64,
    gateway_macs: u64,
    params_total: u64,
    params_active: u64,
}

pub fn count_csv(reports: &[MacReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(CountRow {
            arch: &r.arch,
            variant: r.variant.to_string(),
            experts: r.experts,
            m_total: r.m_total,
            m_eff: r.m_eff,
            m_approx: r.m_approx,
            f_apx: r.f_apx,
            router_macs: r.router_macs,
            gateway_macs: r.gateway_macs,
            params_total: r.params_total,
            params_active: r.params_active,
        })
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Config(e.to_string()))
}

pub fn count_table(reports: &[MacReport]) -> String {
    let mut s = format!(
        "{:<16} {:<8} {:>14} {:>14} {:>10} {:>10} {:>8} {:>12} {:>12}\n",
        "arch", "variant", "total MACs", "eff MACs", "total (M)", "eff (M)", "f_apx", "params", "active"
    );
    for r in reports {
        s += &format!(
            "{:<16} {:<8} {:>14} {:>14} {:>10.2} {:>10.2} {:>8.5} {:>12} {:>12}\n",
            r.arch,
            r.variant.as_str(),
            r.m_total,
            r.m_eff,
            r.total_m(),
            r.eff_m(),
            r.f_apx,
            r.params_total,
            r.params_active
        );
    }
    s
}

/// Everything one sweep produced.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub version: &'static str,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub rows: Vec<SweepPoint>,
    pub mac_reports: Vec<MacReport>,
    /// Seconds; zero under `--deterministic`.
    pub wall_clock_s: f64,
}

pub fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v).map_err(|e| CliError::Config(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// `out.csv` -> `out.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> std::path::PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(p: f64, a: f64) -> SweepPoint {
        SweepPoint {
            arch: "toy_cnn".into(),
            variant: "dense".into(),
            multiplier: "m, \"quoted\"".into(),
            m_total: 10,
            m_eff: 10,
            f_apx: 0.5,
            p_norm: p,
            top1: a,
            retrained: false,
            seed: 1,
        }
    }

    #[test]
    fn sweep_csv_round_trips() {
        let rows = vec![row(0.7, 0.5), row(1.0, 0.9)];
        let bytes = sweep_csv(&rows).unwrap();
        assert!(bytes.starts_with(b"arch,variant,multiplier,m_total,m_eff,f_apx,p_norm,top1,retrained,seed\n"));
        assert_eq!(parse_sweep_csv(&bytes, "x").unwrap(), rows);
    }

    #[test]
    fn malformed_rows_report_line() {
        let mut bytes = sweep_csv(&[row(0.7, 0.5)]).unwrap();
        bytes.extend_from_slice(b"toy,dense,m,1,1,0.5,notanumber,0.5,false,1\n");
        match parse_sweep_csv(&bytes, "in.csv") {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_sweep_csv(b"a,b\n1,2\n", "x"), Err(CliError::Parse { line: 1, .. })));
    }

    #[test]
    fn sibling_names() {
        assert_eq!(sibling(Path::new("out/sweep.csv"), "json"), Path::new("out/sweep.json"));
    }
}
