//! Resolution of multiplier names and table files.

use std::path::Path;

use lutmoe::axmul::{
    build_exact_multiplier, build_truncation_multiplier, catalog_entry, error_stats, load_lut, nominal_truncation_power,
    saving_percent, CATALOG, EXACT_NAME, EXACT_POWER_NW,
};
use lutmoe::AxMultiplier;
use serde::Serialize;

use crate::error::{CliError, Context, Result};

/// A requested multiplier: its power and, when available, its table.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub name: String,
    pub power_nw: f64,
    pub table: Option<AxMultiplier>,
}

impl Resolved {
    pub fn table(&self) -> Result<&AxMultiplier> {
        self.table.as_ref().ok_or_else(|| {
            CliError::Config(format!("multiplier {} has no builtin table; pass its .axm8 file instead", self.name))
        })
    }
}

fn catalog_name(spec: &str) -> Option<&'static str> {
    let full = if spec.starts_with("mul8s_") { spec.to_string() } else { format!("mul8s_1{}", spec.trim_start_matches('1')) };
    catalog_entry(&full).map(|e| e.name)
}

/// `exact`, a catalog name (`mul8s_1L2J` or `L2J`), `trunc<k>` or a path to
/// an AXM8 table file.
pub fn resolve(spec: &str) -> Result<Resolved> {
    let spec = spec.trim();
    let path = lutmoe::data::resolve_data_path(Path::new(spec));
    if path.is_file() || spec.ends_with(".axm8") {
        let m = load_lut(&path).context(|| format!("multiplier {spec}"))?;
        return Ok(Resolved {
            name: m.name().to_string(),
            power_nw: m.power_nw(),
            table: Some(m),
        });
    }
    if spec.eq_ignore_ascii_case("exact") || catalog_name(spec) == Some(EXACT_NAME) {
        return Ok(Resolved {
            name: EXACT_NAME.into(),
            power_nw: EXACT_POWER_NW,
            table: Some(build_exact_multiplier()),
        });
    }
    if let Some(k) = spec.strip_prefix("trunc") {
        let k: u32 = k.parse().map_err(|_| CliError::Config(format!("bad truncation multiplier {spec:?}")))?;
        let m = build_truncation_multiplier(k, nominal_truncation_power(k)).context(|| format!("multiplier {spec}"))?;
        return Ok(Resolved {
            name: m.name().to_string(),
            power_nw: m.power_nw(),
            table: Some(m),
        });
    }
    if let Some(name) = catalog_name(spec) {
        let e = catalog_entry(name).expect("catalog name");
        return Ok(Resolved {
            name: e.name.into(),
            power_nw: e.power_nw,
            table: None,
        });
    }
    Err(CliError::Config(format!(
        "unknown multiplier {spec:?}: use exact, trunc<k>, a catalog name or an .axm8 file"
    )))
}

pub fn resolve_all(specs: &[String]) -> Result<Vec<Resolved>> {
    specs.iter().map(|s| resolve(s)).collect()
}

/// One row of the multiplier characterization table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MulInfo {
    pub name: String,
    pub power_nw: f64,
    pub saving_pct: f64,
    pub published_saving_pct: Option<f64>,
    /// Measured over the table when one is available, published otherwise.
    pub error_probability_pct: f64,
    pub mean_abs_error: Option<f64>,
    pub max_abs_error: Option<u32>,
    pub measured: bool,
}

pub fn mulinfo(specs: &[String]) -> Result<Vec<MulInfo>> {
    let specs: Vec<String> = if specs.is_empty() { CATALOG.iter().map(|e| e.name.to_string()).collect() } else { specs.to_vec() };
    let mut rows = Vec::with_capacity(specs.len());
    for s in &specs {
        let r = resolve(s)?;
        let published = catalog_entry(&r.name);
        let stats = r.table.as_ref().map(error_stats);
        let error_probability_pct = match (stats, published) {
            (Some(st), _) => st.error_probability * 100.0,
            (None, Some(p)) => p.error_probability_pct,
            (None, None) => f64::NAN,
        };
        rows.push(MulInfo {
            name: r.name.clone(),
            power_nw: r.power_nw,
            saving_pct: saving_percent(r.power_nw, EXACT_POWER_NW)?,
            published_saving_pct: published.map(|p| p.saving_pct),
            error_probability_pct,
            mean_abs_error: stats.map(|s| s.mean_abs_error),
            max_abs_error: stats.map(|s| s.max_abs_error),
            measured: stats.is_some(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_resolve() {
        assert_eq!(resolve("exact").unwrap().name, EXACT_NAME);
        assert_eq!(resolve("KV6").unwrap().name, EXACT_NAME);
        let l2j = resolve("L2J").unwrap();
        assert_eq!((l2j.name.as_str(), l2j.power_nw), ("mul8s_1L2J", 0.301));
        assert!(l2j.table().is_err());
        assert_eq!(resolve("trunc2").unwrap().table().unwrap().name(), "trunc2");
        assert!(matches!(resolve("nope"), Err(CliError::Config(_))));
    }

    #[test]
    fn table_files_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t3.axm8");
        lutmoe::axmul::save_lut(&build_truncation_multiplier(3, 0.25).unwrap(), &p).unwrap();
        let r = resolve(p.to_str().unwrap()).unwrap();
        assert_eq!((r.name.as_str(), r.power_nw), ("trunc3", 0.25));
    }

    #[test]
    fn catalog_savings_rows() {
        let rows = mulinfo(&[]).unwrap();
        assert_eq!(rows.len(), 8);
        for r in &rows {
            assert!((r.saving_pct - r.published_saving_pct.unwrap()).abs() <= 0.1, "{}", r.name);
        }
        assert!(rows[0].measured && rows[0].error_probability_pct == 0.0);
    }
}
