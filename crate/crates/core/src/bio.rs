//! Developability descriptor ingestion and train-fitted mean imputation.

use std::collections::BTreeMap;
use std::io::Read;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const BIO_COLUMNS: [&str; 4] = ["psh", "pnc", "ppc", "sfvcsp"];
pub const N_BIO: usize = 4;

/// One construct's developability descriptors; any subset may be missing.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BiophysRow {
    pub psh: Option<f64>,
    pub pnc: Option<f64>,
    pub ppc: Option<f64>,
    pub sfvcsp: Option<f64>,
}

impl BiophysRow {
    pub fn values(&self) -> [Option<f64>; N_BIO] {
        [self.psh, self.pnc, self.ppc, self.sfvcsp]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in BIO_COLUMNS.iter().zip(self.values()) {
            if let Some(x) = v {
                if !x.is_finite() {
                    return Err(CoreError::numerical(format!("non-finite {name} value")));
                }
            }
        }
        Ok(())
    }
}

/// Per-column means fitted on the training partition only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BioImputer {
    pub means: [f64; N_BIO],
}

/// Fit per-column means over present values.
///
/// Means are computed on training rows only so that imputation never leaks
/// validation or test statistics. A column with no observed training value
/// cannot be imputed and is an error.
pub fn fit_imputer(train_rows: &[BiophysRow]) -> Result<BioImputer> {
    let mut means = [0.0; N_BIO];
    for (c, name) in BIO_COLUMNS.iter().enumerate() {
        let present: Vec<f64> =
            train_rows.iter().filter_map(|r| r.values()[c]).collect();
        if present.is_empty() {
            return Err(CoreError::config(format!(
                "column `{name}` has no observed value in the training rows"
            )));
        }
        means[c] = present.iter().sum::<f64>() / present.len() as f64;
    }
    Ok(BioImputer { means })
}

/// Replace missing cells by the fitted means; present cells pass through.
pub fn impute(rows: &[BiophysRow], imputer: &BioImputer) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), N_BIO));
    for (i, row) in rows.iter().enumerate() {
        for (c, v) in row.values().into_iter().enumerate() {
            out[(i, c)] = v.unwrap_or(imputer.means[c]);
        }
    }
    out
}

/// Parse `sig_key,psh,pnc,ppc,sfvcsp` rows; empty cells mean "missing".
pub fn parse_biophys_csv<R: Read>(r: R) -> Result<BTreeMap<String, BiophysRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
    let headers = rdr
        .headers()
        .map_err(|e| CoreError::parse(1, format!("unreadable header: {e}")))?
        .clone();
    let mut col = BTreeMap::new();
    for name in ["sig_key", "psh", "pnc", "ppc", "sfvcsp"] {
        let i = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CoreError::MissingColumn(name.to_string()))?;
        col.insert(name, i);
    }

    let mut out = BTreeMap::new();
    for (idx, row) in rdr.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| CoreError::parse(line, format!("unparseable row: {e}")))?;
        let get = |name: &str| row.get(col[name]).unwrap_or("");
        let parse_cell = |name: &str| -> Result<Option<f64>> {
            let raw = get(name);
            if raw.is_empty() {
                return Ok(None);
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| CoreError::parse(line, format!("bad {name} value `{raw}`")))?;
            if !v.is_finite() {
                return Err(CoreError::parse(line, format!("non-finite {name} value")));
            }
            Ok(Some(v))
        };
        let key = get("sig_key").to_string();
        if key.is_empty() {
            return Err(CoreError::parse(line, "empty sig_key"));
        }
        let row = BiophysRow {
            psh: parse_cell("psh")?,
            pnc: parse_cell("pnc")?,
            ppc: parse_cell("ppc")?,
            sfvcsp: parse_cell("sfvcsp")?,
        };
        out.insert(key, row);
    }
    Ok(out)
}

pub fn write_biophys_csv<W: std::io::Write>(
    rows: &BTreeMap<String, BiophysRow>,
    mut w: W,
) -> Result<()> {
    writeln!(w, "sig_key,psh,pnc,ppc,sfvcsp")?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for (key, row) in rows {
        writeln!(
            w,
            "{key},{},{},{},{}",
            fmt(row.psh),
            fmt(row.pnc),
            fmt(row.ppc),
            fmt(row.sfvcsp)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(psh: Option<f64>, pnc: Option<f64>) -> BiophysRow {
        BiophysRow { psh, pnc, ppc: Some(5.0), sfvcsp: Some(5.0) }
    }

    #[test]
    fn means_over_present_values() {
        let rows = vec![row(Some(1.0), Some(2.0)), row(Some(3.0), Some(2.0)), row(None, Some(2.0))];
        let imp = fit_imputer(&rows).unwrap();
        assert_eq!(imp.means[0], 2.0);
        assert_eq!(imp.means[1], 2.0);
    }

    #[test]
    fn all_missing_column_errors() {
        let rows = vec![row(Some(1.0), None), row(Some(2.0), None)];
        assert!(fit_imputer(&rows).is_err());
    }

    #[test]
    fn impute_fills_missing_and_keeps_present() {
        let train = vec![row(Some(1.0), Some(4.0)), row(Some(3.0), Some(6.0))];
        let imp = fit_imputer(&train).unwrap();
        let target = vec![row(None, Some(5.0)), row(Some(9.0), None)];
        let x = impute(&target, &imp);
        assert_eq!(x[(0, 0)], 2.0);
        assert_eq!(x[(0, 1)], 5.0);
        assert_eq!(x[(1, 0)], 9.0);
        assert_eq!(x[(1, 1)], 5.0);
        // Idempotent: re-imputing the completed matrix changes nothing.
        let completed: Vec<BiophysRow> = (0..2)
            .map(|i| BiophysRow {
                psh: Some(x[(i, 0)]),
                pnc: Some(x[(i, 1)]),
                ppc: Some(x[(i, 2)]),
                sfvcsp: Some(x[(i, 3)]),
            })
            .collect();
        let x2 = impute(&completed, &imp);
        assert_eq!(x, x2);
    }

    #[test]
    fn fully_missing_row_becomes_means() {
        let train = vec![row(Some(2.0), Some(4.0)), row(Some(4.0), Some(8.0))];
        let imp = fit_imputer(&train).unwrap();
        let x = impute(&[BiophysRow::default()], &imp);
        assert_eq!(x.row(0).to_vec(), vec![3.0, 6.0, 5.0, 5.0]);
    }

    #[test]
    fn csv_round_trip() {
        let mut rows = BTreeMap::new();
        rows.insert("k1".to_string(), row(Some(1.5), None));
        rows.insert("k2".to_string(), BiophysRow::default());
        let mut buf = Vec::new();
        write_biophys_csv(&rows, &mut buf).unwrap();
        let back = parse_biophys_csv(buf.as_slice()).unwrap();
        assert_eq!(rows, back);
    }
}
