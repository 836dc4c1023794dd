use std::collections::BTreeMap;
use std::fmt::Write as _;

use cyllevy_core::integrate::EmpiricalLaw;
use serde::{Deserialize, Serialize};

use crate::VerifyError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    /// Statistically unreliable; listed but never fails a run.
    Flagged,
}

impl Status {
    pub fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Flagged => "FLAG",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckRow {
    pub name: String,
    pub anchor: String,
    pub measured: BTreeMap<String, f64>,
    pub tolerances: BTreeMap<String, f64>,
    pub stderr: BTreeMap<String, f64>,
    /// Non-negative iff the check passes.
    pub margin: f64,
    pub status: Status,
    #[serde(default)]
    pub note: String,
}

impl CheckRow {
    pub fn new(name: &str, anchor: &str) -> Self {
        Self {
            name: name.to_string(),
            anchor: anchor.to_string(),
            measured: BTreeMap::new(),
            tolerances: BTreeMap::new(),
            stderr: BTreeMap::new(),
            margin: 0.0,
            status: Status::Pass,
            note: String::new(),
        }
    }

    pub fn measure(mut self, key: &str, v: f64) -> Self {
        self.measured.insert(key.to_string(), v);
        self
    }

    pub fn tolerance(mut self, key: &str, v: f64) -> Self {
        self.tolerances.insert(key.to_string(), v);
        self
    }

    pub fn stderr(mut self, key: &str, v: f64) -> Self {
        self.stderr.insert(key.to_string(), v);
        self
    }

    pub fn note(mut self, s: impl Into<String>) -> Self {
        self.note = s.into();
        self
    }

    /// Sets the margin and the matching status.
    pub fn judge(mut self, margin: f64) -> Self {
        self.margin = margin;
        self.status = if margin >= 0.0 {
            Status::Pass
        } else {
            Status::Fail
        };
        self
    }

    pub fn flag(mut self, reason: &str) -> Self {
        self.status = Status::Flagged;
        if !self.note.is_empty() {
            self.note.push_str("; ");
        }
        self.note.push_str(reason);
        self
    }

    /// Rejects rows whose measured values are not finite.
    pub fn finite(self) -> Result<Self, VerifyError> {
        for (k, v) in &self.measured {
            if !v.is_finite() {
                return Err(VerifyError::NonFinite(format!("{}: {k}", self.name)));
            }
        }
        if !self.margin.is_finite() {
            return Err(VerifyError::NonFinite(format!("{}: margin", self.name)));
        }
        Ok(self)
    }

    pub fn line(&self) -> String {
        let vals: Vec<String> = self
            .measured
            .iter()
            .map(|(k, v)| format!("{k}={v:.4e}"))
            .collect();
        format!(
            "[{}] {} margin={:.3e} {}",
            self.status.label(),
            self.name,
            self.margin,
            vals.join(" ")
        )
    }
}

/// CSV table written next to a report.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub csv: String,
}

impl Table {
    pub fn new(name: &str, header: &str) -> Self {
        Self {
            name: name.to_string(),
            csv: format!("{header}\n"),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        let _ = writeln!(self.csv, "{}", cells.join(","));
    }
}

/// Everything a battery produces.
#[derive(Clone, Debug, Default)]
pub struct CheckOutput {
    pub rows: Vec<CheckRow>,
    pub tables: Vec<Table>,
    pub laws: Vec<(String, EmpiricalLaw)>,
}

impl CheckOutput {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.status != Status::Fail)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub checks: Vec<CheckRow>,
    pub config_hash: String,
    pub seed: u64,
    pub runtime_secs: f64,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

impl Report {
    pub fn failures(&self) -> usize {
        self.checks
            .iter()
            .filter(|c| c.status == Status::Fail)
            .count()
    }

    pub fn exit_code(&self) -> i32 {
        i32::from(self.failures() > 0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, VerifyError> {
        serde_json::from_str(text).map_err(|e| VerifyError::MalformedReport(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub check: String,
    pub config_hash: String,
    pub seed: u64,
    pub status: Status,
    pub margin: f64,
    pub timestamp_ms: u64,
    pub anchor: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    /// One row per `(check, config_hash)`, the latest timestamp winning, ordered by name.
    pub fn merge(reports: &[Report]) -> Self {
        let mut latest: BTreeMap<(String, String), SummaryRow> = BTreeMap::new();
        for r in reports {
            for c in &r.checks {
                let row = SummaryRow {
                    check: c.name.clone(),
                    config_hash: r.config_hash.clone(),
                    seed: r.seed,
                    status: c.status,
                    margin: c.margin,
                    timestamp_ms: r.timestamp_ms,
                    anchor: c.anchor.clone(),
                };
                let key = (c.name.clone(), r.config_hash.clone());
                match latest.get(&key) {
                    Some(old) if old.timestamp_ms > row.timestamp_ms => {}
                    _ => {
                        latest.insert(key, row);
                    }
                }
            }
        }
        Self {
            rows: latest.into_values().collect(),
        }
    }

    pub fn failures(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.status == Status::Fail)
            .count()
    }

    pub fn exit_code(&self) -> i32 {
        i32::from(self.failures() > 0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("check,config_hash,seed,status,margin,timestamp_ms\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:e},{}",
                r.check,
                r.config_hash,
                r.seed,
                r.status.label(),
                r.margin,
                r.timestamp_ms
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(hash: &str, ts: u64, rows: &[(&str, f64)]) -> Report {
        Report {
            checks: rows
                .iter()
                .map(|(n, m)| CheckRow::new(n, "anchor").measure("x", 1.0).judge(*m))
                .collect(),
            config_hash: hash.into(),
            seed: 1,
            runtime_secs: 0.0,
            timestamp_ms: ts,
        }
    }

    #[test]
    fn empty_summary_exits_zero() {
        let s = Summary::merge(&[]);
        assert!(s.rows.is_empty());
        assert_eq!(s.exit_code(), 0);
    }

    #[test]
    fn failing_report_sets_exit_code() {
        let s = Summary::merge(&[
            report("a", 1, &[("x", 1.0)]),
            report("b", 2, &[("y", -1.0)]),
        ]);
        assert_eq!(s.rows.len(), 2);
        assert_eq!(s.exit_code(), 1);
    }

    #[test]
    fn duplicates_keep_latest_and_sort_by_name() {
        let s = Summary::merge(&[
            report("h", 5, &[("zeta", -1.0), ("alpha", 1.0)]),
            report("h", 9, &[("zeta", 2.0)]),
            report("h", 1, &[("zeta", -3.0)]),
        ]);
        assert_eq!(
            s.rows.iter().map(|r| r.check.as_str()).collect::<Vec<_>>(),
            ["alpha", "zeta"]
        );
        assert_eq!(s.rows[1].timestamp_ms, 9);
        assert_eq!(s.exit_code(), 0);
    }

    #[test]
    fn non_finite_rows_are_rejected() {
        assert!(CheckRow::new("c", "a")
            .measure("x", f64::NAN)
            .judge(1.0)
            .finite()
            .is_err());
        assert!(CheckRow::new("c", "a")
            .measure("x", 1.0)
            .judge(f64::INFINITY)
            .finite()
            .is_err());
    }

    #[test]
    fn flagged_rows_do_not_fail() {
        let mut r = report("h", 1, &[("x", -1.0)]);
        r.checks[0] = r.checks[0].clone().flag("denominator near zero");
        assert_eq!(r.exit_code(), 0);
        let back = Report::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
