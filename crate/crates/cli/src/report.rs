use serde::{Deserialize, Serialize};
use serde_json::Value;

use kfp_core::bounds::BoundReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Indeterminate,
}

impl Status {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

/// One suite of a run. `measured` and `theoretical` are the worst case over the
/// suite's configurations; `details` carries per-configuration numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub status: Status,
    pub measured: f64,
    pub theoretical: f64,
    pub margin: f64,
    pub runtime_ms: u64,
    pub details: Value,
}

impl SuiteResult {
    /// Result of `measured <= tol`.
    pub fn at_most(name: &str, measured: f64, tol: f64, details: Value) -> Self {
        SuiteResult {
            name: name.to_string(),
            status: Status::from_bool(measured <= tol),
            measured,
            theoretical: tol,
            margin: tol - measured,
            runtime_ms: 0,
            details,
        }
    }

    /// Result of `measured >= tol`.
    pub fn at_least(name: &str, measured: f64, tol: f64, details: Value) -> Self {
        SuiteResult {
            status: Status::from_bool(measured >= tol),
            margin: measured - tol,
            ..Self::at_most(name, measured, tol, details)
        }
    }

    /// Worst margin over bound reports; indeterminate entries make the suite
    /// indeterminate unless something failed.
    pub fn from_bounds(name: &str, reports: &[BoundReport]) -> Self {
        let failed = reports.iter().any(|r| r.pass == Some(false));
        let open = reports.iter().any(|r| r.pass.is_none());
        let worst = reports
            .iter()
            .filter(|r| r.pass.is_some())
            .min_by(|a, b| a.margin.total_cmp(&b.margin));
        let status = if failed || reports.is_empty() {
            Status::Fail
        } else if open {
            Status::Indeterminate
        } else {
            Status::Pass
        };
        SuiteResult {
            name: name.to_string(),
            status,
            measured: worst.map_or(f64::NAN, |r| r.measured),
            theoretical: worst.map_or(f64::NAN, |r| r.theoretical),
            margin: worst.map_or(f64::NAN, |r| r.margin),
            runtime_ms: 0,
            details: serde_json::json!({ "reports": reports }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
}

impl Environment {
    pub fn current() -> Self {
        Environment {
            version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            threads: rayon::current_num_threads(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub command: String,
    pub config: Value,
    pub suites: Vec<SuiteResult>,
    pub environment: Environment,
    pub runtime_ms: u64,
    pub overall_pass: bool,
}

impl VerificationReport {
    pub fn new(command: &str, config: Value, suites: Vec<SuiteResult>, runtime_ms: u64) -> Self {
        let overall_pass = suites.iter().all(|s| s.status != Status::Fail);
        VerificationReport {
            command: command.to_string(),
            config,
            suites,
            environment: Environment::current(),
            runtime_ms,
            overall_pass,
        }
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }
}

/// Drops `runtime_ms` everywhere and the environment stamp, the fields excluded
/// from determinism comparisons.
pub fn strip_timing(mut report: Value) -> Value {
    fn walk(v: &mut Value) {
        match v {
            Value::Object(map) => {
                map.remove("runtime_ms");
                map.remove("environment");
                map.values_mut().for_each(walk);
            }
            Value::Array(items) => items.iter_mut().for_each(walk),
            _ => {}
        }
    }
    walk(&mut report);
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overall_pass_ignores_indeterminate() {
        let mut open = SuiteResult::at_most("b", 0.0, 1.0, Value::Null);
        open.status = Status::Indeterminate;
        let suites = vec![SuiteResult::at_most("a", 0.5, 1.0, Value::Null), open];
        assert!(VerificationReport::new("verify", Value::Null, suites.clone(), 3).overall_pass);
        let mut failing = suites;
        failing.push(SuiteResult::at_least("c", 0.5, 1.0, Value::Null));
        assert!(!VerificationReport::new("verify", Value::Null, failing, 3).overall_pass);
    }

    #[test]
    fn strip_timing_is_recursive() {
        let v = json!({"runtime_ms": 4, "environment": {}, "suites": [{"runtime_ms": 1, "x": 2}]});
        assert_eq!(strip_timing(v), json!({"suites": [{"x": 2}]}));
    }
}
