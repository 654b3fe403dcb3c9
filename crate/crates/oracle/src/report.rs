//! Check reports emitted as JSON lines.

use serde::{Deserialize, Serialize};

/// Result of one oracle check, serialized one per line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OracleReport {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub n_checked: u64,
    pub pass: bool,
}

impl OracleReport {
    pub fn new(name: &str, max_abs_err: f64, max_rel_err: f64, n_checked: u64, pass: bool) -> Self {
        OracleReport {
            name: name.to_string(),
            max_abs_err,
            max_rel_err,
            n_checked,
            pass,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_line_round_trip() {
        let r = OracleReport::new("check", 1e-9, 2e-7, 100, true);
        let line = r.to_json_line();
        let back: OracleReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
    }
}
