//! Posterior summaries and CSV tables.

use serde::{Deserialize, Serialize};

use crate::CliError;

/// Machine-readable result of a solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: u32,
    pub command: String,
    pub lambda: Vec<f64>,
    pub beta: Option<f64>,
    pub divergence: Option<f64>,
    pub residuals: Vec<f64>,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl Summary {
    pub fn failed(command: &str, beta: Option<f64>, status: &str, message: String) -> Self {
        Self {
            version: crate::config::SCHEMA_VERSION,
            command: command.into(),
            lambda: vec![],
            beta,
            divergence: None,
            residuals: vec![],
            status: status.into(),
            message: Some(message),
        }
    }

    pub fn is_failure(&self) -> bool {
        matches!(self.status.as_str(), "Infeasible" | "DivergentIntegral")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config { field: "summary".into(), msg: e.to_string() })
    }
}

/// In-memory CSV with a header row.
pub struct Table {
    wr: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        let mut wr = csv::Writer::from_writer(Vec::new());
        wr.write_record(header).expect("in-memory write");
        Self { wr }
    }

    pub fn row<I: IntoIterator<Item = String>>(&mut self, cells: I) {
        self.wr.write_record(cells.into_iter().collect::<Vec<_>>()).expect("in-memory write");
    }

    pub fn finish(self) -> String {
        let bytes = self.wr.into_inner().expect("in-memory flush");
        String::from_utf8(bytes).expect("csv is utf-8")
    }
}

/// Four decimals, as prices are quoted.
pub fn price(v: f64) -> String {
    format!("{v:.4}")
}

/// Shortest representation that reads back to the same value.
pub fn exact(v: f64) -> String {
    format!("{v:?}")
}
