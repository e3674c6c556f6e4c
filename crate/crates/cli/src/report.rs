//! Report envelope and tabular rendering.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Common header of every JSON report; the command body is flattened in.
#[derive(Serialize)]
pub struct Envelope<T: Serialize> {
    pub schema_version: u32,
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub command: &'static str,
    pub config_hash: String,
    pub config: Value,
    pub passed: bool,
    #[serde(flatten)]
    pub body: T,
}

pub fn config_hash(config: &Value) -> String {
    let bytes = serde_json::to_vec(config).expect("json value serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn envelope<T: Serialize>(command: &'static str, config: Value, passed: bool, body: T) -> Envelope<T> {
    Envelope {
        schema_version: REPORT_SCHEMA_VERSION,
        tool: "seqpar",
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        config_hash: config_hash(&config),
        config,
        passed,
        body,
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

pub fn csv(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(headers).expect("in-memory csv");
    for row in rows {
        w.write_record(row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

/// Left-aligned columns separated by two spaces.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_aligns_columns() {
        let t = table(&["a", "long"], &[vec!["xyz".into(), "1".into()]]);
        assert_eq!(t, "a    long\n---  ----\nxyz  1\n");
    }

    #[test]
    fn csv_quotes_commas() {
        let c = csv(&["x"], &[vec!["1,2".into()]]);
        assert_eq!(c, "x\n\"1,2\"\n");
    }

    #[test]
    fn envelope_carries_version_and_hash() {
        let e = envelope("lemma", serde_json::json!({"max_n": 4}), true, serde_json::json!({"k": 1}));
        let v: Value = serde_json::to_value(&e).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["k"], 1);
        assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
    }
}
