//! Summary tables rendered as CSV or Markdown.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labelled row of numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub values: Vec<f64>,
}

/// A rectangular table with free-form metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Table {
    pub fn new(title: impl Into<String>, columns: Vec<String>) -> Self {
        Table {
            title: title.into(),
            columns,
            rows: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::Config(format!(
                "table `{}`: row has {} values for {} columns",
                self.title,
                values.len(),
                self.columns.len()
            )));
        }
        self.rows.push(Row {
            label: label.into(),
            values,
        });
        Ok(())
    }

    pub fn meta(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.metadata.insert(key.to_string(), v);
    }

    /// Index of a column by name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Value at (row label, column name).
    pub fn get(&self, label: &str, column: &str) -> Option<f64> {
        let c = self.column(column)?;
        self.rows.iter().find(|r| r.label == label).map(|r| r.values[c])
    }

    /// Every value in the table is finite.
    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(|r| r.values.iter().all(|v| v.is_finite()))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label");
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.label);
            for v in &r.values {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("### {}\n\n| |", self.title);
        for c in &self.columns {
            let _ = write!(s, " {c} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.columns.len()));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "| {} |", r.label);
            for v in &r.values {
                let _ = write!(s, " {v:.4} |");
            }
            s.push('\n');
        }
        if !self.metadata.is_empty() {
            s.push('\n');
            for (k, v) in &self.metadata {
                let _ = writeln!(s, "- {k}: {v}");
            }
        }
        s
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_lookup() {
        let mut t = Table::new("t", vec!["a".into(), "b".into()]);
        t.push("x", vec![1.0, 2.5]).unwrap();
        assert!(t.push("y", vec![1.0]).is_err());
        assert_eq!(t.to_csv(), "label,a,b\nx,1,2.5\n");
        assert_eq!(t.get("x", "b"), Some(2.5));
        assert!(t.is_finite());
        assert!(t.to_markdown().contains("| x | 1.0000 | 2.5000 |"));
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
