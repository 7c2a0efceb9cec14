//! Named metrics with optional pass thresholds, emitted as JSON and CSV.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use talkflow_core::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cmp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl Cmp {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Cmp::Lt => value < threshold,
            Cmp::Le => value <= threshold,
            Cmp::Gt => value > threshold,
            Cmp::Ge => value >= threshold,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub unit: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub criterion: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cmp: Option<Cmp>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pass: Option<bool>,
}

impl Metric {
    pub fn info(name: &str, value: f64, unit: &str) -> Self {
        Self {
            name: name.into(),
            value,
            unit: unit.into(),
            criterion: None,
            cmp: None,
            threshold: None,
            pass: None,
        }
    }

    /// A metric checked against `threshold`; NaN never passes.
    pub fn check(
        criterion: u8,
        name: &str,
        value: f64,
        unit: &str,
        cmp: Cmp,
        threshold: f64,
    ) -> Self {
        Self {
            criterion: Some(criterion),
            cmp: Some(cmp),
            threshold: Some(threshold),
            pass: Some(cmp.holds(value, threshold)),
            ..Self::info(name, value, unit)
        }
    }

    pub fn describe(&self) -> String {
        match (self.cmp, self.threshold) {
            (Some(c), Some(t)) => format!(
                "{} {} {} {}",
                self.name,
                fmt_num(self.value),
                c.symbol(),
                fmt_num(t)
            ),
            _ => format!("{} {}", self.name, fmt_num(self.value)),
        }
    }
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 || (1e-3..1e5).contains(&v.abs()) {
        format!("{:.4}", v)
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    } else {
        format!("{v:.3e}")
    }
}

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u8,
    pub title: String,
    pub metrics: Vec<Metric>,
    pub seconds: f64,
    /// Set when the check could not run; the criterion then fails.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl CriterionResult {
    pub fn passed(&self) -> bool {
        self.error.is_none()
            && !self.metrics.is_empty()
            && self.metrics.iter().all(|m| m.pass != Some(false))
    }

    pub fn line(&self) -> String {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        let body = match &self.error {
            Some(e) => format!("error: {e}"),
            None => self
                .metrics
                .iter()
                .filter(|m| m.pass.is_some())
                .map(Metric::describe)
                .collect::<Vec<_>>()
                .join("; "),
        };
        format!(
            "[{status}] criterion {:>2}: {} ({body})",
            self.id, self.title
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: String,
    pub command: String,
    pub metrics: Vec<Metric>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub criteria: Vec<CriterionResult>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn new(experiment: &str, command: &str) -> Self {
        Self {
            experiment: experiment.into(),
            command: command.into(),
            ..Self::default()
        }
    }

    pub fn info(&mut self, name: &str, value: f64, unit: &str) {
        self.metrics.push(Metric::info(name, value, unit));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .chain(self.criteria.iter().flat_map(|c| c.metrics.iter()))
            .find(|m| m.name == name)
            .map(|m| m.value)
    }

    pub fn add_criterion(&mut self, c: CriterionResult) {
        self.criteria.push(c);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per metric, criteria metrics included.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,value,unit,criterion,cmp,threshold,pass\n");
        let rows = self
            .metrics
            .iter()
            .chain(self.criteria.iter().flat_map(|c| c.metrics.iter()));
        for m in rows {
            let opt = |v: Option<String>| v.unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                m.name,
                m.value,
                m.unit,
                opt(m.criterion.map(|c| c.to_string())),
                opt(m.cmp.map(|c| c.symbol().to_string())),
                opt(m.threshold.map(|t| t.to_string())),
                opt(m.pass.map(|p| p.to_string())),
            )
            .unwrap();
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.json"), self.to_json())?;
        std::fs::write(dir.join("metrics.csv"), self.to_csv())?;
        Ok(())
    }
}
