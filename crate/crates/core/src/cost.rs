//! Human labor accounting: total time is seconds per label times the number
//! of labeled observations, or equivalently seconds per label times the
//! observation-to-catastrophe ratio times the number of catastrophe labels.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub const SECONDS_PER_HOUR: f64 = 3600.0;
pub const SECONDS_PER_DAY: f64 = 86_400.0;
pub const SECONDS_PER_YEAR: f64 = 365.0 * SECONDS_PER_DAY;

/// Total seconds from time per label and total label count.
pub fn cost_total(t_human: f64, n_all: f64) -> f64 {
    t_human * n_all
}

/// Total seconds from time per label, observation ratio and catastrophe labels.
pub fn cost_ratio(t_human: f64, rho: f64, n_cat: f64) -> f64 {
    cost_total(t_human, rho * n_cat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    /// Mean seconds per label, when latencies were recorded.
    pub t_human: Option<f64>,
    pub n_all: u64,
    pub n_cat: u64,
    /// `n_all / n_cat`; infinite when there are no catastrophe labels.
    #[serde(with = "rho_serde")]
    pub rho: f64,
}

mod rho_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(serde::Deserialize)]
        #[serde(untagged)]
        enum Rho {
            Num(f64),
            Text(String),
        }
        match Rho::deserialize(d)? {
            Rho::Num(v) => Ok(v),
            Rho::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Rho::Text(t) => Err(serde::de::Error::custom(format!("bad rho {t:?}"))),
        }
    }
}

impl CostInputs {
    pub fn from_counts(t_human: Option<f64>, n_all: u64, n_cat: u64) -> Self {
        Self {
            t_human,
            n_all,
            n_cat,
            rho: ratio(n_all, n_cat),
        }
    }

    /// Cost in seconds via the total-count form; `None` without a label time.
    pub fn cost_seconds(&self) -> Option<f64> {
        self.t_human.map(|t| cost_total(t, self.n_all as f64))
    }
}

/// Observation ratio with the infinite sentinel for zero catastrophes.
pub fn ratio(n_all: u64, n_cat: u64) -> f64 {
    if n_cat == 0 {
        f64::INFINITY
    } else {
        n_all as f64 / n_cat as f64
    }
}

/// One logged label, as far as cost accounting cares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelEntry {
    pub blocked: bool,
    pub label_latency: Option<f64>,
}

/// Measure the inputs from a log. The label time is the mean latency over
/// records that carry one; it is absent when none do.
pub fn measure_inputs(labels: impl IntoIterator<Item = LabelEntry>) -> Result<CostInputs, CostError> {
    let mut n_all = 0u64;
    let mut n_cat = 0u64;
    let mut latency_sum = 0.0;
    let mut latency_n = 0u64;
    for l in labels {
        n_all += 1;
        n_cat += u64::from(l.blocked);
        if let Some(s) = l.label_latency {
            latency_sum += s;
            latency_n += 1;
        }
    }
    if n_all == 0 {
        return Err(CostError::EmptyDataset);
    }
    let t_human = (latency_n > 0).then(|| latency_sum / latency_n as f64);
    Ok(CostInputs::from_counts(t_human, n_all, n_cat))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub t_human: f64,
    pub rho: f64,
    pub n_cat: f64,
}

impl Scenario {
    pub fn new(name: impl Into<String>, t_human: f64, rho: f64, n_cat: f64) -> Result<Self, CostError> {
        for (label, v) in [("t_human", t_human), ("rho", rho), ("n_cat", n_cat)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CostError::InvalidInput(format!("{label} = {v}")));
            }
        }
        Ok(Self {
            name: name.into(),
            t_human,
            rho,
            n_cat,
        })
    }

    /// Scenario given by a raw observation count, i.e. one catastrophe label
    /// per observation's worth of ratio.
    pub fn from_total(name: impl Into<String>, t_human: f64, n_all: f64) -> Result<Self, CostError> {
        Self::new(name, t_human, n_all, 1.0)
    }

    pub fn n_all(&self) -> f64 {
        self.rho * self.n_cat
    }

    pub fn seconds(&self) -> f64 {
        cost_ratio(self.t_human, self.rho, self.n_cat)
    }
}

/// Oversight of a learning Pong agent: 0.8 s per label, one catastrophe in
/// 166 observations, 120 catastrophe labels.
pub fn pong_fixture() -> Scenario {
    Scenario::new("pong-oversight", 0.8, 166.0, 120.0).expect("valid fixture")
}

/// Same labeling effort for an agent that already avoids catastrophes, where
/// catastrophes show up once per 100,000 observations.
pub fn pretrained_fixture() -> Scenario {
    Scenario::new("pretrained-agent", 0.8, 1e5, 120.0).expect("valid fixture")
}

pub fn builtin_scenarios() -> Vec<Scenario> {
    vec![pong_fixture(), pretrained_fixture()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub t_human: f64,
    pub rho: f64,
    pub n_cat: f64,
    pub n_all: f64,
    pub seconds: f64,
    pub hours: f64,
    pub days: f64,
}

pub fn extrapolate(scenarios: &[Scenario]) -> Vec<CostRow> {
    scenarios
        .iter()
        .map(|s| {
            let seconds = s.seconds();
            CostRow {
                name: s.name.clone(),
                t_human: s.t_human,
                rho: s.rho,
                n_cat: s.n_cat,
                n_all: s.n_all(),
                seconds,
                hours: seconds / SECONDS_PER_HOUR,
                days: seconds / SECONDS_PER_DAY,
            }
        })
        .collect()
}

pub fn render_table(rows: &[CostRow]) -> String {
    let header = ["scenario", "t_human", "rho", "n_cat", "n_all", "seconds", "hours", "days"];
    let cells: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.name.clone(),
                format!("{:.3}", r.t_human),
                format!("{}", r.rho),
                format!("{}", r.n_cat),
                format!("{}", r.n_all),
                format!("{:.1}", r.seconds),
                format!("{:.2}", r.hours),
                format!("{:.2}", r.days),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: &[String]| {
        let parts: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &header.map(String::from));
    for row in &cells {
        line(&mut out, row);
    }
    out
}

pub fn render_csv(rows: &[CostRow]) -> String {
    let mut out = String::from("scenario,t_human,rho,n_cat,n_all,seconds,hours,days\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.name, r.t_human, r.rho, r.n_cat, r.n_all, r.seconds, r.hours, r.days
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_products() {
        assert_eq!(cost_total(0.0, 1e9), 0.0);
        assert_eq!(cost_total(0.1, 10.0), 1.0);
        assert_eq!(cost_ratio(0.8, 166.0, 0.0), 0.0);
    }

    #[test]
    fn zero_catastrophes_give_infinite_ratio() {
        let labels = (0..5).map(|_| LabelEntry {
            blocked: false,
            label_latency: Some(1.0),
        });
        let inputs = measure_inputs(labels).unwrap();
        assert!(inputs.rho.is_infinite());
        assert_eq!(inputs.cost_seconds(), Some(5.0));
        let json = serde_json::to_string(&inputs).unwrap();
        assert!(json.contains("\"inf\""));
        let back: CostInputs = serde_json::from_str(&json).unwrap();
        assert_eq!(back, inputs);
    }

    #[test]
    fn empty_and_latency_free_logs() {
        assert_eq!(measure_inputs(std::iter::empty()), Err(CostError::EmptyDataset));
        let labels = [
            LabelEntry {
                blocked: true,
                label_latency: None,
            },
            LabelEntry {
                blocked: false,
                label_latency: None,
            },
        ];
        let inputs = measure_inputs(labels).unwrap();
        assert_eq!(inputs.t_human, None);
        assert_eq!((inputs.n_all, inputs.n_cat, inputs.rho), (2, 1, 2.0));
    }

    #[test]
    fn table_lists_every_scenario() {
        let rows = extrapolate(&builtin_scenarios());
        let table = render_table(&rows);
        assert_eq!(table.lines().count(), 3);
        assert!(table.contains("pong-oversight"));
        assert_eq!(render_csv(&rows).lines().count(), 3);
    }

    #[test]
    fn negative_inputs_rejected() {
        assert!(Scenario::new("x", -1.0, 1.0, 1.0).is_err());
        assert!(Scenario::new("x", 1.0, f64::NAN, 1.0).is_err());
    }
}
