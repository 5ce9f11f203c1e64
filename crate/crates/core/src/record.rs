//! Metric streams and their CSV layouts.
//!
//! Per-run files use `step,seed,agent,metric,value` (INAC outer loops use
//! `t,seed,metric,value`), aggregates use `step,metric,mean,std`. Floats are
//! written in shortest round-trip form so the text is bit-stable.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub seed: u64,
    pub step: u64,
    pub agent: Option<usize>,
    pub metric: String,
    pub value: f64,
}

/// Ordered metric events of one or more runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub records: Vec<Record>,
}

impl RunRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, seed: u64, step: u64, agent: Option<usize>, metric: &str, value: f64) {
        self.records.push(Record {
            seed,
            step,
            agent,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn extend(&mut self, other: RunRecord) {
        self.records.extend(other.records);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(step, value)` pairs of one metric, in record order.
    pub fn series(&self, metric: &str, agent: Option<usize>) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter(|r| r.metric == metric && r.agent == agent)
            .map(|r| (r.step, r.value))
            .collect()
    }

    /// Last value of a metric, if it was ever recorded.
    pub fn last(&self, metric: &str, agent: Option<usize>) -> Option<f64> {
        self.records
            .iter()
            .rev()
            .find(|r| r.metric == metric && r.agent == agent)
            .map(|r| r.value)
    }

    /// True when every `(seed, metric, agent)` stream has strictly increasing steps.
    pub fn steps_increase(&self) -> bool {
        let mut last: BTreeMap<(u64, &str, Option<usize>), u64> = BTreeMap::new();
        for r in &self.records {
            let key = (r.seed, r.metric.as_str(), r.agent);
            if let Some(&prev) = last.get(&key) {
                if r.step <= prev {
                    return false;
                }
            }
            last.insert(key, r.step);
        }
        true
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["step", "seed", "agent", "metric", "value"])?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.seed.to_string(),
                r.agent.map_or(String::new(), |a| a.to_string()),
                r.metric.clone(),
                fmt_f64(r.value),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// The outer-loop layout `t,seed,metric,value`; agent-specific metrics
    /// get the agent appended to the metric name.
    pub fn write_outer_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["t", "seed", "metric", "value"])?;
        for r in &self.records {
            w.write_record([r.step.to_string(), r.seed.to_string(), metric_key(r), fmt_f64(r.value)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn save_outer_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_outer_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    /// Mean and population standard deviation across seeds for each
    /// `(metric, step)`. The result only depends on the multiset of records.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut groups: BTreeMap<(String, u64), Vec<(u64, f64)>> = BTreeMap::new();
        for r in &self.records {
            groups.entry((metric_key(r), r.step)).or_default().push((r.seed, r.value));
        }
        let mut rows: Vec<AggregateRow> = groups
            .into_iter()
            .map(|((metric, step), mut vals)| {
                // fixed summation order regardless of how runs were scheduled
                vals.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
                let m = vals.len() as f64;
                let mean = vals.iter().map(|v| v.1).sum::<f64>() / m;
                let var = vals.iter().map(|v| (v.1 - mean).powi(2)).sum::<f64>() / m;
                AggregateRow {
                    step,
                    metric,
                    mean,
                    std: var.sqrt(),
                    count: vals.len(),
                }
            })
            .collect();
        rows.sort_by(|a, b| a.step.cmp(&b.step).then_with(|| a.metric.cmp(&b.metric)));
        rows
    }
}

fn metric_key(r: &Record) -> String {
    match r.agent {
        Some(a) => format!("{}[{a}]", r.metric),
        None => r.metric.clone(),
    }
}

/// Shortest decimal string that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub step: u64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["step", "metric", "mean", "std"])?;
    for r in rows {
        w.write_record([r.step.to_string(), r.metric.clone(), fmt_f64(r.mean), fmt_f64(r.std)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut r = RunRecord::new();
        r.push(3, 0, Some(1), "q_error", 0.1);
        r.push(3, 0, None, "normalized_reward", 1.0);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,seed,agent,metric,value\n0,3,1,q_error,0.1\n0,3,,normalized_reward,1.0\n"
        );
    }

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, 1e-300, 123456.789e10] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn aggregate_single_run_has_zero_std() {
        let mut r = RunRecord::new();
        r.push(0, 0, None, "m", 0.5);
        r.push(0, 1, None, "m", 0.7);
        let rows = r.aggregate();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|x| x.std == 0.0));
        assert_eq!(rows[1].mean, 0.7);
    }

    #[test]
    fn aggregate_ignores_order() {
        let mut a = RunRecord::new();
        a.push(0, 5, None, "m", 0.1);
        a.push(1, 5, None, "m", 0.2);
        a.push(2, 5, None, "m", 0.3);
        let mut b = a.clone();
        b.records.reverse();
        assert_eq!(a.aggregate(), b.aggregate());
        let row = &a.aggregate()[0];
        assert!((row.mean - 0.2).abs() < 1e-15);
        assert!((row.std - (0.02f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn step_order_check() {
        let mut r = RunRecord::new();
        r.push(0, 1, None, "m", 0.0);
        r.push(0, 1, Some(0), "m", 0.0);
        assert!(r.steps_increase());
        r.push(0, 1, None, "m", 0.0);
        assert!(!r.steps_increase());
    }
}
