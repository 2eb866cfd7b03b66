//! Task definitions: binning continuous targets into classes and the
//! per-example, per-class, per-task weighting.

use std::collections::HashMap;
use std::io::Write;

use num_traits::{FromPrimitive, Num};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NIGHTLIGHTS: &str = "nightlights";
pub const POPULATION: &str = "population";
pub const ROAD_DISTANCE: &str = "road_distance";
pub const LAND_COVER: &str = "land_cover";
pub const AWI: &str = "awi";

/// Canonical task order used by datasets, models and reports.
pub const TASK_NAMES: [&str; 5] = [NIGHTLIGHTS, POPULATION, ROAD_DISTANCE, LAND_COVER, AWI];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinStrategy {
    EqualWidth,
    EqualFrequency,
}

impl std::str::FromStr for BinStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal-width" => Ok(BinStrategy::EqualWidth),
            "equal-frequency" => Ok(BinStrategy::EqualFrequency),
            other => Err(Error::InvalidArgument(format!(
                "unknown bin strategy `{other}`"
            ))),
        }
    }
}

/// Ordered bin boundaries; bin `i` is `[edges[i], edges[i+1])`, with values
/// outside the range clamped to the first or last bin.
#[derive(Clone, Debug, PartialEq)]
pub struct BinningScheme {
    edges: Vec<f64>,
}

impl BinningScheme {
    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 bins, got {} edges",
                edges.len()
            )));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "bin edges must be finite and strictly increasing".into(),
            ));
        }
        Ok(BinningScheme { edges })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Number of real classes.
    pub fn count(&self) -> usize {
        self.edges.len() - 1
    }
}

pub fn build_bins(values: &[f64], count: usize, strategy: BinStrategy) -> Result<BinningScheme> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if count < 2 {
        return Err(Error::InvalidArgument(format!("bin count {count} < 2")));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(*v));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if lo == hi {
        return Err(Error::DegenerateRange(lo));
    }
    let edges = match strategy {
        BinStrategy::EqualWidth => {
            let mut e: Vec<f64> = (0..count)
                .map(|i| lo + (hi - lo) * i as f64 / count as f64)
                .collect();
            e.push(hi);
            e
        }
        BinStrategy::EqualFrequency => equal_frequency_edges(&sorted, count)?,
    };
    BinningScheme::from_edges(edges)
}

/// Cuts at midpoints between consecutive distinct sorted values, choosing for
/// each target rank the nearest available gap that keeps the rest feasible.
fn equal_frequency_edges(sorted: &[f64], count: usize) -> Result<Vec<f64>> {
    let n = sorted.len();
    let gaps: Vec<usize> = (1..n).filter(|&j| sorted[j] > sorted[j - 1]).collect();
    let distinct = gaps.len() + 1;
    if distinct < count {
        return Err(Error::TooFewDistinct {
            distinct,
            bins: count,
        });
    }
    let mut edges = vec![sorted[0]];
    let mut next = 0usize;
    for i in 1..count {
        let target = (i * n) as f64 / count as f64;
        let last_allowed = gaps.len() - (count - 1 - i) - 1;
        let mut best = next;
        for (g, &pos) in gaps.iter().enumerate().take(last_allowed + 1).skip(next) {
            if (pos as f64 - target).abs() < (gaps[best] as f64 - target).abs() {
                best = g;
            }
            if pos as f64 > target {
                break;
            }
        }
        let pos = gaps[best];
        edges.push(0.5 * (sorted[pos - 1] + sorted[pos]));
        next = best + 1;
    }
    edges.push(sorted[n - 1]);
    Ok(edges)
}

pub fn assign_bin(value: f64, scheme: &BinningScheme) -> Result<usize> {
    if !value.is_finite() {
        return Err(Error::NonFiniteValue(value));
    }
    let e = &scheme.edges;
    // number of edges <= value, minus one
    let above = e.partition_point(|&edge| edge <= value);
    Ok(above.saturating_sub(1).min(scheme.count() - 1))
}

pub fn bin_occupancy(values: &[f64], scheme: &BinningScheme) -> Result<Vec<usize>> {
    let mut hist = vec![0usize; scheme.count()];
    for &v in values {
        hist[assign_bin(v, scheme)?] += 1;
    }
    Ok(hist)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub binning: BinningScheme,
    pub importance: f64,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, binning: BinningScheme, importance: f64) -> Result<Self> {
        if !(importance >= 0.0 && importance.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "importance {importance} must be >= 0"
            )));
        }
        Ok(TaskSpec {
            name: name.into(),
            binning,
            importance,
        })
    }

    /// Number of real classes `K`; the model predicts `K + 1`.
    pub fn classes(&self) -> usize {
        self.binning.count()
    }
}

/// Rejects duplicate task names.
pub fn validate_task_set(tasks: &[TaskSpec]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for t in tasks {
        if !seen.insert(t.name.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate task `{}`",
                t.name
            )));
        }
    }
    Ok(())
}

/// Per-task, per-class example weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTable<W> {
    pub per_task: Vec<(String, Vec<W>)>,
}

impl<W: Clone> WeightTable<W> {
    pub fn task(&self, name: &str) -> Option<&[W]> {
        self.per_task
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, w)| w.as_slice())
    }

    pub fn weight(&self, task: &str, class: usize) -> Option<W> {
        self.task(task).and_then(|w| w.get(class).cloned())
    }
}

impl WeightTable<f64> {
    /// `task,class,weight` rows.
    pub fn write_csv<Wr: Write>(&self, out: Wr) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["task", "class", "weight"])?;
        for (task, weights) in &self.per_task {
            for (k, v) in weights.iter().enumerate() {
                w.write_record([task.clone(), k.to_string(), format!("{v}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Weight for class `k` of task `t` is `w_t * max_j(n_tj) / n_tk`, so the
/// largest class gets `w_t` per example and every class carries the same
/// total mass. Empty classes get weight zero.
pub fn compute_weights<W>(
    tasks: &[TaskSpec],
    class_counts: &HashMap<String, Vec<u64>>,
) -> Result<WeightTable<W>>
where
    W: Clone + Num + FromPrimitive,
{
    let mut per_task = Vec::with_capacity(tasks.len());
    for task in tasks {
        let counts = class_counts
            .get(&task.name)
            .ok_or_else(|| Error::AllEmptyTask(task.name.clone()))?;
        let largest = counts.iter().copied().max().unwrap_or(0);
        if largest == 0 {
            return Err(Error::AllEmptyTask(task.name.clone()));
        }
        let importance = W::from_f64(task.importance)
            .ok_or_else(|| Error::InvalidArgument(format!("importance {}", task.importance)))?;
        let top = W::from_u64(largest).expect("count conversion");
        let weights = counts
            .iter()
            .map(|&n| {
                if n == 0 {
                    W::zero()
                } else {
                    importance.clone() * top.clone() / W::from_u64(n).expect("count conversion")
                }
            })
            .collect();
        per_task.push((task.name.clone(), weights));
    }
    Ok(WeightTable { per_task })
}
