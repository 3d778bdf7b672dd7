//! Comparing model instances: confusion matrices, mosaic geometry,
//! per-image correctness transitions and frequently misclassified images.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::engine::PredictionSet;
use crate::error::{Error, Result};

pub const DEFAULT_MIN_CELL: f64 = 0.01;
pub const DEFAULT_GUTTER: f64 = 0.005;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub checkpoint_id: String,
    pub split: Split,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn diagonal_total(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_total(&self, row: usize) -> u64 {
        self.counts[row].iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.diagonal_total() as f64 / t as f64,
        }
    }

    /// Count at 1-based `(row, col)`.
    pub fn cell(&self, row: usize, col: usize) -> Option<u64> {
        self.counts.get(row.checked_sub(1)?)?.get(col.checked_sub(1)?).copied()
    }
}

fn check_split(predictions: &PredictionSet, split: Split) -> Result<()> {
    if predictions.split != split {
        return Err(Error::invalid(
            "split",
            format!(
                "predictions of {} cover the {} split, not {split}",
                predictions.checkpoint_id, predictions.split
            ),
        ));
    }
    Ok(())
}

pub fn confusion(predictions: &PredictionSet, dataset: &Dataset, split: Split) -> Result<ConfusionMatrix> {
    check_split(predictions, split)?;
    let c = dataset.class_names().len();
    let by_id: HashMap<&str, usize> = predictions
        .records
        .iter()
        .map(|r| (r.image_id.as_str(), r.predicted))
        .collect();
    let mut counts = vec![vec![0; c]; c];
    for sample in dataset.split(split) {
        let &predicted = by_id
            .get(sample.id.as_str())
            .ok_or_else(|| Error::MissingPrediction(sample.id.clone()))?;
        if predicted >= c {
            return Err(Error::OutOfRange {
                name: "predicted class".into(),
                value: predicted as i64,
                min: 0,
                max: c as i64 - 1,
            });
        }
        counts[sample.label][predicted] += 1;
    }
    Ok(ConfusionMatrix {
        checkpoint_id: predictions.checkpoint_id.clone(),
        split,
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MosaicCell {
    /// 1-based true class.
    pub row: usize,
    /// 1-based predicted class.
    pub col: usize,
    pub count: u64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl MosaicCell {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

/// Cells in the unit square, row-major. `y` grows downward, so row 1 is on
/// top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosaicLayout {
    pub cells: Vec<MosaicCell>,
    pub counts: Vec<Vec<u64>>,
    pub min_cell: f64,
    pub gutter: f64,
}

impl MosaicLayout {
    pub fn cell(&self, row: usize, col: usize) -> Option<&MosaicCell> {
        self.cells.iter().find(|c| c.row == row && c.col == col)
    }

    /// The cell under a point, for click handling.
    pub fn hit(&self, x: f64, y: f64) -> Option<&MosaicCell> {
        self.cells.iter().find(|c| c.contains(x, y))
    }

    /// Side length left for cells along one axis once gutters are removed.
    pub fn usable_span(&self) -> f64 {
        1.0 - (self.counts.len() as f64 - 1.0) * self.gutter
    }
}

/// Splits `span` among `weights`: zero weights get `floor`, the rest share
/// what remains in proportion to their weight.
fn apportion(weights: &[u64], span: f64, floor: f64, what: &str) -> Result<Vec<f64>> {
    let zeros = weights.iter().filter(|&&w| w == 0).count();
    let total: u64 = weights.iter().sum();
    let free = span - zeros as f64 * floor;
    if free <= 0.0 {
        return Err(Error::invalid(
            "min_cell",
            format!("{zeros} empty {what} at the minimum size leave no room for the rest"),
        ));
    }
    Ok(weights
        .iter()
        .map(|&w| if w == 0 { floor } else { free * w as f64 / total as f64 })
        .collect())
}

/// Mosaic plot of a confusion matrix: row bands with heights proportional to
/// the class totals, cells within a band with widths proportional to their
/// counts. Empty cells shrink to `min_cell` squares.
pub fn mosaic_layout(cm: &ConfusionMatrix, min_cell: f64, gutter: f64) -> Result<MosaicLayout> {
    let c = cm.num_classes();
    if c == 0 || cm.total() == 0 {
        return Err(Error::invalid("confusion", "cannot lay out an empty confusion matrix"));
    }
    if cm.counts.iter().any(|r| r.len() != c) {
        return Err(Error::invalid("confusion", "matrix is not square"));
    }
    if !(min_cell >= 0.0 && min_cell < 1.0) {
        return Err(Error::invalid("min_cell", format!("must lie in [0, 1), got {min_cell}")));
    }
    if !(gutter >= 0.0 && gutter * (c as f64 - 1.0) < 1.0) {
        return Err(Error::invalid("gutter", format!("gutters of {gutter} do not fit {c} classes")));
    }
    let span = 1.0 - (c as f64 - 1.0) * gutter;
    let row_totals: Vec<u64> = (0..c).map(|r| cm.row_total(r)).collect();
    let heights = apportion(&row_totals, span, min_cell, "rows")?;
    let mut cells = Vec::with_capacity(c * c);
    let mut y = 0.0;
    for (r, row) in cm.counts.iter().enumerate() {
        let widths = if row_totals[r] == 0 {
            vec![min_cell; c]
        } else {
            apportion(row, span, min_cell, "cells")?
        };
        let mut x = 0.0;
        for (col, (&count, &w)) in row.iter().zip(&widths).enumerate() {
            let h = if count == 0 { min_cell.min(heights[r]) } else { heights[r] };
            cells.push(MosaicCell { row: r + 1, col: col + 1, count, x, y, w, h });
            x += w + gutter;
        }
        y += heights[r] + gutter;
    }
    Ok(MosaicLayout {
        cells,
        counts: cm.counts.clone(),
        min_cell,
        gutter,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transition {
    /// Correct before and after.
    CC,
    /// Correct before, incorrect after.
    CI,
    /// Incorrect before, correct after.
    IC,
    /// Incorrect before and after.
    II,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineColor {
    Red,
    Blue,
}

impl Transition {
    pub fn from_flags(prev_correct: bool, curr_correct: bool) -> Self {
        match (prev_correct, curr_correct) {
            (true, true) => Transition::CC,
            (true, false) => Transition::CI,
            (false, true) => Transition::IC,
            (false, false) => Transition::II,
        }
    }

    /// Only changes draw a line: red for images that were wrong before,
    /// blue for images that were right before.
    pub fn line(self) -> Option<LineColor> {
        match self {
            Transition::IC => Some(LineColor::Red),
            Transition::CI => Some(LineColor::Blue),
            Transition::CC | Transition::II => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceItem {
    pub id: String,
    pub prev_correct: bool,
    pub curr_correct: bool,
}

impl TraceItem {
    pub fn transition(&self) -> Transition {
        Transition::from_flags(self.prev_correct, self.curr_correct)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceCounts {
    pub cc: usize,
    pub ci: usize,
    pub ic: usize,
    pub ii: usize,
}

impl TraceCounts {
    pub fn total(&self) -> usize {
        self.cc + self.ci + self.ic + self.ii
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceDiff {
    pub prev_checkpoint: String,
    pub curr_checkpoint: String,
    pub split: Split,
    /// Sorted by id.
    pub items: Vec<TraceItem>,
    pub counts: TraceCounts,
}

pub fn trace_diff(prev: &PredictionSet, curr: &PredictionSet, split: Split) -> Result<TraceDiff> {
    check_split(prev, split)?;
    check_split(curr, split)?;
    let before: BTreeMap<&str, bool> = prev.records.iter().map(|r| (r.image_id.as_str(), r.correct)).collect();
    let after: BTreeMap<&str, bool> = curr.records.iter().map(|r| (r.image_id.as_str(), r.correct)).collect();
    if let Some(id) = before
        .keys()
        .find(|id| !after.contains_key(*id))
        .or_else(|| after.keys().find(|id| !before.contains_key(*id)))
    {
        return Err(Error::IdMismatch((*id).to_owned()));
    }
    let mut counts = TraceCounts::default();
    let items: Vec<TraceItem> = before
        .iter()
        .map(|(&id, &prev_correct)| {
            let item = TraceItem {
                id: id.to_owned(),
                prev_correct,
                curr_correct: after[id],
            };
            match item.transition() {
                Transition::CC => counts.cc += 1,
                Transition::CI => counts.ci += 1,
                Transition::IC => counts.ic += 1,
                Transition::II => counts.ii += 1,
            }
            item
        })
        .collect();
    Ok(TraceDiff {
        prev_checkpoint: prev.checkpoint_id.clone(),
        curr_checkpoint: curr.checkpoint_id.clone(),
        split,
        items,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequentMiss {
    pub id: String,
    pub misses: usize,
    pub checkpoints: usize,
    pub rate: f64,
}

/// Images misclassified by at least `threshold` of the given checkpoints,
/// most often missed first, ties by id. An image absent from a set counts
/// as not misclassified there.
pub fn frequent_misclassified(sets: &[PredictionSet], split: Split, threshold: f64) -> Result<Vec<FrequentMiss>> {
    if sets.is_empty() {
        return Err(Error::invalid("prediction sets", "need at least one prediction set"));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid("threshold", format!("must lie in (0, 1], got {threshold}")));
    }
    for set in sets {
        check_split(set, split)?;
    }
    let mut misses: BTreeMap<&str, usize> = BTreeMap::new();
    for record in sets.iter().flat_map(|s| &s.records).filter(|r| !r.correct) {
        *misses.entry(record.image_id.as_str()).or_default() += 1;
    }
    let n = sets.len();
    let mut out: Vec<FrequentMiss> = misses
        .into_iter()
        .filter(|&(_, m)| m as f64 >= threshold * n as f64 - 1e-9)
        .map(|(id, m)| FrequentMiss {
            id: id.to_owned(),
            misses: m,
            checkpoints: n,
            rate: m as f64 / n as f64,
        })
        .collect();
    out.sort_by(|a, b| b.misses.cmp(&a.misses).then_with(|| a.id.cmp(&b.id)));
    Ok(out)
}
