//! Binary segmentation metrics with micro aggregation.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Counts over two maps where any value ≥ 0.5 is foreground.
pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts> {
    if pred.numel() != gt.numel() {
        return Err(Error::shape("confusion", pred.shape(), gt.shape()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p >= 0.5, g >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    c.iou()
}

pub fn f1(c: &ConfusionCounts) -> f64 {
    c.f1()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileResult {
    pub id: String,
    pub counts: ConfusionCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub tiles: Vec<TileResult>,
}

impl EvalReport {
    pub fn new(label: impl Into<String>) -> Self {
        EvalReport {
            label: label.into(),
            tiles: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, counts: ConfusionCounts) {
        self.tiles.push(TileResult {
            id: id.into(),
            counts,
        });
    }

    /// Counts summed over all tiles.
    pub fn micro(&self) -> ConfusionCounts {
        self.tiles.iter().map(|t| t.counts).sum()
    }

    pub fn iou(&self) -> f64 {
        self.micro().iou()
    }

    pub fn f1(&self) -> f64 {
        self.micro().f1()
    }

    /// Text table: a micro summary row followed by one row per tile.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, name: &str, c: &ConfusionCounts| {
            writeln!(
                out,
                "{:<24} {:>8.4} {:>8.4} {:>8} {:>8} {:>8} {:>8}",
                name,
                c.f1(),
                c.iou(),
                c.tp,
                c.fp,
                c.fn_,
                c.tn
            )
            .unwrap();
        };
        writeln!(
            out,
            "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "tile", "F1", "IoU", "tp", "fp", "fn", "tn"
        )
        .unwrap();
        row(&mut out, &format!("{} (micro)", self.label), &self.micro());
        for t in &self.tiles {
            row(&mut out, &t.id, &t.counts);
        }
        out
    }

    /// Parses the F1/IoU columns of a rendered table, in row order.
    pub fn parse_rows(text: &str) -> Vec<(String, f64, f64, ConfusionCounts)> {
        text.lines()
            .skip(1)
            .filter_map(|line| {
                let f: Vec<&str> = line.split_whitespace().collect();
                let n = f.len();
                if n < 7 {
                    return None;
                }
                let num = |i: usize| f[n - 7 + i].parse::<f64>().ok();
                let cnt = |i: usize| f[n - 7 + i].parse::<u64>().ok();
                Some((
                    f[..n - 6].join(" "),
                    num(1)?,
                    num(2)?,
                    ConfusionCounts {
                        tp: cnt(3)?,
                        fp: cnt(4)?,
                        fn_: cnt(5)?,
                        tn: cnt(6)?,
                    },
                ))
            })
            .collect()
    }
}
