//! Confusion-matrix accumulation and intersection-over-union.

use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};

/// 2x2 pixel counts indexed `[gt][pred]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub counts: [[u64; 2]; 2],
}

/// IoU of one class. `degenerate` is set when the class is absent from both
/// prediction and ground truth, in which case `value` is defined as 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Iou {
    pub value: f64,
    pub degenerate: bool,
}

impl Confusion {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Adds one prediction/ground-truth pair of equal-length label masks.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("accumulate", &[pred.len()], &[gt.len()]));
        }
        let mut add = [[0u64; 2]; 2];
        for (index, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if p > 1 || g > 1 {
                return Err(Error::Label {
                    index,
                    value: p.max(g),
                });
            }
            add[usize::from(g)][usize::from(p)] += 1;
        }
        for (row, extra) in self.counts.iter_mut().zip(add) {
            for (c, e) in row.iter_mut().zip(extra) {
                *c += e;
            }
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` for `class`.
    pub fn iou(&self, class: usize) -> Result<Iou> {
        if class > 1 {
            return Err(Error::Label {
                index: 0,
                value: class.min(255) as u8,
            });
        }
        let other = 1 - class;
        let tp = self.counts[class][class];
        let fp = self.counts[other][class];
        let fn_ = self.counts[class][other];
        let union = tp + fp + fn_;
        Ok(if union == 0 {
            Iou {
                value: 1.0,
                degenerate: true,
            }
        } else {
            Iou {
                value: tp as f64 / union as f64,
                degenerate: false,
            }
        })
    }

    /// Mean of background and lesion IoU.
    pub fn miou(&self) -> Result<f64> {
        Ok((self.iou(0)?.value + self.iou(1)?.value) / 2.0)
    }

    pub fn transposed(&self) -> Self {
        let c = self.counts;
        Confusion {
            counts: [[c[0][0], c[1][0]], [c[0][1], c[1][1]]],
        }
    }
}

impl Add for Confusion {
    type Output = Confusion;

    fn add(mut self, rhs: Confusion) -> Confusion {
        self += rhs;
        self
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, rhs: Confusion) {
        for (a, b) in self.counts.iter_mut().flatten().zip(rhs.counts.iter().flatten()) {
            *a += b;
        }
    }
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub config_hash: String,
    pub iteration: usize,
    pub split: String,
    pub iou_lesion: f64,
    pub iou_background: f64,
    pub miou: f64,
    pub degenerate: bool,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "run_id,config_hash,iteration,split,iou_lesion,iou_background,miou,degenerate";

    pub fn from_confusion(run_id: &str, config_hash: &str, iteration: usize, split: &str, c: &Confusion) -> Result<Self> {
        let (bg, fg) = (c.iou(0)?, c.iou(1)?);
        Ok(MetricsRow {
            run_id: run_id.to_string(),
            config_hash: config_hash.to_string(),
            iteration,
            split: split.to_string(),
            iou_lesion: fg.value,
            iou_background: bg.value,
            miou: (fg.value + bg.value) / 2.0,
            degenerate: fg.degenerate || bg.degenerate,
        })
    }

    /// Full-precision CSV line (round-trips the floats exactly).
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:?},{:?},{:?},{}",
            self.run_id,
            self.config_hash,
            self.iteration,
            self.split,
            self.iou_lesion,
            self.iou_background,
            self.miou,
            self.degenerate
        )
    }
}
