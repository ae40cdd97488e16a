//! Confusion-matrix segmentation metrics and the gradient dilution probe.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{assign, ClassScheme, LabelMask, IGNORE};
use crate::loss::{bwbce, pointwise_bce, Normalization};
use crate::tensor::{Graph, Tensor};

/// Confusion counts (rows: ground truth, columns: prediction) and the IoU
/// summaries derived from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Vec<Vec<u64>>,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub f_miou: f64,
    #[serde(skip)]
    foreground: Vec<u8>,
}

impl EvalReport {
    pub fn new(scheme: &ClassScheme) -> Self {
        let c = scheme.num_classes();
        EvalReport {
            confusion: vec![vec![0; c]; c],
            per_class_iou: vec![None; c],
            miou: f64::NAN,
            f_miou: f64::NAN,
            foreground: scheme.foreground().to_vec(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }

    /// Adds one prediction/ground-truth pair. Pixels whose ground truth is
    /// [`IGNORE`] are skipped.
    pub fn accumulate(&mut self, prediction: &LabelMask, truth: &LabelMask) -> Result<()> {
        if (prediction.height(), prediction.width()) != (truth.height(), truth.width()) {
            return Err(Error::shape(format!(
                "prediction {}×{} vs ground truth {}×{}",
                prediction.height(),
                prediction.width(),
                truth.height(),
                truth.width()
            )));
        }
        let c = self.num_classes();
        for (&p, &t) in prediction.ids().iter().zip(truth.ids()) {
            if t == IGNORE {
                continue;
            }
            if t as usize >= c || p as usize >= c {
                return Err(Error::arg(format!("class id {} outside {c} classes", t.max(p))));
            }
            self.confusion[t as usize][p as usize] += 1;
        }
        self.refresh();
        Ok(())
    }

    /// Element-wise sum of two reports over disjoint image sets.
    pub fn merge(&mut self, other: &EvalReport) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::shape("cannot merge reports with different class counts"));
        }
        for (row, orow) in self.confusion.iter_mut().zip(&other.confusion) {
            for (a, b) in row.iter_mut().zip(orow) {
                *a += b;
            }
        }
        self.refresh();
        Ok(())
    }

    fn refresh(&mut self) {
        let c = self.num_classes();
        for k in 0..c {
            let tp = self.confusion[k][k];
            let fn_: u64 = self.confusion[k].iter().sum::<u64>() - tp;
            let fp: u64 = (0..c).map(|r| self.confusion[r][k]).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            self.per_class_iou[k] = (denom > 0).then(|| tp as f64 / denom as f64);
        }
        self.miou = mean_defined(self.per_class_iou.iter().copied());
        self.f_miou = mean_defined(self.foreground.iter().map(|&k| self.per_class_iou[k as usize]));
    }

    /// Ground-truth pixel count per class (confusion row sums).
    pub fn truth_counts(&self) -> Vec<u64> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Gradient reaching a single block logit when the block holds `k`
/// foreground pixels, for point-wise BCE over the upsampled logit and for
/// block-wise BCE, each normalized by the fully-foreground (`k = s²`) case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DilutionReport {
    pub stride: usize,
    /// Entries for `k = 1..=s²`.
    pub rows: Vec<DilutionRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DilutionRow {
    pub k: usize,
    pub ce_grad: f64,
    pub bwbce_grad: f64,
    pub ce_ratio: f64,
    pub bwbce_ratio: f64,
}

impl DilutionReport {
    pub fn row(&self, k: usize) -> Option<&DilutionRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    /// CSV with header `stride,k,ce_ratio,bwbce_ratio`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stride,k,ce_ratio,bwbce_ratio\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", self.stride, r.k, r.ce_ratio, r.bwbce_ratio);
        }
        out
    }
}

/// One s×s block driven by a single logit `z = 0` through a nearest
/// upsample. The first `k` pixels (row-major) carry a foreground class, the
/// rest background.
///
/// The point-wise branch applies sum-normalized BCE on the foreground
/// channel over the pixels that carry the foreground class, which is the
/// part of the upsampled gradient that supervises that class; its
/// magnitude grows with `k`. The block-wise branch assigns the block label
/// from the same mask and applies BCE to the block logit directly, so any
/// `k ≥ 1` produces the same single positive bit.
pub fn dilution_probe(stride: usize) -> Result<DilutionReport> {
    if stride < 2 {
        return Err(Error::arg(format!("dilution probe needs stride ≥ 2, got {stride}")));
    }
    let area = stride * stride;
    let scheme = ClassScheme::new(2, vec![1]).expect("static scheme");
    let mut raw = Vec::with_capacity(area);
    for k in 1..=area {
        let mut ids = vec![0u8; area];
        ids[..k].fill(1);
        let mask = LabelMask::new(stride, stride, ids)?;

        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::zeros(&[1, 1, 1, 1]));
        let up = g.upsample_nearest(z, stride)?;
        let p = g.sigmoid(up);
        let target = Tensor::from_fn(&[1, 1, stride, stride], |i| f64::from(mask.ids()[i] == 1));
        let loss = pointwise_bce(&mut g, p, &target, Some(&target), Normalization::Sum)?;
        g.backward(loss.var)?;
        let ce_grad = g.grad(z).map_or(0.0, |t| t.data()[0].abs());

        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::zeros(&[1, 1, 1, 1]));
        let p = g.sigmoid(z);
        let label = assign(&mask, &scheme, stride)?;
        let loss = bwbce(&mut g, p, &[label])?;
        g.backward(loss.var)?;
        let bwbce_grad = g.grad(z).map_or(0.0, |t| t.data()[0].abs());
        raw.push((k, ce_grad, bwbce_grad));
    }
    let (_, ce_full, bw_full) = raw[area - 1];
    Ok(DilutionReport {
        stride,
        rows: raw
            .into_iter()
            .map(|(k, ce_grad, bwbce_grad)| DilutionRow {
                k,
                ce_grad,
                bwbce_grad,
                ce_ratio: ce_grad / ce_full,
                bwbce_ratio: bwbce_grad / bw_full,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_class() -> ClassScheme {
        ClassScheme::new(3, vec![2]).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let truth = LabelMask::new(2, 2, vec![0, 1, 2, IGNORE]).unwrap();
        let pred = LabelMask::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        let mut r = EvalReport::new(&three_class());
        r.accumulate(&pred, &truth).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.f_miou, 1.0);
        assert_eq!(r.truth_counts(), vec![1, 1, 1]);
    }

    #[test]
    fn disjoint_prediction_is_zero() {
        let scheme = ClassScheme::new(2, vec![1]).unwrap();
        let truth = LabelMask::filled(2, 2, 0);
        let pred = LabelMask::filled(2, 2, 1);
        let mut r = EvalReport::new(&scheme);
        r.accumulate(&pred, &truth).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn absent_class_is_undefined() {
        let truth = LabelMask::filled(1, 2, 0);
        let mut r = EvalReport::new(&three_class());
        r.accumulate(&truth, &truth).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(1.0), None, None]);
        assert_eq!(r.miou, 1.0);
        assert!(r.f_miou.is_nan());
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let a = (
            LabelMask::new(1, 3, vec![0, 1, 2]).unwrap(),
            LabelMask::new(1, 3, vec![0, 2, 2]).unwrap(),
        );
        let b = (
            LabelMask::new(1, 3, vec![1, 1, 0]).unwrap(),
            LabelMask::new(1, 3, vec![1, 0, 0]).unwrap(),
        );
        let mut joint = EvalReport::new(&three_class());
        joint.accumulate(&a.0, &a.1).unwrap();
        joint.accumulate(&b.0, &b.1).unwrap();
        let mut left = EvalReport::new(&three_class());
        left.accumulate(&a.0, &a.1).unwrap();
        let mut right = EvalReport::new(&three_class());
        right.accumulate(&b.0, &b.1).unwrap();
        left.merge(&right).unwrap();
        assert_eq!(left, joint);
    }

    #[test]
    fn probe_rejects_unit_stride() {
        assert!(dilution_probe(1).is_err());
    }

    #[test]
    fn probe_stride_two() {
        let r = dilution_probe(2).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.row(2).unwrap().ce_ratio, 0.5);
        let csv = r.to_csv();
        assert!(csv.starts_with("stride,k,ce_ratio,bwbce_ratio\n2,1,0.25,1\n"));
    }
}
