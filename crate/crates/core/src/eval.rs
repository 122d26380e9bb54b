//! One-pass tracking and benchmark metrics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::env::SequenceData;
use crate::error::{Error, Result};
use crate::geometry::{center_error_px, iou, BBox};
use crate::network::{encode_observation, lstm_step, ParamStore, RecurrentState};
use crate::policy::{map_estimate, PolicyOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub name: String,
    pub predictions: Vec<BBox>,
    /// Frames per second of the inference loop (wall clock).
    pub fps: f64,
}

/// Runs the network once over `seq` using the policy mean as prediction.
///
/// Only the first ground-truth box is consulted; it is fed as the location
/// hint and returned as the frame-0 prediction.
pub fn track_sequence(params: &ParamStore, seq: &SequenceData) -> Result<TrackResult> {
    let first = *seq
        .ground_truth
        .first()
        .ok_or_else(|| Error::Data(format!("sequence `{}` is empty", seq.name)))?;
    let start = Instant::now();
    let mut state = RecurrentState::zeros(params.dims.hidden);
    let mut predictions = Vec::with_capacity(seq.len());
    for (t, frame) in seq.frames.iter().enumerate() {
        let mut obs = frame.clone();
        obs.location_hint = if t == 0 { first.to_array() } else { [0.0; 4] };
        let o = encode_observation(&obs, params)?;
        state = lstm_step(&state, &o, params)?;
        predictions.push(if t == 0 {
            first
        } else {
            map_estimate(&PolicyOutput::new(state.mu(), 0.0))
        });
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok(TrackResult {
        name: seq.name.clone(),
        predictions,
        fps: seq.len() as f64 / secs,
    })
}

/// A thresholded fraction-of-frames curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl Curve {
    /// Value at the threshold closest to `tau`.
    pub fn at(&self, tau: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .zip(&self.values)
            .min_by(|a, b| (a.0 - tau).abs().total_cmp(&(b.0 - tau).abs()))
            .map(|(_, v)| *v)
    }
}

/// Overlap thresholds `0.00, 0.01, ..., 1.00`.
pub fn default_overlap_thresholds() -> Vec<f64> {
    (0..=100).map(|k| k as f64 / 100.0).collect()
}

/// Center-error thresholds `0, 1, ..., 50` pixels.
pub fn default_pixel_thresholds() -> Vec<f64> {
    (0..=50).map(f64::from).collect()
}

/// Predictions aligned with ground truth for one sequence.
#[derive(Debug, Clone, Copy)]
pub struct Aligned<'a> {
    pub predictions: &'a [BBox],
    pub ground_truth: &'a [BBox],
    pub img_w: f64,
    pub img_h: f64,
}

impl<'a> Aligned<'a> {
    pub fn new(predictions: &'a [BBox], seq: &'a SequenceData) -> Self {
        Aligned {
            predictions,
            ground_truth: &seq.ground_truth,
            img_w: seq.img_w,
            img_h: seq.img_h,
        }
    }

    /// Drops the first `n` frames (e.g. the supervised frame 0).
    pub fn skip(self, n: usize) -> Self {
        let n = n.min(self.predictions.len()).min(self.ground_truth.len());
        Aligned {
            predictions: &self.predictions[n..],
            ground_truth: &self.ground_truth[n..],
            ..self
        }
    }

    fn check(&self) -> Result<()> {
        if self.predictions.len() != self.ground_truth.len() {
            return Err(Error::dim(
                "predictions vs ground truth",
                self.ground_truth.len(),
                self.predictions.len(),
            ));
        }
        Ok(())
    }

    pub fn ious(&self) -> impl Iterator<Item = f64> + '_ {
        self.predictions.iter().zip(self.ground_truth).map(|(p, g)| iou(p, g))
    }

    pub fn center_errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.predictions
            .iter()
            .zip(self.ground_truth)
            .map(|(p, g)| center_error_px(p, g, self.img_w, self.img_h))
    }
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::config("eval.thresholds", "must not be empty"));
    }
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    let unsorted = thresholds.windows(2).any(|w| !(w[0] < w[1]));
    if unsorted {
        return Err(Error::config("eval.thresholds", "must be strictly ascending"));
    }
    Ok(())
}

/// Sorted-sample fraction curve: `count(pass(sample, tau)) / n` for each tau.
fn pooled_curve(mut samples: Vec<f64>, thresholds: &[f64], at_least: bool) -> Curve {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let values = thresholds
        .iter()
        .map(|&tau| {
            if n == 0 {
                return 0.0;
            }
            let count = if at_least {
                n - samples.partition_point(|&s| s < tau)
            } else {
                samples.partition_point(|&s| s <= tau)
            };
            count as f64 / n as f64
        })
        .collect();
    Curve {
        thresholds: thresholds.to_vec(),
        values,
    }
}

/// Fraction of frames with `iou >= tau`, pooled over all sequences.
pub fn success_plot(runs: &[Aligned<'_>], thresholds: &[f64]) -> Result<Curve> {
    check_thresholds(thresholds)?;
    let mut samples = Vec::new();
    for r in runs {
        r.check()?;
        samples.extend(r.ious());
    }
    Ok(pooled_curve(samples, thresholds, true))
}

/// Fraction of frames with center error `<= tau` pixels, pooled over all sequences.
pub fn precision_plot(runs: &[Aligned<'_>], thresholds: &[f64]) -> Result<Curve> {
    check_thresholds(thresholds)?;
    let mut samples = Vec::new();
    for r in runs {
        r.check()?;
        samples.extend(r.center_errors());
    }
    Ok(pooled_curve(samples, thresholds, false))
}

/// Precision at `tau` pixels (20 px by convention).
pub fn precision_at(curve: &Curve, tau: f64) -> Result<f64> {
    curve
        .thresholds
        .iter()
        .position(|&t| t == tau)
        .map(|i| curve.values[i])
        .ok_or_else(|| Error::config("eval.pixel_thresholds", format!("grid has no {tau} px threshold")))
}

/// Trapezoidal area under the curve, normalized by the threshold span.
pub fn auc(curve: &Curve) -> Result<f64> {
    check_thresholds(&curve.thresholds)?;
    if curve.values.len() != curve.thresholds.len() {
        return Err(Error::dim("curve values", curve.thresholds.len(), curve.values.len()));
    }
    if curve.thresholds.len() == 1 {
        return Ok(curve.values[0]);
    }
    let span = curve.thresholds[curve.thresholds.len() - 1] - curve.thresholds[0];
    let area: f64 = curve
        .thresholds
        .windows(2)
        .zip(curve.values.windows(2))
        .map(|(t, v)| 0.5 * (v[0] + v[1]) * (t[1] - t[0]))
        .sum();
    Ok(area / span)
}

/// Mean IoU over the frames of one sequence.
pub fn avg_overlap(run: &Aligned<'_>) -> Result<f64> {
    run.check()?;
    let n = run.predictions.len();
    if n == 0 {
        return Err(Error::Data("no frames to average".into()));
    }
    Ok(run.ious().sum::<f64>() / n as f64)
}
