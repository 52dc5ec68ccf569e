//! Position accuracy, median trajectory error and inference timing.
//!
//! Every metric pools all valid (point, frame) pairs of one video, frame 0
//! included; dataset figures are unweighted means over videos.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::container::Scene;
use crate::error::{Error, Result};
use crate::sequence::{rescale_trajectories, Resolution, TrajectorySet};

pub const THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
pub const REPORT_SCHEMA: &str = "echotrack.eval/1";
/// Untimed runs before AIT measurement starts.
pub const WARMUP_RUNS: usize = 2;

/// Euclidean errors of all valid (point, frame) pairs; validity comes from
/// the ground truth.
pub fn pair_errors(pred: &TrajectorySet, gt: &TrajectorySet) -> Result<Vec<f64>> {
    if pred.num_points() != gt.num_points() || pred.num_frames() != gt.num_frames() {
        return Err(Error::shape(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.num_points(),
            pred.num_frames(),
            gt.num_points(),
            gt.num_frames()
        )));
    }
    let mut out = Vec::with_capacity(gt.num_points() * gt.num_frames());
    for n in (0..gt.num_points()).filter(|&n| gt.valid_mask()[n]) {
        for s in 0..gt.num_frames() {
            out.push(pred.point(n, s).distance(gt.point(n, s)));
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("no valid points to evaluate"));
    }
    Ok(out)
}

fn accuracy(errors: &[f64], x: f64) -> f64 {
    100.0 * errors.iter().filter(|&&e| e <= x).count() as f64 / errors.len() as f64
}

/// Percentage of valid pairs within `x` pixels.
pub fn position_accuracy(pred: &TrajectorySet, gt: &TrajectorySet, x: f64) -> Result<f64> {
    Ok(accuracy(&pair_errors(pred, gt)?, x))
}

/// Mean of the accuracies at 1, 2, 4, 8 and 16 pixels.
pub fn delta_avg(pred: &TrajectorySet, gt: &TrajectorySet) -> Result<f64> {
    let e = pair_errors(pred, gt)?;
    Ok(THRESHOLDS.iter().map(|&x| accuracy(&e, x)).sum::<f64>() / THRESHOLDS.len() as f64)
}

/// Median of `values`; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median trajectory error in pixels.
pub fn mte(pred: &TrajectorySet, gt: &TrajectorySet) -> Result<f64> {
    Ok(median(&pair_errors(pred, gt)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub id: String,
    pub delta: [f64; 5],
    pub delta_avg: f64,
    pub mte: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

impl VideoMetrics {
    pub fn compute(id: impl Into<String>, pred: &TrajectorySet, gt: &TrajectorySet) -> Result<Self> {
        let e = pair_errors(pred, gt)?;
        let delta = THRESHOLDS.map(|x| accuracy(&e, x));
        Ok(Self {
            id: id.into(),
            delta,
            delta_avg: delta.iter().sum::<f64>() / delta.len() as f64,
            mte: median(&e),
            seconds: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    /// Accuracy at each of [`THRESHOLDS`].
    pub delta: [f64; 5],
    pub delta_avg: f64,
    pub mte: f64,
    /// Average inference seconds per video, when timed.
    pub ait: Option<f64>,
    pub videos: Vec<VideoMetrics>,
}

impl EvalReport {
    pub fn from_videos(videos: Vec<VideoMetrics>) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::invalid("no videos to report"));
        }
        let n = videos.len() as f64;
        let mut delta = [0.0; 5];
        for v in &videos {
            for (d, x) in delta.iter_mut().zip(v.delta) {
                *d += x / n;
            }
        }
        let timed: Vec<f64> = videos.iter().filter_map(|v| v.seconds).collect();
        Ok(Self {
            schema: REPORT_SCHEMA.into(),
            delta,
            delta_avg: videos.iter().map(|v| v.delta_avg).sum::<f64>() / n,
            mte: videos.iter().map(|v| v.mte).sum::<f64>() / n,
            ait: (timed.len() == videos.len()).then(|| timed.iter().sum::<f64>() / n),
            videos,
        })
    }

    /// `key value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (x, d) in THRESHOLDS.iter().zip(self.delta) {
            s.push_str(&format!("delta_{x} {d:.4}\n"));
        }
        s.push_str(&format!("delta_avg {:.4}\nmte {:.4}\n", self.delta_avg, self.mte));
        if let Some(a) = self.ait {
            s.push_str(&format!("ait {a:.6}\n"));
        }
        s.push_str(&format!("videos {}\n", self.videos.len()));
        s
    }

    /// Header and row in the order δ¹ δ² δ⁴ δ⁸ δ¹⁶ δ_avg MTE AIT.
    pub fn table(&self) -> String {
        let ait = self.ait.map_or("-".to_string(), |a| format!("{a:.3}"));
        format!(
            "{:>7} {:>7} {:>7} {:>7} {:>7} {:>9} {:>7} {:>7}\n{:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>9.2} {:>7.2} {:>7}\n",
            "d<1", "d<2", "d<4", "d<8", "d<16", "d_avg", "MTE", "AIT",
            self.delta[0], self.delta[1], self.delta[2], self.delta[3], self.delta[4], self.delta_avg, self.mte, ait
        )
    }

    pub fn is_monotone(&self) -> bool {
        let mono = |d: &[f64; 5]| d.windows(2).all(|w| w[0] <= w[1]);
        mono(&self.delta) && self.videos.iter().all(|v| mono(&v.delta))
    }
}

/// Runs `f` on every item, after `warmups` untimed runs on the first item,
/// and returns the mean wall-clock seconds plus each result and duration.
pub fn measure_ait<T, R>(
    items: &[T],
    warmups: usize,
    mut f: impl FnMut(&T) -> Result<R>,
) -> Result<(f64, Vec<(R, f64)>)> {
    let first = items.first().ok_or_else(|| Error::invalid("cannot time an empty dataset"))?;
    for _ in 0..warmups {
        f(first)?;
    }
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let t = Instant::now();
        let r = f(item)?;
        out.push((r, t.elapsed().as_secs_f64()));
    }
    let ait = out.iter().map(|(_, t)| t).sum::<f64>() / out.len() as f64;
    Ok((ait, out))
}

/// Evaluates `predict` on labelled scenes. Predictions and ground truth are
/// compared after rescaling to `eval_resolution`. Timing is recorded when
/// `timed`, with [`WARMUP_RUNS`] warm-ups.
pub fn evaluate(
    scenes: &[(String, Scene)],
    eval_resolution: Resolution,
    timed: bool,
    mut predict: impl FnMut(&Scene) -> Result<TrajectorySet>,
) -> Result<EvalReport> {
    let warmups = if timed { WARMUP_RUNS } else { 0 };
    let (_, runs) = measure_ait(scenes, warmups, |(_, s)| predict(s))?;
    let mut videos = Vec::with_capacity(scenes.len());
    for ((id, scene), (pred, secs)) in scenes.iter().zip(runs) {
        let gt = scene
            .tracks
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("scene {id} has no ground truth")))?;
        let res = scene.sequence.resolution();
        let pred = rescale_trajectories(&pred, res, eval_resolution)?;
        let gt = rescale_trajectories(gt, res, eval_resolution)?;
        let mut v = VideoMetrics::compute(id.clone(), &pred, &gt)?;
        v.seconds = timed.then_some(secs);
        videos.push(v);
    }
    EvalReport::from_videos(videos)
}

/// Baseline that keeps every point at its query position.
pub fn static_prediction(scene: &Scene) -> Result<TrajectorySet> {
    let q = scene.query_set()?;
    Ok(TrajectorySet::stationary(&q, scene.sequence.frame_count()))
}
