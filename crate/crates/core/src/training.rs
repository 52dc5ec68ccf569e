//! Supervised training: iteration-weighted L1 trajectory loss, AdamW with a
//! one-cycle schedule, a sequence-length curriculum and resumable
//! checkpoints.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::checkpoint::{load_model, save_model};
use crate::container::Scene;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{model_input, Tracker};
use crate::nn::ParamStore;
use crate::sequence::{resize_sequence, ImageSequence, Point, QuerySet, TrajectorySet};

pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// `epochs` passes over the training set with sequences of `frames` frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub epochs: usize,
    pub frames: usize,
}

/// Parses `"2x16,1x32"` into phases.
pub fn parse_phases(text: &str) -> Result<Vec<Phase>> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|part| {
            let (e, s) = part
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| Error::invalid(format!("phase {part:?} is not EPOCHSxFRAMES")))?;
            let epochs = e.trim().parse().map_err(|_| Error::invalid(format!("bad epoch count in {part:?}")))?;
            let frames: usize = s.trim().parse().map_err(|_| Error::invalid(format!("bad frame count in {part:?}")))?;
            if frames < 2 {
                return Err(Error::invalid(format!("phase {part:?} needs at least 2 frames")));
            }
            Ok(Phase { epochs, frames })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    /// Random start frame when a scene is longer than the phase length.
    pub temporal_crop: bool,
    pub horizontal_flip: bool,
    /// Range of the intensity exponent; `[1, 1]` disables it.
    pub gamma: [f64; 2],
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            temporal_crop: true,
            horizontal_flip: true,
            gamma: [0.7, 1.4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate of the one-cycle schedule.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Fraction of steps spent warming up.
    pub pct_start: f64,
    /// Initial learning rate is `learning_rate / div_factor`.
    pub div_factor: f64,
    /// Final learning rate is the initial one divided by this.
    pub final_div_factor: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Per-iteration loss decay.
    pub gamma: f64,
    /// Sequences per step; only 1 is supported.
    pub batch_size: usize,
    pub phases: Vec<Phase>,
    pub augmentation: Augmentation,
    /// Cap on training steps per epoch (0 = whole training set).
    pub steps_per_epoch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 1e-5,
            betas: [0.9, 0.999],
            eps: 1e-8,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            grad_clip: 1.0,
            gamma: 0.8,
            batch_size: 1,
            phases: vec![Phase { epochs: 10, frames: 16 }],
            augmentation: Augmentation::default(),
            steps_per_epoch: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.learning_rate) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid("gamma must lie in (0, 1]"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) || !pos(self.eps) {
            return Err(Error::invalid("weight_decay must be non-negative and eps positive"));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) || !(self.div_factor >= 1.0) || !(self.final_div_factor >= 1.0) {
            return Err(Error::invalid("one-cycle needs 0 < pct_start < 1 and division factors ≥ 1"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::invalid("grad_clip must be non-negative"));
        }
        if self.batch_size != 1 {
            return Err(Error::invalid("only batch_size = 1 is supported"));
        }
        if let Some(p) = self.phases.iter().find(|p| p.frames < 2) {
            return Err(Error::invalid(format!("phase length {} is below 2 frames", p.frames)));
        }
        let g = self.augmentation.gamma;
        if !(pos(g[0]) && g[0] <= g[1] && g[1].is_finite()) {
            return Err(Error::invalid("augmentation gamma range must be positive and ordered"));
        }
        Ok(())
    }

    pub fn parse_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::malformed("training config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Cosine one-cycle learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn from_config(cfg: &TrainConfig, total_steps: usize) -> Self {
        Self {
            max_lr: cfg.learning_rate,
            total_steps,
            pct_start: cfg.pct_start,
            div_factor: cfg.div_factor,
            final_div_factor: cfg.final_div_factor,
        }
    }

    /// Step at which the peak is reached.
    pub fn peak_step(&self) -> usize {
        ((self.pct_start * self.total_steps as f64).round() as usize)
            .saturating_sub(1)
            .min(self.total_steps.saturating_sub(1))
    }

    pub fn lr(&self, step: usize) -> f64 {
        let initial = self.max_lr / self.div_factor;
        let min = initial / self.final_div_factor;
        let peak = self.peak_step();
        let last = self.total_steps.saturating_sub(1);
        let anneal = |from: f64, to: f64, t: f64| to + 0.5 * (from - to) * (1.0 + (std::f64::consts::PI * t).cos());
        if step <= peak {
            if peak == 0 {
                return self.max_lr;
            }
            anneal(initial, self.max_lr, step as f64 / peak as f64)
        } else {
            let t = (step - peak) as f64 / (last - peak).max(1) as f64;
            anneal(self.max_lr, min, t.min(1.0))
        }
    }
}

/// AdamW with decoupled weight decay (applied to weights of rank ≥ 2).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = |p: &ParamStore| {
            let mut s = ParamStore::new();
            for (k, t) in p.iter() {
                s.insert(k.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        Self {
            betas: cfg.betas,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &std::collections::BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let [b1, b2] = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let m = self.m.get_mut(name).expect("moment for every parameter").data_mut();
            let v = self.v.get_mut(name).expect("moment for every parameter").data_mut();
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *p -= lr * decay * *p;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut std::collections::BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for t in grads.values_mut() {
            t.scale_inplace(k);
        }
    }
    norm
}

fn check_history(history_len: usize, gt: &TrajectorySet, shapes: impl Iterator<Item = (usize, usize)>) -> Result<usize> {
    if history_len == 0 {
        return Err(Error::invalid("loss needs at least one set of tracks"));
    }
    for (n, s) in shapes {
        if (n, s) != (gt.num_points(), gt.num_frames()) {
            return Err(Error::shape(format!(
                "tracks are {n}x{s}, ground truth {}x{}",
                gt.num_points(),
                gt.num_frames()
            )));
        }
    }
    let valid = gt.valid_mask().iter().filter(|v| **v).count();
    if valid == 0 {
        return Err(Error::invalid("no valid points to supervise"));
    }
    Ok(valid)
}

/// `Σ_i γ^(I−i) · mean_{valid n, s} (|Δx| + |Δy|)` over `history[0..=I]`.
pub fn trajectory_loss(history: &[TrajectorySet], gt: &TrajectorySet, gamma: f64) -> Result<f64> {
    let valid = check_history(history.len(), gt, history.iter().map(|t| (t.num_points(), t.num_frames())))?;
    let last = history.len() - 1;
    let denom = (valid * gt.num_frames()) as f64;
    let mut loss = 0.0;
    for (i, t) in history.iter().enumerate() {
        let mut sum = 0.0;
        for n in (0..gt.num_points()).filter(|&n| gt.valid_mask()[n]) {
            for s in 0..gt.num_frames() {
                let (p, q) = (t.point(n, s), gt.point(n, s));
                sum += (p.x - q.x).abs() + (p.y - q.y).abs();
            }
        }
        loss += gamma.powi((last - i) as i32) * sum / denom;
    }
    Ok(loss)
}

/// Differentiable [`trajectory_loss`] over `[N, S, 2]` track nodes.
pub fn trajectory_loss_graph(g: &mut Graph, history: &[Var], gt: &TrajectorySet, gamma: f64) -> Result<Var> {
    let shapes: Vec<(usize, usize)> = history
        .iter()
        .map(|&v| {
            let s = g.shape(v);
            if s.len() == 3 && s[2] == 2 {
                (s[0], s[1])
            } else {
                (usize::MAX, 0)
            }
        })
        .collect();
    let valid = check_history(history.len(), gt, shapes.into_iter())?;
    let frames = gt.num_frames();
    let denom = (valid * frames) as f64;
    let last = history.len() - 1;
    let target = g.constant(gt.to_tensor());
    let mut total: Option<Var> = None;
    for (i, &h) in history.iter().enumerate() {
        let w = gamma.powi((last - i) as i32) / denom;
        let mask = Tensor::from_fn(&[gt.num_points(), frames, 2], |k| {
            if gt.valid_mask()[k / (2 * frames)] {
                w
            } else {
                0.0
            }
        });
        let d = g.sub(h, target);
        let d = g.abs(d);
        let m = g.constant(mask);
        let d = g.mul(d, m);
        let term = g.sum_all(d);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    Ok(total.expect("non-empty history"))
}

/// One training example after augmentation, at the model's working size.
pub struct Sample {
    pub sequence: ImageSequence,
    pub queries: QuerySet,
    pub tracks: TrajectorySet,
}

/// Crops, flips and re-exposes `scene` per `aug`, then resizes to `working`.
pub fn prepare_sample(
    scene: &Scene,
    frames: usize,
    aug: Option<&Augmentation>,
    working: crate::sequence::Resolution,
    rng: &mut impl Rng,
) -> Result<Sample> {
    let gt = scene
        .tracks
        .as_ref()
        .ok_or_else(|| Error::invalid("training scenes need ground-truth tracks"))?;
    let seq = &scene.sequence;
    let res = seq.resolution();
    let len = frames.min(seq.frame_count());
    let inside = |p: Point| p.x >= 0.0 && p.y >= 0.0 && p.x < res.width as f64 && p.y < res.height as f64;
    let mut start = 0;
    if aug.is_some_and(|a| a.temporal_crop) {
        let s = rng.random_range(0..=seq.frame_count() - len);
        if gt.frame_points(s).into_iter().all(inside) {
            start = s;
        }
    }
    let mut seq = seq.slice_frames(start, len)?;
    let mut tracks = gt.slice_frames(start, len)?;
    if let Some(a) = aug {
        let flip = a.horizontal_flip && rng.random_bool(0.5);
        let w = res.width as f64;
        if flip && tracks.frame_points(0).iter().all(|p| p.x <= w - 1.0) {
            let width = res.width;
            let mut data = seq.frames().to_vec();
            for row in data.chunks_exact_mut(width) {
                row.reverse();
            }
            seq = ImageSequence::with_source(data, len, res, seq.source_resolution())?;
            let mut t = tracks.to_tensor();
            for c in t.data_mut().chunks_exact_mut(2) {
                c[0] = w - 1.0 - c[0];
            }
            tracks = TrajectorySet::from_tensor(&t, tracks.valid_mask().to_vec())?;
        }
        let [lo, hi] = a.gamma;
        if lo < hi || lo != 1.0 {
            let gamma = if lo < hi { rng.random_range(lo..=hi) } else { lo };
            let data = seq.frames().iter().map(|v| v.powf(gamma)).collect();
            seq = ImageSequence::with_source(data, len, res, seq.source_resolution())?;
        }
    }
    let queries = QuerySet::new(tracks.frame_points(0), res)?;
    let (sequence, queries_w) = resize_sequence(&seq, &queries, working)?;
    let tracks_w = crate::sequence::rescale_trajectories(&tracks, res, working)?;
    Ok(Sample {
        sequence,
        queries: queries_w,
        tracks: tracks_w,
    })
}

/// Loss and parameter gradients of one sample.
pub fn loss_and_grads(
    model: &Tracker,
    sample: &Sample,
    gamma: f64,
) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let x = g.constant(model_input(&sample.sequence)?);
    let history = model.forward(&mut g, &p, x, &sample.queries)?;
    let loss = trajectory_loss_graph(&mut g, &history, &sample.tracks, gamma)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Ok((value, Default::default()));
    }
    let grads = g.backward(loss);
    Ok((value, p.gradients(&g, &grads)))
}

/// Progress stored in `last.ckpt` for resuming.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub step: usize,
    pub total_steps: usize,
    pub best_val: Option<f64>,
    pub adam_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub frames: usize,
    pub mean_loss: f64,
    pub val_delta_avg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub steps: usize,
    /// Loss of every step run in this call, in order.
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub initial_val: Option<f64>,
    pub best_val: Option<f64>,
}

/// Where `fit` writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct OutputDir {
    pub root: PathBuf,
}

impl OutputDir {
    pub fn log(&self) -> PathBuf {
        self.root.join(LOG_FILE)
    }

    pub fn best(&self) -> PathBuf {
        self.root.join(BEST_CHECKPOINT)
    }

    pub fn last(&self) -> PathBuf {
        self.root.join(LAST_CHECKPOINT)
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order
}

fn step_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64 + 2);
    rng.set_word_pos(1u128 << 40 | (index as u128) << 20);
    rng
}

fn validate_model(model: &Tracker, val: &[(String, Scene)]) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let r = evaluate(val, model.config().working_resolution, false, |s| {
        model.track(&s.sequence, &s.query_set()?)
    })?;
    Ok(Some(r.delta_avg))
}

/// Trains `model` in place. With `out`, appends `step,loss,lr,val_delta_avg`
/// rows to the CSV log and writes `last.ckpt` every epoch and `best.ckpt`
/// whenever validation improves. `resume` continues from a `last.ckpt`.
pub fn fit(
    model: &mut Tracker,
    train: &[(String, Scene)],
    val: &[(String, Scene)],
    cfg: &TrainConfig,
    out: Option<&OutputDir>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    fit_partial(model, train, val, cfg, out, resume, usize::MAX)
}

/// [`fit`] that returns after at most `max_epochs` further epochs, leaving a
/// resumable `last.ckpt`; used to simulate interruption.
pub fn fit_partial(
    model: &mut Tracker,
    train: &[(String, Scene)],
    val: &[(String, Scene)],
    cfg: &TrainConfig,
    out: Option<&OutputDir>,
    resume: Option<&Path>,
    max_epochs: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let steps_per_epoch = match cfg.steps_per_epoch {
        0 => train.len(),
        k => k.min(train.len()),
    };
    let schedule_epochs: Vec<usize> = cfg
        .phases
        .iter()
        .flat_map(|p| std::iter::repeat_n(p.frames, p.epochs))
        .collect();
    let total_steps = schedule_epochs.len() * steps_per_epoch;
    if total_steps > 0 && train.is_empty() {
        return Err(Error::invalid("no training scenes"));
    }
    let schedule = OneCycle::from_config(cfg, total_steps);
    let mut opt = AdamW::new(model.params(), cfg);
    let mut first_epoch = 0;
    let mut step = 0;
    let mut best_val = None;
    if let Some(path) = resume {
        let loaded = load_model(path)?;
        let state: TrainState = serde_json::from_value(
            loaded
                .training
                .ok_or_else(|| Error::malformed("checkpoint", "no training state to resume from"))?,
        )
        .map_err(|e| Error::malformed("checkpoint", e.to_string()))?;
        if state.config != *cfg || state.total_steps != total_steps {
            return Err(Error::invalid("resume checkpoint was written with a different training config"));
        }
        if loaded.model.config() != model.config() {
            return Err(Error::invalid("resume checkpoint has a different model config"));
        }
        *model = loaded.model;
        let group = |name: &str| {
            loaded
                .archive_groups
                .get(name)
                .cloned()
                .ok_or_else(|| Error::malformed("checkpoint", format!("missing optimizer state {name}")))
        };
        opt.m = group("adam_m")?;
        opt.v = group("adam_v")?;
        opt.step = state.adam_step;
        first_epoch = state.epochs_done;
        step = state.step;
        best_val = state.best_val;
    }
    let mut log = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.root).map_err(|e| Error::io(&o.root, e))?;
            let path = o.log();
            let fresh = resume.is_none() || !path.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "step,loss,lr,val_delta_avg").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };

    let initial_val = if resume.is_none() && total_steps > 0 {
        validate_model(model, val)?
    } else {
        None
    };
    let mut outcome = TrainOutcome {
        steps: 0,
        losses: Vec::new(),
        epochs: Vec::new(),
        initial_val,
        best_val,
    };
    let working = model.config().working_resolution;
    for (epoch, &frames) in schedule_epochs.iter().enumerate().skip(first_epoch).take(max_epochs) {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut rows = String::new();
        let mut epoch_loss = 0.0;
        for (k, &idx) in order.iter().take(steps_per_epoch).enumerate() {
            let (id, scene) = &train[idx];
            let mut rng = step_rng(cfg.seed, epoch, k);
            let sample = prepare_sample(scene, frames, Some(&cfg.augmentation), working, &mut rng)?;
            let (loss, mut grads) = loss_and_grads(model, &sample, cfg.gamma)?;
            if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    scene: id.clone(),
                });
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            let lr = schedule.lr(step);
            opt.update(model.params_mut(), &grads, lr);
            outcome.losses.push(loss);
            epoch_loss += loss;
            let is_last = k + 1 == steps_per_epoch;
            if !is_last {
                let _ = writeln!(rows, "{step},{loss:.17e},{lr:.17e},");
            } else {
                let v = validate_model(model, val)?;
                let _ = writeln!(
                    rows,
                    "{step},{loss:.17e},{lr:.17e},{}",
                    v.map_or(String::new(), |v| format!("{v:.6}"))
                );
                let improved = match (v, best_val) {
                    (Some(v), Some(b)) => v > b,
                    (Some(_), None) => true,
                    _ => false,
                };
                if improved {
                    best_val = v;
                }
                outcome.epochs.push(EpochRecord {
                    epoch,
                    frames,
                    mean_loss: epoch_loss / steps_per_epoch as f64,
                    val_delta_avg: v,
                });
                if let Some(o) = out {
                    if improved || (val.is_empty() && epoch + 1 == schedule_epochs.len()) {
                        save_model(&o.best(), model, None, &[])?;
                    }
                    let state = TrainState {
                        config: cfg.clone(),
                        epochs_done: epoch + 1,
                        step: step + 1,
                        total_steps,
                        best_val,
                        adam_step: opt.step,
                    };
                    save_model(
                        &o.last(),
                        model,
                        Some(serde_json::to_value(&state)?),
                        &[("adam_m", &opt.m), ("adam_v", &opt.v)],
                    )?;
                }
            }
            step += 1;
            outcome.steps += 1;
        }
        if let Some((f, path)) = log.as_mut() {
            f.write_all(rows.as_bytes()).map_err(|e| Error::io(&*path, e))?;
            f.flush().map_err(|e| Error::io(&*path, e))?;
        }
    }
    outcome.best_val = best_val;
    if let (Some(o), true) = (out, schedule_epochs.is_empty()) {
        save_model(&o.best(), model, None, &[])?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use crate::model::ModelConfig;
    use crate::sequence::Resolution;
    use crate::synthdata::{generate_scene, SceneConfig};

    #[test]
    fn loss_examples() {
        let gt = TrajectorySet::from_tracks(&[vec![Point::new(1.0, 1.0)]]).unwrap();
        let pred = TrajectorySet::from_tracks(&[vec![Point::new(4.0, 5.0)]]).unwrap();
        assert_eq!(trajectory_loss(&[pred.clone()], &gt, 0.8).unwrap(), 7.0);
        assert_eq!(trajectory_loss(&[gt.clone(), gt.clone()], &gt, 0.8).unwrap(), 0.0);
        assert!(trajectory_loss(&[], &gt, 0.8).is_err());
        let two = TrajectorySet::from_tracks(&[vec![Point::new(1.0, 1.0); 2]]).unwrap();
        assert!(trajectory_loss(&[two], &gt, 0.8).is_err());
    }

    fn random_tracks(rng: &mut ChaCha8Rng, n: usize, s: usize) -> TrajectorySet {
        let c = (0..n * s * 2).map(|_| rng.random_range(-10.0..10.0)).collect();
        TrajectorySet::new(n, s, c, vec![true; n]).unwrap()
    }

    #[test]
    fn graph_loss_matches_brute_force_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (n, s) = (rng.random_range(1..5), rng.random_range(1..6));
            let mut gt = random_tracks(&mut rng, n, s);
            let mask: Vec<bool> = (0..n).map(|i| i == 0 || rng.random_bool(0.7)).collect();
            gt.set_valid_mask(mask).unwrap();
            let hist: Vec<TrajectorySet> = (0..5).map(|_| random_tracks(&mut rng, n, s)).collect();
            let mut oracle = 0.0;
            let valid = gt.valid_mask().iter().filter(|v| **v).count() as f64;
            for (i, h) in hist.iter().enumerate() {
                let mut sum = 0.0;
                for p in 0..n {
                    if !gt.valid_mask()[p] {
                        continue;
                    }
                    for f in 0..s {
                        sum += (h.point(p, f).x - gt.point(p, f).x).abs() + (h.point(p, f).y - gt.point(p, f).y).abs();
                    }
                }
                oracle += 0.8f64.powi(4 - i as i32) * sum / (valid * s as f64);
            }
            assert!((trajectory_loss(&hist, &gt, 0.8).unwrap() - oracle).abs() < 1e-9);
            let mut g = Graph::new();
            let vars: Vec<Var> = hist.iter().map(|h| g.constant(h.to_tensor())).collect();
            let l = trajectory_loss_graph(&mut g, &vars, &gt, 0.8).unwrap();
            assert!((g.value(l).item() - oracle).abs() < 1e-9);

            let inputs: Vec<Tensor> = hist.iter().map(|h| h.to_tensor()).collect();
            let r = gradcheck::check(&inputs, 1e-6, |g, v| trajectory_loss_graph(g, v, &gt, 0.8).unwrap());
            assert!(r.relative <= 1e-4, "{r:?}");
        }
    }

    #[test]
    fn one_cycle_shape() {
        let cfg = TrainConfig::default();
        for total in [10usize, 100, 1000, 1237] {
            let s = OneCycle::from_config(&cfg, total);
            let lrs: Vec<f64> = (0..total).map(|i| s.lr(i)).collect();
            let peak = lrs.iter().cloned().fold(0.0, f64::max);
            assert_eq!(peak, 5e-4);
            assert_eq!(s.lr(s.peak_step()), 5e-4);
            assert!(lrs[0] < peak && lrs[total - 1] < peak);
            assert!((lrs[0] - 5e-4 / 25.0).abs() < 1e-15);
            assert!((lrs[total - 1] - 5e-4 / 25.0 / 1e4).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1, 2], vec![1.0, -1.0]));
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&p, &cfg);
        let grads = [("w".to_string(), Tensor::new(&[1, 2], vec![0.3, -2.0]))].into_iter().collect();
        opt.update(&mut p, &grads, 0.1);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g: std::collections::BTreeMap<String, Tensor> =
            [("a".to_string(), Tensor::new(&[2], vec![3.0, 4.0]))].into_iter().collect();
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn phases_parse() {
        assert_eq!(
            parse_phases("2x16,1x32").unwrap(),
            vec![Phase { epochs: 2, frames: 16 }, Phase { epochs: 1, frames: 32 }]
        );
        assert!(parse_phases("").unwrap().is_empty());
        for bad in ["2x", "x16", "2x1", "2y16", "-1x16", "2x16,"] {
            assert!(parse_phases(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn config_toml_rejects_unknown_keys_and_bad_values() {
        let cfg = TrainConfig::parse_toml("learning_rate = 1e-3\n[[phases]]\nepochs = 1\nframes = 8\n").unwrap();
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.phases, vec![Phase { epochs: 1, frames: 8 }]);
        assert!(TrainConfig::parse_toml("lr = 1").is_err());
        assert!(TrainConfig::parse_toml("gamma = 0").is_err());
        assert!(TrainConfig::parse_toml("batch_size = 2").is_err());
    }

    fn tiny_model() -> Tracker {
        let cfg = ModelConfig {
            working_resolution: Resolution::new(64, 64),
            coarse_width: 16,
            fine_width: 16,
            fine_dilations: vec![1, 2],
            iterations: 2,
            ..ModelConfig::default()
        };
        Tracker::new(cfg, 0).unwrap()
    }

    fn scenes(n: usize, frames: usize) -> Vec<(String, Scene)> {
        (0..n)
            .map(|i| {
                let cfg = SceneConfig {
                    frames,
                    points: 3,
                    seed: i as u64,
                    ..SceneConfig::default()
                };
                let (sequence, q, t) = generate_scene(&cfg).unwrap();
                (
                    format!("s{i}"),
                    Scene {
                        sequence,
                        queries: Some(q),
                        tracks: Some(t),
                        info: None,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn empty_phase_list_keeps_weights() {
        let mut m = tiny_model();
        let before = m.params().clone();
        let cfg = TrainConfig {
            phases: vec![],
            ..TrainConfig::default()
        };
        let out = fit(&mut m, &[], &[], &cfg, None, None).unwrap();
        assert_eq!(out.steps, 0);
        assert_eq!(m.params(), &before);
    }

    #[test]
    fn samples_are_cropped_flipped_and_anchored() {
        let data = scenes(1, 8);
        let aug = Augmentation::default();
        for seed in 0..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = prepare_sample(&data[0].1, 5, Some(&aug), Resolution::new(64, 64), &mut rng).unwrap();
            assert_eq!(s.sequence.frame_count(), 5);
            assert_eq!(s.tracks.frame_points(0), s.queries.points());
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let data = scenes(3, 6);
        let cfg = TrainConfig {
            phases: vec![Phase { epochs: 2, frames: 4 }, Phase { epochs: 1, frames: 6 }],
            steps_per_epoch: 2,
            ..TrainConfig::default()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let out_a = OutputDir { root: dir_a.path().into() };
        let out_b = OutputDir { root: dir_b.path().into() };
        let mut a = tiny_model();
        let ra = fit(&mut a, &data[..2], &data[2..], &cfg, Some(&out_a), None).unwrap();
        assert_eq!(ra.steps, 6);
        assert!(ra.losses.iter().all(|l| l.is_finite()));
        assert!(out_a.best().exists() && out_a.last().exists());

        let mut c = tiny_model();
        let again = fit(&mut c, &data[..2], &data[2..], &cfg, Some(&out_b), None).unwrap();
        assert_eq!(again.losses, ra.losses);
        assert_eq!(c.params(), a.params());
        let log_a = std::fs::read_to_string(out_a.log()).unwrap();
        assert_eq!(log_a, std::fs::read_to_string(out_b.log()).unwrap());
        assert_eq!(log_a.lines().count(), 7);

        // Interrupt after two epochs, then resume from last.ckpt.
        let dir_c = tempfile::tempdir().unwrap();
        let out_c = OutputDir { root: dir_c.path().into() };
        let mut d = tiny_model();
        let head = fit_partial(&mut d, &data[..2], &data[2..], &cfg, Some(&out_c), None, 2).unwrap();
        assert_eq!(head.losses, ra.losses[..4].to_vec());
        let mut e = tiny_model();
        let last = out_c.last();
        let tail = fit(&mut e, &data[..2], &data[2..], &cfg, Some(&out_c), Some(&last)).unwrap();
        assert_eq!(tail.losses, ra.losses[4..].to_vec());
        assert_eq!(e.params(), a.params());
        assert_eq!(std::fs::read_to_string(out_c.log()).unwrap(), log_a);

        let other = TrainConfig { seed: 9, ..cfg.clone() };
        assert!(fit(&mut tiny_model(), &data[..2], &data[2..], &other, None, Some(&last)).is_err());
    }
}
