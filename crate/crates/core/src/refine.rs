//! Stage 2: iterative refinement on stride-2 features.
//!
//! For every frame `s` the current estimate samples its own appearance plus
//! the appearance at template frames `0`, `s-2` and `s-4`. Each of the four
//! vectors is correlated with multi-scale crops of frame `s` around the
//! current estimate; a linear layer mixes the concatenated cost volumes into a
//! per-frame score feature and a temporal ConvNet over all frames predicts an
//! additive update.

use rand::Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::correlation::{correlate_frames, cost_features, pyramid_vars, sample_frames};
use crate::encoder::{FeatureVolume, FINE_STRIDE};
use crate::error::{Error, Result};
use crate::init::apply_displacement;
use crate::model::ModelConfig;
use crate::nn::{Bound, Conv1d, ParamStore, ResBlock1d};
use crate::sequence::{QuerySet, TrajectorySet};

/// Pixels of displacement per unit of head output.
pub const FINE_OUTPUT_SCALE: f64 = 2.0;
/// Feature vectors correlated per frame: the current one plus three templates.
pub const TEMPLATES_PER_FRAME: usize = 4;

/// Template frames for frame `s`: the first frame, `s-2` and `s-4`, clamped
/// at 0.
pub fn template_indices(s: usize) -> (usize, usize, usize) {
    (0, s.saturating_sub(2), s.saturating_sub(4))
}

/// Tracks across refinement iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementState {
    iteration: usize,
    max_iterations: usize,
    history: Vec<TrajectorySet>,
}

impl RefinementState {
    /// Starts from coarse tracks (iteration 0).
    pub fn new(initial: TrajectorySet, max_iterations: usize) -> Self {
        Self {
            iteration: 0,
            max_iterations,
            history: vec![initial],
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn max_iterations(&self) -> usize {
        self.max_iterations
    }

    pub fn tracks(&self) -> &TrajectorySet {
        self.history.last().expect("history is never empty")
    }

    /// Tracks after every iteration, the initialization first.
    pub fn history(&self) -> &[TrajectorySet] {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.max_iterations
    }

    pub(crate) fn pushed(mut self, tracks: TrajectorySet) -> Self {
        self.history.push(tracks);
        self.iteration += 1;
        self
    }
}

#[derive(Clone, Debug)]
pub struct FineHead {
    score: Conv1d,
    blocks: Vec<ResBlock1d>,
    output: Conv1d,
    levels: usize,
    radius: usize,
}

impl FineHead {
    pub fn new(cfg: &ModelConfig) -> Self {
        let width = cfg.fine_width;
        Self {
            score: Conv1d::new(
                "fine.score",
                TEMPLATES_PER_FRAME * cost_features(cfg.levels, cfg.radius),
                width,
                1,
                1,
            ),
            blocks: cfg
                .fine_dilations
                .iter()
                .enumerate()
                .map(|(i, &d)| ResBlock1d::new(&format!("fine.block{i}"), width, d))
                .collect(),
            output: Conv1d::new("fine.output", width, 2, 1, 1).with_gain(0.1),
            levels: cfg.levels,
            radius: cfg.radius,
        }
    }

    pub fn output_layer(&self) -> &Conv1d {
        &self.output
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.score.init(store, rng);
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.output.init(store, rng);
    }

    /// One update of `positions` (`[N, S, 2]`, treated as constants).
    /// `fine` is `[S, C, h, w]` and `levels` its pyramid.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        fine: Var,
        levels: &[Var],
        positions: &Tensor,
    ) -> Result<Var> {
        let shape = g.shape(fine).to_vec();
        let (n, frames) = (positions.dim(0), positions.dim(1));
        if shape.len() != 4 || shape[0] != frames {
            return Err(Error::shape(format!(
                "fine features {shape:?} do not match {frames} frames"
            )));
        }
        let channels = shape[1];
        let by_frame = positions.permute(&[1, 0, 2]);

        let pts = g.constant(by_frame.clone());
        let feats = sample_frames(g, fine, pts, FINE_STRIDE);
        let feats = g.reshape(feats, &[frames * n, channels]);
        let mut rows = Vec::with_capacity(frames * TEMPLATES_PER_FRAME * n);
        for s in 0..frames {
            let (t0, t1, t2) = template_indices(s);
            for t in [s, t0, t1, t2] {
                rows.extend((0..n).map(|i| t * n + i));
            }
        }
        let templates = g.gather_rows(feats, rows);
        let templates = g.reshape(templates, &[frames, TEMPLATES_PER_FRAME * n, channels]);

        let mut centers = Vec::with_capacity(frames * TEMPLATES_PER_FRAME * n * 2);
        for s in 0..frames {
            let frame = &by_frame.data()[s * n * 2..(s + 1) * n * 2];
            for _ in 0..TEMPLATES_PER_FRAME {
                centers.extend_from_slice(frame);
            }
        }
        let centers = g.constant(Tensor::new(&[frames, TEMPLATES_PER_FRAME * n, 2], centers));
        let cost = correlate_frames(g, templates, levels, centers, self.radius, FINE_STRIDE);
        let per = cost_features(self.levels, self.radius);
        let cost = g.reshape(cost, &[frames, TEMPLATES_PER_FRAME, n, per]);
        let cost = g.permute(cost, &[2, 1, 3, 0]);
        let cost = g.reshape(cost, &[n, TEMPLATES_PER_FRAME * per, frames]);

        let mut x = self.score.forward(g, p, cost);
        for b in &self.blocks {
            x = b.forward(g, p, x);
        }
        let delta = self.output.forward(g, p, x);
        Ok(apply_displacement(g, delta, positions.clone(), FINE_OUTPUT_SCALE))
    }

    /// Applies one refinement iteration to `state`.
    pub fn refine_step(
        &self,
        params: &ParamStore,
        state: &RefinementState,
        fine: &FeatureVolume,
        queries: &QuerySet,
    ) -> Result<RefinementState> {
        if state.is_done() {
            return Err(Error::invalid(format!(
                "refinement already ran {} of {} iterations",
                state.iteration, state.max_iterations
            )));
        }
        if fine.stride != FINE_STRIDE {
            return Err(Error::invalid(format!(
                "refinement needs stride-{FINE_STRIDE} features, got stride {}",
                fine.stride
            )));
        }
        let current = state.tracks();
        if current.num_points() != queries.len() || current.num_frames() != fine.frames() {
            return Err(Error::shape("tracks, queries and features disagree"));
        }
        let mut g = Graph::new();
        let p = params.bind_prefix(&mut g, "fine.");
        let f = g.constant(fine.features.clone());
        let levels = pyramid_vars(&mut g, f, self.levels)?;
        let mut positions = current.to_tensor();
        pin_first_frame(&mut positions, queries);
        let out = self.forward(&mut g, &p, f, &levels, &positions)?;
        let mut next = g.value(out).clone();
        pin_first_frame(&mut next, queries);
        let next = TrajectorySet::from_tensor(&next, current.valid_mask().to_vec())?;
        Ok(state.clone().pushed(next))
    }
}

/// Overwrites frame 0 of `[N, S, 2]` tracks with the queries.
pub(crate) fn pin_first_frame(tracks: &mut Tensor, queries: &QuerySet) {
    let frames = tracks.dim(1);
    let data = tracks.data_mut();
    for (n, q) in queries.points().iter().enumerate() {
        data[n * frames * 2] = q.x;
        data[n * frames * 2 + 1] = q.y;
    }
}
