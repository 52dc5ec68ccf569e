//! The full two-stage tracker: shared encoder, coarse initialization and
//! iterative fine refinement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::correlation::{cost_features, pyramid_vars};
use crate::encoder::{encoder_input, Encoder, FeatureVolume, Outputs, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::init::CoarseHead;
use crate::nn::{Bound, ParamStore};
use crate::refine::{pin_first_frame, FineHead, RefinementState};
use crate::sequence::{frame_flow, resize_sequence, ImageSequence, QuerySet, Resolution, TrajectorySet};

/// Frames encoded per inference chunk.
const ENCODE_CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub levels: usize,
    pub radius: usize,
    pub iterations: usize,
    pub coarse_width: usize,
    pub coarse_dilations: Vec<usize>,
    pub fine_width: usize,
    pub fine_dilations: Vec<usize>,
    /// Frames are resized to this before tracking.
    pub working_resolution: Resolution,
    /// Upper bound on the estimated working set of one `track` call.
    pub memory_budget_bytes: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: FEATURE_DIM,
            levels: 4,
            radius: 3,
            iterations: 4,
            coarse_width: 64,
            coarse_dilations: vec![1, 2, 4],
            fine_width: 128,
            fine_dilations: vec![1, 2, 4, 1, 2, 4],
            working_resolution: Resolution::new(256, 256),
            memory_budget_bytes: 3 << 30,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.working_resolution;
        let min_side = 8 << (self.levels.max(1) - 1);
        if self.feature_dim == 0 || self.coarse_width == 0 || self.fine_width == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.levels == 0 || self.levels > 6 || self.radius == 0 || self.radius > 8 {
            return Err(Error::invalid(format!(
                "unsupported pyramid: {} levels, radius {}",
                self.levels, self.radius
            )));
        }
        if self.coarse_dilations.iter().chain(&self.fine_dilations).any(|&d| d == 0 || d > 64) {
            return Err(Error::invalid("dilations must lie in 1..=64"));
        }
        if r.height % 8 != 0 || r.width % 8 != 0 || r.height < min_side || r.width < min_side {
            return Err(Error::invalid(format!(
                "working resolution {}x{} must be a multiple of 8 and at least {min_side}",
                r.height, r.width
            )));
        }
        Ok(())
    }

    /// Rough peak memory of tracking `points` points over `frames` frames.
    pub fn estimated_memory_bytes(&self, frames: usize, points: usize) -> u64 {
        let r = self.working_resolution;
        let fine_px = (r.height.div_ceil(2) * r.width.div_ceil(2)) as u64;
        let (s, n) = (frames as u64, points as u64);
        let d = self.feature_dim as u64;
        // fine features plus their pyramid
        let fine = s * d * fine_px * 4 / 3;
        // stem im2col and block activations of one chunk
        let chunk = ENCODE_CHUNK.min(frames) as u64 * fine_px * 640;
        let coarse = s * d * fine_px / 16 * 4 / 3;
        let cost = cost_features(self.levels, self.radius) as u64;
        let width = self.fine_width as u64;
        let iteration = s * n * (4 * (d + cost) + 4 * cost + width * (4 + 10 * self.fine_dilations.len() as u64));
        8 * (fine + chunk + coarse + iteration)
    }
}

/// Trainable two-stage point tracker.
#[derive(Clone, Debug)]
pub struct Tracker {
    config: ModelConfig,
    encoder: Encoder,
    coarse: CoarseHead,
    fine: FineHead,
    params: ParamStore,
}

impl Tracker {
    /// Fresh weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.feature_dim);
        let coarse = CoarseHead::new(&config);
        let fine = FineHead::new(&config);
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        encoder.init(&mut params, &mut rng);
        coarse.init(&mut params, &mut rng);
        fine.init(&mut params, &mut rng);
        Ok(Self {
            config,
            encoder,
            coarse,
            fine,
            params,
        })
    }

    /// Rebuilds a tracker from stored weights, checking every tensor name and
    /// shape against the architecture `config` describes.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::invalid(format!(
                "expected {} weight tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (name, want) in model.params.iter() {
            match params.get(name) {
                Some(t) if t.shape() == want.shape() => {}
                Some(t) => {
                    return Err(Error::shape(format!(
                        "weight {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        want.shape()
                    )))
                }
                None => return Err(Error::invalid(format!("missing weight {name}"))),
            }
            if !params.get(name).is_some_and(Tensor::is_finite) {
                return Err(Error::invalid(format!("weight {name} is not finite")));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn coarse_head(&self) -> &CoarseHead {
        &self.coarse
    }

    pub fn fine_head(&self) -> &FineHead {
        &self.fine
    }

    /// Differentiable pass over an encoder input `[S, 2, H, W]`. Returns the
    /// `[N, S, 2]` tracks after initialization and after every refinement
    /// iteration. Positions are detached between iterations.
    pub fn forward(&self, g: &mut Graph, p: &Bound, input: Var, queries: &QuerySet) -> Result<Vec<Var>> {
        let out = self.encoder.forward(g, p, input, Outputs::Both)?;
        let (fine, coarse) = (
            out.fine.expect("both outputs requested"),
            out.coarse.expect("both outputs requested"),
        );
        let init = self.coarse.forward(g, p, coarse, queries)?;
        let levels = pyramid_vars(g, fine, self.config.levels)?;
        let mut history = vec![init];
        for _ in 0..self.config.iterations {
            let mut positions = g.value(*history.last().expect("non-empty")).clone();
            pin_first_frame(&mut positions, queries);
            history.push(self.fine.forward(g, p, fine, &levels, &positions)?);
        }
        Ok(history)
    }

    /// Tracks `queries` (pixel coordinates of `seq`) through `seq`; the
    /// result is in the same pixel frame as the queries.
    pub fn track(&self, seq: &ImageSequence, queries: &QuerySet) -> Result<TrajectorySet> {
        let state = self.track_history(seq, queries)?;
        let mut tracks = state.tracks().to_tensor();
        let (sx, sy) = (
            seq.width() as f64 / self.config.working_resolution.width as f64,
            seq.height() as f64 / self.config.working_resolution.height as f64,
        );
        if seq.resolution() != self.config.working_resolution {
            for c in tracks.data_mut().chunks_exact_mut(2) {
                c[0] *= sx;
                c[1] *= sy;
            }
        }
        pin_first_frame(&mut tracks, queries);
        TrajectorySet::from_tensor(&tracks, vec![true; queries.len()])
    }

    /// Runs the pipeline at the working resolution and keeps every
    /// iteration's tracks (in working-resolution pixels).
    pub fn track_history(&self, seq: &ImageSequence, queries: &QuerySet) -> Result<RefinementState> {
        if queries.resolution() != seq.resolution() {
            return Err(Error::invalid(format!(
                "queries are for {}x{} frames but the sequence is {}x{}",
                queries.resolution().height,
                queries.resolution().width,
                seq.height(),
                seq.width()
            )));
        }
        let (frames, points) = (seq.frame_count(), queries.len());
        if self.config.estimated_memory_bytes(frames, points) > self.config.memory_budget_bytes {
            return Err(Error::OutOfMemory { frames, points });
        }
        let (seq, queries) = resize_sequence(seq, queries, self.config.working_resolution)?;
        let flow = frame_flow(&seq)?;
        let (fine, coarse) =
            self.encoder
                .encode_frames(&self.params, &seq, &flow, Outputs::Both, ENCODE_CHUNK)?;
        let (fine, coarse) = (fine.expect("fine requested"), coarse.expect("coarse requested"));
        let init = self.coarse.init_trajectories(&self.params, &coarse, &queries)?;
        drop(coarse);
        self.refine_all(init, fine, &queries)
    }

    /// All refinement iterations, reusing one pyramid across them.
    fn refine_all(&self, init: TrajectorySet, fine: FeatureVolume, queries: &QuerySet) -> Result<RefinementState> {
        let mut history = vec![init];
        let mut g = Graph::new();
        let f = g.constant(fine.features);
        let mut levels = pyramid_vars(&mut g, f, self.config.levels)?;
        let mut maps: Vec<Tensor> = g.into_values(&levels);
        for _ in 0..self.config.iterations {
            let mut g = Graph::new();
            let p = self.params.bind_prefix(&mut g, "fine.");
            levels = maps.into_iter().map(|m| g.constant(m)).collect();
            let mut positions = history.last().expect("non-empty").to_tensor();
            pin_first_frame(&mut positions, queries);
            let out = self.fine.forward(&mut g, &p, levels[0], &levels, &positions)?;
            let mut vars = levels.clone();
            vars.push(out);
            let mut values = g.into_values(&vars);
            let mut next = values.pop().expect("output value");
            maps = values;
            pin_first_frame(&mut next, queries);
            if !next.is_finite() {
                return Err(Error::invalid("refinement produced non-finite positions"));
            }
            history.push(TrajectorySet::from_tensor(&next, vec![true; queries.len()])?);
        }
        let mut state = RefinementState::new(history.remove(0), self.config.iterations);
        for t in history {
            state = state.pushed(t);
        }
        Ok(state)
    }
}

/// Encoder input for a sequence, `[S, 2, H, W]`.
pub fn model_input(seq: &ImageSequence) -> Result<Tensor> {
    let flow = frame_flow(seq)?;
    Ok(encoder_input(seq, &flow))
}
