//! Stage 1: coarse trajectory initialization.
//!
//! Each query samples its appearance on frame 0 of the stride-8 features,
//! correlates it with every frame's pyramid around the query location, and a
//! temporal residual ConvNet turns the per-frame cost features (plus the
//! normalized query location) into a displacement for every frame.

use rand::Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::correlation::{correlate_frames, cost_features, pyramid_vars, sample_frames};
use crate::encoder::{FeatureVolume, COARSE_STRIDE};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{Bound, Conv1d, ParamStore, ResBlock1d};
use crate::sequence::{QuerySet, TrajectorySet};

/// Pixels of displacement per unit of head output.
pub const COARSE_OUTPUT_SCALE: f64 = 8.0;

#[derive(Clone, Debug)]
pub struct CoarseHead {
    input: Conv1d,
    blocks: Vec<ResBlock1d>,
    output: Conv1d,
    levels: usize,
    radius: usize,
}

impl CoarseHead {
    pub fn new(cfg: &ModelConfig) -> Self {
        let width = cfg.coarse_width;
        Self {
            input: Conv1d::new("coarse.input", cost_features(cfg.levels, cfg.radius) + 2, width, 1, 1),
            blocks: cfg
                .coarse_dilations
                .iter()
                .enumerate()
                .map(|(i, &d)| ResBlock1d::new(&format!("coarse.block{i}"), width, d))
                .collect(),
            output: Conv1d::new("coarse.output", width, 2, 1, 1).with_gain(0.1),
            levels: cfg.levels,
            radius: cfg.radius,
        }
    }

    /// Temporal receptive field in frames.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * self.blocks.iter().map(ResBlock1d::reach).sum::<usize>()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.input.init(store, rng);
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.output.init(store, rng);
    }

    /// Positions `[N, S, 2]` from stride-8 features `[S, C, h, w]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, coarse: Var, queries: &QuerySet) -> Result<Var> {
        let shape = g.shape(coarse).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!("coarse features must be [S, C, h, w], got {shape:?}")));
        }
        let (frames, channels) = (shape[0], shape[1]);
        let n = queries.len();

        let first = g.gather_rows(coarse, vec![0]);
        let q = query_tensor(queries, 1);
        let q = g.constant(q);
        let f0 = sample_frames(g, first, q, COARSE_STRIDE);
        let f0 = g.reshape(f0, &[n, channels]);
        let rows = (0..frames).flat_map(|_| 0..n).collect();
        let f = g.gather_rows(f0, rows);
        let f = g.reshape(f, &[frames, n, channels]);

        let levels = pyramid_vars(g, coarse, self.levels)?;
        let centers = g.constant(query_tensor(queries, frames));
        let cost = correlate_frames(g, f, &levels, centers, self.radius, COARSE_STRIDE);
        let cost = g.permute(cost, &[1, 2, 0]);
        let loc = g.constant(location_encoding(queries, frames));
        let x = g.concat(&[cost, loc], 1);

        let mut x = self.input.forward(g, p, x);
        for b in &self.blocks {
            x = b.forward(g, p, x);
        }
        let disp = self.output.forward(g, p, x);
        let base = stationary_tensor(queries, frames);
        Ok(apply_displacement(g, disp, base, COARSE_OUTPUT_SCALE))
    }

    /// Coarse tracks for `queries`, which must be in the pixel frame the
    /// features were computed from.
    pub fn init_trajectories(
        &self,
        params: &ParamStore,
        coarse: &FeatureVolume,
        queries: &QuerySet,
    ) -> Result<TrajectorySet> {
        if coarse.stride != COARSE_STRIDE {
            return Err(Error::invalid(format!(
                "initialization needs stride-{COARSE_STRIDE} features, got stride {}",
                coarse.stride
            )));
        }
        let mut g = Graph::new();
        let p = params.bind_prefix(&mut g, "coarse.");
        let c = g.constant(coarse.features.clone());
        let out = self.forward(&mut g, &p, c, queries)?;
        TrajectorySet::from_tensor(g.value(out), vec![true; queries.len()])
    }
}

/// `[frames, N, 2]` tensor of the query positions.
pub(crate) fn query_tensor(queries: &QuerySet, frames: usize) -> Tensor {
    let mut data = Vec::with_capacity(frames * queries.len() * 2);
    for _ in 0..frames {
        for p in queries.points() {
            data.extend([p.x, p.y]);
        }
    }
    Tensor::new(&[frames, queries.len(), 2], data)
}

/// `[N, S, 2]` tensor with every frame at the query.
pub(crate) fn stationary_tensor(queries: &QuerySet, frames: usize) -> Tensor {
    TrajectorySet::stationary(queries, frames).to_tensor()
}

/// Query positions mapped to `[-1, 1]`, broadcast over time: `[N, 2, S]`.
fn location_encoding(queries: &QuerySet, frames: usize) -> Tensor {
    let r = queries.resolution();
    let sx = 2.0 / (r.width.max(2) - 1) as f64;
    let sy = 2.0 / (r.height.max(2) - 1) as f64;
    let mut data = Vec::with_capacity(queries.len() * 2 * frames);
    for p in queries.points() {
        data.extend(std::iter::repeat_n(p.x * sx - 1.0, frames));
        data.extend(std::iter::repeat_n(p.y * sy - 1.0, frames));
    }
    Tensor::new(&[queries.len(), 2, frames], data)
}

/// `base + scale · disp` with frame 0 pinned to `base`. `disp` is the head
/// output `[N, 2, S]`, `base` is `[N, S, 2]`.
pub(crate) fn apply_displacement(g: &mut Graph, disp: Var, base: Tensor, scale: f64) -> Var {
    let (n, frames) = (base.dim(0), base.dim(1));
    let disp = g.permute(disp, &[0, 2, 1]);
    let mask = Tensor::from_fn(&[n, frames, 2], |i| if (i / 2) % frames == 0 { 0.0 } else { scale });
    let mask = g.constant(mask);
    let disp = g.mul(disp, mask);
    let base = g.constant(base);
    g.add(base, disp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::{Point, Resolution};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (CoarseHead, ParamStore) {
        let cfg = ModelConfig::default();
        let head = CoarseHead::new(&cfg);
        let mut store = ParamStore::new();
        head.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        (head, store)
    }

    fn features(frames: usize, seed: u64) -> FeatureVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureVolume {
            features: Tensor::from_fn(&[frames, 64, 8, 8], |_| rng.random_range(-1.0..1.0)),
            stride: COARSE_STRIDE,
        }
    }

    fn queries(n: usize) -> QuerySet {
        let pts = (0..n)
            .map(|i| Point::new(5.0 + 6.1 * i as f64, 40.0 - 3.3 * i as f64))
            .collect();
        QuerySet::new(pts, Resolution::new(64, 64)).unwrap()
    }

    #[test]
    fn receptive_field_covers_fifteen_frames() {
        let (head, _) = setup();
        assert!(head.receptive_field() >= 15, "{}", head.receptive_field());
    }

    #[test]
    fn output_is_anchored_and_shaped() {
        let (head, store) = setup();
        let q = queries(5);
        let t = head.init_trajectories(&store, &features(36, 1), &q).unwrap();
        assert_eq!((t.num_points(), t.num_frames()), (5, 36));
        for (n, p) in q.points().iter().enumerate() {
            assert_eq!(t.point(n, 0), *p);
        }
    }

    #[test]
    fn rejects_fine_features() {
        let (head, store) = setup();
        let mut f = features(4, 2);
        f.stride = 2;
        assert!(head.init_trajectories(&store, &f, &queries(2)).is_err());
    }

    #[test]
    fn points_do_not_interact() {
        let (head, store) = setup();
        let f = features(8, 4);
        let q = queries(4);
        let all = head.init_trajectories(&store, &f, &q).unwrap();
        let keep = [3usize, 0, 2];
        let sub_q = QuerySet::new(keep.iter().map(|&i| q.points()[i]).collect(), q.resolution()).unwrap();
        let sub = head.init_trajectories(&store, &f, &sub_q).unwrap();
        assert_eq!(sub, all.select_points(&keep).unwrap());
    }
}
