//! Sequences, query points and trajectories.
//!
//! Coordinates are continuous pixel positions with `x` along columns and `y`
//! along rows; `(0, 0)` is the center of the top-left pixel.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Frame size as `(height, width)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Resolution {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    fn check_positive(self) -> Result<Self> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid(format!(
                "zero-sized resolution {}x{}",
                self.height, self.width
            )));
        }
        Ok(self)
    }
}

/// S grayscale frames of H×W intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSequence {
    frames: Vec<f64>,
    frame_count: usize,
    resolution: Resolution,
    source_resolution: Resolution,
}

impl ImageSequence {
    pub fn new(frames: Vec<f64>, frame_count: usize, resolution: Resolution) -> Result<Self> {
        Self::with_source(frames, frame_count, resolution, resolution)
    }

    pub fn with_source(
        frames: Vec<f64>,
        frame_count: usize,
        resolution: Resolution,
        source_resolution: Resolution,
    ) -> Result<Self> {
        if frame_count < 2 {
            return Err(Error::invalid(format!(
                "a sequence needs at least 2 frames, got {frame_count}"
            )));
        }
        if resolution.height < MIN_SIDE || resolution.width < MIN_SIDE {
            return Err(Error::invalid(format!(
                "frames must be at least {MIN_SIDE}x{MIN_SIDE}, got {}x{}",
                resolution.height, resolution.width
            )));
        }
        source_resolution.check_positive()?;
        let expected = frame_count * resolution.height * resolution.width;
        if frames.len() != expected {
            return Err(Error::shape(format!(
                "expected {expected} intensities, got {}",
                frames.len()
            )));
        }
        if let Some(i) = frames
            .iter()
            .position(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            return Err(Error::invalid(format!(
                "intensity {} at index {i} is outside [0, 1]",
                frames[i]
            )));
        }
        Ok(Self {
            frames,
            frame_count,
            resolution,
            source_resolution,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn height(&self) -> usize {
        self.resolution.height
    }

    pub fn width(&self) -> usize {
        self.resolution.width
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn source_resolution(&self) -> Resolution {
        self.source_resolution
    }

    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn frame(&self, s: usize) -> &[f64] {
        let n = self.resolution.height * self.resolution.width;
        &self.frames[s * n..(s + 1) * n]
    }

    /// Frames `start..start + len` as a new sequence.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frame_count {
            return Err(Error::invalid(format!(
                "frame window {start}..{} exceeds {} frames",
                start + len,
                self.frame_count
            )));
        }
        let n = self.resolution.height * self.resolution.width;
        Self::with_source(
            self.frames[start * n..(start + len) * n].to_vec(),
            len,
            self.resolution,
            self.source_resolution,
        )
    }

    /// Frames as an `[S, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.frame_count, self.resolution.height, self.resolution.width],
            self.frames.clone(),
        )
    }
}

/// Query points on frame 0.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    points: Vec<Point>,
    resolution: Resolution,
}

impl QuerySet {
    pub fn new(points: Vec<Point>, resolution: Resolution) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("a query set needs at least one point"));
        }
        for (index, p) in points.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::invalid(format!("query point {index} is not finite")));
            }
            let inside = p.x >= 0.0
                && p.y >= 0.0
                && p.x < resolution.width as f64
                && p.y < resolution.height as f64;
            if !inside {
                return Err(Error::QueryOutOfBounds {
                    index,
                    x: p.x,
                    y: p.y,
                    width: resolution.width,
                    height: resolution.height,
                });
            }
        }
        Ok(Self { points, resolution })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }
}

/// N tracks of S positions each, plus a per-point validity flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    points: usize,
    frames: usize,
    coords: Vec<f64>,
    valid: Vec<bool>,
}

impl TrajectorySet {
    /// `coords` holds N×S×2 values, point-major.
    pub fn new(points: usize, frames: usize, coords: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if coords.len() != points * frames * 2 {
            return Err(Error::shape(format!(
                "expected {} coordinates for {points} points x {frames} frames, got {}",
                points * frames * 2,
                coords.len()
            )));
        }
        if valid.len() != points {
            return Err(Error::shape(format!(
                "valid mask has {} entries for {points} points",
                valid.len()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("trajectory coordinates must be finite"));
        }
        Ok(Self {
            points,
            frames,
            coords,
            valid,
        })
    }

    /// All points valid.
    pub fn from_tracks(tracks: &[Vec<Point>]) -> Result<Self> {
        let frames = tracks.first().map_or(0, Vec::len);
        let mut coords = Vec::with_capacity(tracks.len() * frames * 2);
        for t in tracks {
            if t.len() != frames {
                return Err(Error::shape("tracks have different lengths"));
            }
            for p in t {
                coords.extend([p.x, p.y]);
            }
        }
        Self::new(tracks.len(), frames, coords, vec![true; tracks.len()])
    }

    /// The queries repeated on every frame.
    pub fn stationary(queries: &QuerySet, frames: usize) -> Self {
        let coords = queries
            .points()
            .iter()
            .flat_map(|p| std::iter::repeat_n([p.x, p.y], frames).flatten())
            .collect();
        Self {
            points: queries.len(),
            frames,
            coords,
            valid: vec![true; queries.len()],
        }
    }

    pub fn num_points(&self) -> usize {
        self.points
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn set_valid_mask(&mut self, valid: Vec<bool>) -> Result<()> {
        if valid.len() != self.points {
            return Err(Error::shape("valid mask length differs from point count"));
        }
        self.valid = valid;
        Ok(())
    }

    pub fn point(&self, n: usize, s: usize) -> Point {
        let i = (n * self.frames + s) * 2;
        Point::new(self.coords[i], self.coords[i + 1])
    }

    pub fn track(&self, n: usize) -> Vec<Point> {
        (0..self.frames).map(|s| self.point(n, s)).collect()
    }

    /// Positions at frame `s` for all points.
    pub fn frame_points(&self, s: usize) -> Vec<Point> {
        (0..self.points).map(|n| self.point(n, s)).collect()
    }

    /// Frame-0 positions as a query set.
    pub fn queries(&self, resolution: Resolution) -> Result<QuerySet> {
        QuerySet::new(self.frame_points(0), resolution)
    }

    /// Frames `start..start + len` of every track.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return Err(Error::invalid("frame window exceeds trajectory length"));
        }
        let mut coords = Vec::with_capacity(self.points * len * 2);
        for n in 0..self.points {
            let base = (n * self.frames + start) * 2;
            coords.extend_from_slice(&self.coords[base..base + len * 2]);
        }
        Self::new(self.points, len, coords, self.valid.clone())
    }

    /// Subset of points, in the given order.
    pub fn select_points(&self, indices: &[usize]) -> Result<Self> {
        let mut coords = Vec::with_capacity(indices.len() * self.frames * 2);
        let mut valid = Vec::with_capacity(indices.len());
        for &n in indices {
            if n >= self.points {
                return Err(Error::invalid(format!("point index {n} out of range")));
            }
            let base = n * self.frames * 2;
            coords.extend_from_slice(&self.coords[base..base + self.frames * 2]);
            valid.push(self.valid[n]);
        }
        Self::new(indices.len(), self.frames, coords, valid)
    }

    /// Tracks as an `[N, S, 2]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.points, self.frames, 2], self.coords.clone())
    }

    pub fn from_tensor(t: &Tensor, valid: Vec<bool>) -> Result<Self> {
        if t.rank() != 3 || t.dim(2) != 2 {
            return Err(Error::shape(format!("expected [N, S, 2], got {:?}", t.shape())));
        }
        Self::new(t.dim(0), t.dim(1), t.data().to_vec(), valid)
    }

    fn map_coords(&self, sx: f64, sy: f64) -> Self {
        let coords = self
            .coords
            .chunks(2)
            .flat_map(|c| [c[0] * sx, c[1] * sy])
            .collect();
        Self {
            points: self.points,
            frames: self.frames,
            coords,
            valid: self.valid.clone(),
        }
    }
}

/// Bilinearly resamples every frame to `target` and scales the queries by
/// `(target_w / W, target_h / H)`.
pub fn resize_sequence(
    seq: &ImageSequence,
    queries: &QuerySet,
    target: Resolution,
) -> Result<(ImageSequence, QuerySet)> {
    if target.height < MIN_SIDE || target.width < MIN_SIDE {
        return Err(Error::invalid(format!(
            "resize target {}x{} is below {MIN_SIDE}x{MIN_SIDE}",
            target.height, target.width
        )));
    }
    if queries.points().iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("non-finite query coordinate"));
    }
    if target == seq.resolution() {
        return Ok((seq.clone(), queries.clone()));
    }
    let (h, w) = (seq.height(), seq.width());
    let sx = target.width as f64 / w as f64;
    let sy = target.height as f64 / h as f64;
    let mut frames = Vec::with_capacity(seq.frame_count() * target.height * target.width);
    for s in 0..seq.frame_count() {
        let src = seq.frame(s);
        for ty in 0..target.height {
            let y = ty as f64 / sy;
            for tx in 0..target.width {
                let x = tx as f64 / sx;
                frames.push(sample_plane(src, h, w, x, y).clamp(0.0, 1.0));
            }
        }
    }
    let resized =
        ImageSequence::with_source(frames, seq.frame_count(), target, seq.source_resolution())?;
    let points = queries
        .points()
        .iter()
        .map(|p| Point::new(p.x * sx, p.y * sy))
        .collect();
    Ok((resized, QuerySet::new(points, target)?))
}

/// Per-axis linear rescaling of trajectories between frame sizes.
pub fn rescale_trajectories(
    tracks: &TrajectorySet,
    from: Resolution,
    to: Resolution,
) -> Result<TrajectorySet> {
    from.check_positive()?;
    to.check_positive()?;
    if from == to {
        return Ok(tracks.clone());
    }
    Ok(tracks.map_coords(
        to.width as f64 / from.width as f64,
        to.height as f64 / from.height as f64,
    ))
}

/// Consecutive-frame differences `u_s - u_{s-1}` as an `[S, H, W]` tensor;
/// element 0 is all zeros.
pub fn frame_flow(seq: &ImageSequence) -> Result<Tensor> {
    let s = seq.frame_count();
    if s < 2 {
        return Err(Error::invalid("frame flow needs at least 2 frames"));
    }
    let n = seq.height() * seq.width();
    let mut flow = vec![0.0; s * n];
    for t in 1..s {
        let (prev, cur) = (seq.frame(t - 1), seq.frame(t));
        for (d, (c, p)) in flow[t * n..(t + 1) * n].iter_mut().zip(cur.iter().zip(prev)) {
            *d = c - p;
        }
    }
    Ok(Tensor::new(&[s, seq.height(), seq.width()], flow))
}

/// Bilinear lookup on a single h×w plane with border clamping.
pub(crate) fn sample_plane(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}
