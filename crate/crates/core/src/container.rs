//! On-disk scene and trajectory formats.
//!
//! A scene is a directory holding `frames/0000.png, 0001.png, …` (16-bit or
//! 8-bit grayscale) and `meta.json`. Coordinates in `meta.json` are stored at
//! `source_resolution` and mapped to the frame grid on load.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{ImageSequence, Point, QuerySet, Resolution, TrajectorySet, MIN_SIDE};

pub const SCENE_SCHEMA: &str = "echotrack.scene/1";
pub const TRACKS_SCHEMA: &str = "echotrack.tracks/1";
pub const META_FILE: &str = "meta.json";
pub const FRAMES_DIR: &str = "frames";

const MAX_SIDE: usize = 1 << 14;
const MAX_FRAMES: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    pub schema: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub source_resolution: Resolution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<Vec<[f64; 2]>>,
    /// N×S×2 ground-truth positions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracks: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_mask: Option<Vec<bool>>,
    /// Free-form provenance, e.g. the generator configuration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info: Option<serde_json::Value>,
}

impl SceneMeta {
    /// Parses and validates `meta.json` contents.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let meta: SceneMeta =
            serde_json::from_slice(bytes).map_err(|e| Error::malformed("scene metadata", e.to_string()))?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Error::malformed("scene metadata", r);
        if self.schema != SCENE_SCHEMA {
            return Err(bad(format!("schema {:?}, expected {SCENE_SCHEMA:?}", self.schema)));
        }
        if !(2..=MAX_FRAMES).contains(&self.frames) {
            return Err(bad(format!("frame count {} outside 2..={MAX_FRAMES}", self.frames)));
        }
        let src = self.source_resolution;
        for side in [self.height, self.width] {
            if !(MIN_SIDE..=MAX_SIDE).contains(&side) {
                return Err(bad(format!("frame side {side} outside {MIN_SIDE}..={MAX_SIDE}")));
            }
        }
        for side in [src.height, src.width] {
            if !(1..=MAX_SIDE).contains(&side) {
                return Err(bad(format!("source side {side} outside 1..={MAX_SIDE}")));
            }
        }
        let in_source = |p: &[f64; 2]| {
            p[0].is_finite()
                && p[1].is_finite()
                && p[0] >= 0.0
                && p[1] >= 0.0
                && p[0] < src.width as f64
                && p[1] < src.height as f64
        };
        if let Some(q) = &self.queries {
            if q.is_empty() {
                return Err(bad("empty query list".into()));
            }
            if let Some(i) = q.iter().position(|p| !in_source(p)) {
                return Err(bad(format!("query {i} lies outside the source frame")));
            }
        }
        if let Some(t) = &self.tracks {
            if t.is_empty() {
                return Err(bad("empty track list".into()));
            }
            if let Some(i) = t.iter().position(|tr| tr.len() != self.frames) {
                return Err(bad(format!("track {i} has {} frames, expected {}", t[i].len(), self.frames)));
            }
            if t.iter().flatten().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
                return Err(bad("non-finite track coordinate".into()));
            }
            if let Some(i) = t.iter().position(|tr| !in_source(&tr[0])) {
                return Err(bad(format!("track {i} starts outside the source frame")));
            }
            if let Some(q) = &self.queries {
                if q.len() != t.len() || q.iter().zip(t).any(|(q, tr)| *q != tr[0]) {
                    return Err(bad("queries differ from the first frame of the tracks".into()));
                }
            }
        }
        if let Some(v) = &self.valid_mask {
            let n = self.tracks.as_ref().map(Vec::len).or(self.queries.as_ref().map(Vec::len));
            if n != Some(v.len()) {
                return Err(bad("valid_mask length does not match the point count".into()));
            }
        }
        Ok(())
    }

    fn scale(&self) -> (f64, f64) {
        (
            self.width as f64 / self.source_resolution.width as f64,
            self.height as f64 / self.source_resolution.height as f64,
        )
    }
}

/// A sequence with optional queries and ground-truth tracks, all in frame
/// pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub sequence: ImageSequence,
    pub queries: Option<QuerySet>,
    pub tracks: Option<TrajectorySet>,
    pub info: Option<serde_json::Value>,
}

impl Scene {
    /// Queries, falling back to the first frame of the tracks.
    pub fn query_set(&self) -> Result<QuerySet> {
        match (&self.queries, &self.tracks) {
            (Some(q), _) => Ok(q.clone()),
            (None, Some(t)) => t.queries(self.sequence.resolution()),
            (None, None) => Err(Error::invalid("scene has neither queries nor tracks")),
        }
    }
}

fn frame_path(dir: &Path, s: usize) -> PathBuf {
    dir.join(FRAMES_DIR).join(format!("{s:04}.png"))
}

pub fn read_scene(dir: &Path) -> Result<Scene> {
    let meta_path = dir.join(META_FILE);
    let bytes = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = SceneMeta::parse(&bytes)?;
    let (h, w) = (meta.height, meta.width);
    let mut frames = Vec::with_capacity(meta.frames * h * w);
    for s in 0..meta.frames {
        let path = frame_path(dir, s);
        let img = image::open(&path)
            .map_err(|source| Error::Image { path: path.clone(), source })?
            .into_luma16();
        if img.width() as usize != w || img.height() as usize != h {
            return Err(Error::malformed(
                "scene",
                format!("{} is {}x{}, expected {w}x{h}", path.display(), img.width(), img.height()),
            ));
        }
        frames.extend(img.into_raw().into_iter().map(|v| v as f64 / u16::MAX as f64));
    }
    let res = Resolution::new(h, w);
    let sequence = ImageSequence::with_source(frames, meta.frames, res, meta.source_resolution)?;
    let (sx, sy) = meta.scale();
    let to_frame = |p: &[f64; 2]| Point::new(p[0] * sx, p[1] * sy);
    let queries = meta
        .queries
        .as_ref()
        .map(|q| QuerySet::new(q.iter().map(to_frame).collect(), res))
        .transpose()?;
    let tracks = meta
        .tracks
        .as_ref()
        .map(|t| -> Result<TrajectorySet> {
            let pts: Vec<Vec<Point>> = t.iter().map(|tr| tr.iter().map(to_frame).collect()).collect();
            let mut set = TrajectorySet::from_tracks(&pts)?;
            if let Some(v) = &meta.valid_mask {
                set.set_valid_mask(v.clone())?;
            }
            Ok(set)
        })
        .transpose()?;
    Ok(Scene {
        sequence,
        queries,
        tracks,
        info: meta.info,
    })
}

/// Writes `scene` into `dir` (created if needed) as 16-bit PNG frames.
pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    let seq = &scene.sequence;
    let frames_dir = dir.join(FRAMES_DIR);
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for s in 0..seq.frame_count() {
        let raw: Vec<u16> = seq
            .frame(s)
            .iter()
            .map(|v| (v * u16::MAX as f64).round() as u16)
            .collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(seq.width() as u32, seq.height() as u32, raw).expect("buffer matches frame size");
        let path = frame_path(dir, s);
        img.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    let src = seq.source_resolution();
    let (sx, sy) = (
        src.width as f64 / seq.width() as f64,
        src.height as f64 / seq.height() as f64,
    );
    let to_src = |p: Point| [p.x * sx, p.y * sy];
    let meta = SceneMeta {
        schema: SCENE_SCHEMA.into(),
        frames: seq.frame_count(),
        height: seq.height(),
        width: seq.width(),
        source_resolution: src,
        queries: scene.queries.as_ref().map(|q| q.points().iter().copied().map(to_src).collect()),
        tracks: scene
            .tracks
            .as_ref()
            .map(|t| (0..t.num_points()).map(|n| t.track(n).into_iter().map(to_src).collect()).collect()),
        valid_mask: scene.tracks.as_ref().map(|t| t.valid_mask().to_vec()),
        info: scene.info.clone(),
    };
    write_json(&dir.join(META_FILE), &meta)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Predicted or reference trajectories in the pixel frame of `resolution`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackFile {
    pub schema: String,
    pub resolution: Resolution,
    pub tracks: Vec<Vec<[f64; 2]>>,
    pub valid_mask: Vec<bool>,
}

impl TrackFile {
    pub fn new(tracks: &TrajectorySet, resolution: Resolution) -> Self {
        Self {
            schema: TRACKS_SCHEMA.into(),
            resolution,
            tracks: (0..tracks.num_points())
                .map(|n| tracks.track(n).into_iter().map(|p| [p.x, p.y]).collect())
                .collect(),
            valid_mask: tracks.valid_mask().to_vec(),
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let f: TrackFile =
            serde_json::from_slice(bytes).map_err(|e| Error::malformed("track file", e.to_string()))?;
        if f.schema != TRACKS_SCHEMA {
            return Err(Error::malformed("track file", format!("schema {:?}", f.schema)));
        }
        f.trajectories()?;
        Ok(f)
    }

    pub fn trajectories(&self) -> Result<TrajectorySet> {
        let pts: Vec<Vec<Point>> = self
            .tracks
            .iter()
            .map(|t| t.iter().map(|p| Point::new(p[0], p[1])).collect())
            .collect();
        let mut set = TrajectorySet::from_tracks(&pts).map_err(|e| Error::malformed("track file", e.to_string()))?;
        set.set_valid_mask(self.valid_mask.clone())
            .map_err(|e| Error::malformed("track file", e.to_string()))?;
        Ok(set)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}
