//! Bilinear sampling, feature pyramids and cost volumes.
//!
//! Points are given in working-image pixels. A map of stride `k` covers `k×k`
//! pixels per cell, so pixel position `p` lands at map coordinate
//! `(p + 0.5) / k - 0.5`. Sampling outside the map clamps to the border.

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::sequence::Point;

/// Default number of pyramid levels.
pub const PYRAMID_LEVELS: usize = 4;
/// Default correlation radius; each level contributes a `(2r+1)²` grid.
pub const RADIUS: usize = 3;

/// Map coordinate of pixel position `p` on a grid of stride `stride`.
pub fn map_coord(p: f64, stride: f64) -> f64 {
    (p + 0.5) / stride - 0.5
}

/// Four bilinear taps with their weights and weight derivatives.
#[derive(Clone, Copy, Debug)]
struct Taps {
    idx: [usize; 4],
    w: [f64; 4],
    dx: [f64; 4],
    dy: [f64; 4],
}

fn clamp_axis(v: f64, n: usize) -> (usize, f64, f64) {
    let hi = (n - 1) as f64;
    let inside = if (0.0..=hi).contains(&v) { 1.0 } else { 0.0 };
    let vc = v.clamp(0.0, hi);
    let v0 = (vc.floor() as usize).min(n.saturating_sub(2));
    (v0, vc - v0 as f64, inside)
}

fn taps(x: f64, y: f64, h: usize, w: usize) -> Taps {
    let (x0, fx, gx) = clamp_axis(x, w);
    let (y0, fy, gy) = clamp_axis(y, h);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Taps {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        w: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        dx: [-(1.0 - fy) * gx, (1.0 - fy) * gx, -fy * gx, fy * gx],
        dy: [-(1.0 - fx) * gy, -fx * gy, (1.0 - fx) * gy, fx * gy],
    }
}

/// Bilinear interpolation of a `[C, h, w]` map at map coordinates `(x, y)`.
pub fn bilinear_sample(map: &Tensor, x: f64, y: f64) -> Result<Vec<f64>> {
    if !(x.is_finite() && y.is_finite()) {
        return Err(Error::invalid("sampling location is not finite"));
    }
    if map.rank() != 3 {
        return Err(Error::shape(format!("expected [C, h, w] map, got {:?}", map.shape())));
    }
    let (c, h, w) = (map.dim(0), map.dim(1), map.dim(2));
    let t = taps(x, y, h, w);
    let data = map.data();
    Ok((0..c)
        .map(|ch| {
            let plane = &data[ch * h * w..(ch + 1) * h * w];
            (0..4).map(|i| t.w[i] * plane[t.idx[i]]).sum()
        })
        .collect())
}

/// Multi-scale stack of one feature map; level `l` is pooled `2^l` times.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
    stride: usize,
}

impl FeaturePyramid {
    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    /// Pixel stride of level 0.
    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn channels(&self) -> usize {
        self.levels[0].dim(0)
    }
}

fn check_pyramid_dims(h: usize, w: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::invalid("a pyramid needs at least one level"));
    }
    let need = 1usize << (levels - 1);
    if h < need || w < need {
        return Err(Error::invalid(format!(
            "{h}x{w} map is too small for a {levels}-level pyramid (needs {need}x{need})"
        )));
    }
    Ok(())
}

/// Builds an `levels`-level pyramid of a `[C, h, w]` map by repeated 2×2
/// average pooling. `stride` is the pixel stride of the input map.
pub fn build_pyramid(map: &Tensor, levels: usize, stride: usize) -> Result<FeaturePyramid> {
    if map.rank() != 3 {
        return Err(Error::shape(format!("expected [C, h, w] map, got {:?}", map.shape())));
    }
    check_pyramid_dims(map.dim(1), map.dim(2), levels)?;
    let mut out = vec![map.clone()];
    for _ in 1..levels {
        let prev = out.last().expect("non-empty");
        let (c, h, w) = (prev.dim(0), prev.dim(1), prev.dim(2));
        let pooled = crate::autograd::Tensor::new(
            &[c, h / 2, w / 2],
            crate::autograd::pool2(prev.data(), c, h, w),
        );
        out.push(pooled);
    }
    Ok(FeaturePyramid { levels: out, stride })
}

/// Correlation scores of one point against a pyramid: `L × (2r+1)²` values,
/// level-major, then row-major over the offset grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub scores: Vec<f64>,
    pub levels: usize,
    pub radius: usize,
    pub anchor: Point,
}

impl CostVolume {
    pub fn grid_side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn level(&self, l: usize) -> &[f64] {
        let n = self.grid_side() * self.grid_side();
        &self.scores[l * n..(l + 1) * n]
    }

    pub fn at(&self, level: usize, dy: isize, dx: isize) -> f64 {
        let side = self.grid_side() as isize;
        let r = self.radius as isize;
        self.level(level)[((dy + r) * side + dx + r) as usize]
    }
}

/// Number of correlation features per point for `levels` and `radius`.
pub fn cost_features(levels: usize, radius: usize) -> usize {
    levels * (2 * radius + 1) * (2 * radius + 1)
}

fn correlate_level(
    f: &[f64],
    map: &[f64],
    h: usize,
    w: usize,
    cx: f64,
    cy: f64,
    radius: usize,
    out: &mut [f64],
) {
    let c = f.len();
    let norm = 1.0 / (c as f64).sqrt();
    let r = radius as isize;
    let plane = h * w;
    let mut k = 0;
    for dy in -r..=r {
        for dx in -r..=r {
            let t = taps(cx + dx as f64, cy + dy as f64, h, w);
            let mut acc = 0.0;
            for (ch, fv) in f.iter().enumerate() {
                let p = &map[ch * plane..(ch + 1) * plane];
                acc += fv * (t.w[0] * p[t.idx[0]] + t.w[1] * p[t.idx[1]] + t.w[2] * p[t.idx[2]] + t.w[3] * p[t.idx[3]]);
            }
            out[k] = acc * norm;
            k += 1;
        }
    }
}

fn cost_volume(f: &[f64], pyr: &FeaturePyramid, point: Point, radius: usize) -> Result<CostVolume> {
    if radius == 0 {
        return Err(Error::invalid("correlation radius must be at least 1"));
    }
    if !point.is_finite() {
        return Err(Error::invalid("cost volume anchor is not finite"));
    }
    if f.len() != pyr.channels() {
        return Err(Error::shape(format!(
            "feature vector has {} channels, pyramid has {}",
            f.len(),
            pyr.channels()
        )));
    }
    let side = 2 * radius + 1;
    let mut scores = vec![0.0; pyr.levels.len() * side * side];
    for (l, level) in pyr.levels.iter().enumerate() {
        let stride = (pyr.stride << l) as f64;
        correlate_level(
            f,
            level.data(),
            level.dim(1),
            level.dim(2),
            map_coord(point.x, stride),
            map_coord(point.y, stride),
            radius,
            &mut scores[l * side * side..(l + 1) * side * side],
        );
    }
    Ok(CostVolume {
        scores,
        levels: pyr.levels.len(),
        radius,
        anchor: point,
    })
}

/// Correlates a query feature with every level of a (coarse) pyramid around
/// `point`.
pub fn global_cost_volume(
    f: &[f64],
    pyr: &FeaturePyramid,
    point: Point,
    radius: usize,
) -> Result<CostVolume> {
    cost_volume(f, pyr, point, radius)
}

/// Correlates a feature taken at the current estimate with multi-scale crops
/// of a fine pyramid around that estimate.
pub fn multicrop_cost_volume(
    f: &[f64],
    fine_pyr: &FeaturePyramid,
    point: Point,
    radius: usize,
) -> Result<CostVolume> {
    cost_volume(f, fine_pyr, point, radius)
}

/// Pooled pyramid of a batched `[S, C, h, w]` map inside a graph.
pub fn pyramid_vars(g: &mut Graph, maps: Var, levels: usize) -> Result<Vec<Var>> {
    let s = g.shape(maps).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("expected [S, C, h, w], got {s:?}")));
    }
    check_pyramid_dims(s[2], s[3], levels)?;
    let mut out = vec![maps];
    for _ in 1..levels {
        let prev = *out.last().expect("non-empty");
        out.push(g.avg_pool2(prev));
    }
    Ok(out)
}

/// Samples `[S, C, h, w]` maps at per-frame pixel positions `[S, M, 2]`,
/// giving `[S, M, C]`. Differentiable in maps and positions.
pub fn sample_frames(g: &mut Graph, maps: Var, points: Var, stride: usize) -> Var {
    let ms = g.shape(maps).to_vec();
    let ps = g.shape(points).to_vec();
    assert_eq!(ms.len(), 4, "sample_frames maps must be [S,C,h,w]");
    assert!(ps.len() == 3 && ps[2] == 2 && ps[0] == ms[0], "points must be [S,M,2]");
    let (frames, c, h, w) = (ms[0], ms[1], ms[2], ms[3]);
    let m = ps[1];
    let stride = stride as f64;
    let plane = h * w;
    let mut out = vec![0.0; frames * m * c];
    {
        let md = g.value(maps).data();
        let pd = g.value(points).data();
        for s in 0..frames {
            let map = &md[s * c * plane..(s + 1) * c * plane];
            for j in 0..m {
                let base = (s * m + j) * 2;
                let t = taps(map_coord(pd[base], stride), map_coord(pd[base + 1], stride), h, w);
                let dst = &mut out[(s * m + j) * c..(s * m + j + 1) * c];
                for (ch, d) in dst.iter_mut().enumerate() {
                    let p = &map[ch * plane..(ch + 1) * plane];
                    *d = (0..4).map(|i| t.w[i] * p[t.idx[i]]).sum();
                }
            }
        }
    }
    let out = Tensor::new(&[frames, m, c], out);
    g.custom(
        out,
        vec![maps, points],
        Box::new(move |args| {
            let md = args.inputs[0].data();
            let pd = args.inputs[1].data();
            let gd = args.grad.data();
            let mut dmap = args.needs[0].then(|| vec![0.0; md.len()]);
            let mut dpts = args.needs[1].then(|| vec![0.0; pd.len()]);
            for s in 0..frames {
                let map = &md[s * c * plane..(s + 1) * c * plane];
                for j in 0..m {
                    let base = (s * m + j) * 2;
                    let t = taps(map_coord(pd[base], stride), map_coord(pd[base + 1], stride), h, w);
                    let gv = &gd[(s * m + j) * c..(s * m + j + 1) * c];
                    if let Some(dm) = dmap.as_mut() {
                        let dm = &mut dm[s * c * plane..(s + 1) * c * plane];
                        for (ch, gc) in gv.iter().enumerate() {
                            for i in 0..4 {
                                dm[ch * plane + t.idx[i]] += gc * t.w[i];
                            }
                        }
                    }
                    if let Some(dp) = dpts.as_mut() {
                        let (mut ax, mut ay) = (0.0, 0.0);
                        for (ch, gc) in gv.iter().enumerate() {
                            let p = &map[ch * plane..(ch + 1) * plane];
                            for i in 0..4 {
                                ax += gc * t.dx[i] * p[t.idx[i]];
                                ay += gc * t.dy[i] * p[t.idx[i]];
                            }
                        }
                        dp[base] += ax / stride;
                        dp[base + 1] += ay / stride;
                    }
                }
            }
            vec![
                dmap.map(|d| Tensor::new(args.inputs[0].shape(), d)),
                dpts.map(|d| Tensor::new(args.inputs[1].shape(), d)),
            ]
        }),
    )
}

/// Batched cost volumes. `f`: `[S, M, C]` features, `levels`: pyramid of
/// `[S, C, h_l, w_l]` maps with level-0 pixel stride `stride`, `centers`:
/// `[S, M, 2]` pixel positions. Output `[S, M, L·(2r+1)²]`.
pub fn correlate_frames(
    g: &mut Graph,
    f: Var,
    levels: &[Var],
    centers: Var,
    radius: usize,
    stride: usize,
) -> Var {
    let fs = g.shape(f).to_vec();
    let cs = g.shape(centers).to_vec();
    assert_eq!(fs.len(), 3, "features must be [S,M,C]");
    assert!(cs.len() == 3 && cs[0] == fs[0] && cs[1] == fs[1] && cs[2] == 2, "centers must be [S,M,2]");
    assert!(radius >= 1, "correlation radius must be at least 1");
    let (frames, m, c) = (fs[0], fs[1], fs[2]);
    let dims: Vec<(usize, usize)> = levels
        .iter()
        .map(|&l| {
            let s = g.shape(l);
            assert!(s.len() == 4 && s[0] == frames && s[1] == c, "pyramid level shape {s:?}");
            (s[2], s[3])
        })
        .collect();
    let side = 2 * radius + 1;
    let cells = side * side;
    let feat = levels.len() * cells;
    let mut out = vec![0.0; frames * m * feat];
    {
        let fd = g.value(f).data();
        let cd = g.value(centers).data();
        for (l, (&lv, &(h, w))) in levels.iter().zip(&dims).enumerate() {
            let ld = g.value(lv).data();
            let lstride = (stride << l) as f64;
            for s in 0..frames {
                let map = &ld[s * c * h * w..(s + 1) * c * h * w];
                for j in 0..m {
                    let row = s * m + j;
                    correlate_level(
                        &fd[row * c..(row + 1) * c],
                        map,
                        h,
                        w,
                        map_coord(cd[row * 2], lstride),
                        map_coord(cd[row * 2 + 1], lstride),
                        radius,
                        &mut out[row * feat + l * cells..row * feat + (l + 1) * cells],
                    );
                }
            }
        }
    }
    let out = Tensor::new(&[frames, m, feat], out);
    let mut parents = vec![f, centers];
    parents.extend_from_slice(levels);
    g.custom(
        out,
        parents,
        Box::new(move |args| {
            let fd = args.inputs[0].data();
            let cd = args.inputs[1].data();
            let gd = args.grad.data();
            let norm = 1.0 / (c as f64).sqrt();
            let r = radius as isize;
            let mut df = args.needs[0].then(|| vec![0.0; fd.len()]);
            let mut dc = args.needs[1].then(|| vec![0.0; cd.len()]);
            let mut dlevels = Vec::with_capacity(dims.len());
            for (l, &(h, w)) in dims.iter().enumerate() {
                let ld = args.inputs[2 + l].data();
                let mut dl = args.needs[2 + l].then(|| vec![0.0; ld.len()]);
                let lstride = (stride << l) as f64;
                let plane = h * w;
                for s in 0..frames {
                    let map = &ld[s * c * plane..(s + 1) * c * plane];
                    for j in 0..m {
                        let row = s * m + j;
                        let fv = &fd[row * c..(row + 1) * c];
                        let cx = map_coord(cd[row * 2], lstride);
                        let cy = map_coord(cd[row * 2 + 1], lstride);
                        let (mut gx, mut gy) = (0.0, 0.0);
                        let mut k = row * feat + l * cells;
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let gk = gd[k] * norm;
                                k += 1;
                                if gk == 0.0 {
                                    continue;
                                }
                                let t = taps(cx + dx as f64, cy + dy as f64, h, w);
                                for ch in 0..c {
                                    let p = &map[ch * plane..(ch + 1) * plane];
                                    let vals = [p[t.idx[0]], p[t.idx[1]], p[t.idx[2]], p[t.idx[3]]];
                                    if let Some(df) = df.as_mut() {
                                        df[row * c + ch] += gk
                                            * (t.w[0] * vals[0] + t.w[1] * vals[1] + t.w[2] * vals[2] + t.w[3] * vals[3]);
                                    }
                                    if let Some(dl) = dl.as_mut() {
                                        let base = s * c * plane + ch * plane;
                                        let gf = gk * fv[ch];
                                        for i in 0..4 {
                                            dl[base + t.idx[i]] += gf * t.w[i];
                                        }
                                    }
                                    if dc.is_some() {
                                        let gf = gk * fv[ch];
                                        gx += gf * (t.dx[0] * vals[0] + t.dx[1] * vals[1] + t.dx[2] * vals[2] + t.dx[3] * vals[3]);
                                        gy += gf * (t.dy[0] * vals[0] + t.dy[1] * vals[1] + t.dy[2] * vals[2] + t.dy[3] * vals[3]);
                                    }
                                }
                            }
                        }
                        if let Some(dc) = dc.as_mut() {
                            dc[row * 2] += gx / lstride;
                            dc[row * 2 + 1] += gy / lstride;
                        }
                    }
                }
                dlevels.push(dl.map(|d| Tensor::new(args.inputs[2 + l].shape(), d)));
            }
            let mut grads = vec![
                df.map(|d| Tensor::new(args.inputs[0].shape(), d)),
                dc.map(|d| Tensor::new(args.inputs[1].shape(), d)),
            ];
            grads.extend(dlevels);
            grads
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sample_is_exact_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let map = random_map(3, 8, 6, &mut rng);
        let v = bilinear_sample(&map, 3.0, 5.0).unwrap();
        for ch in 0..3 {
            assert_eq!(v[ch], map.data()[ch * 48 + 5 * 6 + 3]);
        }
    }

    #[test]
    fn sample_analytic_value() {
        let map = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(bilinear_sample(&map, 0.5, 0.5).unwrap(), vec![1.5]);
        assert!(bilinear_sample(&map, f64::NAN, 0.5).is_err());
    }

    #[test]
    fn sample_clamps_outside() {
        let map = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(bilinear_sample(&map, -4.0, -1.0).unwrap(), vec![0.0]);
        assert_eq!(bilinear_sample(&map, 9.0, 9.0).unwrap(), vec![3.0]);
    }

    #[test]
    fn pyramid_shapes_and_constants() {
        let map = Tensor::full(&[2, 32, 32], 0.7);
        let pyr = build_pyramid(&map, 4, 8).unwrap();
        let sides: Vec<usize> = pyr.levels().iter().map(|l| l.dim(1)).collect();
        assert_eq!(sides, vec![32, 16, 8, 4]);
        for l in pyr.levels() {
            assert!(l.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        }
        assert!(build_pyramid(&Tensor::zeros(&[1, 4, 4]), 4, 8).is_err());
        assert!(build_pyramid(&Tensor::zeros(&[1, 4, 4]), 0, 8).is_err());
    }

    #[test]
    fn zero_feature_gives_zero_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pyr = build_pyramid(&random_map(4, 16, 16, &mut rng), 2, 2).unwrap();
        let cv = global_cost_volume(&[0.0; 4], &pyr, Point::new(9.0, 7.0), 2).unwrap();
        assert!(cv.scores.iter().all(|&v| v == 0.0));
        assert_eq!(cv.scores.len(), cost_features(2, 2));
    }

    #[test]
    fn self_correlation_peaks_at_center() {
        // One-hot features: the anchor cell carries e0, every other cell e1.
        let (c, h, w) = (2, 9, 9);
        let mut map = Tensor::zeros(&[c, h, w]);
        for y in 0..h {
            for x in 0..w {
                map.data_mut()[h * w + y * w + x] = 1.0;
            }
        }
        map.data_mut()[4 * w + 4] = 3.0;
        map.data_mut()[h * w + 4 * w + 4] = 0.0;
        let pyr = build_pyramid(&map, 1, 1).unwrap();
        let f = [3.0, 0.0];
        let cv = multicrop_cost_volume(&f, &pyr, Point::new(4.0, 4.0), 3).unwrap();
        let center = cv.at(0, 0, 0);
        assert!((center - 9.0 / 2f64.sqrt()).abs() < 1e-12);
        for (i, &v) in cv.level(0).iter().enumerate() {
            if i != 24 {
                assert!(v < center);
            }
        }
    }

    #[test]
    fn sample_frames_point_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let maps = Tensor::from_fn(&[2, 3, 6, 7], |_| rng.random_range(-1.0..1.0));
        let pts = Tensor::new(&[2, 2, 2], vec![3.3, 4.1, 7.7, 2.2, 1.6, 9.4, 10.3, 5.9]);
        let wts = Tensor::from_fn(&[2, 2, 3], |_| rng.random_range(-1.0..1.0));
        let r = gradcheck::check(&[maps, pts], 1e-6, |g, v| {
            let y = sample_frames(g, v[0], v[1], 2);
            let w = g.constant(wts.clone());
            let p = g.mul(y, w);
            g.sum_all(p)
        });
        assert!(r.max_abs < 1e-6, "{r:?}");
    }

    #[test]
    fn correlate_frames_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = Tensor::from_fn(&[2, 2, 3], |_| rng.random_range(-1.0..1.0));
        let centers = Tensor::new(&[2, 2, 2], vec![5.3, 6.2, 9.7, 3.1, 2.6, 11.4, 7.45, 7.8]);
        let maps = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
        let wts = Tensor::from_fn(&[2, 2, 2 * 9], |_| rng.random_range(-1.0..1.0));
        let r = gradcheck::check(&[f, centers, maps], 1e-6, |g, v| {
            let levels = pyramid_vars(g, v[2], 2).unwrap();
            let y = correlate_frames(g, v[0], &levels, v[1], 1, 2);
            let w = g.constant(wts.clone());
            let p = g.mul(y, w);
            g.sum_all(p)
        });
        assert!(r.relative < 1e-6, "{r:?}");
    }

    #[test]
    fn graph_ops_match_plain_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let map = random_map(4, 16, 16, &mut rng);
        let f: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = Point::new(13.7, 20.2);
        let pyr = build_pyramid(&map, 3, 2).unwrap();
        let plain = global_cost_volume(&f, &pyr, p, 2).unwrap();

        let mut g = Graph::new();
        let maps = g.constant(map.clone().reshape(&[1, 4, 16, 16]));
        let fv = g.constant(Tensor::new(&[1, 1, 4], f.clone()));
        let cv = g.constant(Tensor::new(&[1, 1, 2], vec![p.x, p.y]));
        let levels = pyramid_vars(&mut g, maps, 3).unwrap();
        let out = correlate_frames(&mut g, fv, &levels, cv, 2, 2);
        assert_eq!(g.value(out).data(), plain.scores.as_slice());

        let sampled = sample_frames(&mut g, maps, cv, 2);
        let want = bilinear_sample(&map, map_coord(p.x, 2.0), map_coord(p.y, 2.0)).unwrap();
        assert_eq!(g.value(sampled).data(), want.as_slice());
    }
}
