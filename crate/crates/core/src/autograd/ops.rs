use super::gemm::{gemm, Layout};
use super::{inverse_permutation, Graph, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

fn elementwise_shape(g: &Graph, a: Var, b: Var, op: &str) {
    assert_eq!(g.shape(a), g.shape(b), "{op}: shape mismatch");
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        elementwise_shape(self, a, b, "add");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.custom(
            out,
            vec![a, b],
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        elementwise_shape(self, a, b, "sub");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape(), data);
        self.custom(
            out,
            vec![a, b],
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.map(|g| -g))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        elementwise_shape(self, a, b, "mul");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape(), data);
        self.custom(
            out,
            vec![a, b],
            Box::new(|args| {
                let (x, y) = (args.inputs[0], args.inputs[1]);
                let prod = |t: &Tensor| {
                    let d = args.grad.data().iter().zip(t.data()).map(|(g, v)| g * v);
                    Tensor::new(t.shape(), d.collect())
                };
                vec![
                    args.needs[0].then(|| prod(y)),
                    args.needs[1].then(|| prod(x)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.custom(out, vec![a], Box::new(move |args| vec![Some(args.grad.map(|g| g * k))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.custom(
            out,
            vec![a],
            Box::new(|args| {
                let d = args
                    .grad
                    .data()
                    .iter()
                    .zip(args.output.data())
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 });
                vec![Some(Tensor::new(args.output.shape(), d.collect()))]
            }),
        )
    }

    /// Elementwise |x|, with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.custom(
            out,
            vec![a],
            Box::new(|args| {
                let d = args
                    .grad
                    .data()
                    .iter()
                    .zip(args.inputs[0].data())
                    .map(|(g, x)| if *x == 0.0 { 0.0 } else { g * x.signum() });
                vec![Some(Tensor::new(args.output.shape(), d.collect()))]
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.custom(
            out,
            vec![a],
            Box::new(|args| vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.item()))]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        self.custom(
            out,
            vec![a],
            Box::new(|args| vec![Some(args.grad.clone().reshape(args.inputs[0].shape()))]),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let out = self.value(a).permute(axes);
        let inv = inverse_permutation(axes);
        self.custom(out, vec![a], Box::new(move |args| vec![Some(args.grad.permute(&inv))]))
    }

    /// Concatenation along an existing axis.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.shape(parts[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            assert!(
                s.iter().enumerate().all(|(i, d)| i == axis || *d == first[i]),
                "concat shape mismatch"
            );
            widths.push(s[axis] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total / inner;
        let out = Tensor::new(&shape, data);
        self.custom(
            out,
            parts.to_vec(),
            Box::new(move |args| {
                let g = args.grad.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    if args.needs[i] {
                        let mut d = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let base = o * total + offset;
                            d.extend_from_slice(&g[base..base + w]);
                        }
                        grads.push(Some(Tensor::new(args.inputs[i].shape(), d)));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        )
    }

    /// Selects rows (sub-tensors along axis 0) by index, with repetition.
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let src = self.value(a);
        let row_len: usize = src.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in &rows {
            data.extend_from_slice(&src.data()[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = src.shape().to_vec();
        shape[0] = rows.len();
        let out = Tensor::new(&shape, data);
        self.custom(
            out,
            vec![a],
            Box::new(move |args| {
                let mut dx = Tensor::zeros(args.inputs[0].shape());
                let g = args.grad.data();
                let d = dx.data_mut();
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut d[r * row_len..(r + 1) * row_len];
                    for (a, b) in dst.iter_mut().zip(&g[i * row_len..(i + 1) * row_len]) {
                        *a += b;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// 2D convolution. `x`: [B, C, H, W], `w`: [O, C, K, K], `b`: [O].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [B,C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,K,K]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let geom = Conv2dGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad);
        let (batch, out_ch) = (xs[0], ws[0]);
        let (p, ckk) = (geom.out_pixels(), geom.col_rows());
        let mut out = vec![0.0; batch * out_ch * p];
        let mut cols = vec![0.0; ckk * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            let in_len = geom.c * geom.h * geom.w;
            for n in 0..batch {
                geom.im2col(&xv[n * in_len..(n + 1) * in_len], &mut cols);
                let dst = &mut out[n * out_ch * p..(n + 1) * out_ch * p];
                gemm(out_ch, ckk, p, wv, Layout::Normal, &cols, Layout::Normal, 0.0, dst);
                if let Some(bias) = bias {
                    for (o, row) in dst.chunks_mut(p).enumerate() {
                        row.iter_mut().for_each(|v| *v += bias[o]);
                    }
                }
            }
        }
        let out = Tensor::new(&[batch, out_ch, geom.ho, geom.wo], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.custom(
            out,
            parents,
            Box::new(move |args| {
                let xv = args.inputs[0].data();
                let wv = args.inputs[1].data();
                let g = args.grad.data();
                let in_len = geom.c * geom.h * geom.w;
                let mut dx = args.needs[0].then(|| vec![0.0; xv.len()]);
                let mut dw = vec![0.0; wv.len()];
                let mut cols = vec![0.0; ckk * p];
                let mut dcols = vec![0.0; ckk * p];
                for n in 0..batch {
                    let gn = &g[n * out_ch * p..(n + 1) * out_ch * p];
                    if args.needs[1] {
                        geom.im2col(&xv[n * in_len..(n + 1) * in_len], &mut cols);
                        gemm(out_ch, p, ckk, gn, Layout::Normal, &cols, Layout::Transposed, 1.0, &mut dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(ckk, out_ch, p, wv, Layout::Transposed, gn, Layout::Normal, 0.0, &mut dcols);
                        geom.col2im(&dcols, &mut dx[n * in_len..(n + 1) * in_len]);
                    }
                }
                let mut grads = vec![
                    dx.map(|d| Tensor::new(args.inputs[0].shape(), d)),
                    args.needs[1].then(|| Tensor::new(args.inputs[1].shape(), dw)),
                ];
                if args.inputs.len() == 3 {
                    let mut db = vec![0.0; out_ch];
                    for n in 0..batch {
                        for (o, acc) in db.iter_mut().enumerate() {
                            let base = (n * out_ch + o) * p;
                            *acc += g[base..base + p].iter().sum::<f64>();
                        }
                    }
                    grads.push(Some(Tensor::new(&[out_ch], db)));
                }
                grads
            }),
        )
    }

    /// Dilated 1D convolution with zero "same" padding. `x`: [B, C, T],
    /// `w`: [O, C, K] with odd K, `b`: [O].
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv1d input must be [B,C,T]");
        assert_eq!(ws.len(), 3, "conv1d weight must be [O,C,K]");
        assert_eq!(xs[1], ws[1], "conv1d channel mismatch");
        assert!(ws[2] % 2 == 1, "conv1d kernel must be odd");
        let geom = Conv1dGeom {
            c: xs[1],
            t: xs[2],
            k: ws[2],
            dilation,
        };
        let (batch, out_ch, t) = (xs[0], ws[0], xs[2]);
        let ck = geom.c * geom.k;
        let mut out = vec![0.0; batch * out_ch * t];
        let mut cols = vec![0.0; ck * t];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            let in_len = geom.c * t;
            for n in 0..batch {
                geom.im2col(&xv[n * in_len..(n + 1) * in_len], &mut cols);
                let dst = &mut out[n * out_ch * t..(n + 1) * out_ch * t];
                gemm(out_ch, ck, t, wv, Layout::Normal, &cols, Layout::Normal, 0.0, dst);
                if let Some(bias) = bias {
                    for (o, row) in dst.chunks_mut(t).enumerate() {
                        row.iter_mut().for_each(|v| *v += bias[o]);
                    }
                }
            }
        }
        let out = Tensor::new(&[batch, out_ch, t], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.custom(
            out,
            parents,
            Box::new(move |args| {
                let xv = args.inputs[0].data();
                let wv = args.inputs[1].data();
                let g = args.grad.data();
                let in_len = geom.c * t;
                let mut dx = args.needs[0].then(|| vec![0.0; xv.len()]);
                let mut dw = vec![0.0; wv.len()];
                let mut cols = vec![0.0; ck * t];
                let mut dcols = vec![0.0; ck * t];
                for n in 0..batch {
                    let gn = &g[n * out_ch * t..(n + 1) * out_ch * t];
                    if args.needs[1] {
                        geom.im2col(&xv[n * in_len..(n + 1) * in_len], &mut cols);
                        gemm(out_ch, t, ck, gn, Layout::Normal, &cols, Layout::Transposed, 1.0, &mut dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(ck, out_ch, t, wv, Layout::Transposed, gn, Layout::Normal, 0.0, &mut dcols);
                        geom.col2im(&dcols, &mut dx[n * in_len..(n + 1) * in_len]);
                    }
                }
                let mut grads = vec![
                    dx.map(|d| Tensor::new(args.inputs[0].shape(), d)),
                    args.needs[1].then(|| Tensor::new(args.inputs[1].shape(), dw)),
                ];
                if args.inputs.len() == 3 {
                    let mut db = vec![0.0; out_ch];
                    for n in 0..batch {
                        for (o, acc) in db.iter_mut().enumerate() {
                            let base = (n * out_ch + o) * t;
                            *acc += g[base..base + t].iter().sum::<f64>();
                        }
                    }
                    grads.push(Some(Tensor::new(&[out_ch], db)));
                }
                grads
            }),
        )
    }

    /// Per-sample, per-channel normalization over the trailing spatial axes
    /// of a [B, C, ...] tensor. No affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert!(xs.len() >= 3, "instance_norm needs [B,C,...]");
        let group: usize = xs[2..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.chunks(group).zip(out.chunks_mut(group)) {
            let (mean, inv_std) = moments(src);
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv_std;
            }
        }
        let out = Tensor::new(&xs, out);
        self.custom(
            out,
            vec![x],
            Box::new(move |args| {
                let xv = args.inputs[0].data();
                let y = args.output.data();
                let g = args.grad.data();
                let mut dx = vec![0.0; xv.len()];
                let n = group as f64;
                for (((src, ys), gs), dst) in xv
                    .chunks(group)
                    .zip(y.chunks(group))
                    .zip(g.chunks(group))
                    .zip(dx.chunks_mut(group))
                {
                    let (_, inv_std) = moments(src);
                    let mean_g = gs.iter().sum::<f64>() / n;
                    let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, gi), yi) in dst.iter_mut().zip(gs).zip(ys) {
                        *d = (gi - mean_g - yi * mean_gy) * inv_std;
                    }
                }
                vec![Some(Tensor::new(args.inputs[0].shape(), dx))]
            }),
        )
    }

    /// 2×2 average pooling with stride 2 over the last two axes (floor).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let r = xs.len();
        assert!(r >= 2, "avg_pool2 needs at least 2 axes");
        let (h, w) = (xs[r - 2], xs[r - 1]);
        let (ho, wo) = (h / 2, w / 2);
        assert!(ho > 0 && wo > 0, "avg_pool2 on {h}x{w} map");
        let planes: usize = xs[..r - 2].iter().product();
        let out = pool2_forward(self.value(x).data(), planes, h, w);
        let mut shape = xs.clone();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let out = Tensor::new(&shape, out);
        self.custom(
            out,
            vec![x],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = 0.25 * g[(p * ho + y) * wo + xx];
                            let base = p * h * w;
                            dx[base + 2 * y * w + 2 * xx] += v;
                            dx[base + 2 * y * w + 2 * xx + 1] += v;
                            dx[base + (2 * y + 1) * w + 2 * xx] += v;
                            dx[base + (2 * y + 1) * w + 2 * xx + 1] += v;
                        }
                    }
                }
                vec![Some(Tensor::new(args.inputs[0].shape(), dx))]
            }),
        )
    }

    /// Reflective padding on the bottom and right of a [B, C, H, W] tensor.
    pub fn pad_reflect(&mut self, x: Var, bottom: usize, right: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (h, w) = (xs[2], xs[3]);
        assert!(bottom < h && right < w, "reflect padding exceeds input size");
        let (hp, wp) = (h + bottom, w + right);
        let planes = xs[0] * xs[1];
        let src_y: Vec<usize> = (0..hp).map(|y| reflect_index(y, h)).collect();
        let src_x: Vec<usize> = (0..wp).map(|x| reflect_index(x, w)).collect();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * hp * wp);
        for p in 0..planes {
            for &sy in &src_y {
                let row = &xv[(p * h + sy) * w..(p * h + sy + 1) * w];
                out.extend(src_x.iter().map(|&sx| row[sx]));
            }
        }
        let out = Tensor::new(&[xs[0], xs[1], hp, wp], out);
        self.custom(
            out,
            vec![x],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for (y, &sy) in src_y.iter().enumerate() {
                        for (xx, &sx) in src_x.iter().enumerate() {
                            dx[(p * h + sy) * w + sx] += g[(p * hp + y) * wp + xx];
                        }
                    }
                }
                vec![Some(Tensor::new(args.inputs[0].shape(), dx))]
            }),
        )
    }

    /// Keeps the top-left `h × w` window of a [B, C, H, W] tensor.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (hi, wi) = (xs[2], xs[3]);
        assert!(h <= hi && w <= wi, "crop larger than input");
        if h == hi && w == wi {
            return x;
        }
        let planes = xs[0] * xs[1];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * h * w);
        for p in 0..planes {
            for y in 0..h {
                out.extend_from_slice(&xv[(p * hi + y) * wi..(p * hi + y) * wi + w]);
            }
        }
        let out = Tensor::new(&[xs[0], xs[1], h, w], out);
        self.custom(
            out,
            vec![x],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut dx = vec![0.0; planes * hi * wi];
                for p in 0..planes {
                    for y in 0..h {
                        let dst = (p * hi + y) * wi;
                        dx[dst..dst + w].copy_from_slice(&g[(p * h + y) * w..(p * h + y + 1) * w]);
                    }
                }
                vec![Some(Tensor::new(args.inputs[0].shape(), dx))]
            }),
        )
    }
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

fn reflect_index(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

/// Plain 2×2 average pooling over `planes` stacked h×w planes.
pub(crate) fn pool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..ho {
            for xx in 0..wo {
                let a = x[base + 2 * y * w + 2 * xx];
                let b = x[base + 2 * y * w + 2 * xx + 1];
                let c = x[base + (2 * y + 1) * w + 2 * xx];
                let d = x[base + (2 * y + 1) * w + 2 * xx + 1];
                out.push(0.25 * (a + b + c + d));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Conv2dGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Conv2dGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv2d kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.out_pixels();
        let mut row = 0;
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let srow = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let p = self.out_pixels();
        let mut row = 0;
        for c in 0..self.c {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv1dGeom {
    c: usize,
    t: usize,
    k: usize,
    dilation: usize,
}

impl Conv1dGeom {
    fn pad(&self) -> isize {
        (self.dilation * (self.k - 1) / 2) as isize
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let pad = self.pad();
        for c in 0..self.c {
            let src = &x[c * self.t..(c + 1) * self.t];
            for k in 0..self.k {
                let dst = &mut cols[(c * self.k + k) * self.t..(c * self.k + k + 1) * self.t];
                let shift = (k * self.dilation) as isize - pad;
                for (t, d) in dst.iter_mut().enumerate() {
                    let i = t as isize + shift;
                    *d = if i < 0 || i >= self.t as isize {
                        0.0
                    } else {
                        src[i as usize]
                    };
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let pad = self.pad();
        for c in 0..self.c {
            let dst = &mut x[c * self.t..(c + 1) * self.t];
            for k in 0..self.k {
                let src = &cols[(c * self.k + k) * self.t..(c * self.k + k + 1) * self.t];
                let shift = (k * self.dilation) as isize - pad;
                for (t, s) in src.iter().enumerate() {
                    let i = t as isize + shift;
                    if i >= 0 && i < self.t as isize {
                        dst[i as usize] += s;
                    }
                }
            }
        }
    }
}
