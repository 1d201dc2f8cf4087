//! Layer kernels with forward and backward passes.
//!
//! Feature maps are channel-major `[c][y][x]`; node features are row-major
//! `[node][feature]`.

use crate::grid::Point;
use crate::topology::SparseMatrix;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.channels, other.height, other.width)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub fn leaky_relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect()
}

/// Multiplies `grad` in place by the derivative at the pre-activation `pre`.
pub fn leaky_relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &v) in grad.iter_mut().zip(pre) {
        if v <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Geometry of a square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Patch matrix `[oh * ow][c_in * k * k]`, zero outside the input.
fn im2col(input: &FeatureMap, shape: &ConvShape, oh: usize, ow: usize) -> Vec<f64> {
    let k = shape.kernel;
    let patch = shape.c_in * k * k;
    let (h, w) = (input.height as isize, input.width as isize);
    let (s, pad) = (shape.stride as isize, shape.pad as isize);
    let mut col = vec![0.0; oh * ow * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut col[(oy * ow + ox) * patch..][..patch];
            for ci in 0..shape.c_in {
                let src = input.plane(ci);
                for ky in 0..k {
                    let iy = oy as isize * s + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize * s + kx as isize - pad;
                        if ix >= 0 && ix < w {
                            dst[(ci * k + ky) * k + kx] = src[(iy * w + ix) as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], shape: &ConvShape, d_in: &mut FeatureMap, oh: usize, ow: usize) {
    let k = shape.kernel;
    let patch = shape.c_in * k * k;
    let (h, w) = (d_in.height as isize, d_in.width as isize);
    let (s, pad) = (shape.stride as isize, shape.pad as isize);
    let plane = d_in.height * d_in.width;
    for oy in 0..oh {
        for ox in 0..ow {
            let src = &col[(oy * ow + ox) * patch..][..patch];
            for ci in 0..shape.c_in {
                let dst = &mut d_in.data[ci * plane..(ci + 1) * plane];
                for ky in 0..k {
                    let iy = oy as isize * s + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize * s + kx as isize - pad;
                        if ix >= 0 && ix < w {
                            dst[(iy * w + ix) as usize] += src[(ci * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// 2D convolution; `weight` is `[c_out][c_in][k][k]`.
pub fn conv2d(input: &FeatureMap, shape: &ConvShape, weight: &[f64], bias: &[f64]) -> FeatureMap {
    assert_eq!(input.channels, shape.c_in);
    let (oh, ow) = (shape.out_size(input.height), shape.out_size(input.width));
    let patch = shape.c_in * shape.kernel * shape.kernel;
    let col = im2col(input, shape, oh, ow);
    let mut out = FeatureMap::zeros(shape.c_out, oh, ow);
    for co in 0..shape.c_out {
        let w = &weight[co * patch..(co + 1) * patch];
        let plane = &mut out.data[co * oh * ow..(co + 1) * oh * ow];
        for (p, v) in plane.iter_mut().enumerate() {
            *v = bias[co] + dot(w, &col[p * patch..(p + 1) * patch]);
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input` is set.
pub fn conv2d_backward(
    input: &FeatureMap,
    shape: &ConvShape,
    weight: &[f64],
    d_out: &FeatureMap,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    need_input: bool,
) -> Option<FeatureMap> {
    let (oh, ow) = (d_out.height, d_out.width);
    let patch = shape.c_in * shape.kernel * shape.kernel;
    let col = im2col(input, shape, oh, ow);
    let mut d_col = need_input.then(|| vec![0.0; col.len()]);
    for co in 0..shape.c_out {
        let g = d_out.plane(co);
        d_bias[co] += g.iter().sum::<f64>();
        let w = &weight[co * patch..(co + 1) * patch];
        let dw = &mut d_weight[co * patch..(co + 1) * patch];
        for (p, &gp) in g.iter().enumerate() {
            if gp == 0.0 {
                continue;
            }
            axpy(gp, &col[p * patch..(p + 1) * patch], dw);
            if let Some(dc) = d_col.as_mut() {
                axpy(gp, w, &mut dc[p * patch..(p + 1) * patch]);
            }
        }
    }
    d_col.map(|dc| {
        let mut d_in = FeatureMap::zeros_like(input);
        col2im(&dc, shape, &mut d_in, oh, ow);
        d_in
    })
}

/// `y = W x + b` with `W` stored `[out][in]`.
pub fn linear(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + weight[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

pub fn linear_backward(x: &[f64], weight: &[f64], d_out: &[f64], d_weight: &mut [f64], d_bias: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut d_x = vec![0.0; n_in];
    for (o, &g) in d_out.iter().enumerate() {
        d_bias[o] += g;
        let row = o * n_in..(o + 1) * n_in;
        for ((dw, w), (dx, v)) in d_weight[row.clone()].iter_mut().zip(&weight[row]).zip(d_x.iter_mut().zip(x)) {
            *dw += g * v;
            *dx += g * w;
        }
    }
    d_x
}

/// Row-wise linear map over nodes: `Y = X W + b` with `W` stored `[in][out]`.
pub fn node_linear(x: &[f64], n_in: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_out = bias.len();
    let nodes = x.len() / n_in;
    let mut y = Vec::with_capacity(nodes * n_out);
    for v in 0..nodes {
        y.extend_from_slice(bias);
        let row = &x[v * n_in..(v + 1) * n_in];
        let out = &mut y[v * n_out..(v + 1) * n_out];
        for (i, &xv) in row.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(&weight[i * n_out..(i + 1) * n_out]) {
                *o += xv * w;
            }
        }
    }
    y
}

pub fn node_linear_backward(
    x: &[f64],
    n_in: usize,
    weight: &[f64],
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) -> Vec<f64> {
    let n_out = d_bias.len();
    let nodes = x.len() / n_in;
    let mut d_x = vec![0.0; x.len()];
    for v in 0..nodes {
        let g = &d_out[v * n_out..(v + 1) * n_out];
        for (db, gv) in d_bias.iter_mut().zip(g) {
            *db += gv;
        }
        for i in 0..n_in {
            let xv = x[v * n_in + i];
            let wrow = &weight[i * n_out..(i + 1) * n_out];
            let dwrow = &mut d_weight[i * n_out..(i + 1) * n_out];
            let mut acc = 0.0;
            for o in 0..n_out {
                dwrow[o] += xv * g[o];
                acc += wrow[o] * g[o];
            }
            d_x[v * n_in + i] = acc;
        }
    }
    d_x
}

/// Chebyshev basis `T_k(L) X` for `k < order`.
pub fn chebyshev_basis(x: &[f64], width: usize, laplacian: &SparseMatrix, order: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(order);
    for k in 0..order {
        let t = match k {
            0 => x.to_vec(),
            1 => laplacian.mul_rows(x, width),
            _ => {
                let mut t = laplacian.mul_rows(&basis[k - 1], width);
                for (a, b) in t.iter_mut().zip(&basis[k - 2]) {
                    *a = 2.0 * *a - b;
                }
                t
            }
        };
        basis.push(t);
    }
    basis
}

/// `sum_k T_k(L) X Theta_k + b`, with `theta` stored `[k][in][out]`.
/// Returns the output and the basis for the backward pass.
pub fn cheb_conv(
    x: &[f64],
    n_in: usize,
    laplacian: &SparseMatrix,
    theta: &[f64],
    bias: &[f64],
    order: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n_out = bias.len();
    assert!(order >= 1 && theta.len() >= order * n_in * n_out, "Chebyshev order exceeds theta depth");
    let basis = chebyshev_basis(x, n_in, laplacian, order);
    let mut out = node_linear(&basis[0], n_in, &theta[..n_in * n_out], bias);
    let zero = vec![0.0; n_out];
    for (k, t) in basis.iter().enumerate().skip(1) {
        let part = node_linear(t, n_in, &theta[k * n_in * n_out..(k + 1) * n_in * n_out], &zero);
        for (o, p) in out.iter_mut().zip(part) {
            *o += p;
        }
    }
    (out, basis)
}

/// Accumulates `theta`/`bias` gradients and returns `dX`.
pub fn cheb_conv_backward(
    basis: &[Vec<f64>],
    n_in: usize,
    laplacian: &SparseMatrix,
    theta: &[f64],
    d_out: &[f64],
    d_theta: &mut [f64],
    d_bias: &mut [f64],
) -> Vec<f64> {
    let order = basis.len();
    let n_out = d_bias.len();
    let block = n_in * n_out;
    let mut scratch_bias = vec![0.0; n_out];
    let mut g: Vec<Vec<f64>> = (0..order)
        .map(|k| {
            let db = if k == 0 { &mut *d_bias } else { &mut scratch_bias[..] };
            node_linear_backward(
                &basis[k],
                n_in,
                &theta[k * block..(k + 1) * block],
                d_out,
                &mut d_theta[k * block..(k + 1) * block],
                db,
            )
        })
        .collect();
    // reverse of T_k = 2 L T_{k-1} - T_{k-2}; L is symmetric
    for k in (2..order).rev() {
        let back = laplacian.mul_rows(&g[k], n_in);
        let gk = std::mem::take(&mut g[k]);
        for (a, b) in g[k - 1].iter_mut().zip(&back) {
            *a += 2.0 * b;
        }
        for (a, b) in g[k - 2].iter_mut().zip(&gk) {
            *a -= b;
        }
    }
    if order >= 2 {
        let back = laplacian.mul_rows(&g[1], n_in);
        for (a, b) in g[0].iter_mut().zip(&back) {
            *a += b;
        }
    }
    g.swap_remove(0)
}

/// Bilinear tap positions for one normalized coordinate.
#[derive(Debug, Clone, Copy)]
struct Taps {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// d(sample position)/d(normalized coordinate), zero when clamped.
    sx: f64,
    sy: f64,
}

fn axis_taps(p: f64, size: usize) -> (usize, usize, f64, f64) {
    let u = p * size as f64 - 0.5;
    let max = (size - 1) as f64;
    let (u, slope) = if u <= 0.0 {
        (0.0, 0.0)
    } else if u >= max {
        (max, 0.0)
    } else {
        (u, size as f64)
    };
    if size == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let i0 = (u.floor() as usize).min(size - 2);
    (i0, i0 + 1, u - i0 as f64, slope)
}

fn taps(p: Point, height: usize, width: usize) -> Taps {
    let (x0, x1, fx, sx) = axis_taps(p[0], width);
    let (y0, y1, fy, sy) = axis_taps(p[1], height);
    Taps {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        sx,
        sy,
    }
}

/// Bilinear samples of every channel at normalized coordinates, with
/// texel centres at `(i + 0.5) / size`. Output is `[node][channel]`.
pub fn igsc_sample(map: &FeatureMap, coords: &[Point]) -> Vec<f64> {
    let c = map.channels;
    let mut out = Vec::with_capacity(coords.len() * c);
    for &p in coords {
        let t = taps(p, map.height, map.width);
        for ch in 0..c {
            let a = map.at(ch, t.y0, t.x0);
            let b = map.at(ch, t.y0, t.x1);
            let d = map.at(ch, t.y1, t.x0);
            let e = map.at(ch, t.y1, t.x1);
            let top = a + t.fx * (b - a);
            let bot = d + t.fx * (e - d);
            out.push(top + t.fy * (bot - top));
        }
    }
    out
}

/// Scatters sample gradients into `d_map` and returns coordinate gradients.
pub fn igsc_backward(map: &FeatureMap, coords: &[Point], d_out: &[f64], d_map: &mut FeatureMap) -> Vec<Point> {
    let c = map.channels;
    let (h, w) = (map.height, map.width);
    coords
        .iter()
        .enumerate()
        .map(|(n, &p)| {
            let t = taps(p, h, w);
            let mut dp = [0.0; 2];
            for ch in 0..c {
                let g = d_out[n * c + ch];
                if g == 0.0 {
                    continue;
                }
                let a = map.at(ch, t.y0, t.x0);
                let b = map.at(ch, t.y0, t.x1);
                let d = map.at(ch, t.y1, t.x0);
                let e = map.at(ch, t.y1, t.x1);
                let base = ch * h * w;
                d_map.data[base + t.y0 * w + t.x0] += g * (1.0 - t.fx) * (1.0 - t.fy);
                d_map.data[base + t.y0 * w + t.x1] += g * t.fx * (1.0 - t.fy);
                d_map.data[base + t.y1 * w + t.x0] += g * (1.0 - t.fx) * t.fy;
                d_map.data[base + t.y1 * w + t.x1] += g * t.fx * t.fy;
                let du = (1.0 - t.fy) * (b - a) + t.fy * (e - d);
                let dv = (1.0 - t.fx) * (d - a) + t.fx * (e - b);
                dp[0] += g * du * t.sx;
                dp[1] += g * dv * t.sy;
            }
            dp
        })
        .collect()
}

pub fn upsample2(map: &FeatureMap) -> FeatureMap {
    let (h, w) = (map.height * 2, map.width * 2);
    let mut out = FeatureMap::zeros(map.channels, h, w);
    for c in 0..map.channels {
        for y in 0..h {
            for x in 0..w {
                out.data[(c * h + y) * w + x] = map.at(c, y / 2, x / 2);
            }
        }
    }
    out
}

pub fn upsample2_backward(d_out: &FeatureMap) -> FeatureMap {
    let (h, w) = (d_out.height / 2, d_out.width / 2);
    let mut d = FeatureMap::zeros(d_out.channels, h, w);
    for c in 0..d_out.channels {
        for y in 0..d_out.height {
            for x in 0..d_out.width {
                d.data[(c * h + y / 2) * w + x / 2] += d_out.at(c, y, x);
            }
        }
    }
    d
}

pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    FeatureMap {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

pub fn split_channels(m: &FeatureMap, first: usize) -> (FeatureMap, FeatureMap) {
    let n = first * m.height * m.width;
    (
        FeatureMap {
            channels: first,
            height: m.height,
            width: m.width,
            data: m.data[..n].to_vec(),
        },
        FeatureMap {
            channels: m.channels - first,
            height: m.height,
            width: m.width,
            data: m.data[n..].to_vec(),
        },
    )
}

/// Row-wise concatenation of node feature blocks.
pub fn concat_rows(blocks: &[(&[f64], usize)], nodes: usize) -> Vec<f64> {
    let width: usize = blocks.iter().map(|b| b.1).sum();
    let mut out = Vec::with_capacity(nodes * width);
    for v in 0..nodes {
        for &(data, w) in blocks {
            out.extend_from_slice(&data[v * w..(v + 1) * w]);
        }
    }
    out
}

pub fn split_rows(x: &[f64], widths: &[usize], nodes: usize) -> Vec<Vec<f64>> {
    let total: usize = widths.iter().sum();
    let mut out: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(nodes * w)).collect();
    for v in 0..nodes {
        let mut off = v * total;
        for (o, &w) in out.iter_mut().zip(widths) {
            o.extend_from_slice(&x[off..off + w]);
            off += w;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::build_independent;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn dense_mul(a: &[Vec<f64>], x: &[f64], width: usize) -> Vec<f64> {
        let n = a.len();
        let mut out = vec![0.0; n * width];
        for i in 0..n {
            for j in 0..n {
                for c in 0..width {
                    out[i * width + c] += a[i][j] * x[j * width + c];
                }
            }
        }
        out
    }

    #[test]
    fn cheb_order_one_is_a_linear_map() {
        let lap = build_independent(&[(1, 5)], 1).unwrap().levels[0].scaled_laplacian();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_vec(&mut rng, 10);
        let theta = rand_vec(&mut rng, 6);
        let (y, _) = cheb_conv(&x, 2, &lap, &theta, &[0.0; 3], 1);
        assert_eq!(y, node_linear(&x, 2, &theta, &[0.0; 3]));
    }

    #[test]
    fn cheb_two_node_path_reduces_to_laplacian() {
        let lap = SparseMatrix::new(2, 2, vec![(0, 1, -1.0), (1, 0, -1.0)]);
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let theta = vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let (y, _) = cheb_conv(&x, 2, &lap, &theta, &[0.0; 2], 2);
        assert_eq!(y, vec![-3.0, -4.0, -1.0, -2.0]);
    }

    #[test]
    fn cheb_matches_dense_polynomial_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (n, order) in [(6, 3), (8, 4), (3, 2), (7, 1)] {
            let lap = build_independent(&[(1, n)], 1).unwrap().levels[0].scaled_laplacian();
            let dense = lap.to_dense();
            let (fi, fo) = (3, 2);
            let x = rand_vec(&mut rng, n * fi);
            let theta = rand_vec(&mut rng, order * fi * fo);
            let bias = rand_vec(&mut rng, fo);
            let (y, _) = cheb_conv(&x, fi, &lap, &theta, &bias, order);
            // explicit T_k(L) matrices
            let eye: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
            let mut t = vec![eye, dense.clone()];
            for k in 2..order {
                let next: Vec<Vec<f64>> = (0..n)
                    .map(|i| {
                        (0..n)
                            .map(|j| 2.0 * (0..n).map(|m| dense[i][m] * t[k - 1][m][j]).sum::<f64>() - t[k - 2][i][j])
                            .collect()
                    })
                    .collect();
                t.push(next);
            }
            let mut want = vec![0.0; n * fo];
            for v in 0..n {
                want[v * fo..(v + 1) * fo].copy_from_slice(&bias);
            }
            for k in 0..order {
                let tx = dense_mul(&t[k], &x, fi);
                for v in 0..n {
                    for o in 0..fo {
                        want[v * fo + o] += (0..fi).map(|i| tx[v * fi + i] * theta[(k * fi + i) * fo + o]).sum::<f64>();
                    }
                }
            }
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "n={n} K={order}");
            }
        }
    }

    #[test]
    fn cheb_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lap = build_independent(&[(1, 7)], 1).unwrap().levels[0].scaled_laplacian();
        let (fi, fo, order) = (3, 4, 5);
        let x = rand_vec(&mut rng, 7 * fi);
        let theta = rand_vec(&mut rng, order * fi * fo);
        let bias = rand_vec(&mut rng, fo);
        let up = rand_vec(&mut rng, 7 * fo);
        let f = |x: &[f64], th: &[f64]| -> f64 {
            cheb_conv(x, fi, &lap, th, &bias, order).0.iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let (_, basis) = cheb_conv(&x, fi, &lap, &theta, &bias, order);
        let mut dth = vec![0.0; theta.len()];
        let mut db = vec![0.0; fo];
        let dx = cheb_conv_backward(&basis, fi, &lap, &theta, &up, &mut dth, &mut db);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            let fd = (f(&p, &theta) - f(&m, &theta)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7, "{fd} vs {}", dx[i]);
        }
        for i in 0..theta.len() {
            let mut p = theta.clone();
            p[i] += h;
            let mut m = theta.clone();
            m[i] -= h;
            let fd = (f(&x, &p) - f(&x, &m)) / (2.0 * h);
            assert!((fd - dth[i]).abs() < 1e-7);
        }
        let sum_up: Vec<f64> = (0..fo).map(|o| (0..7).map(|v| up[v * fo + o]).sum()).collect();
        for (a, b) in db.iter().zip(&sum_up) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn igsc_examples() {
        let mut map = FeatureMap::zeros(1, 2, 2);
        map.data = vec![0.0, 1.0, 2.0, 3.0];
        // texel centres sit at 0.25 and 0.75
        assert_eq!(igsc_sample(&map, &[[0.5, 0.5]]), vec![1.5]);
        assert_eq!(igsc_sample(&map, &[[0.75, 0.25]]), vec![1.0]);
        let constant = FeatureMap {
            channels: 2,
            height: 4,
            width: 4,
            data: vec![0.7; 32],
        };
        let coords = [[0.3, 0.6], [0.9, 0.1]];
        assert!(igsc_sample(&constant, &coords).iter().all(|v| (v - 0.7).abs() < 1e-15));
        let mut d = FeatureMap::zeros_like(&constant);
        let g = igsc_backward(&constant, &coords, &[1.0; 4], &mut d);
        assert!(g.iter().all(|p| p[0].abs() < 1e-12 && p[1].abs() < 1e-12));
    }

    #[test]
    fn igsc_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let map = FeatureMap {
            channels: 3,
            height: 8,
            width: 8,
            data: rand_vec(&mut rng, 192),
        };
        let coords: Vec<Point> = (0..10).map(|_| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]).collect();
        let up = rand_vec(&mut rng, 30);
        let f = |m: &FeatureMap, c: &[Point]| -> f64 { igsc_sample(m, c).iter().zip(&up).map(|(a, b)| a * b).sum() };
        let mut dmap = FeatureMap::zeros_like(&map);
        let dc = igsc_backward(&map, &coords, &up, &mut dmap);
        let h = 1e-7;
        for n in 0..coords.len() {
            for k in 0..2 {
                let mut p = coords.clone();
                p[n][k] += h;
                let mut m = coords.clone();
                m[n][k] -= h;
                let fd = (f(&map, &p) - f(&map, &m)) / (2.0 * h);
                assert!((fd - dc[n][k]).abs() < 1e-5 * fd.abs().max(1.0), "{fd} vs {}", dc[n][k]);
            }
        }
        for i in (0..map.data.len()).step_by(7) {
            let mut p = map.clone();
            p.data[i] += h;
            let mut m = map.clone();
            m.data[i] -= h;
            let fd = (f(&p, &coords) - f(&m, &coords)) / (2.0 * h);
            assert!((fd - dmap.data[i]).abs() < 1e-6);
        }
        // clamped coordinates get no gradient
        let mut d = FeatureMap::zeros_like(&map);
        let g = igsc_backward(&map, &[[-0.2, 1.3]], &up[..3], &mut d);
        assert_eq!(g[0], [0.0, 0.0]);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for shape in [
            ConvShape { c_in: 2, c_out: 3, kernel: 3, stride: 2, pad: 1 },
            ConvShape { c_in: 3, c_out: 2, kernel: 3, stride: 1, pad: 1 },
            ConvShape { c_in: 2, c_out: 2, kernel: 1, stride: 1, pad: 0 },
        ] {
            let input = FeatureMap {
                channels: shape.c_in,
                height: 6,
                width: 6,
                data: rand_vec(&mut rng, shape.c_in * 36),
            };
            let w = rand_vec(&mut rng, shape.weight_len());
            let b = rand_vec(&mut rng, shape.c_out);
            let out = conv2d(&input, &shape, &w, &b);
            let up = rand_vec(&mut rng, out.data.len());
            let f = |i: &FeatureMap, w: &[f64]| -> f64 {
                conv2d(i, &shape, w, &b).data.iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            let d_out = FeatureMap { data: up.clone(), ..out.clone() };
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; b.len()];
            let di = conv2d_backward(&input, &shape, &w, &d_out, &mut dw, &mut db, true).unwrap();
            let h = 1e-6;
            for i in 0..input.data.len() {
                let mut p = input.clone();
                p.data[i] += h;
                let mut m = input.clone();
                m.data[i] -= h;
                assert!(((f(&p, &w) - f(&m, &w)) / (2.0 * h) - di.data[i]).abs() < 1e-7);
            }
            for i in 0..w.len() {
                let mut p = w.clone();
                p[i] += h;
                let mut m = w.clone();
                m[i] -= h;
                assert!(((f(&input, &p) - f(&input, &m)) / (2.0 * h) - dw[i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn strided_conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = ConvShape { c_in: 2, c_out: 2, kernel: 3, stride: 2, pad: 1 };
        let input = FeatureMap { channels: 2, height: 8, width: 8, data: rand_vec(&mut rng, 128) };
        let w = rand_vec(&mut rng, shape.weight_len());
        let b = vec![0.1, -0.2];
        let out = conv2d(&input, &shape, &w, &b);
        assert_eq!((out.height, out.width), (4, 4));
        for co in 0..2 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut acc = b[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = ((oy * 2 + ky) as i64 - 1, (ox * 2 + kx) as i64 - 1);
                                if (0..8).contains(&iy) && (0..8).contains(&ix) {
                                    acc += w[((co * 2 + ci) * 3 + ky) * 3 + kx] * input.at(ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    assert!((acc - out.at(co, oy, ox)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsample_and_row_helpers() {
        let m = FeatureMap { channels: 1, height: 1, width: 2, data: vec![1.0, 2.0] };
        let u = upsample2(&m);
        assert_eq!(u.data, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        assert_eq!(upsample2_backward(&u).data, vec![4.0, 8.0]);
        let c = concat_rows(&[(&[1.0, 2.0], 1), (&[3.0, 4.0, 5.0, 6.0], 2)], 2);
        assert_eq!(c, vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(split_rows(&c, &[1, 2], 2), vec![vec![1.0, 2.0], vec![3.0, 4.0, 5.0, 6.0]]);
    }
}
