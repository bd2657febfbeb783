//! Dense and convolutional building blocks with hand-written backward passes.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Affine map `y = W x + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Normal init with standard deviation `gain / sqrt(in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(out: usize, inp: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain / (inp as f64).sqrt();
        Self {
            weight: random_normal((out, inp), std, rng),
            bias: Array1::zeros(out),
        }
    }

    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.out_dim(), self.in_dim())
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView1<f64>, gy: ArrayView1<f64>, grad: &mut Linear) -> Array1<f64> {
        outer_add(&mut grad.weight, gy, x);
        grad.bias += &gy;
        t_dot(&self.weight, gy)
    }
}

pub(crate) fn random_normal<R: Rng + ?Sized>(shape: (usize, usize), std: f64, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    Array2::from_shape_simple_fn(shape, || normal.sample(rng))
}

/// `w^T g`, accumulated row by row (much faster than a strided gemv).
pub fn t_dot(w: &Array2<f64>, g: ArrayView1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(w.ncols());
    for (row, &gi) in w.rows().into_iter().zip(g.iter()) {
        if gi != 0.0 {
            out.scaled_add(gi, &row);
        }
    }
    out
}

/// `acc += a b^T`.
pub(crate) fn outer_add(acc: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (mut row, &ai) in acc.rows_mut().into_iter().zip(a.iter()) {
        if ai != 0.0 {
            row.scaled_add(ai, &b);
        }
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// 3x3 convolution, stride 1, zero padding 1. Weight shape `(out, in * 9)`,
/// column index `c * 9 + ky * 3 + kx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv3x3 {
    /// He-normal init.
    pub fn init<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Self {
        let std = (2.0 / (inp * 9) as f64).sqrt();
        Self {
            weight: random_normal((out, inp * 9), std, rng),
            bias: Array1::zeros(out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    /// Returns the output and the unfolded input needed by [`Conv3x3::backward`].
    pub fn forward(&self, input: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = input.dim();
        let cols = im2col(input);
        let mut out = self.weight.dot(&cols);
        out += &self.bias.view().insert_axis(Axis(1));
        let out = out
            .into_shape_with_order((self.out_channels(), h, w))
            .expect("conv output shape");
        (out, cols)
    }

    /// Accumulates parameter gradients; returns the input gradient when requested.
    pub fn backward(
        &self,
        cols: &Array2<f64>,
        gout: &Array3<f64>,
        grad: &mut Conv3x3,
        need_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (o, h, w) = gout.dim();
        let g2 = gout
            .view()
            .into_shape_with_order((o, h * w))
            .expect("contiguous gradient");
        grad.weight += &g2.dot(&cols.t());
        grad.bias += &g2.sum_axis(Axis(1));
        need_input_grad.then(|| col2im(&self.weight.t().dot(&g2), self.in_channels(), h, w))
    }
}

fn im2col(input: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = input.dim();
    let mut cols = Array2::zeros((c * 9, h * w));
    for ch in 0..c {
        let plane = input.slice(s![ch, .., ..]);
        for ky in 0..3 {
            for kx in 0..3 {
                let mut row = cols.row_mut(ch * 9 + ky * 3 + kx);
                let row = row.as_slice_mut().expect("row-major");
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        row[y * w + x] = plane[[sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = cols.row(ch * 9 + ky * 3 + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[[ch, sy as usize, sx as usize]] += row[y * w + x];
                    }
                }
            }
        }
    }
    out
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of ReLU given its output.
pub fn relu_backward(out: &Array3<f64>, gout: &Array3<f64>) -> Array3<f64> {
    let mut g = gout.clone();
    g.zip_mut_with(out, |gi, &o| {
        if o <= 0.0 {
            *gi = 0.0
        }
    });
    g
}

/// 2x2 max pooling with stride 2 (trailing odd row/column dropped).
/// Returns the pooled map and the flat source index of each maximum.
pub fn maxpool2(input: &Array3<f64>) -> (Array3<f64>, Vec<usize>) {
    let (c, h, w) = input.dim();
    let (oh, ow) = ((h / 2).max(1), (w / 2).max(1));
    let mut out = Array3::zeros((c, oh, ow));
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (sy, sx) = (2 * y + dy, 2 * x + dx);
                        if sy >= h || sx >= w {
                            continue;
                        }
                        let v = input[[ch, sy, sx]];
                        if v > best {
                            best = v;
                            best_i = (ch * h + sy) * w + sx;
                        }
                    }
                }
                out[[ch, y, x]] = best;
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(input_dim: (usize, usize, usize), arg: &[usize], gout: &Array3<f64>) -> Array3<f64> {
    let mut g = Array3::zeros(input_dim);
    let flat = g.as_slice_mut().expect("fresh array is contiguous");
    for (&i, &v) in arg.iter().zip(gout.iter()) {
        flat[i] += v;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_dot_matches_transposed_product() {
        let w = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 - 5.0);
        let g = Array1::from(vec![0.5, 0.0, -2.0]);
        assert_eq!(t_dot(&w, g.view()), w.t().dot(&g));
    }
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(input: &Array3<f64>, conv: &Conv3x3) -> Array3<f64> {
        let (c, h, w) = input.dim();
        let o = conv.out_channels();
        let mut out = Array3::zeros((o, h, w));
        for oc in 0..o {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = conv.bias[oc];
                    for ic in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky - 1;
                                let sx = x as isize + kx - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += conv.weight[[oc, ic * 9 + (ky * 3 + kx) as usize]]
                                    * input[[ic, sy as usize, sx as usize]];
                            }
                        }
                    }
                    out[[oc, y, x]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv3x3::init(4, 3, &mut rng);
        conv.bias = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let input = Array3::from_shape_simple_fn((3, 5, 6), || rng.random_range(-1.0..1.0));
        let (fast, _) = conv.forward(&input);
        let slow = naive_conv(&input, &conv);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv3x3::init(2, 2, &mut rng);
        let input = Array3::from_shape_simple_fn((2, 4, 3), || rng.random_range(-1.0..1.0));
        let probe = Array3::from_shape_simple_fn((2, 4, 3), || rng.random_range(-1.0..1.0));
        let loss = |c: &Conv3x3, x: &Array3<f64>| (c.forward(x).0 * &probe).sum();

        let (_, cols) = conv.forward(&input);
        let mut grad = conv.zeros_like();
        let gin = conv.backward(&cols, &probe, &mut grad, true).unwrap();

        let h = 1e-6;
        for idx in [(0, 0), (1, 7), (0, 17)] {
            let mut plus = conv.clone();
            plus.weight[idx] += h;
            let mut minus = conv.clone();
            minus.weight[idx] -= h;
            let fd = (loss(&plus, &input) - loss(&minus, &input)) / (2.0 * h);
            assert!((fd - grad.weight[idx]).abs() < 1e-6);
        }
        for idx in [(0, 0, 0), (1, 3, 2), (0, 2, 1)] {
            let mut plus = input.clone();
            plus[idx] += h;
            let mut minus = input.clone();
            minus[idx] -= h;
            let fd = (loss(&conv, &plus) - loss(&conv, &minus)) / (2.0 * h);
            assert!((fd - gin[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let input = Array3::from_shape_vec((1, 2, 4), vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]).unwrap();
        let (out, arg) = maxpool2(&input);
        assert_eq!(out.as_slice().unwrap(), &[5.0, 9.0]);
        let g = maxpool2_backward(input.dim(), &arg, &Array3::from_elem((1, 1, 2), 1.0));
        assert_eq!(g[[0, 0, 1]], 1.0);
        assert_eq!(g[[0, 1, 2]], 1.0);
        assert_eq!(g.sum(), 2.0);
    }

    #[test]
    fn softmax_is_stable() {
        let a = softmax(&[1000.0, 1000.0]);
        assert_eq!(a, vec![0.5, 0.5]);
        let b = softmax(&[0.0, 2f64.ln()]);
        assert!((b[1] - 2.0 / 3.0).abs() < 1e-15);
    }
}
