//! Unit-stride 1-D/2-D convolutions implemented with im2col + GEMM.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;

use super::{fan_in_bound, Module, Param};
use crate::Scalar;

/// Lays out the dilated receptive fields of `x` (`channels x len`) as columns,
/// giving a `(channels * kernel) x out_len` matrix.
fn im2col_1d<T: Scalar>(x: ArrayView2<T>, kernel: usize, dilation: usize, pad_left: usize, out_len: usize) -> Array2<T> {
    let (channels, len) = x.dim();
    let mut cols = Array2::zeros((channels * kernel, out_len));
    for c in 0..channels {
        let src = x.row(c);
        for j in 0..kernel {
            let offset = (j * dilation) as isize - pad_left as isize;
            let t0 = (-offset).max(0) as usize;
            let t1 = (len as isize - offset).clamp(0, out_len as isize) as usize;
            if t0 >= t1 {
                continue;
            }
            let a = (t0 as isize + offset) as usize;
            cols.row_mut(c * kernel + j)
                .slice_mut(s![t0..t1])
                .assign(&src.slice(s![a..a + (t1 - t0)]));
        }
    }
    cols
}

/// Adjoint of [`im2col_1d`].
fn col2im_1d<T: Scalar>(cols: ArrayView2<T>, channels: usize, kernel: usize, dilation: usize, pad_left: usize, len: usize) -> Array2<T> {
    let out_len = cols.ncols();
    let mut x = Array2::zeros((channels, len));
    for c in 0..channels {
        for j in 0..kernel {
            let offset = (j * dilation) as isize - pad_left as isize;
            let t0 = (-offset).max(0) as usize;
            let t1 = (len as isize - offset).clamp(0, out_len as isize) as usize;
            if t0 >= t1 {
                continue;
            }
            let a = (t0 as isize + offset) as usize;
            let mut dst = x.slice_mut(s![c, a..a + (t1 - t0)]);
            dst += &cols.slice(s![c * kernel + j, t0..t1]);
        }
    }
    x
}

/// Temporal padding of a 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// `dilation * (kernel - 1)` split evenly (left side takes the larger half).
    Same,
    /// All padding on the left.
    Causal,
    Explicit(usize, usize),
}

impl Padding {
    fn resolve(self, kernel: usize, dilation: usize) -> (usize, usize) {
        let total = dilation * (kernel - 1);
        match self {
            Padding::Same => (total - total / 2, total / 2),
            Padding::Causal => (total, 0),
            Padding::Explicit(l, r) => (l, r),
        }
    }
}

/// 1-D convolution over `channels x frames` inputs.
#[derive(Debug, Clone)]
pub struct Conv1d<T> {
    /// `out x (in * kernel)`
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    dilation: usize,
    pad_left: usize,
    pad_right: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel >= 1 && dilation >= 1);
        let (pad_left, pad_right) = padding.resolve(kernel, dilation);
        let bound = fan_in_bound(in_channels * kernel);
        Self {
            weight: Param::uniform(format!("{name}.weight"), &[out_channels, in_channels * kernel], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), &[out_channels], bound, rng),
            in_channels,
            out_channels,
            kernel,
            dilation,
            pad_left,
            pad_right,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Frames of context this layer reads to the left and right of an output frame.
    pub fn reach(&self) -> (usize, usize) {
        let total = self.dilation * (self.kernel - 1);
        (self.pad_left, total - self.pad_left)
    }

    pub fn zero_init(&mut self) {
        self.weight.value.fill(T::zero());
        self.bias.value.fill(T::zero());
    }

    fn out_len(&self, len: usize) -> usize {
        (len + self.pad_left + self.pad_right).saturating_sub(self.dilation * (self.kernel - 1))
    }

    fn w(&self) -> ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D weight")
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        assert_eq!(x.nrows(), self.in_channels, "conv1d input channels");
        let cols = im2col_1d(x.view(), self.kernel, self.dilation, self.pad_left, self.out_len(x.ncols()));
        let mut y = self.w().dot(&cols);
        let b = self.bias.value.view().into_dimensionality::<Ix1>().expect("1-D bias");
        y += &b.insert_axis(Axis(1));
        y
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `x`.
    pub fn backward(&mut self, x: &Array2<T>, grad_out: &Array2<T>) -> Array2<T> {
        let cols = im2col_1d(x.view(), self.kernel, self.dilation, self.pad_left, grad_out.ncols());
        let dw = grad_out.dot(&cols.t());
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &grad_out.sum_axis(Axis(1)).into_dyn();
        let dcols = self.w().t().dot(grad_out);
        col2im_1d(dcols.view(), self.in_channels, self.kernel, self.dilation, self.pad_left, x.ncols())
    }
}

impl<T: Scalar> Module<T> for Conv1d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Unit-stride transposed 1-D convolution: the adjoint of a [`Conv1d`] with
/// the same padding (plus a bias). With same-length padding the output has
/// as many frames as the input.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d<T> {
    /// `in x (out * kernel)`, the layout of the equivalent convolution's weight
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    dilation: usize,
    crop_left: usize,
    crop_right: usize,
}

impl<T: Scalar> ConvTranspose1d<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel >= 1 && dilation >= 1);
        let (crop_left, crop_right) = padding.resolve(kernel, dilation);
        let bound = fan_in_bound(in_channels * kernel);
        Self {
            weight: Param::uniform(format!("{name}.weight"), &[in_channels, out_channels * kernel], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), &[out_channels], bound, rng),
            in_channels,
            out_channels,
            kernel,
            dilation,
            crop_left,
            crop_right,
        }
    }

    pub fn reach(&self) -> (usize, usize) {
        // output frame s reads input frames s - (span - crop_left) ..= s + crop_left
        let total = self.dilation * (self.kernel - 1);
        (total - self.crop_left, self.crop_left)
    }

    fn out_len(&self, len: usize) -> usize {
        (len + self.dilation * (self.kernel - 1)).saturating_sub(self.crop_left + self.crop_right)
    }

    fn w(&self) -> ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D weight")
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        assert_eq!(x.nrows(), self.in_channels, "conv-transpose input channels");
        let cols = self.w().t().dot(x);
        let mut y = col2im_1d(cols.view(), self.out_channels, self.kernel, self.dilation, self.crop_left, self.out_len(x.ncols()));
        let b = self.bias.value.view().into_dimensionality::<Ix1>().expect("1-D bias");
        y += &b.insert_axis(Axis(1));
        y
    }

    pub fn backward(&mut self, x: &Array2<T>, grad_out: &Array2<T>) -> Array2<T> {
        let cols = im2col_1d(grad_out.view(), self.kernel, self.dilation, self.crop_left, x.ncols());
        self.weight.grad += &x.dot(&cols.t()).into_dyn();
        self.bias.grad += &grad_out.sum_axis(Axis(1)).into_dyn();
        self.w().dot(&cols)
    }
}

impl<T: Scalar> Module<T> for ConvTranspose1d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// `channels x height x width` receptive fields as a `(c * k * k) x (h * w)` matrix.
fn im2col_2d<T: Scalar>(x: &Array3<T>, kernel: usize) -> Array2<T> {
    let (channels, h, w) = x.dim();
    let pad = (kernel / 2) as isize;
    let mut cols = Array2::zeros((channels * kernel * kernel, h * w));
    for c in 0..channels {
        for ki in 0..kernel {
            let di = ki as isize - pad;
            for kj in 0..kernel {
                let dj = kj as isize - pad;
                let row_idx = (c * kernel + ki) * kernel + kj;
                let mut row = cols.row_mut(row_idx);
                let j0 = (-dj).max(0) as usize;
                let j1 = (w as isize - dj).clamp(0, w as isize) as usize;
                if j0 >= j1 {
                    continue;
                }
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let sj = (j0 as isize + dj) as usize;
                    row.slice_mut(s![i * w + j0..i * w + j1])
                        .assign(&x.slice(s![c, si as usize, sj..sj + (j1 - j0)]));
                }
            }
        }
    }
    cols
}

fn col2im_2d<T: Scalar>(cols: &Array2<T>, channels: usize, kernel: usize, h: usize, w: usize) -> Array3<T> {
    let pad = (kernel / 2) as isize;
    let mut x = Array3::zeros((channels, h, w));
    for c in 0..channels {
        for ki in 0..kernel {
            let di = ki as isize - pad;
            for kj in 0..kernel {
                let dj = kj as isize - pad;
                let row = cols.row((c * kernel + ki) * kernel + kj);
                let j0 = (-dj).max(0) as usize;
                let j1 = (w as isize - dj).clamp(0, w as isize) as usize;
                if j0 >= j1 {
                    continue;
                }
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let sj = (j0 as isize + dj) as usize;
                    let mut dst = x.slice_mut(s![c, si as usize, sj..sj + (j1 - j0)]);
                    dst += &row.slice(s![i * w + j0..i * w + j1]);
                }
            }
        }
    }
    x
}

/// Same-padded, unit-stride 2-D convolution with an odd square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "conv2d kernel must be odd");
        let fan_in = in_channels * kernel * kernel;
        let bound = fan_in_bound(fan_in);
        Self {
            weight: Param::uniform(format!("{name}.weight"), &[out_channels, fan_in], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), &[out_channels], bound, rng),
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn zero_init(&mut self) {
        self.weight.value.fill(T::zero());
        self.bias.value.fill(T::zero());
    }

    fn w(&self) -> ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D weight")
    }

    fn bias(&self) -> Array1<T> {
        self.bias.value.clone().into_dimensionality::<Ix1>().expect("1-D bias")
    }

    pub fn forward(&self, x: &Array3<T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv2d input channels");
        let y = if self.kernel == 1 {
            let flat = x.view().into_shape_with_order((c, h * w)).expect("contiguous");
            self.w().dot(&flat)
        } else {
            self.w().dot(&im2col_2d(x, self.kernel))
        };
        let mut y = y.into_shape_with_order((self.out_channels, h, w)).expect("contiguous");
        y += &self.bias().insert_axis(Axis(1)).insert_axis(Axis(2));
        y
    }

    pub fn backward(&mut self, x: &Array3<T>, grad_out: &Array3<T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        let g = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_channels, h * w))
            .expect("contiguous");
        self.bias.grad += &g.sum_axis(Axis(1)).into_dyn();
        if self.kernel == 1 {
            let flat = x.view().into_shape_with_order((c, h * w)).expect("contiguous");
            self.weight.grad += &g.dot(&flat.t()).into_dyn();
            self.w()
                .t()
                .dot(&g)
                .into_shape_with_order((c, h, w))
                .expect("contiguous")
        } else {
            let cols = im2col_2d(x, self.kernel);
            self.weight.grad += &g.dot(&cols.t()).into_dyn();
            let dcols = self.w().t().dot(&g);
            col2im_2d(&dcols, c, self.kernel, h, w)
        }
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn2(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
    }

    /// Direct-summation oracle for a padded, dilated 1-D convolution.
    fn conv1d_oracle(w: &Array2<f64>, b: &[f64], x: &Array2<f64>, k: usize, d: usize, pl: usize, out_len: usize) -> Array2<f64> {
        let (cin, len) = x.dim();
        Array2::from_shape_fn((w.nrows(), out_len), |(o, t)| {
            let mut acc = b[o];
            for c in 0..cin {
                for j in 0..k {
                    let src = t as isize + (j * d) as isize - pl as isize;
                    if src >= 0 && (src as usize) < len {
                        acc += w[[o, c * k + j]] * x[[c, src as usize]];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv1d_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, d, pad) in [(7, 1, Padding::Same), (7, 9, Padding::Same), (2, 1, Padding::Causal), (3, 2, Padding::Explicit(1, 0))] {
            let conv = Conv1d::<f64>::new("c", 3, 4, k, d, pad, &mut rng);
            let x = randn2(3, 20, &mut rng);
            let y = conv.forward(&x);
            let w = conv.weight.value.clone().into_dimensionality::<Ix2>().unwrap();
            let b: Vec<f64> = conv.bias.value.iter().copied().collect();
            let expect = conv1d_oracle(&w, &b, &x, k, d, conv.pad_left, y.ncols());
            assert!((&y - &expect).iter().all(|v| v.abs() < 1e-12));
            if pad != Padding::Explicit(1, 0) {
                assert_eq!(y.ncols(), 20);
            }
        }
    }

    #[test]
    fn conv_transpose_matches_scatter_definition_and_flipped_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cin, cout, k, len) = (3, 2, 7, 15);
        let mut tconv = ConvTranspose1d::<f64>::new("t", cin, cout, k, 1, Padding::Same, &mut rng);
        tconv.bias.value.fill(0.0);
        let x = randn2(cin, len, &mut rng);
        let y = tconv.forward(&x);
        assert_eq!(y.dim(), (cout, len));

        // scatter form: y[o, t + j - p] += W[i, o, j] x[i, t]
        let w = tconv.weight.value.clone().into_dimensionality::<Ix2>().unwrap();
        let p = (k - 1) / 2;
        let mut scatter = Array2::<f64>::zeros((cout, len));
        for i in 0..cin {
            for o in 0..cout {
                for j in 0..k {
                    for t in 0..len {
                        let dst = t as isize + j as isize - p as isize;
                        if dst >= 0 && (dst as usize) < len {
                            scatter[[o, dst as usize]] += w[[i, o * k + j]] * x[[i, t]];
                        }
                    }
                }
            }
        }
        assert!((&y - &scatter).iter().all(|v| v.abs() < 1e-12));

        // ordinary conv with flipped kernel and swapped channel roles
        let flipped = Array2::from_shape_fn((cout, cin * k), |(o, col)| {
            let (i, j) = (col / k, col % k);
            w[[i, o * k + (k - 1 - j)]]
        });
        let conv = conv1d_oracle(&flipped, &vec![0.0; cout], &x, k, 1, p, len);
        assert!((&y - &conv).iter().all(|v| v.abs() < 1e-12));
    }

    fn check_gradients_1d<F, B>(x: &Array2<f64>, forward: F, mut backward: B)
    where
        F: Fn(&Array2<f64>) -> Array2<f64>,
        B: FnMut(&Array2<f64>, &Array2<f64>) -> Array2<f64>,
    {
        let y = forward(x);
        let probe = Array2::from_shape_fn(y.dim(), |(i, j)| ((i * 13 + j * 7) % 11) as f64 / 5.0 - 1.0);
        let gx = backward(x, &probe);
        let h = 1e-6;
        for idx in [(0, 0), (1, 3), (2, x.ncols() - 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = ((forward(&xp) - forward(&xm)) * &probe).sum() / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-6, "{fd} vs {}", gx[idx]);
        }
    }

    #[test]
    fn conv1d_and_transpose_input_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn2(3, 12, &mut rng);
        let mut conv = Conv1d::<f64>::new("c", 3, 2, 7, 3, Padding::Same, &mut rng);
        let frozen = conv.clone();
        check_gradients_1d(&x, |x| frozen.forward(x), |x, g| conv.backward(x, g));
        let mut tconv = ConvTranspose1d::<f64>::new("t", 3, 2, 2, 1, Padding::Causal, &mut rng);
        let frozen = tconv.clone();
        check_gradients_1d(&x, |x| frozen.forward(x), |x, g| tconv.backward(x, g));
    }

    #[test]
    fn conv_weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn2(2, 9, &mut rng);
        let mut tconv = ConvTranspose1d::<f64>::new("t", 2, 3, 7, 1, Padding::Same, &mut rng);
        let probe = randn2(3, 9, &mut rng);
        tconv.backward(&x, &probe);
        let h = 1e-6;
        for i in [0, 5, 20, 41] {
            let mut p = tconv.clone();
            p.weight.value.as_slice_mut().unwrap()[i] += h;
            let mut m = tconv.clone();
            m.weight.value.as_slice_mut().unwrap()[i] -= h;
            let fd = ((p.forward(&x) - m.forward(&x)) * &probe).sum() / (2.0 * h);
            assert!((fd - tconv.weight.grad.as_slice().unwrap()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array3::from_shape_fn((2, 5, 6), |_| StandardNormal.sample(&mut rng));
        for k in [1, 3] {
            let mut conv = Conv2d::<f64>::new("c", 2, 3, k, &mut rng);
            let y = conv.forward(&x);
            assert_eq!(y.dim(), (3, 5, 6));
            let probe = Array3::from_shape_fn(y.dim(), |_| StandardNormal.sample(&mut rng));
            let gx = conv.backward(&x, &probe);
            let h = 1e-6;
            for idx in [(0, 0, 0), (1, 2, 3), (1, 4, 5)] {
                let mut xp = x.clone();
                xp[idx] += h;
                let mut xm = x.clone();
                xm[idx] -= h;
                let fd = ((conv.forward(&xp) - conv.forward(&xm)) * &probe).sum() / (2.0 * h);
                assert!((fd - gx[idx]).abs() < 1e-6);
            }
            for i in [0, conv.weight.len() - 1] {
                let mut p = conv.clone();
                p.weight.value.as_slice_mut().unwrap()[i] += h;
                let mut m = conv.clone();
                m.weight.value.as_slice_mut().unwrap()[i] -= h;
                let fd = ((p.forward(&x) - m.forward(&x)) * &probe).sum() / (2.0 * h);
                assert!((fd - conv.weight.grad.as_slice().unwrap()[i]).abs() < 1e-6);
            }
        }
    }
}
