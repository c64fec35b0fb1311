//! NCHW f32 tensors and the layers the backbones are built from.
//!
//! Every layer has three entry points: `forward` (training mode, caches what
//! `backward` needs and updates batch-norm running statistics), `infer`
//! (pure, uses running statistics) and `backward` (accumulates parameter
//! gradients and returns the input gradient).

#![allow(clippy::needless_range_loop)]

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    /// `[n, c, h, w]`
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Tensor {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape/data mismatch"
        );
        Tensor { shape, data }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows `[start, end)` of the batch.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor {
            shape: [end - start, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * per..end * per].to_vec(),
        }
    }
}

/// A trainable parameter and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Param {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param { shape, value, grad }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Param {
        let n = shape.iter().product();
        Param::new(shape, vec![v; n])
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Row-major GEMM `c = a * b + beta * c` with arbitrary strides on `a`/`b`.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(m == 0 || k == 0 || (m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<(Vec<f32>, [usize; 4])>,
}

impl Conv2d {
    /// Kaiming-normal (fan-out, ReLU gain) initialization, no bias.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Conv2d {
        let fan_out = (out_channels * kernel * kernel) as f32;
        let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("positive std");
        let n = out_channels * in_channels * kernel * kernel;
        let value = (0..n).map(|_| normal.sample(rng)).collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new(vec![out_channels, in_channels, kernel, kernel], value),
            bias: None,
            cache: None,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// `[C*k*k, N*Ho*Wo]` patch matrix.
    fn im2col(&self, x: &Tensor) -> Vec<f32> {
        let [n, c, h, w] = x.shape;
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let cols_n = n * ho * wo;
        let mut cols = vec![0f32; c * k * k * cols_n];
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for b in 0..n {
                        let src = &x.data[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                            let out_row = &mut dst[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, o) in out_row.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    *o = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], shape: [usize; 4]) -> Tensor {
        let [n, c, h, w] = shape;
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let cols_n = n * ho * wo;
        let mut x = Tensor::zeros(shape);
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * cols_n..(row + 1) * cols_n];
                    for b in 0..n {
                        let dst = &mut x.data[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = &src[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                            for (ox, &g) in in_row.iter().enumerate() {
                                let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[iy as usize * w + ix as usize] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    fn apply(&self, x: &Tensor, cols: &[f32]) -> Tensor {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let ckk = c * self.kernel * self.kernel;
        let cols_n = n * ho * wo;
        let mut mat = vec![0f32; self.out_channels * cols_n];
        sgemm(
            self.out_channels,
            ckk,
            cols_n,
            &self.weight.value,
            (ckk, 1),
            cols,
            (cols_n, 1),
            0.0,
            &mut mat,
        );
        // [O, N*HW] -> [N, O, HW]
        let hw = ho * wo;
        let mut out = Tensor::zeros([n, self.out_channels, ho, wo]);
        for o in 0..self.out_channels {
            let bias = self.bias.as_ref().map_or(0.0, |b| b.value[o]);
            for b in 0..n {
                let src = &mat[o * cols_n + b * hw..o * cols_n + (b + 1) * hw];
                let dst = &mut out.data
                    [(b * self.out_channels + o) * hw..(b * self.out_channels + o + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
        out
    }

    pub fn forward(&mut self, x: Tensor) -> Tensor {
        let cols = self.im2col(&x);
        let out = self.apply(&x, &cols);
        self.cache = Some((cols, x.shape));
        out
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let cols = self.im2col(x);
        self.apply(x, &cols)
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let (cols, in_shape) = self.cache.take().expect("conv backward without forward");
        let [n, o, ho, wo] = grad.shape;
        let hw = ho * wo;
        let cols_n = n * hw;
        let ckk = self.in_channels * self.kernel * self.kernel;
        // [N, O, HW] -> [O, N*HW]
        let mut gmat = vec![0f32; o * cols_n];
        for b in 0..n {
            for oc in 0..o {
                let src = &grad.data[(b * o + oc) * hw..(b * o + oc + 1) * hw];
                gmat[oc * cols_n + b * hw..oc * cols_n + (b + 1) * hw].copy_from_slice(src);
            }
        }
        if let Some(bias) = &mut self.bias {
            for oc in 0..o {
                bias.grad[oc] += gmat[oc * cols_n..(oc + 1) * cols_n].iter().sum::<f32>();
            }
        }
        // dW += gmat * cols^T
        sgemm(
            o,
            cols_n,
            ckk,
            &gmat,
            (cols_n, 1),
            &cols,
            (1, cols_n),
            1.0,
            &mut self.weight.grad,
        );
        // dcols = W^T * gmat
        let mut dcols = vec![0f32; ckk * cols_n];
        sgemm(
            ckk,
            o,
            cols_n,
            &self.weight.value,
            (1, ckk),
            &gmat,
            (cols_n, 1),
            0.0,
            &mut dcols,
        );
        self.col2im(&dcols, in_shape)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<(Vec<f32>, Vec<f32>, [usize; 4])>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            channels,
            weight: Param::filled(vec![channels], 1.0),
            bias: Param::filled(vec![channels], 0.0),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: Tensor) -> Tensor {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.channels, "batch norm channels");
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut xhat = vec![0f32; x.len()];
        let mut inv_stds = vec![0f32; c];
        let mut out = Tensor::zeros(x.shape);
        for ch in 0..c {
            let planes = (0..n).map(|b| (b * c + ch) * hw);
            let mut sum = 0f64;
            for start in planes.clone() {
                sum += x.data[start..start + hw]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0f64;
            for start in planes.clone() {
                sq += x.data[start..start + hw]
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>();
            }
            let var = sq / m;
            let inv_std = 1.0 / (var + self.eps as f64).sqrt();
            inv_stds[ch] = inv_std as f32;
            let (g, bta) = (self.weight.value[ch], self.bias.value[ch]);
            for start in planes {
                for i in start..start + hw {
                    let xh = ((x.data[i] as f64 - mean) * inv_std) as f32;
                    xhat[i] = xh;
                    out.data[i] = g * xh + bta;
                }
            }
            let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
            let mom = self.momentum;
            self.running_mean[ch] = (1.0 - mom) * self.running_mean[ch] + mom * mean as f32;
            self.running_var[ch] = (1.0 - mom) * self.running_var[ch] + mom * unbiased as f32;
        }
        self.cache = Some((xhat, inv_stds, x.shape));
        out
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.channels, "batch norm channels");
        let hw = h * w;
        let mut out = x.clone();
        for ch in 0..c {
            let scale = self.weight.value[ch] / (self.running_var[ch] + self.eps).sqrt();
            let shift = self.bias.value[ch] - self.running_mean[ch] * scale;
            for b in 0..n {
                let start = (b * c + ch) * hw;
                for v in &mut out.data[start..start + hw] {
                    *v = *v * scale + shift;
                }
            }
        }
        out
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let (xhat, inv_stds, shape) = self
            .cache
            .take()
            .expect("batch norm backward without forward");
        let [n, c, h, w] = shape;
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut dx = Tensor::zeros(shape);
        for ch in 0..c {
            let planes = (0..n).map(|b| (b * c + ch) * hw);
            let (mut sum_dy, mut sum_dy_xhat) = (0f64, 0f64);
            for start in planes.clone() {
                for i in start..start + hw {
                    sum_dy += grad.data[i] as f64;
                    sum_dy_xhat += (grad.data[i] * xhat[i]) as f64;
                }
            }
            self.weight.grad[ch] += sum_dy_xhat as f32;
            self.bias.grad[ch] += sum_dy as f32;
            let g = self.weight.value[ch] as f64;
            let k = g * inv_stds[ch] as f64 / m;
            for start in planes {
                for i in start..start + hw {
                    dx.data[i] = (k
                        * (m * grad.data[i] as f64 - sum_dy - xhat[i] as f64 * sum_dy_xhat))
                        as f32;
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, mut x: Tensor) -> Tensor {
        let mask = x.data.iter().map(|&v| v > 0.0).collect();
        x.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.mask = Some(mask);
        x
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        out
    }

    pub fn backward(&mut self, mut grad: Tensor) -> Tensor {
        let mask = self.mask.take().expect("relu backward without forward");
        for (g, keep) in grad.data.iter_mut().zip(mask) {
            if !keep {
                *g = 0.0;
            }
        }
        grad
    }
}

/// Max pooling; padded positions never win.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> MaxPool2d {
        MaxPool2d {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    fn pool(&self, x: &Tensor) -> (Tensor, Vec<usize>) {
        let [n, c, h, w] = x.shape;
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if x.data[i] > best || best_i == usize::MAX {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out.data[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        (out, argmax)
    }

    pub fn forward(&mut self, x: Tensor) -> Tensor {
        let (out, argmax) = self.pool(&x);
        self.cache = Some((argmax, x.shape));
        out
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.pool(x).0
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let (argmax, shape) = self
            .cache
            .take()
            .expect("max pool backward without forward");
        let mut dx = Tensor::zeros(shape);
        for (g, &i) in grad.data.iter().zip(&argmax) {
            dx.data[i] += g;
        }
        dx
    }
}

/// Mean over the spatial dimensions: `[n, c, h, w] -> [n, c, 1, 1]`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    in_shape: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn forward(&mut self, x: Tensor) -> Tensor {
        self.in_shape = Some(x.shape);
        self.infer(&x)
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape;
        let hw = h * w;
        let data = x
            .data
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        Tensor::from_vec([n, c, 1, 1], data)
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let shape = self
            .in_shape
            .take()
            .expect("avg pool backward without forward");
        let hw = shape[2] * shape[3];
        let scale = 1.0 / hw as f32;
        let data = grad
            .data
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * scale, hw))
            .collect();
        Tensor::from_vec(shape, data)
    }
}

/// ResNet basic block: two 3x3 convs with a (possibly projected) shortcut.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    relu1: Relu,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub downsample: Option<(Conv2d, BatchNorm2d)>,
    relu_out: Relu,
}

impl BasicBlock {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> BasicBlock {
        let downsample = (stride != 1 || in_channels != out_channels).then(|| {
            (
                Conv2d::new(in_channels, out_channels, 1, stride, 0, rng),
                BatchNorm2d::new(out_channels),
            )
        });
        BasicBlock {
            conv1: Conv2d::new(in_channels, out_channels, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(out_channels),
            relu1: Relu::default(),
            conv2: Conv2d::new(out_channels, out_channels, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(out_channels),
            downsample,
            relu_out: Relu::default(),
        }
    }

    pub fn forward(&mut self, x: Tensor) -> Tensor {
        let shortcut = match &mut self.downsample {
            Some((conv, bn)) => bn.forward(conv.forward(x.clone())),
            None => x.clone(),
        };
        let h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x)));
        let mut h = self.bn2.forward(self.conv2.forward(h));
        h.data
            .iter_mut()
            .zip(&shortcut.data)
            .for_each(|(a, b)| *a += b);
        self.relu_out.forward(h)
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.infer(&conv.infer(x)),
            None => x.clone(),
        };
        let h = self.relu1.infer(&self.bn1.infer(&self.conv1.infer(x)));
        let mut h = self.bn2.infer(&self.conv2.infer(&h));
        h.data
            .iter_mut()
            .zip(&shortcut.data)
            .for_each(|(a, b)| *a += b);
        self.relu_out.infer(&h)
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let g = self.relu_out.backward(grad);
        let g_short = match &mut self.downsample {
            Some((conv, bn)) => conv.backward(bn.backward(g.clone())),
            None => g.clone(),
        };
        let g = self.bn2.backward(g);
        let g = self.conv2.backward(g);
        let g = self.relu1.backward(g);
        let g = self.bn1.backward(g);
        let mut dx = self.conv1.backward(g);
        dx.data
            .iter_mut()
            .zip(&g_short.data)
            .for_each(|(a, b)| *a += b);
        dx
    }
}

/// Named tensor slot visited for optimization and serialization.
pub enum Slot<'a> {
    Param(&'a mut Param),
    Buffer(&'a mut Vec<f32>),
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Relu(Relu),
    MaxPool(MaxPool2d),
    GlobalAvgPool(GlobalAvgPool),
    Block(Box<BasicBlock>),
}

impl Layer {
    pub fn forward(&mut self, x: Tensor) -> Tensor {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x),
            Layer::Relu(l) => l.forward(x),
            Layer::MaxPool(l) => l.forward(x),
            Layer::GlobalAvgPool(l) => l.forward(x),
            Layer::Block(l) => l.forward(x),
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Conv(l) => l.infer(x),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::Relu(l) => l.infer(x),
            Layer::MaxPool(l) => l.infer(x),
            Layer::GlobalAvgPool(l) => l.infer(x),
            Layer::Block(l) => l.infer(x),
        }
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        match self {
            Layer::Conv(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::MaxPool(l) => l.backward(grad),
            Layer::GlobalAvgPool(l) => l.backward(grad),
            Layer::Block(l) => l.backward(grad),
        }
    }

    /// Visits parameters and buffers under torchvision-style names.
    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        fn conv(prefix: &str, c: &mut Conv2d, f: &mut dyn FnMut(String, Slot<'_>)) {
            f(format!("{prefix}.weight"), Slot::Param(&mut c.weight));
            if let Some(b) = &mut c.bias {
                f(format!("{prefix}.bias"), Slot::Param(b));
            }
        }
        fn bn(prefix: &str, b: &mut BatchNorm2d, f: &mut dyn FnMut(String, Slot<'_>)) {
            f(format!("{prefix}.weight"), Slot::Param(&mut b.weight));
            f(format!("{prefix}.bias"), Slot::Param(&mut b.bias));
            f(
                format!("{prefix}.running_mean"),
                Slot::Buffer(&mut b.running_mean),
            );
            f(
                format!("{prefix}.running_var"),
                Slot::Buffer(&mut b.running_var),
            );
        }
        match self {
            Layer::Conv(c) => conv(prefix, c, f),
            Layer::BatchNorm(b) => bn(prefix, b, f),
            Layer::Block(block) => {
                conv(&format!("{prefix}.conv1"), &mut block.conv1, f);
                bn(&format!("{prefix}.bn1"), &mut block.bn1, f);
                conv(&format!("{prefix}.conv2"), &mut block.conv2, f);
                bn(&format!("{prefix}.bn2"), &mut block.bn2, f);
                if let Some((c, b)) = &mut block.downsample {
                    conv(&format!("{prefix}.downsample.0"), c, f);
                    bn(&format!("{prefix}.downsample.1"), b, f);
                }
            }
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::GlobalAvgPool(_) => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Inputs whose values are pairwise at least `gap` apart and away from 0,
    /// so finite differences never cross a ReLU kink or change a max.
    fn spaced_tensor(shape: [usize; 4], gap: f32, rng: &mut ChaCha8Rng) -> Tensor {
        use rand::seq::SliceRandom;
        let n: usize = shape.iter().product();
        let mut vals: Vec<f32> = (0..n)
            .map(|i| (i as f32 - n as f32 / 2.0 + 0.5) * gap)
            .collect();
        vals.shuffle(rng);
        Tensor::from_vec(shape, vals)
    }

    /// Loss = sum(out * r) in f64; returns (input grad analytic, fd).
    fn check_input_grad(layer: &mut Layer, x: &Tensor, h: f32, rng: &mut ChaCha8Rng) -> f64 {
        let probe = layer.clone().forward(x.clone());
        let r = random_tensor(probe.shape, rng);
        let loss = |l: &mut Layer, x: &Tensor| -> f64 {
            let out = l.clone().forward(x.clone());
            out.data
                .iter()
                .zip(&r.data)
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        let mut l = layer.clone();
        l.forward(x.clone());
        let analytic = l.backward(r.clone());
        let mut num = 0f64;
        let mut den = 0f64;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (loss(layer, &xp) - loss(layer, &xm)) / (2.0 * h as f64);
            num += (fd - analytic.data[i] as f64).powi(2);
            den += (fd + analytic.data[i] as f64).powi(2);
        }
        (num / den.max(1e-30)).sqrt()
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut r = rng();
        let conv = Conv2d::new(2, 3, 3, 2, 1, &mut r);
        let x = random_tensor([2, 2, 5, 6], &mut r);
        let out = conv.infer(&x);
        assert_eq!(out.shape, [2, 3, 3, 3]);
        for b in 0..2 {
            for o in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = 0f64;
                        for c in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if !(0..5).contains(&iy) || !(0..6).contains(&ix) {
                                        continue;
                                    }
                                    let xv =
                                        x.data[((b * 2 + c) * 5 + iy as usize) * 6 + ix as usize];
                                    let wv = conv.weight.value[((o * 2 + c) * 3 + ki) * 3 + kj];
                                    acc += (xv * wv) as f64;
                                }
                            }
                        }
                        let got = out.data[((b * 3 + o) * 3 + oy) * 3 + ox] as f64;
                        assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut r = rng();
        let mut layer = Layer::Conv(Conv2d::new(2, 3, 3, 1, 1, &mut r));
        let x = random_tensor([2, 2, 4, 4], &mut r);
        assert!(check_input_grad(&mut layer, &x, 1e-2, &mut r) < 1e-3);

        // weight gradient against finite differences
        let Layer::Conv(conv) = &layer else {
            unreachable!()
        };
        let rr = random_tensor([2, 3, 4, 4], &mut r);
        let mut c = conv.clone();
        c.forward(x.clone());
        c.backward(rr.clone());
        let loss = |c: &Conv2d| -> f64 {
            c.infer(&x)
                .data
                .iter()
                .zip(&rr.data)
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        for i in [0, 7, 20, 53] {
            let (mut p, mut m) = (conv.clone(), conv.clone());
            p.weight.value[i] += 1e-2;
            m.weight.value[i] -= 1e-2;
            let fd = (loss(&p) - loss(&m)) / 2e-2;
            assert!(
                (fd - c.weight.grad[i] as f64).abs() < 1e-3 * (1.0 + fd.abs()),
                "{fd} vs {}",
                c.weight.grad[i]
            );
        }
    }

    #[test]
    fn strided_conv_gradients() {
        let mut r = rng();
        let mut layer = Layer::Conv(Conv2d::new(3, 2, 3, 2, 1, &mut r));
        let x = random_tensor([2, 3, 5, 5], &mut r);
        assert!(check_input_grad(&mut layer, &x, 1e-2, &mut r) < 1e-3);
        let mut layer = Layer::Conv(Conv2d::new(3, 2, 1, 2, 0, &mut r));
        assert!(check_input_grad(&mut layer, &x, 1e-2, &mut r) < 1e-3);
    }

    #[test]
    fn batch_norm_gradients() {
        let mut r = rng();
        let mut bn = BatchNorm2d::new(3);
        bn.weight.value = vec![0.5, 1.5, -1.0];
        bn.bias.value = vec![0.1, 0.0, -0.2];
        let x = random_tensor([3, 3, 2, 2], &mut r);
        let err = check_input_grad(&mut Layer::BatchNorm(bn.clone()), &x, 1e-2, &mut r);
        assert!(err < 5e-3, "bn input grad err {err}");

        let rr = random_tensor([3, 3, 2, 2], &mut r);
        let mut b = bn.clone();
        let out = b.forward(x.clone());
        b.backward(rr.clone());
        // dgamma = sum(r * xhat), dbeta = sum(r)
        for ch in 0..3 {
            let mut dbeta = 0f32;
            let mut dgamma = 0f32;
            for n in 0..3 {
                for i in 0..4 {
                    let idx = (n * 3 + ch) * 4 + i;
                    dbeta += rr.data[idx];
                    dgamma +=
                        rr.data[idx] * (out.data[idx] - bn.bias.value[ch]) / bn.weight.value[ch];
                }
            }
            assert!((b.bias.grad[ch] - dbeta).abs() < 1e-4);
            assert!((b.weight.grad[ch] - dgamma).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_running_stats() {
        let mut bn = BatchNorm2d::new(1);
        let x = Tensor::from_vec([4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let out = bn.forward(x.clone());
        let mean: f32 = out.data.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-6);
        // unbiased var of 1..4 is 5/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
        // inference uses running statistics, not the batch
        let y = bn.infer(&x);
        let expected = (1.0 - 0.25) / (bn.running_var[0] + 1e-5).sqrt();
        assert!((y.data[0] - expected).abs() < 1e-5);
    }

    #[test]
    fn relu_and_pool_gradients() {
        let mut r = rng();
        let x = spaced_tensor([2, 2, 4, 4], 0.05, &mut r);
        let err = check_input_grad(&mut Layer::Relu(Relu::default()), &x, 1e-2, &mut r);
        assert!(err < 1e-4);
        let err = check_input_grad(
            &mut Layer::MaxPool(MaxPool2d::new(2, 2, 0)),
            &x,
            1e-2,
            &mut r,
        );
        assert!(err < 1e-4);
        let x = spaced_tensor([1, 2, 5, 5], 0.05, &mut r);
        let err = check_input_grad(
            &mut Layer::MaxPool(MaxPool2d::new(3, 2, 1)),
            &x,
            1e-2,
            &mut r,
        );
        assert!(err < 1e-4);
        let err = check_input_grad(
            &mut Layer::GlobalAvgPool(GlobalAvgPool::default()),
            &x,
            1e-2,
            &mut r,
        );
        assert!(err < 1e-4);
    }

    #[test]
    fn max_pool_padding_never_wins() {
        let pool = MaxPool2d::new(3, 2, 1);
        let x = Tensor::from_vec([1, 1, 2, 2], vec![-5.0, -4.0, -3.0, -2.0]);
        let out = pool.infer(&x);
        assert_eq!(out.data, vec![-2.0]);
    }

    #[test]
    fn basic_block_gradients() {
        let mut r = rng();
        for (cin, cout, stride) in [(2, 2, 1), (2, 3, 2)] {
            let block = BasicBlock::new(cin, cout, stride, &mut r);
            let x = random_tensor([3, cin, 4, 4], &mut r);
            let err = check_input_grad(&mut Layer::Block(Box::new(block)), &x, 1e-2, &mut r);
            assert!(err < 2e-2, "block grad err {err}");
        }
    }
}
