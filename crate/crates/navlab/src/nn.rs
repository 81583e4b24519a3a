//! Minimal dense/convolutional layers with hand-written backward passes.
//!
//! Everything is f64 and strictly deterministic: forward passes never mutate
//! state (spectral-norm power iteration is an explicit separate step), and
//! gradients accumulate into per-layer buffers in a fixed order, so analytic
//! gradients can be validated against central finite differences.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Array2<f64>;

/// Negative slope of the leaky ReLU used throughout the model.
pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu(x: &Mat) -> Mat {
    x.mapv(|v| if v >= 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Gradient through leaky ReLU given the pre-activation.
pub fn leaky_relu_grad(pre: &Mat, dy: &Mat) -> Mat {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |d, &p| {
        if p < 0.0 {
            *d *= LEAKY_SLOPE;
        }
    });
    dx
}

/// Standard-normal matrix via the Box-Muller transform (keeps the RNG
/// dependency surface to plain uniform draws).
pub fn standard_normal(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Mat {
    Mat::from_shape_fn(shape, |_| {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, shape: (usize, usize)) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Mat::from_shape_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Fully connected layer, weight shape (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Mat,
    pub b: Array1<f64>,
    pub gw: Mat,
    pub gb: Array1<f64>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: uniform_fan_in(rng, fan_in, (fan_in, fan_out)),
            b: Array1::zeros(fan_out),
            gw: Mat::zeros((fan_in, fan_out)),
            gb: Array1::zeros(fan_out),
        }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Mat, dy: &Mat) -> Mat {
        self.gw += &x.t().dot(dy);
        self.gb += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }
}

/// Two-layer perceptron with leaky ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug)]
pub struct Mlp2Cache {
    x: Mat,
    pre: Mat,
    act: Mat,
}

impl Mlp2 {
    pub fn new(rng: &mut ChaCha8Rng, n_in: usize, n_hidden: usize, n_out: usize) -> Mlp2 {
        Mlp2 {
            l1: Linear::new(rng, n_in, n_hidden),
            l2: Linear::new(rng, n_hidden, n_out),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, Mlp2Cache) {
        let pre = self.l1.forward(x);
        let act = leaky_relu(&pre);
        let y = self.l2.forward(&act);
        (
            y,
            Mlp2Cache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&mut self, cache: &Mlp2Cache, dy: &Mat) -> Mat {
        let dact = self.l2.backward(&cache.act, dy);
        let dpre = leaky_relu_grad(&cache.pre, &dact);
        self.l1.backward(&cache.x, &dpre)
    }

    pub fn zero_grad(&mut self) {
        self.l1.zero_grad();
        self.l2.zero_grad();
    }
}

/// Spectral-norm state for a (k, cout) weight matrix: power-iteration
/// vectors and the frozen estimate of the largest singular value.
#[derive(Debug, Clone)]
pub struct SpectralNorm {
    pub u: Array1<f64>, // length cout
    pub v: Array1<f64>, // length k
}

impl SpectralNorm {
    pub fn new(rng: &mut ChaCha8Rng, k: usize, cout: usize) -> SpectralNorm {
        let mut u = Array1::from_shape_fn(cout, |_| rng.gen_range(-1.0..1.0f64));
        let mut v = Array1::from_shape_fn(k, |_| rng.gen_range(-1.0..1.0f64));
        normalize(&mut u);
        normalize(&mut v);
        SpectralNorm { u, v }
    }

    /// One power-iteration step on `w`, updating u and v in place.
    pub fn power_iterate(&mut self, w: &Mat) {
        let mut u = w.t().dot(&self.v);
        normalize(&mut u);
        let mut v = w.dot(&u);
        normalize(&mut v);
        self.u = u;
        self.v = v;
    }

    /// Estimated largest singular value of `w` given the current vectors.
    pub fn sigma(&self, w: &Mat) -> f64 {
        self.v.dot(&w.dot(&self.u))
    }
}

fn normalize(x: &mut Array1<f64>) {
    let n = x.dot(&*x).sqrt();
    if n > 1e-12 {
        *x /= n;
    }
}

/// 3x3 convolution, stride 2, padding 1 (halves the spatial size), with
/// optional spectral normalization of the weight. Weight layout (cin*9, cout).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub w: Mat,
    pub b: Array1<f64>,
    pub gw: Mat,
    pub gb: Array1<f64>,
    pub sn: Option<SpectralNorm>,
}

#[derive(Debug)]
pub struct ConvCache {
    col: Mat,
    w_eff: Mat,
    sigma: f64,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, spectral: bool) -> Conv2d {
        let k = cin * 9;
        let sn = spectral.then(|| SpectralNorm::new(rng, k, cout));
        Conv2d {
            cin,
            cout,
            w: uniform_fan_in(rng, k, (k, cout)),
            b: Array1::zeros(cout),
            gw: Mat::zeros((k, cout)),
            gb: Array1::zeros(cout),
            sn,
        }
    }

    /// Effective (normalized) weight and the sigma used.
    fn effective_weight(&self) -> (Mat, f64) {
        match &self.sn {
            Some(sn) => {
                let sigma = sn.sigma(&self.w);
                (&self.w / sigma, sigma)
            }
            None => (self.w.clone(), 1.0),
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (b, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin);
        let (oh, ow) = (h / 2, w / 2);
        let col = im2col(x);
        let (w_eff, sigma) = self.effective_weight();
        let mut y_mat = col.dot(&w_eff);
        y_mat += &self.b;
        let y = y_mat
            .into_shape_with_order((b, oh, ow, self.cout))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        (
            y,
            ConvCache {
                col,
                w_eff,
                sigma,
                in_shape: (b, cin, h, w),
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvCache, dy: &Array4<f64>) -> Array4<f64> {
        let (b, cout, oh, ow) = dy.dim();
        let dy_mat = dy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((b * oh * ow, cout))
            .unwrap();
        let gw_eff = cache.col.t().dot(&dy_mat);
        match &self.sn {
            Some(sn) => {
                // w_sn = w / sigma with sigma = v' w u (u, v frozen):
                // dL/dw = gw_eff / sigma - (<gw_eff, w> / sigma^2) v u'.
                let inner = (&gw_eff * &self.w).sum();
                self.gw += &(&gw_eff / cache.sigma);
                let scale = inner / (cache.sigma * cache.sigma);
                let outer = outer_product(&sn.v, &sn.u);
                self.gw -= &(outer * scale);
            }
            None => {
                self.gw += &gw_eff;
            }
        }
        self.gb += &dy_mat.sum_axis(Axis(0));
        let dcol = dy_mat.dot(&cache.w_eff.t());
        col2im(&dcol, cache.in_shape)
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }

    /// One spectral-norm power-iteration step (training mode only).
    pub fn power_iterate(&mut self) {
        if let Some(sn) = &mut self.sn {
            sn.power_iterate(&self.w);
        }
    }
}

fn outer_product(a: &Array1<f64>, b: &Array1<f64>) -> Mat {
    let av = a.view().insert_axis(Axis(1));
    let bv = b.view().insert_axis(Axis(0));
    av.dot(&bv)
}

/// Unfold 3x3/stride-2/pad-1 patches: (b, cin, h, w) -> (b*oh*ow, cin*9).
pub fn im2col(x: &Array4<f64>) -> Mat {
    let (b, cin, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut col = Mat::zeros((b * oh * ow, cin * 9));
    let xs = x.as_slice().unwrap();
    let cs = col.as_slice_mut().unwrap();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * cin * 9;
                for ci in 0..cin {
                    for kh in 0..3 {
                        let iy = (oy * 2 + kh) as i64 - 1;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kw in 0..3 {
                            let ix = (ox * 2 + kw) as i64 - 1;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            cs[row + (ci * 3 + kh) * 3 + kw] =
                                xs[((bi * cin + ci) * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Fold patch gradients back onto the input (scatter-add, sequential and
/// deterministic).
pub fn col2im(dcol: &Mat, in_shape: (usize, usize, usize, usize)) -> Array4<f64> {
    let (b, cin, h, w) = in_shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Array4::<f64>::zeros(in_shape);
    let ds = dcol.as_slice().unwrap();
    let xs = dx.as_slice_mut().unwrap();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * cin * 9;
                for ci in 0..cin {
                    for kh in 0..3 {
                        let iy = (oy * 2 + kh) as i64 - 1;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kw in 0..3 {
                            let ix = (ox * 2 + kw) as i64 - 1;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            xs[((bi * cin + ci) * h + iy as usize) * w + ix as usize] +=
                                ds[row + (ci * 3 + kh) * 3 + kw];
                        }
                    }
                }
            }
        }
    }
    dx
}
