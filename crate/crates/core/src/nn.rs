//! Desk-scale neural building blocks: the pluggable backbone contract,
//! a small convolutional backbone, and the Adam optimizer.
//!
//! Everything runs in f64 with hand-written backward passes; gradients are
//! exposed as flat parameter vectors so the optimizer and checkpoints stay
//! architecture-agnostic.

use ndarray::{Array1, Array3, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::gauss;

/// Architecture descriptor, used to rebuild a backbone from a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    /// 3x3 same-padding convolution, tanh, flatten.
    Conv { height: usize, width: usize, channels: usize, filters: usize },
    /// Centered raw pixels, flattened. No parameters.
    Flatten { height: usize, width: usize, channels: usize },
}

impl BackboneKind {
    /// Build a backbone of this architecture with zeroed parameters;
    /// callers restore real parameters with `set_params`.
    pub fn build_empty(&self) -> Box<dyn Backbone> {
        match *self {
            BackboneKind::Conv { height, width, channels, filters } => Box::new(ConvBackbone {
                height,
                width,
                channels,
                filters,
                weight: Array4::zeros((filters, channels, 3, 3)),
                bias: Array1::zeros(filters),
            }),
            BackboneKind::Flatten { height, width, channels } => {
                Box::new(FlattenBackbone { height, width, channels })
            }
        }
    }
}

/// The image-to-feature map of the encoder. Implementations own their
/// parameters and provide the pullback onto them.
pub trait Backbone: Send + Sync {
    fn kind(&self) -> BackboneKind;
    fn input_shape(&self) -> (usize, usize, usize);
    fn out_dim(&self) -> usize;
    fn num_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, flat: &[f64]);
    fn forward(&self, image: &Array3<f64>) -> Array1<f64>;
    /// Gradient of `cotangent . forward(image)` w.r.t. the parameters,
    /// flattened in `params()` order.
    fn param_grad(&self, image: &Array3<f64>, cotangent: &Array1<f64>) -> Vec<f64>;
    fn clone_box(&self) -> Box<dyn Backbone>;
}

impl Clone for Box<dyn Backbone> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// 3x3 same-padding convolution + tanh + flatten. Pixels are centered
/// around zero before the convolution so tanh operates near its linear
/// regime on `[0,1]` inputs.
#[derive(Debug, Clone)]
pub struct ConvBackbone {
    height: usize,
    width: usize,
    channels: usize,
    filters: usize,
    weight: Array4<f64>,
    bias: Array1<f64>,
}

impl ConvBackbone {
    pub fn new(height: usize, width: usize, channels: usize, filters: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (channels * 9) as f64;
        let std = (1.0 / fan_in).sqrt();
        let weight = Array4::from_shape_simple_fn((filters, channels, 3, 3), || gauss(rng) * std);
        ConvBackbone { height, width, channels, filters, weight, bias: Array1::zeros(filters) }
    }

    fn conv(&self, centered: &Array3<f64>) -> Array3<f64> {
        let (h, w) = (self.height, self.width);
        let mut out = Array3::zeros((h, w, self.filters));
        for y in 0..h {
            for x in 0..w {
                for f in 0..self.filters {
                    let mut acc = self.bias[f];
                    for dy in 0..3usize {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let sx = x as isize + dx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            for c in 0..self.channels {
                                acc += self.weight[[f, c, dy, dx]]
                                    * centered[[sy as usize, sx as usize, c]];
                            }
                        }
                    }
                    out[[y, x, f]] = acc;
                }
            }
        }
        out
    }
}

impl Backbone for ConvBackbone {
    fn kind(&self) -> BackboneKind {
        BackboneKind::Conv {
            height: self.height,
            width: self.width,
            channels: self.channels,
            filters: self.filters,
        }
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    fn out_dim(&self) -> usize {
        self.height * self.width * self.filters
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.weight.iter());
        out.extend(self.bias.iter());
        out
    }

    fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "backbone parameter count mismatch");
        let nw = self.weight.len();
        self.weight
            .as_slice_mut()
            .expect("contiguous")
            .copy_from_slice(&flat[..nw]);
        self.bias.as_slice_mut().expect("contiguous").copy_from_slice(&flat[nw..]);
    }

    fn forward(&self, image: &Array3<f64>) -> Array1<f64> {
        let centered = image.mapv(|p| p - 0.5);
        let pre = self.conv(&centered);
        let act = pre.mapv(f64::tanh);
        Array1::from_iter(act.iter().cloned())
    }

    fn param_grad(&self, image: &Array3<f64>, cotangent: &Array1<f64>) -> Vec<f64> {
        let centered = image.mapv(|p| p - 0.5);
        let pre = self.conv(&centered);
        let (h, w) = (self.height, self.width);
        // d(tanh)/d(pre) applied to the flattened cotangent.
        let mut g_pre = Array3::zeros((h, w, self.filters));
        for y in 0..h {
            for x in 0..w {
                for f in 0..self.filters {
                    let idx = (y * w + x) * self.filters + f;
                    let t = pre[[y, x, f]].tanh();
                    g_pre[[y, x, f]] = cotangent[idx] * (1.0 - t * t);
                }
            }
        }
        let mut g_weight = Array4::<f64>::zeros((self.filters, self.channels, 3, 3));
        let mut g_bias = Array1::<f64>::zeros(self.filters);
        for y in 0..h {
            for x in 0..w {
                for f in 0..self.filters {
                    let g = g_pre[[y, x, f]];
                    if g == 0.0 {
                        continue;
                    }
                    g_bias[f] += g;
                    for dy in 0..3usize {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let sx = x as isize + dx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            for c in 0..self.channels {
                                g_weight[[f, c, dy, dx]] +=
                                    g * centered[[sy as usize, sx as usize, c]];
                            }
                        }
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(g_weight.iter());
        out.extend(g_bias.iter());
        out
    }

    fn clone_box(&self) -> Box<dyn Backbone> {
        Box::new(self.clone())
    }
}

/// Parameter-free backbone: centered pixels, flattened.
#[derive(Debug, Clone)]
pub struct FlattenBackbone {
    height: usize,
    width: usize,
    channels: usize,
}

impl FlattenBackbone {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        FlattenBackbone { height, width, channels }
    }
}

impl Backbone for FlattenBackbone {
    fn kind(&self) -> BackboneKind {
        BackboneKind::Flatten { height: self.height, width: self.width, channels: self.channels }
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    fn out_dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    fn num_params(&self) -> usize {
        0
    }

    fn params(&self) -> Vec<f64> {
        Vec::new()
    }

    fn set_params(&mut self, flat: &[f64]) {
        assert!(flat.is_empty(), "flatten backbone has no parameters");
    }

    fn forward(&self, image: &Array3<f64>) -> Array1<f64> {
        Array1::from_iter(image.iter().map(|p| p - 0.5))
    }

    fn param_grad(&self, _image: &Array3<f64>, _cotangent: &Array1<f64>) -> Vec<f64> {
        Vec::new()
    }

    fn clone_box(&self) -> Box<dyn Backbone> {
        Box::new(self.clone())
    }
}

/// Adam with the standard moment coefficients and zero weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter size mismatch");
        assert_eq!(params.len(), grads.len(), "gradient/parameter size mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
