//! Encoder-decoder network with skip connections.
//!
//! Each encoder level applies two 3×3 conv + ReLU and a 2×2 max pool; the
//! bottleneck applies two more. Each decoder level upsamples (nearest) and
//! convolves down to the level width, concatenates the encoder output of the
//! same resolution, then applies two 3×3 conv + ReLU. A 1×1 conv with linear
//! output gives the single-channel prediction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{
    concat_channels, conv2d_backward, conv2d_forward, maxpool2_backward, maxpool2_forward,
    relu_backward, relu_forward, split_channels, upsample2_backward, upsample2_forward,
};
use super::tensor::{Scalar, Tensor};
use super::NnError;
use crate::raster::Grid2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
        }
    }
}

/// One convolution of the network, in execution order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl UNetConfig {
    /// Larger preset for 224×224 inputs.
    pub const FIDELITY: Self = Self {
        depth: 4,
        base_channels: 16,
    };

    pub fn validate(&self) -> Result<(), NnError> {
        if self.depth == 0 || self.depth > 8 {
            return Err(NnError::Config(format!("depth must be in 1..=8, got {}", self.depth)));
        }
        if self.base_channels == 0 || self.base_channels > 1024 {
            return Err(NnError::Config(format!(
                "base_channels must be in 1..=1024, got {}",
                self.base_channels
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn convs(&self) -> Vec<ConvSpec> {
        let spec = |name: String, cin, cout, kernel| ConvSpec {
            name,
            cin,
            cout,
            kernel,
        };
        let mut out = Vec::new();
        let mut cin = 1;
        for l in 0..self.depth {
            let c = self.channels(l);
            out.push(spec(format!("enc{l}.conv1"), cin, c, 3));
            out.push(spec(format!("enc{l}.conv2"), c, c, 3));
            cin = c;
        }
        let cb = self.channels(self.depth);
        out.push(spec("bottleneck.conv1".into(), cin, cb, 3));
        out.push(spec("bottleneck.conv2".into(), cb, cb, 3));
        let mut cin = cb;
        for l in (0..self.depth).rev() {
            let c = self.channels(l);
            out.push(spec(format!("dec{l}.up"), cin, c, 3));
            out.push(spec(format!("dec{l}.conv1"), 2 * c, c, 3));
            out.push(spec(format!("dec{l}.conv2"), c, c, 3));
            cin = c;
        }
        out.push(spec("head".into(), cin, 1, 1));
        out
    }

    /// Spatial size at the bottleneck, or a shape error when `h`/`w` are not
    /// divisible by `2^depth`.
    pub fn bottleneck_size(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        let f = 1usize << self.depth;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(NnError::Shape {
                op: "unet input",
                left: vec![h, w],
                right: vec![f, f],
            });
        }
        Ok((h / f, w / f))
    }

    pub fn param_count(&self) -> usize {
        self.convs()
            .iter()
            .map(|c| c.cout * c.cin * c.kernel * c.kernel + c.cout)
            .sum()
    }
}

/// Ordered, uniquely named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Result<Self, NnError> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(NnError::Config(format!("duplicate parameter name {name}")));
            }
        }
        Ok(Self { entries })
    }

    /// Zero tensors with the names and shapes of `config`.
    pub fn zeros(config: &UNetConfig) -> Self {
        let mut entries = Vec::new();
        for c in config.convs() {
            entries.push((
                format!("{}.weight", c.name),
                Tensor::zeros(&[c.cout, c.cin, c.kernel, c.kernel]),
            ));
            entries.push((format!("{}.bias", c.name), Tensor::zeros(&[c.cout])));
        }
        Self { entries }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn add_assign(&mut self, other: &ParamSet<T>) {
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for (_, t) in &mut self.entries {
            t.scale(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Names whose presence or shape differs from `other`, both directions.
    pub fn mismatches(&self, other: &ParamSet<T>) -> Vec<String> {
        let mut out = Vec::new();
        for (n, t) in &self.entries {
            match other.get(n) {
                None => out.push(format!("{n} (missing)")),
                Some(o) if o.shape() != t.shape() => {
                    out.push(format!("{n} ({:?} vs {:?})", o.shape(), t.shape()))
                }
                _ => {}
            }
        }
        for (n, _) in &other.entries {
            if self.get(n).is_none() {
                out.push(format!("{n} (unexpected)"));
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

/// Normal samples with standard deviation `sqrt(2 / fan_in)`.
pub fn he_init<T: Scalar>(shape: &[usize], fan_in: usize, seed: u64) -> Tensor<T> {
    assert!(fan_in >= 1, "fan_in must be at least 1");
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct Cache<T> {
    /// per conv: its input and its (post-activation) output
    conv_io: Vec<Option<(Tensor<T>, Tensor<T>)>>,
    pool_argmax: Vec<Vec<u32>>,
    skip_shapes: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    pub config: UNetConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> UNet<T> {
    /// He-initialized weights, zero biases.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut params = ParamSet::zeros(&config);
        for (i, c) in config.convs().iter().enumerate() {
            let fan_in = c.cin * c.kernel * c.kernel;
            let w = he_init(&[c.cout, c.cin, c.kernel, c.kernel], fan_in, layer_seed(seed, i));
            *params.tensor_mut(2 * i) = w;
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: UNetConfig, params: ParamSet<T>) -> Result<Self, NnError> {
        config.validate()?;
        let mismatched = ParamSet::<T>::zeros(&config).mismatches(&params);
        if !mismatched.is_empty() {
            return Err(NnError::Incompatible { mismatched });
        }
        Ok(Self { config, params })
    }

    fn conv(
        &self,
        i: usize,
        x: Tensor<T>,
        relu: bool,
        cache: &mut Option<&mut Cache<T>>,
    ) -> Result<Tensor<T>, NnError> {
        let y = conv2d_forward(&x, self.params.tensor(2 * i), self.params.tensor(2 * i + 1))?;
        let y = if relu { relu_forward(&y) } else { y };
        if let Some(c) = cache {
            c.conv_io[i] = Some((x, y.clone()));
        }
        Ok(y)
    }

    fn run(&self, input: &Tensor<T>, mut cache: Option<&mut Cache<T>>) -> Result<Tensor<T>, NnError> {
        let (c, h, w) = input.chw()?;
        if c != 1 {
            return Err(NnError::Shape {
                op: "unet input channels",
                left: input.shape().to_vec(),
                right: vec![1, h, w],
            });
        }
        let bottleneck = self.config.bottleneck_size(h, w)?;
        let depth = self.config.depth;
        let mut k = 0;
        let mut x = input.clone();
        let mut skips = Vec::with_capacity(depth);
        for _ in 0..depth {
            x = self.conv(k, x, true, &mut cache)?;
            x = self.conv(k + 1, x, true, &mut cache)?;
            k += 2;
            let (p, arg) = maxpool2_forward(&x)?;
            if let Some(c) = cache.as_deref_mut() {
                c.pool_argmax.push(arg);
                c.skip_shapes.push(x.shape().to_vec());
            }
            skips.push(x);
            x = p;
        }
        assert_eq!((x.shape()[1], x.shape()[2]), bottleneck);
        x = self.conv(k, x, true, &mut cache)?;
        x = self.conv(k + 1, x, true, &mut cache)?;
        k += 2;
        for skip in skips.iter().rev() {
            let u = upsample2_forward(&x)?;
            let u = self.conv(k, u, true, &mut cache)?;
            let cat = concat_channels(&u, skip)?;
            x = self.conv(k + 1, cat, true, &mut cache)?;
            x = self.conv(k + 2, x, true, &mut cache)?;
            k += 3;
        }
        self.conv(k, x, false, &mut cache)
    }

    /// `[1, H, W]` in, `[1, H, W]` out.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.run(input, None)
    }

    fn conv_back(
        &self,
        i: usize,
        cache: &Cache<T>,
        mut grad: Tensor<T>,
        relu: bool,
        grads: &mut ParamSet<T>,
    ) -> Result<Tensor<T>, NnError> {
        let (x, y) = cache.conv_io[i].as_ref().expect("forward cached");
        if relu {
            relu_backward(y, &mut grad);
        }
        let g = conv2d_backward(x, self.params.tensor(2 * i), &grad)?;
        *grads.tensor_mut(2 * i) = g.weight;
        *grads.tensor_mut(2 * i + 1) = g.bias;
        Ok(g.input)
    }

    /// Mean squared error against `target` and its gradient for every parameter.
    pub fn loss_and_grad(&self, input: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, ParamSet<T>), NnError> {
        let convs = self.config.convs();
        let mut cache = Cache {
            conv_io: vec![None; convs.len()],
            pool_argmax: Vec::new(),
            skip_shapes: Vec::new(),
        };
        let out = self.run(input, Some(&mut cache))?;
        if out.shape() != target.shape() {
            return Err(NnError::Shape {
                op: "loss",
                left: out.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let (loss, grad_out) = mse_with_grad(&out, target);
        if !loss.is_finite() {
            return Err(NnError::Diverged {
                epoch: 0,
                batch: 0,
                loss,
            });
        }
        let mut grads = self.params.zeros_like();
        let depth = self.config.depth;
        let mut k = convs.len() - 1;
        let mut g = self.conv_back(k, &cache, grad_out, false, &mut grads)?;
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; depth];
        for l in 0..depth {
            k -= 3;
            g = self.conv_back(k + 2, &cache, g, true, &mut grads)?;
            let gc = self.conv_back(k + 1, &cache, g, true, &mut grads)?;
            let (gu, gs) = split_channels(&gc, self.config.channels(l))?;
            skip_grads[l] = Some(gs);
            let gu = self.conv_back(k, &cache, gu, true, &mut grads)?;
            g = upsample2_backward(&gu)?;
        }
        k -= 2;
        g = self.conv_back(k + 1, &cache, g, true, &mut grads)?;
        g = self.conv_back(k, &cache, g, true, &mut grads)?;
        for l in (0..depth).rev() {
            k -= 2;
            let mut gs = maxpool2_backward(&cache.pool_argmax[l], &g, &cache.skip_shapes[l])?;
            gs.add_assign(skip_grads[l].as_ref().expect("decoder visited"));
            g = self.conv_back(k + 1, &cache, gs, true, &mut grads)?;
            g = self.conv_back(k, &cache, g, true, &mut grads)?;
        }
        debug_assert_eq!(k, 0);
        Ok((loss, grads))
    }

    /// Prediction for a single-channel raster.
    pub fn predict(&self, input: &Grid2<f32>) -> Result<Grid2<f32>, NnError> {
        let (w, h) = (input.width(), input.height());
        let x = Tensor::from_vec(&[1, h, w], input.iter().map(|&v| T::from_f64(v as f64)).collect())?;
        let y = self.forward(&x)?;
        Ok(Grid2::from_vec(w, h, y.data().iter().map(|v| v.as_f64() as f32).collect())
            .expect("output shape equals input shape"))
    }
}

/// `mean((out − target)²)` and its gradient `2(out − target)/N`.
pub fn mse_with_grad<T: Scalar>(out: &Tensor<T>, target: &Tensor<T>) -> (f64, Tensor<T>) {
    let n = out.len() as f64;
    let mut sum = 0.0;
    let mut grad = out.clone();
    let scale = T::from_f64(2.0 / n);
    for (g, &t) in grad.data_mut().iter_mut().zip(target.data()) {
        let d = *g - t;
        sum += d.as_f64() * d.as_f64();
        *g = d * scale;
    }
    (sum / n, grad)
}
