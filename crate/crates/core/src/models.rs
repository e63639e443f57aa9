//! Parametric function families: generator `G`, autoencoder encoder `F`,
//! critic `f`, rate encoder `E`, and stochastic mapper `B`.
//!
//! An [`ArchSpec`] is a flat list of layer descriptors. Two families are
//! provided: the strided convolution stacks used for 64x64 images (scaled
//! to other power-of-two resolutions), and small MLPs for low-dimensional
//! data.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Var;
use crate::divergences::Embed;
use crate::error::{invalid, Error, Result};
use crate::nn::{self, BatchMoments, ConvGeom};
use crate::quantization::{soft_quantize, CodeSpec, QuantizationResult};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
/// Weight of the newest batch in the running normalization statistics.
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_MLP_WIDTH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Generator,
    WaeEncoder,
    Critic,
    RateEncoder,
    Mapper,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Generator => "generator",
            Role::WaeEncoder => "wae-encoder",
            Role::Critic => "critic",
            Role::RateEncoder => "rate-encoder",
            Role::Mapper => "mapper",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchFamily {
    ConvDcgan,
    Mlp,
}

/// What follows a convolution or dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Post {
    Identity,
    Relu,
    Leaky,
    /// Batch normalization, then ReLU.
    BatchRelu,
    /// Layer normalization, then leaky ReLU.
    LayerLeaky,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Layer {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        post: Post,
    },
    ConvT {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        post: Post,
    },
    /// Flattens its input first.
    Dense { units: usize, post: Post },
    /// Two 3x3 convolutions (or two dense layers) with a skip connection.
    Residual { filters: usize },
    /// Normalization without affine terms.
    BatchNorm,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub family: ArchFamily,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub latent_dim: usize,
    pub code_channels: usize,
    pub residual_blocks: usize,
}

/// Knobs for the preset architectures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub family: ArchFamily,
    /// Per-sample data shape: `[d]` for vectors, `[c, h, w]` for images.
    pub data_shape: Vec<usize>,
    pub latent_dim: usize,
    pub code_channels: usize,
    pub residual_blocks: usize,
    /// MLP hidden width, or the base filter count of the conv stacks.
    pub width: usize,
    /// Noise entries appended to the code at the mapper input.
    pub noise_dim: usize,
}

impl ArchParams {
    pub fn mlp(data_dim: usize, latent_dim: usize) -> Self {
        Self {
            family: ArchFamily::Mlp,
            data_shape: vec![data_dim],
            latent_dim,
            code_channels: 0,
            residual_blocks: 1,
            width: DEFAULT_MLP_WIDTH,
            noise_dim: latent_dim,
        }
    }

    pub fn dcgan(resolution: usize, latent_dim: usize, residual_blocks: usize) -> Self {
        Self {
            family: ArchFamily::ConvDcgan,
            data_shape: vec![3, resolution, resolution],
            latent_dim,
            code_channels: 0,
            residual_blocks,
            width: 64,
            noise_dim: latent_dim,
        }
    }

    /// Spatial side of the code map (1 for vector data).
    pub fn code_side(&self) -> Result<usize> {
        match self.family {
            ArchFamily::Mlp => Ok(1),
            ArchFamily::ConvDcgan => Ok(self.data_shape[1] >> dcgan_stages(self.data_shape[1])?),
        }
    }

    /// Number of binary code sites emitted by the rate encoder.
    pub fn code_sites(&self) -> Result<usize> {
        let s = self.code_side()?;
        Ok(self.code_channels * s * s)
    }

    /// Channels the noise vector occupies once reshaped to the code map.
    pub fn noise_channels(&self) -> Result<usize> {
        let s = self.code_side()?;
        if self.noise_dim % (s * s) != 0 {
            return Err(invalid(format!(
                "noise of {} entries cannot be reshaped to a {s}x{s} map",
                self.noise_dim
            )));
        }
        Ok(self.noise_dim / (s * s))
    }
}

fn dcgan_stages(resolution: usize) -> Result<usize> {
    if resolution < 8 || !resolution.is_power_of_two() {
        return Err(invalid(format!(
            "conv architectures need a power-of-two resolution of at least 8, got {resolution}"
        )));
    }
    Ok(resolution.trailing_zeros() as usize - 2)
}

fn conv(filters: usize, kernel: usize, stride: usize, post: Post) -> Layer {
    Layer::Conv {
        filters,
        kernel,
        stride,
        // 4x4 stride-2 halves the side, 3x3 stride-1 keeps it
        pad: if kernel == 4 { 1 } else { kernel / 2 },
        post,
    }
}

impl ArchSpec {
    pub fn for_role(role: Role, p: &ArchParams) -> Result<Self> {
        let m = p.latent_dim;
        let w = p.width;
        if m == 0 || w == 0 {
            return Err(invalid("latent dimension and width must be positive"));
        }
        let data_dim: usize = p.data_shape.iter().product();
        let (input_shape, layers) = match p.family {
            ArchFamily::Mlp => {
                if p.data_shape.len() != 1 {
                    return Err(invalid("mlp architectures take vector data"));
                }
                let hidden = |n: usize| vec![Layer::Dense { units: w, post: Post::Leaky }; n];
                match role {
                    Role::Generator => {
                        let mut l = hidden(3);
                        l.push(Layer::Dense { units: data_dim, post: Post::Identity });
                        (vec![m], l)
                    }
                    Role::WaeEncoder => {
                        let mut l = hidden(3);
                        l.push(Layer::Dense { units: m, post: Post::Identity });
                        l.push(Layer::BatchNorm);
                        (p.data_shape.clone(), l)
                    }
                    Role::Critic => {
                        let mut l = hidden(3);
                        l.push(Layer::Dense { units: 1, post: Post::Identity });
                        (p.data_shape.clone(), l)
                    }
                    Role::RateEncoder => {
                        let mut l = hidden(3);
                        l.push(Layer::Dense { units: p.code_channels, post: Post::Identity });
                        l.push(Layer::BatchNorm);
                        (p.data_shape.clone(), l)
                    }
                    Role::Mapper => {
                        let mut l = hidden(1);
                        l.extend(vec![Layer::Residual { filters: w }; p.residual_blocks]);
                        l.push(Layer::Dense { units: m, post: Post::Identity });
                        (vec![p.code_channels + p.noise_dim], l)
                    }
                }
            }
            ArchFamily::ConvDcgan => {
                if p.data_shape.len() != 3 || p.data_shape[1] != p.data_shape[2] {
                    return Err(invalid("conv architectures take square [c, h, w] images"));
                }
                let stages = dcgan_stages(p.data_shape[1])?;
                let channels = p.data_shape[0];
                // discriminator-style downsampling trunk shared by F and E
                let trunk = || {
                    let mut l = vec![conv(w, 4, 2, Post::Relu)];
                    for j in 1..stages {
                        l.push(conv(w << j, 4, 2, Post::BatchRelu));
                    }
                    l
                };
                match role {
                    Role::Generator => {
                        let mut l = vec![Layer::ConvT {
                            filters: w << (stages - 1),
                            kernel: 4,
                            stride: 2,
                            pad: 0,
                            post: Post::BatchRelu,
                        }];
                        for j in 1..=stages {
                            l.push(Layer::ConvT {
                                filters: (w << (stages - 1)) >> j.min(stages - 1),
                                kernel: 4,
                                stride: 2,
                                pad: 1,
                                post: Post::BatchRelu,
                            });
                        }
                        l.push(conv(channels, 3, 1, Post::Identity));
                        l.push(Layer::Tanh);
                        (vec![m], l)
                    }
                    Role::WaeEncoder => {
                        let mut l = trunk();
                        l.push(Layer::Dense { units: m, post: Post::Identity });
                        l.push(Layer::BatchNorm);
                        (p.data_shape.clone(), l)
                    }
                    Role::Critic => {
                        let mut l = vec![conv(w, 3, 1, Post::Relu)];
                        for j in 0..stages {
                            l.push(conv(w << j, 4, 2, Post::LayerLeaky));
                        }
                        l.push(Layer::Dense { units: 1, post: Post::Identity });
                        (p.data_shape.clone(), l)
                    }
                    Role::RateEncoder => {
                        let mut l = trunk();
                        l.push(conv(p.code_channels, 3, 1, Post::Identity));
                        (p.data_shape.clone(), l)
                    }
                    Role::Mapper => {
                        let side = p.code_side()?;
                        let wide = w << (stages - 1);
                        let mut l = vec![conv(wide, 3, 1, Post::Relu)];
                        l.extend(vec![Layer::Residual { filters: wide }; p.residual_blocks]);
                        l.push(Layer::Dense { units: m, post: Post::Identity });
                        l.push(Layer::BatchNorm);
                        (vec![p.code_channels + p.noise_channels()?, side, side], l)
                    }
                }
            }
        };
        let spec = Self {
            family: p.family,
            input_shape,
            layers,
            latent_dim: m,
            code_channels: p.code_channels,
            residual_blocks: p.residual_blocks,
        };
        spec.plan()?;
        Ok(spec)
    }

    /// Walks the layer chain, checking shapes and listing parameter shapes.
    pub fn plan(&self) -> Result<Plan> {
        let mut shape = self.input_shape.clone();
        if shape.is_empty() || shape.contains(&0) && !(shape.len() == 1 && self.family == ArchFamily::Mlp) {
            return Err(invalid(format!("invalid input shape {shape:?}")));
        }
        let mut params = Vec::new();
        let mut fan_ins = Vec::new();
        let mut norms = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| invalid(format!("layer {i} ({layer:?}): {msg}"));
            match *layer {
                Layer::Conv { filters, kernel, stride, pad, post } => {
                    if shape.len() != 3 || shape[1] != shape[2] {
                        return Err(bad(format!("needs a square feature map, got {shape:?}")));
                    }
                    if shape[1] + 2 * pad < kernel || stride == 0 {
                        return Err(bad(format!("kernel does not fit a {}-pixel map", shape[1])));
                    }
                    let g = ConvGeom { in_ch: shape[0], out_ch: filters, kernel, stride, pad };
                    params.push(vec![filters, g.patch_len()]);
                    params.push(vec![filters]);
                    fan_ins.extend([g.patch_len(); 2]);
                    shape = vec![filters, g.out_size(shape[1]), g.out_size(shape[1])];
                    push_post_norm(post, shape[0], &mut norms);
                }
                Layer::ConvT { filters, kernel, stride, pad, post } => {
                    if shape.len() == 1 {
                        shape = vec![shape[0], 1, 1];
                    }
                    if shape.len() != 3 || shape[1] != shape[2] {
                        return Err(bad(format!("needs a square feature map, got {shape:?}")));
                    }
                    if (shape[1] - 1) * stride + kernel <= 2 * pad || stride == 0 {
                        return Err(bad("empty output".into()));
                    }
                    let g = ConvGeom { in_ch: shape[0], out_ch: filters, kernel, stride, pad };
                    params.push(vec![shape[0], filters * kernel * kernel]);
                    params.push(vec![filters]);
                    fan_ins.extend([(shape[0] * kernel * kernel / (stride * stride)).max(1); 2]);
                    let o = g.transposed_out_size(shape[1]);
                    shape = vec![filters, o, o];
                    push_post_norm(post, shape[0], &mut norms);
                }
                Layer::Dense { units, post } => {
                    let fan_in: usize = shape.iter().product();
                    params.push(vec![units, fan_in]);
                    params.push(vec![units]);
                    fan_ins.extend([fan_in; 2]);
                    shape = vec![units];
                    if post == Post::BatchRelu {
                        norms.push(units);
                    }
                }
                Layer::Residual { filters } => {
                    if shape[0] != filters {
                        return Err(bad(format!("expects {filters} channels, got {}", shape[0])));
                    }
                    if shape.len() == 3 {
                        params.extend([vec![filters, filters * 9], vec![filters]]);
                        params.extend([vec![filters, filters * 9], vec![filters]]);
                        fan_ins.extend([filters * 9; 4]);
                        norms.extend([filters, filters]);
                    } else if shape.len() == 1 {
                        params.extend([vec![filters, filters], vec![filters]]);
                        params.extend([vec![filters, filters], vec![filters]]);
                        fan_ins.extend([filters; 4]);
                    } else {
                        return Err(bad(format!("unsupported input shape {shape:?}")));
                    }
                }
                Layer::BatchNorm => norms.push(shape[0]),
                Layer::Tanh => {}
            }
        }
        Ok(Plan {
            param_shapes: params,
            fan_ins,
            norm_features: norms,
            output_shape: shape,
        })
    }
}

fn push_post_norm(post: Post, channels: usize, norms: &mut Vec<usize>) {
    if post == Post::BatchRelu {
        norms.push(channels);
    }
}

/// Shapes implied by an [`ArchSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub param_shapes: Vec<Vec<usize>>,
    /// Inputs feeding each output unit, per parameter tensor.
    pub fan_ins: Vec<usize>,
    /// Feature count of each batch-normalization site, in forward order.
    pub norm_features: Vec<usize>,
    pub output_shape: Vec<usize>,
}

/// Result of a forward pass. `moments` holds the batch statistics seen by
/// each normalization site in training mode.
pub struct ForwardOut {
    pub output: Var,
    pub moments: Vec<BatchMoments>,
}

/// A network with its parameters and normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    role: Role,
    arch: ArchSpec,
    params: Vec<Tensor>,
    /// Running `(mean, var)` per normalization site, flattened pairwise.
    buffers: Vec<Tensor>,
    training: bool,
}

/// Builds a model with seeded uniform(±1/sqrt(fan_in)) initialization.
pub fn build_model(role: Role, arch: ArchSpec, seed: u64) -> Result<Model> {
    let plan = arch.plan()?;
    check_role_contract(role, &arch, &plan)?;
    let params = plan
        .param_shapes
        .iter()
        .enumerate()
        .map(|(i, shape)| {
            let mut r = rng::substream(seed, stream::INIT, i as u64);
            let fan_in = plan.fan_ins[i];
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let n: usize = shape.iter().product();
            Tensor::new(shape.clone(), (0..n).map(|_| r.random_range(-bound..=bound)).collect())
        })
        .collect();
    let buffers = plan
        .norm_features
        .iter()
        .flat_map(|&f| [Tensor::zeros(&[f]), Tensor::full(&[f], 1.0)])
        .collect();
    Ok(Model {
        role,
        arch,
        params,
        buffers,
        training: true,
    })
}

fn check_role_contract(role: Role, arch: &ArchSpec, plan: &Plan) -> Result<()> {
    let out = &plan.output_shape;
    let m = arch.latent_dim;
    let ok = match role {
        Role::Generator => arch.input_shape == [m],
        Role::WaeEncoder => out[..] == [m],
        Role::Critic => out[..] == [1],
        Role::RateEncoder => out[0] == arch.code_channels && arch.code_channels > 0,
        Role::Mapper => out[..] == [m] && arch.residual_blocks >= 1,
    };
    if ok {
        Ok(())
    } else {
        Err(invalid(format!(
            "architecture with input {:?} and output {out:?} does not fit the {role} contract",
            arch.input_shape
        )))
    }
}

impl Model {
    /// Reassembles a model from stored parts, checking every shape.
    pub fn from_parts(role: Role, arch: ArchSpec, params: Vec<Tensor>, buffers: Vec<Tensor>, training: bool) -> Result<Self> {
        let plan = arch.plan()?;
        check_role_contract(role, &arch, &plan)?;
        let param_ok = params.len() == plan.param_shapes.len()
            && params.iter().zip(&plan.param_shapes).all(|(t, s)| t.shape() == &s[..]);
        let buffer_ok = buffers.len() == 2 * plan.norm_features.len()
            && buffers.iter().enumerate().all(|(i, t)| t.shape() == [plan.norm_features[i / 2]]);
        if !param_ok || !buffer_ok {
            return Err(invalid("stored tensors do not match the architecture"));
        }
        Ok(Self { role, arch, params, buffers, training })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.arch.plan().expect("validated at construction").output_shape
    }

    /// Replaces parameter values; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        check_shapes(&self.params, &params)?;
        self.params = params;
        Ok(())
    }

    pub fn set_buffers(&mut self, buffers: Vec<Tensor>) -> Result<()> {
        check_shapes(&self.buffers, &buffers)?;
        self.buffers = buffers;
        Ok(())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for t in self.params.iter_mut() {
            let n = t.len();
            *t = Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec());
            off += n;
        }
        Ok(())
    }

    /// Hex SHA-256 over role, parameters, and normalization statistics.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.role.name().as_bytes());
        for t in self.params.iter().chain(&self.buffers) {
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Parameters as differentiable leaves.
    pub fn bind(&self) -> Vec<Var> {
        self.params.iter().cloned().map(Var::param).collect()
    }

    /// Parameters as constants.
    pub fn frozen(&self) -> Vec<Var> {
        self.params.iter().cloned().map(Var::constant).collect()
    }

    /// Forward pass in the model's current mode.
    pub fn forward(&self, params: &[Var], x: &Var) -> Result<ForwardOut> {
        self.forward_mode(params, x, self.training)
    }

    pub fn forward_mode(&self, params: &[Var], x: &Var, training: bool) -> Result<ForwardOut> {
        if params.len() != self.params.len() {
            return Err(invalid("parameter list does not match the model"));
        }
        let b = x.shape()[0];
        let per: usize = x.shape()[1..].iter().product();
        let want: usize = self.arch.input_shape.iter().product();
        if per != want {
            return Err(Error::DimensionMismatch { expected: want, got: per });
        }
        let mut in_shape = vec![b];
        in_shape.extend(&self.arch.input_shape);
        let mut h = x.reshape(&in_shape);
        let mut p = params.iter();
        let mut site = 0usize;
        let mut moments = Vec::new();
        let mut norm = |h: &Var, moments: &mut Vec<BatchMoments>| -> Var {
            let running = if training {
                None
            } else {
                Some((&self.buffers[2 * site], &self.buffers[2 * site + 1]))
            };
            site += 1;
            let (y, m) = if h.shape().len() == 4 {
                nn::batch_norm_nchw(h, running)
            } else {
                nn::batch_norm_rows(h, running)
            };
            moments.extend(m);
            y
        };
        for layer in &self.arch.layers {
            h = match *layer {
                Layer::Conv { filters, kernel, stride, pad, post } => {
                    let g = ConvGeom { in_ch: h.shape()[1], out_ch: filters, kernel, stride, pad };
                    let (w, bias) = (p.next().unwrap(), p.next().unwrap());
                    let y = nn::conv2d(&h, w, bias, g);
                    apply_post(y, post, &mut |v| norm(v, &mut moments))
                }
                Layer::ConvT { filters, kernel, stride, pad, post } => {
                    if h.shape().len() == 2 {
                        h = h.reshape(&[b, h.shape()[1], 1, 1]);
                    }
                    let g = ConvGeom { in_ch: h.shape()[1], out_ch: filters, kernel, stride, pad };
                    let (w, bias) = (p.next().unwrap(), p.next().unwrap());
                    let y = nn::conv_transpose2d(&h, w, bias, g);
                    apply_post(y, post, &mut |v| norm(v, &mut moments))
                }
                Layer::Dense { post, .. } => {
                    let flat = h.shape()[1..].iter().product();
                    let (w, bias) = (p.next().unwrap(), p.next().unwrap());
                    let y = nn::linear(&h.reshape(&[b, flat]), w, bias);
                    apply_post(y, post, &mut |v| norm(v, &mut moments))
                }
                Layer::Residual { filters } => {
                    let (w1, b1, w2, b2) = (p.next().unwrap(), p.next().unwrap(), p.next().unwrap(), p.next().unwrap());
                    if h.shape().len() == 4 {
                        let g = ConvGeom { in_ch: filters, out_ch: filters, kernel: 3, stride: 1, pad: 1 };
                        let t = norm(&nn::conv2d(&h, w1, b1, g), &mut moments).relu();
                        let t = norm(&nn::conv2d(&t, w2, b2, g), &mut moments);
                        h.add(&t).relu()
                    } else {
                        let t = nn::linear(&h, w1, b1).leaky_relu(LEAKY_SLOPE);
                        let t = nn::linear(&t, w2, b2);
                        h.add(&t).leaky_relu(LEAKY_SLOPE)
                    }
                }
                Layer::BatchNorm => norm(&h, &mut moments),
                Layer::Tanh => h.tanh(),
            };
        }
        Ok(ForwardOut { output: h, moments })
    }

    /// Inference-mode forward on constants.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.forward_mode(&self.frozen(), &Var::constant(x.clone()), false)?;
        Ok(out.output.value().clone())
    }

    /// Folds batch statistics from a training-mode pass into the running
    /// estimates (unbiased variance).
    pub fn absorb_moments(&mut self, moments: &[BatchMoments], batch_rows: &[usize]) {
        for (i, (m, &n)) in moments.iter().zip(batch_rows).enumerate() {
            let correction = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let mean = &self.buffers[2 * i];
            let var = &self.buffers[2 * i + 1];
            let new_mean = mean.zip_map(&m.mean, |r, b| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b);
            let new_var = var.zip_map(&m.var, |r, b| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b * correction);
            self.buffers[2 * i] = new_mean;
            self.buffers[2 * i + 1] = new_var;
        }
    }

    /// Rows seen by each normalization site for a batch of `b` samples.
    pub fn norm_rows(&self, b: usize) -> Vec<usize> {
        let mut shape = self.arch.input_shape.clone();
        let mut rows = Vec::new();
        let spatial = |s: &[usize]| if s.len() == 3 { s[1] * s[2] } else { 1 };
        for layer in &self.arch.layers {
            match *layer {
                Layer::Conv { filters, kernel, stride, pad, post } => {
                    let o = ConvGeom { in_ch: shape[0], out_ch: filters, kernel, stride, pad }.out_size(shape[1]);
                    shape = vec![filters, o, o];
                    if post == Post::BatchRelu {
                        rows.push(b * o * o);
                    }
                }
                Layer::ConvT { filters, kernel, stride, pad, post } => {
                    let side = if shape.len() == 1 { 1 } else { shape[1] };
                    let o = ConvGeom { in_ch: shape[0], out_ch: filters, kernel, stride, pad }.transposed_out_size(side);
                    shape = vec![filters, o, o];
                    if post == Post::BatchRelu {
                        rows.push(b * o * o);
                    }
                }
                Layer::Dense { units, post } => {
                    shape = vec![units];
                    if post == Post::BatchRelu {
                        rows.push(b);
                    }
                }
                Layer::Residual { .. } => {
                    if shape.len() == 3 {
                        rows.extend([b * spatial(&shape); 2]);
                    }
                }
                Layer::BatchNorm => rows.push(b * spatial(&shape)),
                Layer::Tanh => {}
            }
        }
        rows
    }
}

fn apply_post(y: Var, post: Post, norm: &mut dyn FnMut(&Var) -> Var) -> Var {
    match post {
        Post::Identity => y,
        Post::Relu => y.relu(),
        Post::Leaky => y.leaky_relu(LEAKY_SLOPE),
        Post::BatchRelu => norm(&y).relu(),
        Post::LayerLeaky => nn::layer_norm(&y).leaky_relu(LEAKY_SLOPE),
    }
}

fn check_shapes(have: &[Tensor], new: &[Tensor]) -> Result<()> {
    if have.len() != new.len() || have.iter().zip(new).any(|(a, b)| a.shape() != b.shape()) {
        return Err(invalid("tensor list does not match the model's layout"));
    }
    Ok(())
}

impl Embed for Model {
    fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        let out = self.infer(batch)?;
        Ok(out.reshape(&[out.rows(), out.row_len()]))
    }
}

/// The fixed random convolutional feature map used for image Fréchet
/// scores: a downsampling trunk with `features` outputs, built from a
/// constant seed so that every run shares it.
pub fn image_embedder(data_shape: &[usize], features: usize) -> Result<Model> {
    let mut p = ArchParams::dcgan(data_shape[1], features, 1);
    p.data_shape = data_shape.to_vec();
    p.width = 16;
    let mut m = build_model(Role::WaeEncoder, ArchSpec::for_role(Role::WaeEncoder, &p)?, 0x00E3_BEDD)?;
    m.set_training(false);
    Ok(m)
}

/// `G(z)` in the model's current mode, with gradients to the parameters.
pub fn generator_forward(g: &Model, params: &[Var], z: &Var) -> Result<ForwardOut> {
    if g.role() != Role::Generator {
        return Err(Error::RoleMismatch {
            expected: Role::Generator.name().into(),
            found: g.role().name().into(),
        });
    }
    g.forward(params, z)
}

/// The rate encoder's output: quantized code plus the mapper input.
pub struct RateEncoding {
    pub code: QuantizationResult,
    /// Code (straight-through) followed by noise, shaped for the mapper.
    pub mapper_input: Var,
    pub moments: Vec<BatchMoments>,
}

/// Quantizes `E(x)` to sign corners and appends `noise` (`[b, noise_dim]`,
/// possibly zero-width) reshaped to the code map.
///
/// With `encoder = None` the code has zero sites and the mapper input is
/// the noise alone.
pub fn rate_encode(
    encoder: Option<(&Model, &[Var])>,
    x: &Var,
    noise: &Tensor,
    temperature: f64,
    mapper_input_shape: &[usize],
) -> Result<RateEncoding> {
    let b = x.shape()[0];
    if noise.rows() != b && noise.len() > 0 {
        return Err(invalid("noise batch size differs from the data batch"));
    }
    let (code, mut parts, moments) = match encoder {
        Some((e, params)) => {
            if e.role() != Role::RateEncoder {
                return Err(Error::RoleMismatch {
                    expected: Role::RateEncoder.name().into(),
                    found: e.role().name().into(),
                });
            }
            let out = e.forward(params, x)?;
            let sites: usize = out.output.shape()[1..].iter().product();
            let flat = out.output.reshape(&[b, sites]);
            let q = soft_quantize(&flat, &CodeSpec::sign_corners(sites), temperature)?;
            let st = q.surrogate.clone().expect("soft quantization yields a surrogate");
            (q, vec![st], out.moments)
        }
        None => {
            let q = QuantizationResult {
                symbols: Vec::new(),
                sites: 0,
                embedded: Tensor::zeros(&[b, 0]),
                surrogate: None,
            };
            (q, Vec::new(), Vec::new())
        }
    };
    let noise_dim = if noise.len() == 0 { 0 } else { noise.row_len() };
    if noise_dim > 0 {
        parts.push(Var::constant(noise.reshape(&[b, noise_dim])));
    }
    let width: usize = mapper_input_shape.iter().product();
    let got = code.sites + noise_dim;
    if got != width {
        return Err(Error::DimensionMismatch { expected: width, got });
    }
    let joined = match parts.len() {
        0 => Var::constant(Tensor::zeros(&[b, 0])),
        1 => parts.remove(0),
        _ => parts[0].concat_cols(&parts[1]),
    };
    let mut shape = vec![b];
    shape.extend(mapper_input_shape);
    Ok(RateEncoding {
        code,
        mapper_input: joined.reshape(&shape),
        moments,
    })
}

/// `B(code ⊕ noise)`.
pub fn mapper_forward(mapper: &Model, params: &[Var], input: &Var) -> Result<ForwardOut> {
    if mapper.role() != Role::Mapper {
        return Err(Error::RoleMismatch {
            expected: Role::Mapper.name().into(),
            found: mapper.role().name().into(),
        });
    }
    mapper.forward(params, input)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_conv(role: Role) -> Model {
        let mut p = ArchParams::dcgan(8, 4, 1);
        p.width = 2;
        p.code_channels = 1;
        p.noise_dim = 16;
        build_model(role, ArchSpec::for_role(role, &p).unwrap(), 3).unwrap()
    }

    #[test]
    fn mlp_shapes() {
        let p = ArchParams { code_channels: 3, ..ArchParams::mlp(2, 2) };
        for (role, inp, out) in [
            (Role::Generator, 2, vec![2]),
            (Role::WaeEncoder, 2, vec![2]),
            (Role::Critic, 2, vec![1]),
            (Role::RateEncoder, 2, vec![3]),
            (Role::Mapper, 5, vec![2]),
        ] {
            let m = build_model(role, ArchSpec::for_role(role, &p).unwrap(), 0).unwrap();
            assert_eq!(m.output_shape(), out, "{role}");
            let y = m.infer(&Tensor::zeros(&[4, inp])).unwrap();
            assert_eq!(y.rows(), 4);
        }
    }

    #[test]
    fn dcgan_64_shapes_follow_the_listing() {
        let mut p = ArchParams::dcgan(64, 128, 2);
        p.code_channels = 2;
        let plan = |r| ArchSpec::for_role(r, &p).unwrap().plan().unwrap().output_shape;
        assert_eq!(plan(Role::Generator), vec![3, 64, 64]);
        assert_eq!(plan(Role::RateEncoder), vec![2, 4, 4]);
        assert_eq!(plan(Role::WaeEncoder), vec![128]);
        assert_eq!(plan(Role::Critic), vec![1]);
        assert_eq!(plan(Role::Mapper), vec![128]);
        let g = ArchSpec::for_role(Role::Generator, &p).unwrap();
        let filters: Vec<usize> = g
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::ConvT { filters, .. } => Some(*filters),
                _ => None,
            })
            .collect();
        assert_eq!(filters, vec![512, 256, 128, 64, 64]);
        assert_eq!(p.code_sites().unwrap(), 32);
        assert_eq!(p.noise_channels().unwrap(), 8);
    }

    #[test]
    fn conv_models_run() {
        let g = small_conv(Role::Generator);
        let y = g.infer(&Tensor::full(&[2, 4], 0.3)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 8, 8]);
        assert!(y.data().iter().all(|v| v.abs() <= 1.0));
        let e = small_conv(Role::RateEncoder);
        assert_eq!(e.infer(&Tensor::zeros(&[2, 3, 8, 8])).unwrap().shape(), &[2, 1, 4, 4]);
        let b = small_conv(Role::Mapper);
        assert_eq!(b.infer(&Tensor::zeros(&[2, 2, 4, 4])).unwrap().shape(), &[2, 4]);
    }

    #[test]
    fn seeds_fix_initialization() {
        let p = ArchParams::mlp(2, 2);
        let spec = ArchSpec::for_role(Role::Generator, &p).unwrap();
        let a = build_model(Role::Generator, spec.clone(), 7).unwrap();
        let b = build_model(Role::Generator, spec.clone(), 7).unwrap();
        let c = build_model(Role::Generator, spec, 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn role_contract_is_enforced() {
        let p = ArchParams::mlp(2, 2);
        let critic_arch = ArchSpec::for_role(Role::Critic, &p).unwrap();
        assert!(build_model(Role::WaeEncoder, critic_arch, 0).is_err());
    }

    #[test]
    fn inconsistent_arch_is_rejected() {
        let arch = ArchSpec {
            family: ArchFamily::ConvDcgan,
            input_shape: vec![3, 4, 4],
            layers: vec![conv(8, 4, 2, Post::Relu), conv(8, 4, 2, Post::Relu), conv(8, 4, 2, Post::Relu)],
            latent_dim: 2,
            code_channels: 0,
            residual_blocks: 0,
        };
        assert!(arch.plan().is_err());
    }

    #[test]
    fn zero_rate_encoding_is_noise_only() {
        let x = Var::constant(Tensor::zeros(&[3, 2]));
        let noise = Tensor::full(&[3, 2], 0.5);
        let enc = rate_encode(None, &x, &noise, 1.0, &[2]).unwrap();
        assert_eq!(enc.mapper_input.value(), &noise);
        assert!(rate_encode(None, &x, &noise, 1.0, &[3]).is_err());
    }
}
