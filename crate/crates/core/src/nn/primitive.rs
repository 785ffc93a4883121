use std::cell::RefCell;

use ndarray::{Array1, ArrayD, Axis, Ix2, IxDyn};
use serde::{Deserialize, Serialize};

use super::{shape_err, Cache, Mode, Module, ModuleId, NnError, Param, Tensor};
use crate::rng::SplitMix64;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
pub const PRELU_INIT: f64 = 0.25;

/// Layer kind and shape. Convolutions use zero "same" padding of `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimitiveSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Dense plus bias: the plain softmax classifier head.
    LinearHead {
        inputs: usize,
        outputs: usize,
    },
    PRelu {
        channels: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    DepthwiseConv2d {
        channels: usize,
        kernel: usize,
        stride: usize,
    },
    /// One full-extent `height × width` kernel per channel.
    GlobalDepthwiseConv {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flatten,
}

impl PrimitiveSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: String| Err(NnError::ConfigInvalid(msg));
        let check_kernel = |k: usize, s: usize| {
            if k % 2 == 0 {
                bad(format!("kernel size must be odd, got {k}"))
            } else if s != 1 && s != 2 {
                bad(format!("stride must be 1 or 2, got {s}"))
            } else {
                Ok(())
            }
        };
        let dims_ok = match *self {
            PrimitiveSpec::Dense { inputs, outputs }
            | PrimitiveSpec::LinearHead { inputs, outputs } => inputs >= 1 && outputs >= 1,
            PrimitiveSpec::PRelu { channels } | PrimitiveSpec::BatchNorm { channels } => channels >= 1,
            PrimitiveSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                check_kernel(kernel, stride)?;
                in_channels >= 1 && out_channels >= 1
            }
            PrimitiveSpec::DepthwiseConv2d {
                channels,
                kernel,
                stride,
            } => {
                check_kernel(kernel, stride)?;
                channels >= 1
            }
            PrimitiveSpec::GlobalDepthwiseConv {
                channels,
                height,
                width,
            } => channels >= 1 && height >= 1 && width >= 1,
            PrimitiveSpec::Flatten => true,
        };
        if dims_ok {
            Ok(())
        } else {
            bad(format!("channel and feature counts must be ≥ 1 in {self:?}"))
        }
    }

    fn name(&self) -> &'static str {
        match self {
            PrimitiveSpec::Dense { .. } => "dense",
            PrimitiveSpec::LinearHead { .. } => "linear_head",
            PrimitiveSpec::PRelu { .. } => "prelu",
            PrimitiveSpec::BatchNorm { .. } => "batch_norm",
            PrimitiveSpec::Conv2d { .. } => "conv2d",
            PrimitiveSpec::DepthwiseConv2d { .. } => "depthwise_conv2d",
            PrimitiveSpec::GlobalDepthwiseConv { .. } => "global_depthwise_conv",
            PrimitiveSpec::Flatten => "flatten",
        }
    }
}

/// Output size of a same-padded convolution: `ceil(input / stride)`.
pub fn conv_out(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

fn he_normal(rng: &mut SplitMix64, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gaussian() * std)
}

#[derive(Debug, Clone)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// One network primitive with its parameters.
#[derive(Debug, Clone)]
pub struct Primitive {
    spec: PrimitiveSpec,
    params: Vec<Param>,
    running: RefCell<RunningStats>,
    id: ModuleId,
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(shape: &[usize], cout: usize, k: usize, stride: usize) -> Self {
        Self {
            batch: shape[0],
            cin: shape[1],
            h: shape[2],
            w: shape[3],
            cout,
            k,
            stride,
            ho: conv_out(shape[2], stride),
            wo: conv_out(shape[3], stride),
        }
    }

    /// Input coordinate for output `o` and kernel offset `kk`, if inside.
    #[inline]
    fn src(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - (self.k / 2) as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

fn conv_forward(x: &[f64], wt: &[f64], g: &ConvGeom, depthwise: bool) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.cout * g.ho * g.wo];
    let (h, w, k) = (g.h, g.w, g.k);
    for b in 0..g.batch {
        for o in 0..g.cout {
            let dst = &mut out[(b * g.cout + o) * g.ho * g.wo..][..g.ho * g.wo];
            let inputs = if depthwise { o..o + 1 } else { 0..g.cin };
            for i in inputs {
                let src = &x[(b * g.cin + i) * h * w..][..h * w];
                let kern = if depthwise {
                    &wt[o * k * k..][..k * k]
                } else {
                    &wt[(o * g.cin + i) * k * k..][..k * k]
                };
                for ky in 0..k {
                    for kx in 0..k {
                        let kv = kern[ky * k + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        for oy in 0..g.ho {
                            let Some(iy) = g.src(oy, ky, h) else { continue };
                            for ox in 0..g.wo {
                                if let Some(ix) = g.src(ox, kx, w) {
                                    dst[oy * g.wo + ox] += kv * src[iy * w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(x: &[f64], wt: &[f64], gout: &[f64], g: &ConvGeom, depthwise: bool) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let (h, w, k) = (g.h, g.w, g.k);
    for b in 0..g.batch {
        for o in 0..g.cout {
            let go = &gout[(b * g.cout + o) * g.ho * g.wo..][..g.ho * g.wo];
            let inputs = if depthwise { o..o + 1 } else { 0..g.cin };
            for i in inputs {
                let base = (b * g.cin + i) * h * w;
                let kbase = if depthwise { o * k * k } else { (o * g.cin + i) * k * k };
                for ky in 0..k {
                    for kx in 0..k {
                        let kv = wt[kbase + ky * k + kx];
                        let mut acc = 0.0;
                        for oy in 0..g.ho {
                            let Some(iy) = g.src(oy, ky, h) else { continue };
                            for ox in 0..g.wo {
                                if let Some(ix) = g.src(ox, kx, w) {
                                    let gv = go[oy * g.wo + ox];
                                    acc += gv * x[base + iy * w + ix];
                                    gx[base + iy * w + ix] += gv * kv;
                                }
                            }
                        }
                        gw[kbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Per-channel broadcast helpers for `N × C` and `N × C × H × W` tensors.
fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [n, c] => Some((*n, *c, 1)),
        [n, c, h, w] => Some((*n, *c, h * w)),
        _ => None,
    }
}

struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl Primitive {
    /// Builds a primitive with fresh parameters drawn from `rng`.
    pub fn new(spec: PrimitiveSpec, group: &str, rng: &mut SplitMix64) -> Result<Self, NnError> {
        spec.validate()?;
        let params = match spec {
            PrimitiveSpec::Dense { inputs, outputs } => {
                vec![Param::new("weight", group, he_normal(rng, &[inputs, outputs], inputs))]
            }
            PrimitiveSpec::LinearHead { inputs, outputs } => vec![
                Param::new("weight", group, he_normal(rng, &[inputs, outputs], inputs)),
                Param::new("bias", group, ArrayD::zeros(IxDyn(&[outputs]))),
            ],
            PrimitiveSpec::PRelu { channels } => vec![Param::new(
                "slope",
                group,
                ArrayD::from_elem(IxDyn(&[channels]), PRELU_INIT),
            )],
            PrimitiveSpec::BatchNorm { channels } => vec![
                Param::new("gamma", group, ArrayD::ones(IxDyn(&[channels]))),
                Param::new("beta", group, ArrayD::zeros(IxDyn(&[channels]))),
            ],
            PrimitiveSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![Param::new(
                "weight",
                group,
                he_normal(
                    rng,
                    &[out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                ),
            )],
            PrimitiveSpec::DepthwiseConv2d { channels, kernel, .. } => vec![Param::new(
                "weight",
                group,
                he_normal(rng, &[channels, kernel, kernel], kernel * kernel),
            )],
            PrimitiveSpec::GlobalDepthwiseConv {
                channels,
                height,
                width,
            } => vec![Param::new(
                "weight",
                group,
                he_normal(rng, &[channels, height, width], height * width),
            )],
            PrimitiveSpec::Flatten => vec![],
        };
        Ok(Self::assemble(spec, params))
    }

    /// Builds a primitive around explicit parameter tensors.
    pub fn with_params(spec: PrimitiveSpec, params: Vec<Param>) -> Result<Self, NnError> {
        spec.validate()?;
        let mut rng = SplitMix64::new(0);
        let template = Self::new(spec, "", &mut rng)?;
        if template.params.len() != params.len()
            || template
                .params
                .iter()
                .zip(&params)
                .any(|(t, p)| t.value.shape() != p.value.shape())
        {
            return Err(shape_err(spec.name(), "parameter shapes do not match the spec"));
        }
        Ok(Self::assemble(spec, params))
    }

    fn assemble(spec: PrimitiveSpec, params: Vec<Param>) -> Self {
        let channels = match spec {
            PrimitiveSpec::BatchNorm { channels } => channels,
            _ => 0,
        };
        Self {
            spec,
            params,
            running: RefCell::new(RunningStats {
                mean: vec![0.0; channels],
                var: vec![1.0; channels],
            }),
            id: ModuleId::new(),
        }
    }

    pub fn spec(&self) -> &PrimitiveSpec {
        &self.spec
    }

    /// Running `(mean, var)` of a batch-norm layer.
    pub fn running_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let r = self.running.borrow();
        (r.mean.clone(), r.var.clone())
    }

    fn weight(&self) -> &Tensor {
        &self.params[0].value
    }

    fn expect_rank(&self, x: &Tensor, rank: usize, channels: Option<usize>) -> Result<(), NnError> {
        let ok = x.ndim() == rank && channels.is_none_or(|c| x.shape()[1] == c);
        if ok {
            Ok(())
        } else {
            Err(shape_err(
                self.spec.name(),
                format!("unexpected input shape {:?}", x.shape()),
            ))
        }
    }

    fn forward_impl(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Cache), NnError> {
        let name = self.spec.name();
        match self.spec {
            PrimitiveSpec::Dense { inputs, .. } | PrimitiveSpec::LinearHead { inputs, .. } => {
                self.expect_rank(x, 2, Some(inputs))?;
                let x2 = x.view().into_dimensionality::<Ix2>().expect("rank 2");
                let w = self.weight().view().into_dimensionality::<Ix2>().expect("rank 2");
                let mut y = x2.dot(&w);
                if let Some(b) = self.params.get(1) {
                    y += &b.value.view().into_dimensionality::<ndarray::Ix1>().expect("rank 1");
                }
                Ok((y.into_dyn(), self.id.cache(x.clone())))
            }
            PrimitiveSpec::PRelu { channels } => {
                let (n, c, inner) = channel_layout(x.shape())
                    .filter(|l| l.1 == channels)
                    .ok_or_else(|| shape_err(name, format!("input {:?}", x.shape())))?;
                let slope = self.weight().as_slice().expect("contiguous");
                let xs = x.as_standard_layout();
                let xs = xs.as_slice().expect("contiguous");
                let mut y = vec![0.0; xs.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        for k in off..off + inner {
                            let v = xs[k];
                            y[k] = if v > 0.0 { v } else { slope[ch] * v };
                        }
                    }
                }
                let y = ArrayD::from_shape_vec(x.raw_dim(), y).expect("same size");
                Ok((y, self.id.cache(x.as_standard_layout().into_owned())))
            }
            PrimitiveSpec::BatchNorm { channels } => {
                let (n, c, inner) = channel_layout(x.shape())
                    .filter(|l| l.1 == channels)
                    .ok_or_else(|| shape_err(name, format!("input {:?}", x.shape())))?;
                let xs = x.as_standard_layout();
                let xs = xs.as_slice().expect("contiguous");
                let count = (n * inner) as f64;
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mut mean = vec![0.0; c];
                        let mut var = vec![0.0; c];
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * inner;
                                mean[ch] += xs[off..off + inner].iter().sum::<f64>();
                            }
                        }
                        mean.iter_mut().for_each(|m| *m /= count);
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * inner;
                                var[ch] += xs[off..off + inner]
                                    .iter()
                                    .map(|v| (v - mean[ch]).powi(2))
                                    .sum::<f64>();
                            }
                        }
                        var.iter_mut().for_each(|v| *v /= count);
                        let mut running = self.running.borrow_mut();
                        for ch in 0..c {
                            running.mean[ch] = BN_MOMENTUM * running.mean[ch] + (1.0 - BN_MOMENTUM) * mean[ch];
                            running.var[ch] = BN_MOMENTUM * running.var[ch] + (1.0 - BN_MOMENTUM) * var[ch];
                        }
                        (mean, var)
                    }
                    Mode::Eval => {
                        let r = self.running.borrow();
                        (r.mean.clone(), r.var.clone())
                    }
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let gamma = self.params[0].value.as_slice().expect("contiguous");
                let beta = self.params[1].value.as_slice().expect("contiguous");
                let mut xhat = vec![0.0; xs.len()];
                let mut y = vec![0.0; xs.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        for k in off..off + inner {
                            xhat[k] = (xs[k] - mean[ch]) * inv_std[ch];
                            y[k] = gamma[ch] * xhat[k] + beta[ch];
                        }
                    }
                }
                let xhat = ArrayD::from_shape_vec(x.raw_dim(), xhat).expect("same size");
                let y = ArrayD::from_shape_vec(x.raw_dim(), y).expect("same size");
                Ok((y, self.id.cache(BnCache { xhat, inv_std, mode })))
            }
            PrimitiveSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                self.expect_rank(x, 4, Some(in_channels))?;
                let g = ConvGeom::new(x.shape(), out_channels, kernel, stride);
                let xs = x.as_standard_layout().into_owned();
                let y = conv_forward(xs.as_slice().unwrap(), self.weight().as_slice().unwrap(), &g, false);
                let y = ArrayD::from_shape_vec(IxDyn(&[g.batch, g.cout, g.ho, g.wo]), y).unwrap();
                Ok((y, self.id.cache(xs)))
            }
            PrimitiveSpec::DepthwiseConv2d {
                channels,
                kernel,
                stride,
            } => {
                self.expect_rank(x, 4, Some(channels))?;
                let g = ConvGeom::new(x.shape(), channels, kernel, stride);
                let xs = x.as_standard_layout().into_owned();
                let y = conv_forward(xs.as_slice().unwrap(), self.weight().as_slice().unwrap(), &g, true);
                let y = ArrayD::from_shape_vec(IxDyn(&[g.batch, g.cout, g.ho, g.wo]), y).unwrap();
                Ok((y, self.id.cache(xs)))
            }
            PrimitiveSpec::GlobalDepthwiseConv {
                channels,
                height,
                width,
            } => {
                self.expect_rank(x, 4, Some(channels))?;
                if x.shape()[2] != height || x.shape()[3] != width {
                    return Err(shape_err(
                        name,
                        format!("kernel {height}×{width} but input {:?}", x.shape()),
                    ));
                }
                let n = x.shape()[0];
                let xs = x.as_standard_layout().into_owned();
                let w = self.weight().as_slice().unwrap();
                let area = height * width;
                let y = xs
                    .as_slice()
                    .unwrap()
                    .chunks(area)
                    .enumerate()
                    .map(|(k, plane)| {
                        let ch = k % channels;
                        plane.iter().zip(&w[ch * area..][..area]).map(|(a, b)| a * b).sum()
                    })
                    .collect();
                let y = ArrayD::from_shape_vec(IxDyn(&[n, channels, 1, 1]), y).unwrap();
                Ok((y, self.id.cache(xs)))
            }
            PrimitiveSpec::Flatten => {
                if x.ndim() < 2 {
                    return Err(shape_err(name, "need a batch axis and at least one feature axis"));
                }
                let n = x.shape()[0];
                let rest = x.len() / n.max(1);
                let y = x
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&[n, rest]))
                    .expect("same size");
                Ok((y, self.id.cache(x.raw_dim())))
            }
        }
    }

    fn backward_impl(&self, cache: &Cache, gout: &Tensor) -> Result<(Tensor, Vec<Tensor>), NnError> {
        let name = self.spec.name();
        match self.spec {
            PrimitiveSpec::Dense { .. } | PrimitiveSpec::LinearHead { .. } => {
                let x: &Tensor = self.id.open(cache)?;
                let x2 = x.view().into_dimensionality::<Ix2>().unwrap();
                let g2 = gout
                    .view()
                    .into_dimensionality::<Ix2>()
                    .map_err(|_| shape_err(name, "upstream gradient must be rank 2"))?;
                let w = self.weight().view().into_dimensionality::<Ix2>().unwrap();
                if g2.dim() != (x2.nrows(), w.ncols()) {
                    return Err(shape_err(name, "upstream gradient shape"));
                }
                let gx = g2.dot(&w.t());
                let gw = x2.t().dot(&g2);
                let mut grads = vec![gw.into_dyn()];
                if self.params.len() == 2 {
                    grads.push(g2.sum_axis(Axis(0)).into_dyn());
                }
                Ok((gx.into_dyn(), grads))
            }
            PrimitiveSpec::PRelu { .. } => {
                let x: &Tensor = self.id.open(cache)?;
                if gout.shape() != x.shape() {
                    return Err(shape_err(name, "upstream gradient shape"));
                }
                let (n, c, inner) = channel_layout(x.shape()).unwrap();
                let slope = self.weight().as_slice().unwrap();
                let xs = x.as_slice().unwrap();
                let gs = gout.as_standard_layout();
                let gs = gs.as_slice().unwrap();
                let mut gx = vec![0.0; xs.len()];
                let mut ga = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        for k in off..off + inner {
                            if xs[k] > 0.0 {
                                gx[k] = gs[k];
                            } else {
                                gx[k] = slope[ch] * gs[k];
                                ga[ch] += gs[k] * xs[k];
                            }
                        }
                    }
                }
                Ok((
                    ArrayD::from_shape_vec(x.raw_dim(), gx).unwrap(),
                    vec![Array1::from(ga).into_dyn()],
                ))
            }
            PrimitiveSpec::BatchNorm { .. } => {
                let bc: &BnCache = self.id.open(cache)?;
                if gout.shape() != bc.xhat.shape() {
                    return Err(shape_err(name, "upstream gradient shape"));
                }
                let (n, c, inner) = channel_layout(bc.xhat.shape()).unwrap();
                let gamma = self.params[0].value.as_slice().unwrap();
                let xhat = bc.xhat.as_slice().unwrap();
                let gs = gout.as_standard_layout();
                let gs = gs.as_slice().unwrap();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        for k in off..off + inner {
                            dgamma[ch] += gs[k] * xhat[k];
                            dbeta[ch] += gs[k];
                        }
                    }
                }
                let count = (n * inner) as f64;
                let mut gx = vec![0.0; xhat.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        let scale = gamma[ch] * bc.inv_std[ch];
                        for k in off..off + inner {
                            gx[k] = match bc.mode {
                                Mode::Eval => scale * gs[k],
                                // dβ = Σ dy and dγ = Σ dy·x̂ are the two batch sums.
                                Mode::Train => {
                                    scale * (gs[k] - dbeta[ch] / count - xhat[k] * dgamma[ch] / count)
                                }
                            };
                        }
                    }
                }
                Ok((
                    ArrayD::from_shape_vec(bc.xhat.raw_dim(), gx).unwrap(),
                    vec![Array1::from(dgamma).into_dyn(), Array1::from(dbeta).into_dyn()],
                ))
            }
            PrimitiveSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                ..
            }
            | PrimitiveSpec::DepthwiseConv2d {
                channels: out_channels,
                kernel,
                stride,
            } => {
                let depthwise = matches!(self.spec, PrimitiveSpec::DepthwiseConv2d { .. });
                let x: &Tensor = self.id.open(cache)?;
                let g = ConvGeom::new(x.shape(), out_channels, kernel, stride);
                if gout.shape() != [g.batch, g.cout, g.ho, g.wo] {
                    return Err(shape_err(name, "upstream gradient shape"));
                }
                let gs = gout.as_standard_layout();
                let (gx, gw) = conv_backward(
                    x.as_slice().unwrap(),
                    self.weight().as_slice().unwrap(),
                    gs.as_slice().unwrap(),
                    &g,
                    depthwise,
                );
                Ok((
                    ArrayD::from_shape_vec(x.raw_dim(), gx).unwrap(),
                    vec![ArrayD::from_shape_vec(self.weight().raw_dim(), gw).unwrap()],
                ))
            }
            PrimitiveSpec::GlobalDepthwiseConv {
                channels,
                height,
                width,
            } => {
                let x: &Tensor = self.id.open(cache)?;
                let n = x.shape()[0];
                if gout.shape() != [n, channels, 1, 1] {
                    return Err(shape_err(name, "upstream gradient shape"));
                }
                let area = height * width;
                let xs = x.as_slice().unwrap();
                let w = self.weight().as_slice().unwrap();
                let gs = gout.as_standard_layout();
                let gs = gs.as_slice().unwrap();
                let mut gx = vec![0.0; xs.len()];
                let mut gw = vec![0.0; w.len()];
                for (k, &gv) in gs.iter().enumerate() {
                    let ch = k % channels;
                    for a in 0..area {
                        gx[k * area + a] = gv * w[ch * area + a];
                        gw[ch * area + a] += gv * xs[k * area + a];
                    }
                }
                Ok((
                    ArrayD::from_shape_vec(x.raw_dim(), gx).unwrap(),
                    vec![ArrayD::from_shape_vec(self.weight().raw_dim(), gw).unwrap()],
                ))
            }
            PrimitiveSpec::Flatten => {
                let dim: &IxDyn = self.id.open(cache)?;
                let gx = gout
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(dim.clone())
                    .map_err(|_| shape_err(name, "upstream gradient shape"))?;
                Ok((gx, vec![]))
            }
        }
    }
}

impl Module for Primitive {
    fn forward(&self, input: &Tensor, mode: Mode) -> Result<(Tensor, Cache), NnError> {
        self.forward_impl(input, mode)
    }

    fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>), NnError> {
        self.backward_impl(cache, grad_out)
    }

    fn params(&self) -> Vec<&Param> {
        self.params.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.id.bump();
        self.params.iter_mut().collect()
    }

    fn box_clone(&self) -> Box<dyn Module> {
        Box::new(self.clone())
    }
}
