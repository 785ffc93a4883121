use super::{walk, ArchError, ArchSpec, CbamBlock, CbamConfig, Operator};
use crate::nn::{Cache, Mode, Module, ModuleId, NnError, Param, Primitive, PrimitiveSpec, Sequential, Tensor};
use crate::rng::SplitMix64;

fn conv(cin: usize, cout: usize, kernel: usize, stride: usize) -> PrimitiveSpec {
    PrimitiveSpec::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride,
    }
}

/// Initial scale of the projection in blocks with an identity shortcut, so
/// that a deep stack without batch norm starts close to the identity.
const RESIDUAL_GAIN: f64 = 0.25;

struct Builder<'r> {
    layers: Vec<Box<dyn Module>>,
    batch_norm: bool,
    rng: &'r mut SplitMix64,
}

impl Builder<'_> {
    fn push(&mut self, spec: PrimitiveSpec, group: &str) -> Result<(), NnError> {
        self.push_scaled(spec, group, 1.0)
    }

    fn push_scaled(&mut self, spec: PrimitiveSpec, group: &str, gain: f64) -> Result<(), NnError> {
        let mut p = Primitive::new(spec, group, self.rng)?;
        if gain != 1.0 {
            for param in p.params_mut() {
                param.value.mapv_inplace(|v| v * gain);
            }
        }
        self.layers.push(Box::new(p));
        Ok(())
    }

    /// Convolution, optional batch norm, optional PReLU. Convolutions not
    /// followed by an activation start at half the He variance, further
    /// scaled by `gain`.
    fn unit(&mut self, spec: PrimitiveSpec, channels: usize, act: bool, group: &str) -> Result<(), NnError> {
        self.unit_scaled(spec, channels, act, group, 1.0)
    }

    fn unit_scaled(
        &mut self,
        spec: PrimitiveSpec,
        channels: usize,
        act: bool,
        group: &str,
        gain: f64,
    ) -> Result<(), NnError> {
        let gain = if act { gain } else { gain * std::f64::consts::FRAC_1_SQRT_2 };
        self.push_scaled(spec, group, gain)?;
        if self.batch_norm {
            self.push(PrimitiveSpec::BatchNorm { channels }, group)?;
        }
        if act {
            self.push(PrimitiveSpec::PRelu { channels }, group)?;
        }
        Ok(())
    }

    fn finish(self) -> Sequential {
        Sequential::new(self.layers)
    }
}

/// Inverted residual: 1×1 expansion to `t·C_in` + PReLU, 3×3 depthwise
/// (strided) + PReLU, linear 1×1 projection, optional attention, and an
/// identity shortcut when the stride is 1 and channel counts match.
#[derive(Clone)]
pub struct BottleneckBlock {
    branch: Sequential,
    residual: bool,
    id: ModuleId,
}

impl BottleneckBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        t: usize,
        c_out: usize,
        stride: usize,
        cbam: Option<CbamConfig>,
        batch_norm: bool,
        group: &str,
        rng: &mut SplitMix64,
    ) -> Result<Self, NnError> {
        if t == 0 {
            return Err(NnError::ConfigInvalid("expansion factor must be ≥ 1".into()));
        }
        let e = t * c_in;
        let mut b = Builder {
            layers: Vec::new(),
            batch_norm,
            rng,
        };
        b.unit(conv(c_in, e, 1, 1), e, true, group)?;
        b.unit(
            PrimitiveSpec::DepthwiseConv2d {
                channels: e,
                kernel: 3,
                stride,
            },
            e,
            true,
            group,
        )?;
        let residual = stride == 1 && c_in == c_out;
        let gain = if residual { RESIDUAL_GAIN } else { 1.0 };
        b.unit_scaled(conv(e, c_out, 1, 1), c_out, false, group, gain)?;
        if let Some(cfg) = cbam {
            let block = CbamBlock::new(c_out, cfg, group, b.rng)?;
            b.layers.push(Box::new(block));
        }
        Ok(Self {
            branch: b.finish(),
            residual,
            id: ModuleId::new(),
        })
    }

    pub fn has_residual(&self) -> bool {
        self.residual
    }
}

impl Module for BottleneckBlock {
    fn forward(&self, input: &Tensor, mode: Mode) -> Result<(Tensor, Cache), NnError> {
        let (mut y, c) = self.branch.forward(input, mode)?;
        if self.residual {
            y += input;
        }
        Ok((y, self.id.cache(c)))
    }

    fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>), NnError> {
        let c: &Cache = self.id.open(cache)?;
        let (mut gx, grads) = self.branch.backward(c, grad_out)?;
        if self.residual {
            gx += grad_out;
        }
        Ok((gx, grads))
    }

    fn params(&self) -> Vec<&Param> {
        self.branch.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.id.bump();
        self.branch.params_mut()
    }

    fn box_clone(&self) -> Box<dyn Module> {
        Box::new(self.clone())
    }
}

/// Trainable network for `arch` with channels scaled by `width_mult` and a
/// square `input_size` input. The global depthwise kernel spans whatever
/// spatial size reaches it. Output is `N × embedding`. The final projection
/// is in parameter group `embedding`, everything else in `backbone`.
pub fn instantiate_toy(
    arch: &ArchSpec,
    width_mult: f64,
    input_size: usize,
    rng: &mut SplitMix64,
) -> Result<Sequential, ArchError> {
    let scaled = arch.scaled(width_mult, input_size)?;
    let plan = walk(&scaled)?;
    let cbam = scaled.cbam_config();
    let mut b = Builder {
        layers: Vec::new(),
        batch_norm: scaled.batch_norm,
        rng,
    };
    for (layer, reps) in scaled.layers.iter().zip(plan) {
        for (input, output, stride) in reps {
            let c = output.c;
            match layer.operator {
                Operator::Conv3x3 => b.unit(conv(input.c, c, 3, stride), c, true, "backbone")?,
                Operator::DWConv3x3 => b.unit(
                    PrimitiveSpec::DepthwiseConv2d {
                        channels: c,
                        kernel: 3,
                        stride,
                    },
                    c,
                    true,
                    "backbone",
                )?,
                Operator::Conv1x1 => b.unit(conv(input.c, c, 1, stride), c, true, "backbone")?,
                Operator::Bottleneck => {
                    let t = layer.t.expect("validated");
                    let block = BottleneckBlock::new(input.c, t, c, stride, cbam, scaled.batch_norm, "backbone", b.rng)?;
                    b.layers.push(Box::new(block));
                }
                Operator::LinearGDConv7x7 => b.unit(
                    PrimitiveSpec::GlobalDepthwiseConv {
                        channels: c,
                        height: input.h,
                        width: input.w,
                    },
                    c,
                    false,
                    "backbone",
                )?,
                Operator::LinearConv1x1 => b.unit(conv(input.c, c, 1, 1), c, false, "embedding")?,
            }
        }
    }
    b.push(PrimitiveSpec::Flatten, "backbone")?;
    Ok(b.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_default_arch, count_flops_params, CbamScope, GateKind};
    use crate::test_util::{central_diff, max_rel_error, random_array};
    use ndarray::IxDyn;

    const CBAM: CbamConfig = CbamConfig {
        reduction: 4,
        gate: GateKind::OnePlusTanh,
        scope: CbamScope::Both,
    };

    #[test]
    fn zero_branch_is_pure_residual() {
        let mut rng = SplitMix64::new(1);
        let mut b = BottleneckBlock::new(8, 2, 8, 1, Some(CBAM), false, "backbone", &mut rng).unwrap();
        assert!(b.has_residual());
        for p in b.params_mut() {
            if p.value.ndim() != 1 {
                p.value.fill(0.0);
            }
        }
        let x = random_array(&mut rng, IxDyn(&[2, 8, 4, 4]));
        assert_eq!(b.forward(&x, Mode::Eval).unwrap().0, x);
    }

    #[test]
    fn stride_two_halves_and_drops_residual() {
        let mut rng = SplitMix64::new(2);
        let b = BottleneckBlock::new(8, 2, 8, 2, Some(CBAM), false, "backbone", &mut rng).unwrap();
        assert!(!b.has_residual());
        let x = random_array(&mut rng, IxDyn(&[1, 8, 5, 5]));
        assert_eq!(b.forward(&x, Mode::Eval).unwrap().0.shape(), &[1, 8, 3, 3]);
        let c = BottleneckBlock::new(8, 2, 16, 1, None, false, "backbone", &mut rng).unwrap();
        assert!(!c.has_residual());
    }

    #[test]
    fn bottleneck_matches_finite_differences() {
        let mut rng = SplitMix64::new(3);
        let b = BottleneckBlock::new(8, 2, 8, 1, Some(CBAM), false, "backbone", &mut rng).unwrap();
        let x = random_array(&mut rng, IxDyn(&[2, 8, 4, 4]));
        let up = random_array(&mut rng, IxDyn(&[2, 8, 4, 4]));
        let (_, cache) = b.forward(&x, Mode::Train).unwrap();
        let (dx, grads) = b.backward(&cache, &up).unwrap();
        let fd = central_diff(&x, 1e-6, |xp| (b.forward(xp, Mode::Train).unwrap().0 * &up).sum());
        assert!(max_rel_error(&dx, &fd) < 1e-4);
        for (p, g) in grads.iter().enumerate() {
            let base = b.params()[p].value.clone();
            let fd = central_diff(&base, 1e-6, |v| {
                let mut bp = b.clone();
                bp.params_mut()[p].value = v.clone();
                (bp.forward(&x, Mode::Train).unwrap().0 * &up).sum()
            });
            assert!(max_rel_error(g, &fd) < 1e-4, "param {p}");
        }
    }

    #[test]
    fn full_width_parameters_match_report() {
        let arch = build_default_arch();
        let net = instantiate_toy(&arch, 1.0, 112, &mut SplitMix64::new(4)).unwrap();
        let report = count_flops_params(&arch).unwrap();
        assert_eq!(net.param_count() as u64, report.totals.params_total);
    }

    #[test]
    fn small_toy_embeds_to_scaled_width() {
        let net = instantiate_toy(&build_default_arch(), 0.125, 28, &mut SplitMix64::new(5)).unwrap();
        let x = random_array(&mut SplitMix64::new(6), IxDyn(&[2, 3, 28, 28]));
        let (y, _) = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[2, 64]);
        let groups: Vec<_> = net.params().iter().map(|p| p.group.clone()).collect();
        assert_eq!(groups.last().map(String::as_str), Some("embedding"));
    }

    #[test]
    fn batch_norm_flag_adds_layers() {
        let mut arch = build_default_arch();
        let plain = instantiate_toy(&arch, 0.125, 28, &mut SplitMix64::new(5)).unwrap();
        arch.batch_norm = true;
        let bn = instantiate_toy(&arch, 0.125, 28, &mut SplitMix64::new(5)).unwrap();
        assert!(bn.param_count() > plain.param_count());
    }
}
