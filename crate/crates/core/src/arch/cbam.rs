use ndarray::{Array2, Array4, Axis, Ix2, Ix4};
use serde::{Deserialize, Serialize};

use super::{CbamScope, GateKind, SPATIAL_KERNEL};
use crate::nn::{Cache, Mode, Module, ModuleId, NnError, Param, Primitive, PrimitiveSpec, Tensor};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CbamConfig {
    pub reduction: usize,
    pub gate: GateKind,
    pub scope: CbamScope,
}

impl CbamConfig {
    pub fn hidden(&self, channels: usize) -> usize {
        (channels / self.reduction.max(1)).max(1)
    }
}

/// Channel attention followed by spatial attention.
///
/// The channel gate comes from a shared bias-free `C → C/r → C` MLP (ReLU
/// inside) applied to the average- and max-pooled descriptors and summed.
/// The spatial gate comes from a 7×7 convolution over the channel-wise mean
/// and max of the channel-gated map.
#[derive(Debug, Clone)]
pub struct CbamBlock {
    channels: usize,
    config: CbamConfig,
    fc1: Primitive,
    fc2: Primitive,
    spatial: Primitive,
    id: ModuleId,
}

struct MlpPass {
    c1: Cache,
    pre: Array2<f64>,
    c2: Cache,
}

struct CbamCache {
    x: Array4<f64>,
    argmax_hw: Vec<usize>,
    avg_pass: MlpPass,
    max_pass: MlpPass,
    gate_c: Array2<f64>,
    y1: Array4<f64>,
    argmax_c: Vec<usize>,
    conv: Cache,
    gate_s: Array4<f64>,
}

fn to4(t: &Tensor, what: &'static str) -> Result<Array4<f64>, NnError> {
    t.view()
        .into_dimensionality::<Ix4>()
        .map(|v| v.to_owned())
        .map_err(|_| NnError::ShapeMismatch {
            layer: what,
            detail: format!("expected N × C × H × W, got {:?}", t.shape()),
        })
}

fn to2(t: Tensor) -> Array2<f64> {
    t.into_dimensionality::<Ix2>().expect("dense output is a matrix")
}

impl CbamBlock {
    pub fn new(channels: usize, config: CbamConfig, group: &str, rng: &mut SplitMix64) -> Result<Self, NnError> {
        let hidden = config.hidden(channels);
        Ok(Self {
            channels,
            config,
            fc1: Primitive::new(
                PrimitiveSpec::Dense {
                    inputs: channels,
                    outputs: hidden,
                },
                group,
                rng,
            )?,
            fc2: Primitive::new(
                PrimitiveSpec::Dense {
                    inputs: hidden,
                    outputs: channels,
                },
                group,
                rng,
            )?,
            spatial: Primitive::new(
                PrimitiveSpec::Conv2d {
                    in_channels: 2,
                    out_channels: 1,
                    kernel: SPATIAL_KERNEL,
                    stride: 1,
                },
                group,
                rng,
            )?,
            id: ModuleId::new(),
        })
    }

    fn channel_gate(&self) -> GateKind {
        match self.config.scope {
            CbamScope::Both => self.config.gate,
            CbamScope::SpatialOnly => GateKind::Sigmoid,
        }
    }

    fn mlp(&self, d: Array2<f64>, mode: Mode) -> Result<(Array2<f64>, MlpPass), NnError> {
        let (pre, c1) = self.fc1.forward(&d.into_dyn(), mode)?;
        let pre = to2(pre);
        let (out, c2) = self.fc2.forward(&pre.mapv(|v| v.max(0.0)).into_dyn(), mode)?;
        Ok((to2(out), MlpPass { c1, pre, c2 }))
    }

    fn mlp_backward(&self, pass: &MlpPass, g: &Array2<f64>) -> Result<(Array2<f64>, Vec<Tensor>), NnError> {
        let (gr, mut g2) = self.fc2.backward(&pass.c2, &g.clone().into_dyn())?;
        let ga = to2(gr) * pass.pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let (gd, mut g1) = self.fc1.backward(&pass.c1, &ga.into_dyn())?;
        g1.append(&mut g2);
        Ok((to2(gd), g1))
    }
}

impl Module for CbamBlock {
    fn forward(&self, input: &Tensor, mode: Mode) -> Result<(Tensor, Cache), NnError> {
        let x = to4(input, "cbam")?;
        let (n, c, h, w) = x.dim();
        if c != self.channels {
            return Err(NnError::ShapeMismatch {
                layer: "cbam",
                detail: format!("expected {} channels, got {c}", self.channels),
            });
        }
        let area = (h * w) as f64;
        let mut avg = Array2::zeros((n, c));
        let mut mx = Array2::zeros((n, c));
        let mut argmax_hw = vec![0; n * c];
        for i in 0..n {
            for ch in 0..c {
                let plane = x.index_axis(Axis(0), i);
                let plane = plane.index_axis(Axis(0), ch);
                let (mut best, mut arg, mut sum) = (f64::NEG_INFINITY, 0, 0.0);
                for (k, &v) in plane.iter().enumerate() {
                    sum += v;
                    if v > best {
                        best = v;
                        arg = k;
                    }
                }
                avg[[i, ch]] = sum / area;
                mx[[i, ch]] = best;
                argmax_hw[i * c + ch] = arg;
            }
        }
        let (oa, avg_pass) = self.mlp(avg, mode)?;
        let (om, max_pass) = self.mlp(mx, mode)?;
        let cg = self.channel_gate();
        let gate_c = (oa + om).mapv(|a| cg.apply(a));

        let mut y1 = x.clone();
        for ((i, ch, _, _), v) in y1.indexed_iter_mut() {
            *v *= gate_c[[i, ch]];
        }
        let mut pooled = Array4::zeros((n, 2, h, w));
        let mut argmax_c = vec![0; n * h * w];
        for i in 0..n {
            for r in 0..h {
                for q in 0..w {
                    let (mut best, mut arg, mut sum) = (f64::NEG_INFINITY, 0, 0.0);
                    for ch in 0..c {
                        let v = y1[[i, ch, r, q]];
                        sum += v;
                        if v > best {
                            best = v;
                            arg = ch;
                        }
                    }
                    pooled[[i, 0, r, q]] = sum / c as f64;
                    pooled[[i, 1, r, q]] = best;
                    argmax_c[(i * h + r) * w + q] = arg;
                }
            }
        }
        let (pre_s, conv) = self.spatial.forward(&pooled.into_dyn(), mode)?;
        let sg = self.config.gate;
        let gate_s = to4(&pre_s, "cbam")?.mapv(|a| sg.apply(a));
        let mut out = y1.clone();
        for ((i, _, r, q), v) in out.indexed_iter_mut() {
            *v *= gate_s[[i, 0, r, q]];
        }
        let cache = CbamCache {
            x,
            argmax_hw,
            avg_pass,
            max_pass,
            gate_c,
            y1,
            argmax_c,
            conv,
            gate_s,
        };
        Ok((out.into_dyn(), self.id.cache(cache)))
    }

    fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>), NnError> {
        let k: &CbamCache = self.id.open(cache)?;
        let g = to4(grad_out, "cbam")?;
        if g.dim() != k.x.dim() {
            return Err(NnError::ShapeMismatch {
                layer: "cbam",
                detail: format!("upstream {:?} vs output {:?}", g.shape(), k.x.shape()),
            });
        }
        let (n, c, h, w) = k.x.dim();
        let sg = self.config.gate;
        let mut d_pre_s = Array4::zeros((n, 1, h, w));
        let mut d_y1 = g.clone();
        for ((i, ch, r, q), v) in d_y1.indexed_iter_mut() {
            *v *= k.gate_s[[i, 0, r, q]];
            d_pre_s[[i, 0, r, q]] += g[[i, ch, r, q]] * k.y1[[i, ch, r, q]];
        }
        for ((i, _, r, q), v) in d_pre_s.indexed_iter_mut() {
            *v *= sg.slope(k.gate_s[[i, 0, r, q]]);
        }
        let (d_pooled, g_spatial) = self.spatial.backward(&k.conv, &d_pre_s.into_dyn())?;
        let d_pooled = to4(&d_pooled, "cbam")?;
        for i in 0..n {
            for r in 0..h {
                for q in 0..w {
                    let share = d_pooled[[i, 0, r, q]] / c as f64;
                    for ch in 0..c {
                        d_y1[[i, ch, r, q]] += share;
                    }
                    d_y1[[i, k.argmax_c[(i * h + r) * w + q], r, q]] += d_pooled[[i, 1, r, q]];
                }
            }
        }

        let cg = self.channel_gate();
        let mut d_pre_c = Array2::zeros((n, c));
        let mut dx = d_y1.clone();
        for ((i, ch, r, q), v) in dx.indexed_iter_mut() {
            *v *= k.gate_c[[i, ch]];
            d_pre_c[[i, ch]] += d_y1[[i, ch, r, q]] * k.x[[i, ch, r, q]];
        }
        for ((i, ch), v) in d_pre_c.indexed_iter_mut() {
            *v *= cg.slope(k.gate_c[[i, ch]]);
        }
        let (d_avg, ga) = self.mlp_backward(&k.avg_pass, &d_pre_c)?;
        let (d_max, gm) = self.mlp_backward(&k.max_pass, &d_pre_c)?;
        let area = (h * w) as f64;
        for i in 0..n {
            for ch in 0..c {
                let share = d_avg[[i, ch]] / area;
                dx.index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|v| v + share);
                let a = k.argmax_hw[i * c + ch];
                dx[[i, ch, a / w, a % w]] += d_max[[i, ch]];
            }
        }
        let mut grads: Vec<Tensor> = ga.into_iter().zip(gm).map(|(a, b)| a + b).collect();
        grads.extend(g_spatial);
        Ok((dx.into_dyn(), grads))
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p.extend(self.spatial.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.id.bump();
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        p.extend(self.spatial.params_mut());
        p
    }

    fn box_clone(&self) -> Box<dyn Module> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::cbam_cost;
    use crate::test_util::{central_diff, max_rel_error, random_array};
    use ndarray::IxDyn;

    fn block(gate: GateKind, scope: CbamScope, seed: u64) -> CbamBlock {
        let config = CbamConfig {
            reduction: 4,
            gate,
            scope,
        };
        CbamBlock::new(8, config, "backbone", &mut SplitMix64::new(seed)).unwrap()
    }

    fn zero_pre_activations(b: &mut CbamBlock) {
        let mut ps = b.params_mut();
        ps[1].value.fill(0.0);
        ps[2].value.fill(0.0);
    }

    #[test]
    fn unit_gates_pass_input_through() {
        let mut b = block(GateKind::OnePlusTanh, CbamScope::Both, 1);
        zero_pre_activations(&mut b);
        let x = random_array(&mut SplitMix64::new(2), IxDyn(&[2, 8, 4, 4]));
        let (y, _) = b.forward(&x, Mode::Train).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn sigmoid_gates_halve_twice() {
        let mut b = block(GateKind::Sigmoid, CbamScope::Both, 1);
        zero_pre_activations(&mut b);
        let x = random_array(&mut SplitMix64::new(2), IxDyn(&[1, 8, 3, 3]));
        let (y, _) = b.forward(&x, Mode::Train).unwrap();
        assert!(max_rel_error(&y, &x.mapv(|v| v * 0.25)) < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (gate, scope) in [
            (GateKind::OnePlusTanh, CbamScope::Both),
            (GateKind::Sigmoid, CbamScope::Both),
            (GateKind::OnePlusTanh, CbamScope::SpatialOnly),
        ] {
            let b = block(gate, scope, 3);
            let mut rng = SplitMix64::new(4);
            let x = random_array(&mut rng, IxDyn(&[2, 8, 4, 4]));
            let up = random_array(&mut rng, IxDyn(&[2, 8, 4, 4]));
            let objective = |b: &CbamBlock, x: &Tensor| (b.forward(x, Mode::Train).unwrap().0 * &up).sum();
            let (_, cache) = b.forward(&x, Mode::Train).unwrap();
            let (dx, grads) = b.backward(&cache, &up).unwrap();
            let fd = central_diff(&x, 1e-6, |xp| objective(&b, xp));
            assert!(max_rel_error(&dx, &fd) < 1e-4, "{gate:?} {scope:?} input");
            for (p, g) in grads.iter().enumerate() {
                let base = b.params()[p].value.clone();
                let fd = central_diff(&base, 1e-6, |v| {
                    let mut bp = b.clone();
                    bp.params_mut()[p].value = v.clone();
                    objective(&bp, &x)
                });
                assert!(max_rel_error(g, &fd) < 1e-4, "{gate:?} {scope:?} param {p}");
            }
        }
    }

    #[test]
    fn parameter_count_matches_cost() {
        let b = block(GateKind::OnePlusTanh, CbamScope::Both, 1);
        assert_eq!(b.param_count() as u64, cbam_cost(4, 4, 8, 4).params);
        let wide = CbamConfig {
            reduction: 16,
            gate: GateKind::OnePlusTanh,
            scope: CbamScope::Both,
        };
        assert_eq!(wide.hidden(8), 1);
    }

    #[test]
    fn rejects_wrong_channels() {
        let b = block(GateKind::OnePlusTanh, CbamScope::Both, 1);
        let x = Tensor::zeros(IxDyn(&[1, 5, 4, 4]));
        assert!(matches!(b.forward(&x, Mode::Eval), Err(NnError::ShapeMismatch { .. })));
    }
}
