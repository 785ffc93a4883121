//! Declarative mobile face-embedding network: layer table, shape inference,
//! parameter and multiply-accumulate accounting, and a width-scaled
//! trainable instantiation.

mod blocks;
mod cbam;

pub use blocks::{instantiate_toy, BottleneckBlock};
pub use cbam::{CbamBlock, CbamConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{conv_out, NnError};

/// Kernel size of the spatial attention convolution.
pub const SPATIAL_KERNEL: usize = 7;
pub const DEFAULT_CBAM_REDUCTION: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("shape inference failed at layer {layer}: {detail}")]
    ShapeInferenceFailure { layer: usize, detail: String },
    #[error("invalid layer {layer}: {detail}")]
    InvalidLayer { layer: usize, detail: String },
    #[error("invalid architecture configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operator {
    Conv3x3,
    DWConv3x3,
    Bottleneck,
    Conv1x1,
    /// Depthwise convolution spanning the whole input plane, no activation.
    LinearGDConv7x7,
    LinearConv1x1,
}

impl Operator {
    pub fn name(self) -> &'static str {
        match self {
            Operator::Conv3x3 => "Conv3x3",
            Operator::DWConv3x3 => "DWConv3x3",
            Operator::Bottleneck => "Bottleneck",
            Operator::Conv1x1 => "Conv1x1",
            Operator::LinearGDConv7x7 => "LinearGDConv7x7",
            Operator::LinearConv1x1 => "LinearConv1x1",
        }
    }
}

/// One table row: `n` repeats of `operator`, the first with stride `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub operator: Operator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    pub c: usize,
    #[serde(default = "one")]
    pub n: usize,
    #[serde(default = "one")]
    pub s: usize,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn new(operator: Operator, c: usize) -> Self {
        Self {
            operator,
            t: None,
            c,
            n: 1,
            s: 1,
        }
    }

    pub fn bottleneck(t: usize, c: usize, n: usize, s: usize) -> Self {
        Self {
            operator: Operator::Bottleneck,
            t: Some(t),
            c,
            n,
            s,
        }
    }

    pub fn stride(self, s: usize) -> Self {
        Self { s, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateKind {
    /// `1 + tanh(a)`, in (0, 2).
    OnePlusTanh,
    Sigmoid,
}

impl GateKind {
    /// Gate value. `OnePlusTanh` is evaluated as `2σ(2a)` and kept strictly
    /// inside (0, 2) where the exact value would round to an endpoint.
    pub fn apply(self, a: f64) -> f64 {
        match self {
            GateKind::OnePlusTanh => (2.0 / (1.0 + (-2.0 * a).exp())).clamp(f64::MIN_POSITIVE, 2.0 - f64::EPSILON),
            GateKind::Sigmoid => 1.0 / (1.0 + (-a).exp()),
        }
    }

    /// Derivative expressed through the gate value `g`.
    pub fn slope(self, g: f64) -> f64 {
        match self {
            GateKind::OnePlusTanh => g * (2.0 - g),
            GateKind::Sigmoid => g * (1.0 - g),
        }
    }
}

/// Which attention gates use the configured gate kind; the other one uses
/// a sigmoid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CbamScope {
    #[default]
    Both,
    SpatialOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}×{}×{}", self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
    pub use_cbam: bool,
    #[serde(default = "default_reduction")]
    pub cbam_reduction: usize,
    #[serde(default = "default_gate")]
    pub cbam_gate: GateKind,
    #[serde(default)]
    pub cbam_scope: CbamScope,
    /// Batch norm after every convolution in instantiated models. Never
    /// counted in [`FlopsReport`].
    #[serde(default)]
    pub batch_norm: bool,
}

fn default_reduction() -> usize {
    DEFAULT_CBAM_REDUCTION
}

fn default_gate() -> GateKind {
    GateKind::OnePlusTanh
}

/// The 112×112 network: eleven rows ending in a 512-d embedding, attention
/// in every bottleneck.
pub fn build_default_arch() -> ArchSpec {
    use Operator::*;
    ArchSpec {
        input_shape: Shape::new(112, 112, 3),
        layers: vec![
            LayerSpec::new(Conv3x3, 64).stride(2),
            LayerSpec::new(DWConv3x3, 64),
            LayerSpec::bottleneck(2, 64, 1, 2),
            LayerSpec::bottleneck(2, 64, 9, 1),
            LayerSpec::bottleneck(4, 128, 1, 2),
            LayerSpec::bottleneck(2, 128, 16, 1),
            LayerSpec::bottleneck(8, 256, 1, 2),
            LayerSpec::bottleneck(2, 256, 6, 1),
            LayerSpec::new(Conv1x1, 1024),
            LayerSpec::new(LinearGDConv7x7, 1024),
            LayerSpec::new(LinearConv1x1, 512),
        ],
        use_cbam: true,
        cbam_reduction: DEFAULT_CBAM_REDUCTION,
        cbam_gate: GateKind::OnePlusTanh,
        cbam_scope: CbamScope::Both,
        batch_norm: false,
    }
}

impl ArchSpec {
    pub fn embedding_dim(&self) -> Option<usize> {
        self.layers.last().map(|l| l.c)
    }

    pub fn cbam_config(&self) -> Option<CbamConfig> {
        self.use_cbam.then_some(CbamConfig {
            reduction: self.cbam_reduction,
            gate: self.cbam_gate,
            scope: self.cbam_scope,
        })
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        let Shape { h, w, c } = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(ArchError::ConfigInvalid(format!("empty input shape {}", self.input_shape)));
        }
        if self.layers.is_empty() {
            return Err(ArchError::ConfigInvalid("no layers".into()));
        }
        if self.use_cbam && self.cbam_reduction == 0 {
            return Err(ArchError::ConfigInvalid("cbam_reduction must be ≥ 1".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let bad = |detail: String| Err(ArchError::InvalidLayer { layer: i, detail });
            if l.n == 0 || l.c == 0 {
                return bad(format!("c and n must be ≥ 1, got c={} n={}", l.c, l.n));
            }
            if l.s != 1 && l.s != 2 {
                return bad(format!("stride must be 1 or 2, got {}", l.s));
            }
            match (l.operator, l.t) {
                (Operator::Bottleneck, Some(t)) if t >= 1 => {}
                (Operator::Bottleneck, _) => return bad("bottleneck needs an expansion factor t ≥ 1".into()),
                (op, Some(_)) => return bad(format!("{} takes no expansion factor", op.name())),
                _ => {}
            }
        }
        Ok(())
    }

    /// Same table with every channel count scaled by `width_mult` (floored,
    /// at least 1) and a square `input_size` input.
    pub fn scaled(&self, width_mult: f64, input_size: usize) -> Result<ArchSpec, ArchError> {
        if !(width_mult > 0.0 && width_mult <= 1.0) {
            return Err(ArchError::ConfigInvalid(format!("width_mult must be in (0, 1], got {width_mult}")));
        }
        if ![28, 56, 112].contains(&input_size) {
            return Err(ArchError::ConfigInvalid(format!(
                "input size must be 28, 56 or 112, got {input_size}"
            )));
        }
        let scale = |c: usize| ((c as f64 * width_mult).floor() as usize).max(1);
        Ok(ArchSpec {
            input_shape: Shape::new(input_size, input_size, self.input_shape.c),
            layers: self.layers.iter().map(|l| LayerSpec { c: scale(l.c), ..*l }).collect(),
            ..self.clone()
        })
    }
}

/// Output shape of one application of `layer` with stride `stride`.
fn step_shape(layer: &LayerSpec, stride: usize, input: Shape, index: usize) -> Result<Shape, ArchError> {
    let fail = |detail: String| Err(ArchError::ShapeInferenceFailure { layer: index, detail });
    let strided = Shape::new(conv_out(input.h, stride), conv_out(input.w, stride), layer.c);
    match layer.operator {
        Operator::Conv3x3 | Operator::Conv1x1 | Operator::Bottleneck => Ok(strided),
        Operator::DWConv3x3 if layer.c != input.c => {
            fail(format!("depthwise layer cannot map {} channels to {}", input.c, layer.c))
        }
        Operator::DWConv3x3 => Ok(strided),
        Operator::LinearGDConv7x7 if layer.c != input.c => {
            fail(format!("global depthwise layer cannot map {} channels to {}", input.c, layer.c))
        }
        Operator::LinearGDConv7x7 if stride != 1 => fail("global depthwise layer takes no stride".into()),
        Operator::LinearGDConv7x7 => Ok(Shape::new(1, 1, layer.c)),
        Operator::LinearConv1x1 if (input.h, input.w) != (1, 1) || stride != 1 => fail(format!(
            "embedding projection needs a 1×1 input with stride 1, got {input} stride {stride}"
        )),
        Operator::LinearConv1x1 => Ok(strided),
    }
}

/// Input shape of every repeat of every layer, paired with its output.
pub(crate) fn walk(arch: &ArchSpec) -> Result<Vec<Vec<(Shape, Shape, usize)>>, ArchError> {
    arch.validate()?;
    let mut shape = arch.input_shape;
    let mut out = Vec::with_capacity(arch.layers.len());
    for (i, layer) in arch.layers.iter().enumerate() {
        let mut repeats = Vec::with_capacity(layer.n);
        for r in 0..layer.n {
            let stride = if r == 0 { layer.s } else { 1 };
            let next = step_shape(layer, stride, shape, i)?;
            repeats.push((shape, next, stride));
            shape = next;
        }
        out.push(repeats);
    }
    Ok(out)
}

/// Output shape of each layer row, after all of its repeats.
pub fn infer_shapes(arch: &ArchSpec) -> Result<Vec<Shape>, ArchError> {
    Ok(walk(arch)?
        .into_iter()
        .map(|reps| reps.last().expect("n ≥ 1").1)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        self.params += o.params;
        self.macs += o.macs;
    }
}

/// Attention block on an `h × w × c` map: shared two-layer MLP applied to
/// two pooled descriptors plus one 2→1 spatial convolution. Gating
/// multiplies are not counted.
pub fn cbam_cost(h: usize, w: usize, c: usize, reduction: usize) -> Cost {
    let hidden = (c / reduction).max(1) as u64;
    let (h, w, c) = (h as u64, w as u64, c as u64);
    let k2 = (SPATIAL_KERNEL * SPATIAL_KERNEL) as u64;
    Cost {
        params: 2 * c * hidden + 2 * k2,
        macs: 2 * (2 * c * hidden) + h * w * 2 * k2,
    }
}

/// Cost of one repeat. Convolutions count output positions × kernel volume
/// × fan-in; depthwise layers count per channel. PReLU slopes are counted
/// as parameters.
fn repeat_cost(arch: &ArchSpec, layer: &LayerSpec, input: Shape, output: Shape) -> Cost {
    let (hi, wi, ci) = (input.h as u64, input.w as u64, input.c as u64);
    let (ho, wo, co) = (output.h as u64, output.w as u64, output.c as u64);
    let out_area = ho * wo;
    match layer.operator {
        Operator::Conv3x3 => Cost {
            params: 9 * ci * co + co,
            macs: out_area * co * 9 * ci,
        },
        Operator::DWConv3x3 => Cost {
            params: 9 * co + co,
            macs: out_area * 9 * co,
        },
        Operator::Conv1x1 => Cost {
            params: ci * co + co,
            macs: out_area * ci * co,
        },
        Operator::Bottleneck => {
            let e = layer.t.unwrap_or(1) as u64 * ci;
            let mut cost = Cost {
                params: ci * e + e + 9 * e + e + e * co,
                macs: hi * wi * ci * e + out_area * 9 * e + out_area * e * co,
            };
            if arch.use_cbam {
                cost += cbam_cost(output.h, output.w, output.c, arch.cbam_reduction);
            }
            cost
        }
        Operator::LinearGDConv7x7 => Cost {
            params: hi * wi * ci,
            macs: hi * wi * ci,
        },
        Operator::LinearConv1x1 => Cost {
            params: ci * co,
            macs: out_area * ci * co,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub layer: String,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsTotals {
    pub params_total: u64,
    pub macs_total: u64,
    /// `2 × macs_total`.
    pub flops_total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub rows: Vec<FlopsRow>,
    pub totals: FlopsTotals,
}

impl FlopsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,out_h,out_w,out_c,params,macs\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.layer, r.out_h, r.out_w, r.out_c, r.params, r.macs
            ));
        }
        out
    }
}

/// Per-row parameter and MAC counts, repeats aggregated. Batch norm is
/// never counted.
pub fn count_flops_params(arch: &ArchSpec) -> Result<FlopsReport, ArchError> {
    let rows: Vec<FlopsRow> = walk(arch)?
        .into_iter()
        .zip(&arch.layers)
        .enumerate()
        .map(|(i, (reps, layer))| {
            let mut cost = Cost::default();
            for &(input, output, _) in &reps {
                cost += repeat_cost(arch, layer, input, output);
            }
            let out = reps.last().expect("n ≥ 1").1;
            FlopsRow {
                layer: format!("{i}_{}", layer.operator.name()),
                out_h: out.h,
                out_w: out.w,
                out_c: out.c,
                params: cost.params,
                macs: cost.macs,
            }
        })
        .collect();
    let params_total = rows.iter().map(|r| r.params).sum();
    let macs_total = rows.iter().map(|r| r.macs).sum();
    Ok(FlopsReport {
        rows,
        totals: FlopsTotals {
            params_total,
            macs_total,
            flops_total: 2 * macs_total,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Input column of the reference table, one entry per row.
    const TABLE_INPUTS: [Shape; 11] = [
        Shape::new(112, 112, 3),
        Shape::new(56, 56, 64),
        Shape::new(56, 56, 64),
        Shape::new(28, 28, 64),
        Shape::new(28, 28, 64),
        Shape::new(14, 14, 128),
        Shape::new(14, 14, 128),
        Shape::new(7, 7, 256),
        Shape::new(7, 7, 256),
        Shape::new(7, 7, 1024),
        Shape::new(1, 1, 1024),
    ];

    #[test]
    fn default_table_rows() {
        let a = build_default_arch();
        assert_eq!(a.layers.len(), 11);
        assert_eq!(a.embedding_dim(), Some(512));
        let bn: Vec<_> = a.layers.iter().filter(|l| l.operator == Operator::Bottleneck).collect();
        assert_eq!(bn.iter().map(|l| l.n).collect::<Vec<_>>(), [1, 9, 1, 16, 1, 6]);
        assert_eq!(bn.iter().map(|l| l.t.unwrap()).collect::<Vec<_>>(), [2, 2, 4, 2, 8, 2]);
    }

    #[test]
    fn shapes_follow_table() {
        let a = build_default_arch();
        let outs = infer_shapes(&a).unwrap();
        let inputs: Vec<Shape> = std::iter::once(a.input_shape).chain(outs[..10].iter().copied()).collect();
        assert_eq!(inputs, TABLE_INPUTS);
        assert_eq!(outs[10], Shape::new(1, 1, 512));
    }

    #[test]
    fn first_conv_macs() {
        let r = count_flops_params(&build_default_arch()).unwrap();
        assert_eq!(r.rows[0].macs, 5_419_008);
        let t = r.totals;
        assert!((0.7e9..=1.3e9).contains(&(t.flops_total as f64)), "{t:?}");
        assert_eq!(t.params_total, r.rows.iter().map(|x| x.params).sum::<u64>());
    }

    #[test]
    fn pointwise_on_single_pixel() {
        let a = ArchSpec {
            input_shape: Shape::new(1, 1, 48),
            layers: vec![LayerSpec::new(Operator::LinearConv1x1, 20)],
            ..build_default_arch()
        };
        assert_eq!(count_flops_params(&a).unwrap().rows[0].macs, 48 * 20);
    }

    #[test]
    fn removing_shape_preserving_rows_is_additive() {
        let full = count_flops_params(&build_default_arch()).unwrap();
        for idx in [1, 3, 5, 7] {
            let mut a = build_default_arch();
            a.layers.remove(idx);
            let less = count_flops_params(&a).unwrap();
            assert_eq!(less.totals.macs_total + full.rows[idx].macs, full.totals.macs_total);
            assert_eq!(less.totals.params_total + full.rows[idx].params, full.totals.params_total);
        }
    }

    #[test]
    fn shape_failures_name_the_layer() {
        let mut a = build_default_arch();
        a.layers[1].c = 32;
        assert!(matches!(infer_shapes(&a), Err(ArchError::ShapeInferenceFailure { layer: 1, .. })));
        let mut a = build_default_arch();
        a.layers.remove(9);
        assert!(matches!(infer_shapes(&a), Err(ArchError::ShapeInferenceFailure { layer: 9, .. })));
        let mut a = build_default_arch();
        a.layers[2].t = None;
        assert!(matches!(a.validate(), Err(ArchError::InvalidLayer { layer: 2, .. })));
    }

    #[test]
    fn json_round_trip_uses_table_field_names() {
        let a = build_default_arch();
        let text = serde_json::to_string(&a).unwrap();
        assert!(text.contains(r#"{"operator":"Bottleneck","t":2,"c":64,"n":1,"s":2}"#));
        assert_eq!(serde_json::from_str::<ArchSpec>(&text).unwrap(), a);
    }

    #[test]
    fn gate_values() {
        assert_eq!(GateKind::OnePlusTanh.apply(0.0), 1.0);
        assert_eq!(GateKind::Sigmoid.apply(0.0), 0.5);
        for a in [-1e300, -800.0, -20.0, 20.0, 800.0, 1e300] {
            let g = GateKind::OnePlusTanh.apply(a);
            assert!(g > 0.0 && g < 2.0, "{a} → {g}");
        }
        let a: f64 = 0.3;
        assert!((GateKind::OnePlusTanh.apply(a) - (1.0 + a.tanh())).abs() < 1e-15);
    }

    #[test]
    fn scaling_rules() {
        let s = build_default_arch().scaled(0.125, 28).unwrap();
        assert_eq!(s.embedding_dim(), Some(64));
        assert_eq!(infer_shapes(&s).unwrap()[9], Shape::new(1, 1, 128));
        assert!(build_default_arch().scaled(0.0, 28).is_err());
        assert!(build_default_arch().scaled(0.5, 30).is_err());
    }
}
