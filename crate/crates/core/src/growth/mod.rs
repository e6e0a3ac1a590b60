//! Width growth with functionality preservation and variance transfer.
//!
//! A weight is viewed as `out × in × unit`, where `unit` is the kernel area
//! for convolutions and the per-channel feature count for a linear layer fed
//! by a flatten. Growing `C_out → C_out + 2a` and `C_in → C_in + 2b` produces
//!
//! ```text
//! [ s·W   +Z  −Z ]   (old rows)
//! [  V            ]   (a new rows)
//! [  V            ]   (the same a rows again)
//! ```
//!
//! Duplicated producer units feed `+Z` and `−Z`, which cancel, and the
//! duplicated `V` rows keep the new features pairwise equal for the next
//! consumer. `s` is the variance-transfer rescale of the old weights; where a
//! BatchNorm follows, its statistics absorb `s`, elsewhere the layer's gain
//! divides it back out.

mod partition;

pub use partition::{Block, StagePartition, TensorBlocks};

use crate::error::{Error, Result};
use crate::nn::{Layer, LayerKind, LayerRole, LayerState, Network, Param, ParamId, ParamKind};
use crate::tensor::{Rng, Tensor};

/// Default relative norm of symmetry-breaking noise.
pub const DEFAULT_NOISE_SCALE: f64 = 1e-3;

/// How old weights are rescaled and new weights initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VtMode {
    /// No rescaling; new weights drawn with variance `1/fan_in`.
    Standard,
    /// Fan-in ratio rescaling and role-specific new variances.
    Transfer,
    /// Like `Transfer`, but input and hidden layers are rescaled to produce
    /// unit-variance features from the empirical weight variance.
    Constraint,
}

/// How new units are created.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Fresh `V` rows and `±Z` cancelling columns.
    PlusMinus,
    /// Copy existing units and split their outgoing weights (replication foil).
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthOptions {
    pub vt: VtMode,
    pub noise_scale: f64,
    pub strategy: Strategy,
}

impl Default for GrowthOptions {
    fn default() -> Self {
        Self {
            vt: VtMode::Transfer,
            noise_scale: DEFAULT_NOISE_SCALE,
            strategy: Strategy::PlusMinus,
        }
    }
}

/// Width change of one weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthDelta {
    pub layer: usize,
    pub old_in: usize,
    pub old_out: usize,
    pub new_in: usize,
    pub new_out: usize,
    pub noise_scale: f64,
    /// Factor applied to the old weight block.
    pub rescale: f64,
}

/// Shape change of one parameter tensor. Old entries sit in the leading corner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorDelta {
    pub id: ParamId,
    pub old_shape: Vec<usize>,
    pub new_shape: Vec<usize>,
}

/// Outcome of [`grow_network`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GrowthReport {
    /// Stage index of the blocks created by this step.
    pub stage: usize,
    pub layers: Vec<GrowthDelta>,
    pub tensors: Vec<TensorDelta>,
}

impl GrowthReport {
    pub fn is_noop(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of weight entries added per weighted layer, in layer order.
    pub fn new_weight_counts(&self) -> Vec<usize> {
        self.tensors
            .iter()
            .filter(|d| d.id.kind == ParamKind::Weight)
            .map(|d| d.new_shape.iter().product::<usize>() - d.old_shape.iter().product::<usize>())
            .collect()
    }
}

/// Old-weight factor for a role: 1, `sqrt(c_old/c_new)` or `c_old/c_new`.
pub fn rescale_factor(role: LayerRole, c_old: usize, c_new: usize) -> Result<f64> {
    if c_old == 0 || c_new < c_old {
        return Err(Error::arg(format!(
            "rescale needs 0 < c_old <= c_new, got {c_old}, {c_new}"
        )));
    }
    let r = c_old as f64 / c_new as f64;
    Ok(match role {
        LayerRole::Input => 1.0,
        LayerRole::Hidden => r.sqrt(),
        LayerRole::Output => r,
    })
}

pub fn rescale_old_weights(
    w: &Tensor,
    role: LayerRole,
    c_old: usize,
    c_new: usize,
) -> Result<Tensor> {
    Ok(w.scale(rescale_factor(role, c_old, c_new)?))
}

/// Variance of freshly created weights. `fan_in` is the old fan-in, `new_fan_in` the grown one.
pub fn new_weight_variance(role: LayerRole, fan_in: usize, new_fan_in: usize, mode: VtMode) -> f64 {
    match (mode, role) {
        (_, LayerRole::Input) => 1.0 / fan_in as f64,
        (VtMode::Standard, _) | (_, LayerRole::Hidden) => 1.0 / new_fan_in as f64,
        (_, LayerRole::Output) => 1.0 / (new_fan_in as f64).powi(2),
    }
}

/// Factor `sqrt(1/(c_in·Var[W]))` that makes `W` produce unit-variance
/// features from unit-variance inputs. Output layers keep factor 1.
pub fn vt_constraint_scaling(w: &Tensor, role: LayerRole, c_in: usize) -> Result<f64> {
    if role == LayerRole::Output {
        return Ok(1.0);
    }
    let var = w.var();
    // rounding leaves a tiny variance on constant tensors
    let second_moment = w.sum_squares() / w.len().max(1) as f64;
    if !(var > 4.0 * f64::EPSILON * second_moment) || c_in == 0 {
        return Err(Error::Degenerate("weight variance is zero".into()));
    }
    Ok((1.0 / (c_in as f64 * var)).sqrt())
}

/// Adjusts running statistics after the producing layer was scaled by `c`:
/// mean by `c`, variance by `c²`. Epsilon is scaled by `c²` as well so the
/// normalization is exactly invariant.
pub fn rescale_batchnorm(state: &mut LayerState, c: f64) -> Result<()> {
    if !(c > 0.0) {
        return Err(Error::arg(format!(
            "batchnorm rescale factor must be positive, got {c}"
        )));
    }
    let (Some(m), Some(v)) = (state.running_mean.as_mut(), state.running_var.as_mut()) else {
        return Err(Error::arg("layer has no running statistics"));
    };
    m.scale_in_place(c);
    v.scale_in_place(c * c);
    state.bn_eps *= c * c;
    Ok(())
}

fn perturb(block: &mut [f64], rng: &mut Rng, scale: f64) {
    let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
    if scale == 0.0 || norm == 0.0 {
        return;
    }
    let noise: Vec<f64> = (0..block.len()).map(|_| rng.standard_normal()).collect();
    let nn = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nn == 0.0 {
        return;
    }
    let k = scale * norm / nn;
    for (b, n) in block.iter_mut().zip(noise) {
        *b += k * n;
    }
}

/// Adds Gaussian noise with Frobenius norm `scale × ‖block‖` to every block.
pub fn add_symmetry_noise(blocks: &mut [Tensor], rng: &mut Rng, scale: f64) -> Result<()> {
    if !(scale >= 0.0) {
        return Err(Error::arg(format!(
            "noise scale must be non-negative, got {scale}"
        )));
    }
    for b in blocks {
        perturb(b.data_mut(), rng, scale);
    }
    Ok(())
}

/// Parameters of one weight expansion, with increments counted in channels.
#[derive(Debug, Clone, Copy)]
struct Expansion {
    d_in: usize,
    d_out: usize,
    unit: usize,
    scale: f64,
    var_z: f64,
    var_v: f64,
    noise: f64,
}

struct Expanded {
    weight: Vec<f64>,
    rows: usize,
    cin: usize,
    v: Option<Tensor>,
}

fn sample(rng: &mut Rng, n: usize, var: f64) -> Vec<f64> {
    let sd = var.sqrt();
    (0..n).map(|_| sd * rng.standard_normal()).collect()
}

/// Applies the block construction to a flat `rows × cin × unit` weight.
fn expand(data: &[f64], rows: usize, cin: usize, ex: Expansion, rng: &mut Rng) -> Result<Expanded> {
    if ex.d_in % 2 != 0 || ex.d_out % 2 != 0 {
        return Err(Error::arg(format!(
            "width increments must be even, got {} in / {} out",
            ex.d_in, ex.d_out
        )));
    }
    let u = ex.unit;
    let (hi, ho) = (ex.d_in / 2, ex.d_out / 2);
    let new_cin = cin + ex.d_in;
    let row_len = new_cin * u;
    let z = (hi > 0).then(|| sample(rng, rows * hi * u, ex.var_z));
    let v = (ho > 0).then(|| sample(rng, ho * row_len, ex.var_v));
    let mut out = vec![0.0; (rows + ex.d_out) * row_len];
    for r in 0..rows {
        let dst = &mut out[r * row_len..(r + 1) * row_len];
        for (d, s) in dst[..cin * u]
            .iter_mut()
            .zip(&data[r * cin * u..(r + 1) * cin * u])
        {
            *d = s * ex.scale;
        }
        if let Some(z) = &z {
            let zr = &z[r * hi * u..(r + 1) * hi * u];
            dst[cin * u..(cin + hi) * u].copy_from_slice(zr);
            for (d, s) in dst[(cin + hi) * u..].iter_mut().zip(zr) {
                *d = -s;
            }
        }
    }
    if let Some(v) = &v {
        let base = rows * row_len;
        out[base..base + v.len()].copy_from_slice(v);
        out[base + v.len()..].copy_from_slice(v);
    }
    if ex.noise > 0.0 {
        if hi > 0 {
            for half in 0..2 {
                let mut block: Vec<f64> = (0..rows)
                    .flat_map(|r| {
                        let s = r * row_len + (cin + half * hi) * u;
                        out[s..s + hi * u].to_vec()
                    })
                    .collect();
                perturb(&mut block, rng, ex.noise);
                for (r, chunk) in block.chunks(hi * u).enumerate() {
                    let s = r * row_len + (cin + half * hi) * u;
                    out[s..s + hi * u].copy_from_slice(chunk);
                }
            }
        }
        if ho > 0 {
            let n = ho * row_len;
            let base = rows * row_len;
            perturb(&mut out[base..base + n], rng, ex.noise);
            perturb(&mut out[base + n..base + 2 * n], rng, ex.noise);
        }
    }
    Ok(Expanded {
        weight: out,
        rows: rows + ex.d_out,
        cin: new_cin,
        v: v.map(|v| Tensor::from_vec(vec![ho, row_len], v).expect("sized")),
    })
}

fn weight_layout(w: &Tensor) -> Result<(usize, usize, usize)> {
    if w.rank() < 2 {
        return Err(Error::arg(format!(
            "weight must be at least 2-d, got {:?}",
            w.shape()
        )));
    }
    Ok((w.dim(0), w.dim(1), w.shape()[2..].iter().product()))
}

fn reshaped(w: &Tensor, e: Expanded) -> Result<Tensor> {
    let mut shape = w.shape().to_vec();
    shape[0] = e.rows;
    shape[1] = e.cin;
    Tensor::from_vec(shape, e.weight)
}

/// Adds `new_out − C_out` rows made of two identical copies of `V ~ N(0, 1/C_in)`.
/// Returns the grown weight and `V`.
pub fn grow_input_layer(w: &Tensor, new_out: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let (rows, cin, unit) = weight_layout(w)?;
    let d_out = new_out
        .checked_sub(rows)
        .ok_or_else(|| Error::arg(format!("cannot shrink {rows} outputs to {new_out}")))?;
    let ex = Expansion {
        d_in: 0,
        d_out,
        unit,
        scale: 1.0,
        var_z: 0.0,
        var_v: new_weight_variance(LayerRole::Input, cin * unit, cin * unit, VtMode::Transfer),
        noise: 0.0,
    };
    let e = expand(w.data(), rows, cin, ex, rng)?;
    let v =
        e.v.clone()
            .unwrap_or_else(|| Tensor::zeros(&[0, cin * unit]));
    Ok((reshaped(w, e)?, v))
}

/// Hidden-layer construction `[[s·W, +Z, −Z], [V; V]]` with `s = sqrt(C_in/new_in)`
/// and `Z`, `V` drawn with variance `1/new_fan_in`.
pub fn grow_hidden_layer(
    w: &Tensor,
    new_in: usize,
    new_out: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let (rows, cin, unit) = weight_layout(w)?;
    if new_in < cin {
        return Err(Error::structural(
            0,
            format!("consumer expects {cin} inputs, producer offers {new_in}"),
        ));
    }
    let d_out = new_out
        .checked_sub(rows)
        .ok_or_else(|| Error::arg(format!("cannot shrink {rows} outputs to {new_out}")))?;
    let var = new_weight_variance(
        LayerRole::Hidden,
        cin * unit,
        new_in * unit,
        VtMode::Transfer,
    );
    let ex = Expansion {
        d_in: new_in - cin,
        d_out,
        unit,
        scale: rescale_factor(LayerRole::Hidden, cin, new_in)?,
        var_z: var,
        var_v: var,
        noise: 0.0,
    };
    reshaped(w, expand(w.data(), rows, cin, ex, rng)?)
}

/// Output-layer construction `[s·W, +Z, −Z]` with `s = C_in/new_in` and
/// `Z` drawn with variance `1/new_fan_in²`.
pub fn grow_output_layer(w: &Tensor, new_in: usize, rng: &mut Rng) -> Result<Tensor> {
    let (rows, cin, unit) = weight_layout(w)?;
    if new_in < cin {
        return Err(Error::structural(
            0,
            format!("consumer expects {cin} inputs, producer offers {new_in}"),
        ));
    }
    let ex = Expansion {
        d_in: new_in - cin,
        d_out: 0,
        unit,
        scale: rescale_factor(LayerRole::Output, cin, new_in)?,
        var_z: new_weight_variance(
            LayerRole::Output,
            cin * unit,
            new_in * unit,
            VtMode::Transfer,
        ),
        var_v: 0.0,
        noise: 0.0,
    };
    reshaped(w, expand(w.data(), rows, cin, ex, rng)?)
}

/// Replication: new rows copy row `j mod rows`, new input channels copy channel
/// `j mod cin`, and every copied input channel's columns are divided by its
/// multiplicity.
fn replicate(
    data: &[f64],
    rows: usize,
    cin: usize,
    d_in: usize,
    d_out: usize,
    unit: usize,
) -> Expanded {
    let new_cin = cin + d_in;
    let mut mult = vec![1.0; cin];
    for j in 0..d_in {
        mult[j % cin] += 1.0;
    }
    let row_len = new_cin * unit;
    let mut out = vec![0.0; (rows + d_out) * row_len];
    for r in 0..rows + d_out {
        let src_row = if r < rows { r } else { (r - rows) % rows };
        for c in 0..new_cin {
            let src_c = if c < cin { c } else { (c - cin) % cin };
            for k in 0..unit {
                out[r * row_len + c * unit + k] =
                    data[(src_row * cin + src_c) * unit + k] / mult[src_c];
            }
        }
    }
    Expanded {
        weight: out,
        rows: rows + d_out,
        cin: new_cin,
        v: None,
    }
}

fn grow_vector(t: &Tensor, d: usize, fill: impl Fn(usize) -> f64) -> Tensor {
    let mut data = t.data().to_vec();
    let n = data.len();
    data.extend((0..d).map(|j| fill(j % n.max(1))));
    let len = data.len();
    Tensor::from_vec(vec![len], data).expect("vector")
}

fn grow_param(p: &mut Param, value: Tensor) {
    p.grad = Tensor::zeros(value.shape());
    p.value = value;
}

/// Embeds `old` (laid out as `old_shape`) into the leading corner of a zero
/// buffer of `new_shape`, the layout growth uses for surviving entries.
pub fn embed_corner(old: &[f64], old_shape: &[usize], new_shape: &[usize]) -> Result<Vec<f64>> {
    let (r0, c0, i0) = partition::matrix_dims(old_shape);
    let (r1, c1, i1) = partition::matrix_dims(new_shape);
    if old.len() != r0 * c0 * i0 || r1 < r0 || c1 < c0 || i1 != i0 {
        return Err(Error::Dimension {
            op: "embed_corner",
            left: old_shape.to_vec(),
            right: new_shape.to_vec(),
        });
    }
    let mut out = vec![0.0; r1 * c1 * i1];
    for r in 0..r0 {
        out[r * c1 * i1..(r * c1 + c0) * i1].copy_from_slice(&old[r * c0 * i0..(r + 1) * c0 * i0]);
    }
    Ok(out)
}

/// Grows every growable layer (see [`Network::growable_layers`]) to `targets`
/// in topological order. With noise 0 the function of the network is
/// unchanged. Requests equal to the current widths leave the network,
/// including its partition and stage index, untouched.
pub fn grow_network(
    net: &mut Network,
    targets: &[usize],
    rng: &mut Rng,
    opts: &GrowthOptions,
) -> Result<GrowthReport> {
    let growable = net.growable_layers();
    if targets.len() != growable.len() {
        return Err(Error::arg(format!(
            "expected {} width targets, got {}",
            growable.len(),
            targets.len()
        )));
    }
    if !(opts.noise_scale >= 0.0) {
        return Err(Error::arg("noise scale must be non-negative"));
    }
    let mut target_of = vec![None; net.layers.len()];
    for (&i, &t) in growable.iter().zip(targets) {
        let cur = net.layers[i].spec.out_width;
        if t < cur {
            return Err(Error::arg(format!(
                "layer {i}: cannot shrink width {cur} to {t}"
            )));
        }
        if opts.strategy == Strategy::PlusMinus && (t - cur) % 2 != 0 {
            return Err(Error::arg(format!(
                "layer {i}: width increment {} is odd",
                t - cur
            )));
        }
        target_of[i] = Some(t);
    }
    let stage = net.stage_index + 1;
    if growable
        .iter()
        .zip(targets)
        .all(|(&i, &t)| net.layers[i].spec.out_width == t)
    {
        return Ok(GrowthReport {
            stage: net.stage_index,
            ..GrowthReport::default()
        });
    }

    let shapes = net.activation_shapes()?;
    let mut layers: Vec<Layer> = net.layers.clone();
    let mut report = GrowthReport {
        stage,
        ..GrowthReport::default()
    };
    // (old, new) channel count of every activation, and features per channel.
    let mut act = vec![(net.input_shape[0], net.input_shape[0])];
    let mut feat_unit = 1usize;
    let mut bn_scale = 1.0;
    let n_layers = layers.len();
    for i in 0..n_layers {
        let (ci_old, ci_new) = act[i];
        let bn_next = layers
            .get(i + 1)
            .is_some_and(|l| l.spec.kind == LayerKind::BatchNorm);
        let layer = &mut layers[i];
        let spec = layer.spec.clone();
        let mut next_bn_scale = 1.0;
        match spec.kind {
            LayerKind::Linear | LayerKind::Conv2d | LayerKind::ClassifierHead => {
                let out_old = spec.out_width;
                let out_new = target_of[i].unwrap_or(out_old);
                if spec.role == LayerRole::Input && ci_new != ci_old {
                    return Err(Error::structural(
                        i,
                        "input layer cannot grow its input width",
                    ));
                }
                let unit = if spec.kind == LayerKind::Conv2d {
                    spec.kernel * spec.kernel
                } else {
                    feat_unit
                };
                let wp = layer.state.weight.as_mut().expect("weighted layer");
                let old_shape = wp.value.shape().to_vec();
                let (d_in, d_out) = (ci_new - ci_old, out_new - out_old);
                let fan_in = ci_old * unit;
                let new_fan_in = ci_new * unit;
                let (expanded, scale) = match opts.strategy {
                    Strategy::PlusMinus => {
                        let scale = match opts.vt {
                            VtMode::Standard => 1.0,
                            VtMode::Transfer => rescale_factor(spec.role, ci_old, ci_new)?,
                            VtMode::Constraint => match spec.role {
                                LayerRole::Output => rescale_factor(spec.role, ci_old, ci_new)?,
                                _ => vt_constraint_scaling(&wp.value, spec.role, new_fan_in)?,
                            },
                        };
                        let var = new_weight_variance(spec.role, fan_in, new_fan_in, opts.vt);
                        let ex = Expansion {
                            d_in,
                            d_out,
                            unit,
                            scale,
                            var_z: var,
                            var_v: var,
                            noise: opts.noise_scale,
                        };
                        (expand(wp.value.data(), out_old, ci_old, ex, rng)?, scale)
                    }
                    Strategy::Replicate => (
                        replicate(wp.value.data(), out_old, ci_old, d_in, d_out, unit),
                        1.0,
                    ),
                };
                let mut new_shape = old_shape.clone();
                new_shape[0] = expanded.rows;
                new_shape[1] = expanded.cin
                    * if spec.kind == LayerKind::Conv2d {
                        1
                    } else {
                        unit
                    };
                grow_param(wp, Tensor::from_vec(new_shape.clone(), expanded.weight)?);
                report.tensors.push(TensorDelta {
                    id: ParamId {
                        layer: i,
                        kind: ParamKind::Weight,
                    },
                    old_shape,
                    new_shape,
                });
                if let Some(b) = layer.state.bias.as_mut() {
                    let base = if bn_next {
                        b.value.scale(scale)
                    } else {
                        b.value.clone()
                    };
                    let grown = match opts.strategy {
                        Strategy::PlusMinus => grow_vector(&base, d_out, |_| 0.0),
                        Strategy::Replicate => {
                            let src = base.clone();
                            grow_vector(&base, d_out, |j| src.data()[j])
                        }
                    };
                    report.tensors.push(TensorDelta {
                        id: ParamId {
                            layer: i,
                            kind: ParamKind::Bias,
                        },
                        old_shape: vec![out_old],
                        new_shape: vec![out_new],
                    });
                    grow_param(b, grown);
                }
                if bn_next {
                    next_bn_scale = scale;
                } else {
                    layer.state.gain /= scale;
                }
                layer.spec.in_width = if spec.kind == LayerKind::Conv2d {
                    ci_new
                } else {
                    ci_new * unit
                };
                layer.spec.out_width = out_new;
                report.layers.push(GrowthDelta {
                    layer: i,
                    old_in: spec.in_width,
                    old_out: out_old,
                    new_in: layer.spec.in_width,
                    new_out: out_new,
                    noise_scale: opts.noise_scale,
                    rescale: scale,
                });
                act.push((out_old, out_new));
                feat_unit = 1;
            }
            LayerKind::BatchNorm => {
                if bn_scale != 1.0 {
                    rescale_batchnorm(&mut layer.state, bn_scale)?;
                }
                let d = ci_new - ci_old;
                if d > 0 {
                    let copy = opts.strategy == Strategy::Replicate;
                    let st = &mut layer.state;
                    let rm = st.running_mean.as_ref().expect("bn stats").clone();
                    let rv = st.running_var.as_ref().expect("bn stats").clone();
                    st.running_mean =
                        Some(grow_vector(
                            &rm,
                            d,
                            |j| if copy { rm.data()[j] } else { 0.0 },
                        ));
                    st.running_var =
                        Some(grow_vector(
                            &rv,
                            d,
                            |j| if copy { rv.data()[j] } else { 1.0 },
                        ));
                    for (kind, fresh) in [(ParamKind::Gamma, 1.0), (ParamKind::Beta, 0.0)] {
                        let p = st.param_mut(kind).expect("bn param");
                        let old = p.value.clone();
                        grow_param(
                            p,
                            grow_vector(&old, d, |j| if copy { old.data()[j] } else { fresh }),
                        );
                        report.tensors.push(TensorDelta {
                            id: ParamId { layer: i, kind },
                            old_shape: vec![ci_old],
                            new_shape: vec![ci_new],
                        });
                    }
                }
                layer.spec.in_width = ci_new;
                layer.spec.out_width = ci_new;
                act.push((ci_old, ci_new));
            }
            LayerKind::Relu | LayerKind::MaxPool => {
                layer.spec.in_width = ci_new;
                layer.spec.out_width = ci_new;
                act.push((ci_old, ci_new));
            }
            LayerKind::ResidualAdd { from } => {
                if from >= i || act[from + 1] != act[i] {
                    return Err(Error::structural(
                        i,
                        format!(
                            "residual join grows {:?} on the skip path but {:?} on the main path",
                            act.get(from + 1),
                            act[i]
                        ),
                    ));
                }
                layer.spec.in_width = ci_new;
                layer.spec.out_width = ci_new;
                act.push((ci_old, ci_new));
            }
            LayerKind::Flatten => {
                let hw: usize = shapes[i][1..].iter().product();
                layer.spec.in_width = ci_new;
                layer.spec.out_width = ci_new * hw;
                act.push((ci_old, ci_new));
                feat_unit = hw;
            }
        }
        bn_scale = next_bn_scale;
    }

    let mut partition = net.partition.clone();
    for d in &report.tensors {
        let (rows, cols, _) = partition::matrix_dims(&d.new_shape);
        partition
            .get_mut(d.id)
            .ok_or_else(|| Error::State(format!("partition has no entry for {:?}", d.id)))?
            .grow(rows, cols, stage)?;
    }
    let grown = Network::from_parts(net.input_shape.clone(), layers, partition, stage)?;
    let version = net.version;
    *net = grown;
    net.version = version + 1;
    Ok(report)
}
