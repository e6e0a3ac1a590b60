use super::conv::{
    channel_major_to_nchw, col2im, im2col, nchw_to_channel_major, out_extent, ConvGeom,
};
use super::flops::{flops_forward, InputExtent};
use super::{Layer, LayerKind, LayerSpec, LayerState, Param, ParamId, ParamKind, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::growth::StagePartition;
use crate::tensor::{gemm, MatRef, Tensor};

/// Forward-pass behaviour of BatchNorm layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and update running statistics.
    Train,
    /// Normalize with batch statistics; running statistics stay frozen.
    BatchStats,
    /// Normalize with running statistics.
    Eval,
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Conv {
        col: Vec<f64>,
        geom: ConvGeom,
    },
    Bn {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Pool {
        argmax: Vec<usize>,
    },
}

/// Activations saved by [`Network::forward`] for the matching backward call.
#[derive(Debug, Clone)]
pub struct Cache {
    version: u64,
    acts: Vec<Tensor>,
    aux: Vec<Aux>,
}

impl Cache {
    /// Output of layer `i` (index 0 is the network input).
    pub fn activation(&self, i: usize) -> &Tensor {
        &self.acts[i]
    }
}

struct StatUpdate {
    layer: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// An ordered stack of layers with optional residual joins.
#[derive(Debug, Clone)]
pub struct Network {
    pub(crate) layers: Vec<Layer>,
    pub(crate) input_shape: Vec<usize>,
    pub(crate) partition: StagePartition,
    pub(crate) stage_index: usize,
    pub(crate) version: u64,
}

impl Network {
    /// Builds a network from layers; every parameter starts as one stage-0 block.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut net = Self {
            layers,
            input_shape,
            partition: StagePartition::default(),
            stage_index: 0,
            version: 0,
        };
        net.activation_shapes()?;
        net.partition = StagePartition::whole(&net);
        Ok(net)
    }

    pub(crate) fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        partition: StagePartition,
        stage_index: usize,
    ) -> Result<Self> {
        let net = Self {
            layers,
            input_shape,
            partition,
            stage_index,
            version: 0,
        };
        net.activation_shapes()?;
        net.partition.validate(&net)?;
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &Layer {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Layer {
        &mut self.layers[i]
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn partition(&self) -> &StagePartition {
        &self.partition
    }

    pub fn stage_index(&self) -> usize {
        self.stage_index
    }

    /// Bumped whenever parameters change shape; caches from older versions are stale.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Every trainable tensor in canonical order (layer, then weight/bias/gamma/beta).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (layer, l) in self.layers.iter().enumerate() {
            for kind in ParamKind::ALL {
                if l.state.param(kind).is_some() {
                    ids.push(ParamId { layer, kind });
                }
            }
        }
        ids
    }

    pub fn param(&self, id: ParamId) -> Option<&Param> {
        self.layers.get(id.layer)?.state.param(id.kind)
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Param> {
        self.layers.get_mut(id.layer)?.state.param_mut(id.kind)
    }

    pub fn num_params(&self) -> usize {
        self.param_ids()
            .iter()
            .map(|&id| self.param(id).map_or(0, |p| p.value.len()))
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for l in &mut self.layers {
            l.state.zero_grads();
        }
    }

    /// Indices of layers whose output width is set by growth targets
    /// (weighted layers that are not output layers), in topological order.
    pub fn growable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec.kind.has_weights() && l.spec.role != super::LayerRole::Output)
            .map(|(i, _)| i)
            .collect()
    }

    /// Output widths of [`Self::growable_layers`].
    pub fn widths(&self) -> Vec<usize> {
        self.growable_layers()
            .iter()
            .map(|&i| self.layers[i].spec.out_width)
            .collect()
    }

    /// Per-sample activation shapes; entry 0 is the input, entry `i + 1` the output of layer `i`.
    /// Fails with a structural error naming the first inconsistent layer.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = shapes[i].clone();
            let out = infer_layer(i, layer, &cur, &shapes)?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Forward FLOPs (multiply-accumulates times two) for a batch.
    pub fn forward_flops(&self, batch: usize) -> u64 {
        let shapes = match self.activation_shapes() {
            Ok(s) => s,
            Err(_) => return 0,
        };
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let s = &shapes[i];
                let extent = InputExtent {
                    batch,
                    height: s.get(1).copied().unwrap_or(1),
                    width: s.get(2).copied().unwrap_or(1),
                };
                flops_forward(&l.spec, extent)
            })
            .sum()
    }

    /// Eval-mode forward that leaves the network untouched.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_impl(x, Mode::Eval)?.0)
    }

    /// Forward with the given mode, without updating running statistics.
    pub fn forward_frozen(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
        let (y, cache, _) = self.forward_impl(x, mode)?;
        Ok((y, cache))
    }

    /// Forward pass. In [`Mode::Train`] BatchNorm running statistics are updated.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
        let (y, cache, updates) = self.forward_impl(x, mode)?;
        for u in updates {
            let st = &mut self.layers[u.layer].state;
            if let (Some(rm), Some(rv)) = (st.running_mean.as_mut(), st.running_var.as_mut()) {
                for (c, (m, v)) in u.mean.iter().zip(&u.var).enumerate() {
                    rm.data_mut()[c] = (1.0 - BN_MOMENTUM) * rm.data()[c] + BN_MOMENTUM * m;
                    rv.data_mut()[c] = (1.0 - BN_MOMENTUM) * rv.data()[c] + BN_MOMENTUM * v;
                }
            }
        }
        Ok((y, cache))
    }

    fn forward_impl(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Cache, Vec<StatUpdate>)> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Dimension {
                op: "forward",
                left: x.shape().to_vec(),
                right: self.input_shape.clone(),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        let mut updates = Vec::new();
        acts.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = &acts[i];
            let (out, a) = match layer.spec.kind {
                LayerKind::Linear | LayerKind::ClassifierHead => {
                    (linear_forward(i, layer, input)?, Aux::None)
                }
                LayerKind::Conv2d => conv_forward(i, layer, input)?,
                LayerKind::BatchNorm => {
                    let (y, a, upd) = bn_forward(i, layer, input, mode)?;
                    if let Some(u) = upd {
                        updates.push(u);
                    }
                    (y, a)
                }
                LayerKind::Relu => (input.relu(), Aux::None),
                LayerKind::MaxPool => pool_forward(i, layer, input)?,
                LayerKind::ResidualAdd { from } => {
                    let skip = acts.get(from + 1).filter(|_| from < i).ok_or_else(|| {
                        Error::structural(i, format!("residual source {from} is not upstream"))
                    })?;
                    let y = input
                        .add(skip)
                        .map_err(|_| Error::structural(i, "residual operands differ in shape"))?;
                    (y, Aux::None)
                }
                LayerKind::Flatten => {
                    let n = input.dim(0);
                    let f = input.len() / n.max(1);
                    (input.clone().reshape(&[n, f])?, Aux::None)
                }
            };
            acts.push(out);
            aux.push(a);
        }
        let y = acts.last().cloned().expect("input activation present");
        Ok((
            y,
            Cache {
                version: self.version,
                acts,
                aux,
            },
            updates,
        ))
    }

    /// Backpropagates `dy` (gradient of the loss w.r.t. the network output),
    /// overwriting every parameter gradient. Returns the gradient w.r.t. the input.
    pub fn backward(&mut self, cache: &Cache, dy: &Tensor) -> Result<Tensor> {
        if cache.version != self.version || cache.acts.len() != self.layers.len() + 1 {
            return Err(Error::StaleCache {
                network: self.version,
                cache: cache.version,
            });
        }
        let out = cache.acts.last().expect("non-empty cache");
        if out.shape() != dy.shape() {
            return Err(Error::Dimension {
                op: "backward",
                left: out.shape().to_vec(),
                right: dy.shape().to_vec(),
            });
        }
        let n_layers = self.layers.len();
        let mut pending: Vec<Option<Tensor>> = vec![None; n_layers];
        let mut g = dy.clone();
        for i in (0..n_layers).rev() {
            if let Some(p) = pending[i].take() {
                g.axpy(1.0, &p)?;
            }
            let input = &cache.acts[i];
            let layer = &mut self.layers[i];
            g = match layer.spec.kind {
                LayerKind::Linear | LayerKind::ClassifierHead => {
                    linear_backward(&mut layer.state, input, &g)?
                }
                LayerKind::Conv2d => match &cache.aux[i] {
                    Aux::Conv { col, geom } => conv_backward(&mut layer.state, col, geom, &g)?,
                    _ => unreachable!("conv layer without conv cache"),
                },
                LayerKind::BatchNorm => match &cache.aux[i] {
                    Aux::Bn {
                        xhat,
                        inv_std,
                        batch,
                    } => bn_backward(&mut layer.state, xhat, inv_std, *batch, &g)?,
                    _ => unreachable!("batchnorm layer without bn cache"),
                },
                LayerKind::Relu => Tensor::relu_backward(input, &g)?,
                LayerKind::MaxPool => match &cache.aux[i] {
                    Aux::Pool { argmax } => {
                        let mut dx = Tensor::zeros(input.shape());
                        for (o, &src) in argmax.iter().enumerate() {
                            dx.data_mut()[src] += g.data()[o];
                        }
                        dx
                    }
                    _ => unreachable!("pool layer without pool cache"),
                },
                LayerKind::ResidualAdd { from } => {
                    match pending[from].as_mut() {
                        Some(p) => p.axpy(1.0, &g)?,
                        None => pending[from] = Some(g.clone()),
                    }
                    g
                }
                LayerKind::Flatten => g.reshape(input.shape())?,
            };
        }
        Ok(g)
    }
}

fn infer_layer(
    i: usize,
    layer: &Layer,
    cur: &[usize],
    shapes: &[Vec<usize>],
) -> Result<Vec<usize>> {
    let spec = &layer.spec;
    let st = &layer.state;
    let channels = cur.first().copied().unwrap_or(0);
    let expect_param = |kind: ParamKind, shape: &[usize], required: bool| -> Result<()> {
        match st.param(kind) {
            Some(p) if p.value.shape() != shape || p.grad.shape() != shape => {
                Err(Error::structural(
                    i,
                    format!(
                        "{kind:?} has shape {:?}, expected {shape:?}",
                        p.value.shape()
                    ),
                ))
            }
            None if required => Err(Error::structural(i, format!("missing {kind:?}"))),
            _ => Ok(()),
        }
    };
    if spec.in_width != channels {
        return Err(Error::structural(
            i,
            format!(
                "{:?} expects width {} but receives {channels}",
                spec.kind, spec.in_width
            ),
        ));
    }
    match spec.kind {
        LayerKind::Linear | LayerKind::ClassifierHead => {
            if cur.len() != 1 {
                return Err(Error::structural(
                    i,
                    format!("linear layer needs flat input, got {cur:?}"),
                ));
            }
            expect_param(ParamKind::Weight, &[spec.out_width, spec.in_width], true)?;
            expect_param(ParamKind::Bias, &[spec.out_width], false)?;
            Ok(vec![spec.out_width])
        }
        LayerKind::Conv2d => {
            if cur.len() != 3 || spec.kernel == 0 || spec.stride == 0 || spec.kernel % 2 == 0 {
                return Err(Error::structural(
                    i,
                    format!("conv needs CHW input and odd kernel, got {cur:?}"),
                ));
            }
            expect_param(
                ParamKind::Weight,
                &[spec.out_width, spec.in_width, spec.kernel, spec.kernel],
                true,
            )?;
            expect_param(ParamKind::Bias, &[spec.out_width], false)?;
            let (ho, wo) = out_extent(cur[1], cur[2], spec.kernel, spec.stride);
            Ok(vec![spec.out_width, ho, wo])
        }
        LayerKind::BatchNorm => {
            expect_param(ParamKind::Gamma, &[channels], true)?;
            expect_param(ParamKind::Beta, &[channels], true)?;
            let ok = st
                .running_mean
                .as_ref()
                .is_some_and(|t| t.shape() == [channels])
                && st
                    .running_var
                    .as_ref()
                    .is_some_and(|t| t.shape() == [channels]);
            if !ok || spec.out_width != channels {
                return Err(Error::structural(
                    i,
                    "batchnorm statistics do not match width",
                ));
            }
            Ok(cur.to_vec())
        }
        LayerKind::Relu => {
            if spec.out_width != channels {
                return Err(Error::structural(i, "relu width mismatch"));
            }
            Ok(cur.to_vec())
        }
        LayerKind::MaxPool => {
            if cur.len() != 3 || spec.kernel == 0 || cur[1] < spec.kernel || cur[2] < spec.kernel {
                return Err(Error::structural(
                    i,
                    format!("maxpool {} cannot pool {cur:?}", spec.kernel),
                ));
            }
            Ok(vec![channels, cur[1] / spec.kernel, cur[2] / spec.kernel])
        }
        LayerKind::ResidualAdd { from } => {
            if from >= i {
                return Err(Error::structural(
                    i,
                    format!("residual source {from} is not upstream"),
                ));
            }
            if shapes[from + 1] != cur {
                return Err(Error::structural(
                    i,
                    format!("residual join {:?} vs {:?}", shapes[from + 1], cur),
                ));
            }
            Ok(cur.to_vec())
        }
        LayerKind::Flatten => {
            let f: usize = cur.iter().product();
            if spec.out_width != f {
                return Err(Error::structural(
                    i,
                    format!("flatten produces {f}, spec says {}", spec.out_width),
                ));
            }
            Ok(vec![f])
        }
    }
}

fn weight_of(st: &LayerState) -> &Tensor {
    &st.weight.as_ref().expect("validated weighted layer").value
}

fn linear_forward(i: usize, layer: &Layer, x: &Tensor) -> Result<Tensor> {
    let spec: &LayerSpec = &layer.spec;
    if x.rank() != 2 || x.dim(1) != spec.in_width {
        return Err(Error::structural(
            i,
            format!("linear input {:?}", x.shape()),
        ));
    }
    let n = x.dim(0);
    let w = weight_of(&layer.state);
    let mut out = vec![0.0; n * spec.out_width];
    gemm(
        n,
        spec.in_width,
        spec.out_width,
        layer.state.gain,
        MatRef::new(x.data(), spec.in_width, false),
        MatRef::new(w.data(), spec.in_width, true),
        0.0,
        &mut out,
    );
    if let Some(b) = &layer.state.bias {
        for row in out.chunks_mut(spec.out_width) {
            for (v, bb) in row.iter_mut().zip(b.value.data()) {
                *v += bb;
            }
        }
    }
    Tensor::from_vec(vec![n, spec.out_width], out)
}

fn linear_backward(st: &mut LayerState, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let (n, inw) = (x.dim(0), x.dim(1));
    let outw = dy.dim(1);
    let gain = st.gain;
    let wp = st.weight.as_mut().expect("validated weighted layer");
    gemm(
        outw,
        n,
        inw,
        gain,
        MatRef::new(dy.data(), outw, true),
        MatRef::new(x.data(), inw, false),
        0.0,
        wp.grad.data_mut(),
    );
    let mut dx = vec![0.0; n * inw];
    gemm(
        n,
        outw,
        inw,
        gain,
        MatRef::new(dy.data(), outw, false),
        MatRef::new(wp.value.data(), inw, false),
        0.0,
        &mut dx,
    );
    if let Some(b) = st.bias.as_mut() {
        let g = b.grad.data_mut();
        g.fill(0.0);
        for row in dy.data().chunks(outw) {
            for (acc, v) in g.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    Tensor::from_vec(vec![n, inw], dx)
}

fn conv_forward(i: usize, layer: &Layer, x: &Tensor) -> Result<(Tensor, Aux)> {
    let spec = &layer.spec;
    if x.rank() != 4 || x.dim(1) != spec.in_width {
        return Err(Error::structural(i, format!("conv input {:?}", x.shape())));
    }
    let geom = ConvGeom {
        batch: x.dim(0),
        channels: spec.in_width,
        height: x.dim(2),
        width: x.dim(3),
        kernel: spec.kernel,
        stride: spec.stride,
    };
    let col = im2col(x.data(), &geom);
    let (ho, wo) = geom.out_hw();
    let plane = ho * wo;
    let cols = geom.col_cols();
    let rows = geom.col_rows();
    let mut ym = vec![0.0; spec.out_width * cols];
    gemm(
        spec.out_width,
        rows,
        cols,
        layer.state.gain,
        MatRef::new(weight_of(&layer.state).data(), rows, false),
        MatRef::new(&col, cols, false),
        0.0,
        &mut ym,
    );
    if let Some(b) = &layer.state.bias {
        for (o, chunk) in ym.chunks_mut(cols).enumerate() {
            let bb = b.value.data()[o];
            chunk.iter_mut().for_each(|v| *v += bb);
        }
    }
    let y = channel_major_to_nchw(&ym, geom.batch, spec.out_width, plane);
    Ok((
        Tensor::from_vec(vec![geom.batch, spec.out_width, ho, wo], y)?,
        Aux::Conv { col, geom },
    ))
}

fn conv_backward(st: &mut LayerState, col: &[f64], geom: &ConvGeom, dy: &Tensor) -> Result<Tensor> {
    let out_c = dy.dim(1);
    let (ho, wo) = geom.out_hw();
    let plane = ho * wo;
    let cols = geom.col_cols();
    let rows = geom.col_rows();
    let dym = nchw_to_channel_major(dy.data(), geom.batch, out_c, plane);
    let gain = st.gain;
    let wp = st.weight.as_mut().expect("validated weighted layer");
    gemm(
        out_c,
        cols,
        rows,
        gain,
        MatRef::new(&dym, cols, false),
        MatRef::new(col, cols, true),
        0.0,
        wp.grad.data_mut(),
    );
    let mut dcol = vec![0.0; rows * cols];
    gemm(
        rows,
        out_c,
        cols,
        gain,
        MatRef::new(wp.value.data(), rows, true),
        MatRef::new(&dym, cols, false),
        0.0,
        &mut dcol,
    );
    if let Some(b) = st.bias.as_mut() {
        for (o, chunk) in dym.chunks(cols).enumerate() {
            b.grad.data_mut()[o] = chunk.iter().sum();
        }
    }
    let dx = col2im(&dcol, geom);
    Tensor::from_vec(vec![geom.batch, geom.channels, geom.height, geom.width], dx)
}

fn bn_forward(
    i: usize,
    layer: &Layer,
    x: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Aux, Option<StatUpdate>)> {
    let st = &layer.state;
    let c = layer.spec.in_width;
    if x.rank() < 2 || x.dim(1) != c {
        return Err(Error::structural(
            i,
            format!("batchnorm input {:?}", x.shape()),
        ));
    }
    let n = x.dim(0);
    let plane: usize = x.shape()[2..].iter().product();
    let m = (n * plane) as f64;
    let gamma = st.gamma.as_ref().expect("validated bn").value.data();
    let beta = st.beta.as_ref().expect("validated bn").value.data();
    let rm = st.running_mean.as_ref().expect("validated bn").data();
    let rv = st.running_var.as_ref().expect("validated bn").data();
    let data = x.data();
    let channel =
        |ch: usize| (0..n).flat_map(move |b| ((b * c + ch) * plane)..((b * c + ch + 1) * plane));
    let batch = mode != Mode::Eval;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    if batch {
        for ch in 0..c {
            let mu = channel(ch).map(|k| data[k]).sum::<f64>() / m;
            mean[ch] = mu;
            var[ch] = channel(ch)
                .map(|k| (data[k] - mu) * (data[k] - mu))
                .sum::<f64>()
                / m;
        }
    } else {
        mean.copy_from_slice(rm);
        var.copy_from_slice(rv);
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + st.bn_eps).sqrt()).collect();
    let mut xhat = vec![0.0; data.len()];
    let mut y = vec![0.0; data.len()];
    for ch in 0..c {
        for k in channel(ch) {
            let h = (data[k] - mean[ch]) * inv_std[ch];
            xhat[k] = h;
            y[k] = gamma[ch] * h + beta[ch];
        }
    }
    let update = (mode == Mode::Train).then(|| {
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        StatUpdate {
            layer: i,
            mean: mean.clone(),
            var: var.iter().map(|v| v * unbias).collect(),
        }
    });
    Ok((
        Tensor::from_vec(x.shape().to_vec(), y)?,
        Aux::Bn {
            xhat,
            inv_std,
            batch,
        },
        update,
    ))
}

fn bn_backward(
    st: &mut LayerState,
    xhat: &[f64],
    inv_std: &[f64],
    batch: bool,
    dy: &Tensor,
) -> Result<Tensor> {
    let n = dy.dim(0);
    let c = dy.dim(1);
    let plane: usize = dy.shape()[2..].iter().product();
    let m = (n * plane) as f64;
    let g = dy.data();
    let channel =
        |ch: usize| (0..n).flat_map(move |b| ((b * c + ch) * plane)..((b * c + ch + 1) * plane));
    let gamma = st
        .gamma
        .as_ref()
        .expect("validated bn")
        .value
        .data()
        .to_vec();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dx = vec![0.0; g.len()];
    for ch in 0..c {
        let (mut sg, mut sgx) = (0.0, 0.0);
        for k in channel(ch) {
            sg += g[k];
            sgx += g[k] * xhat[k];
        }
        dgamma[ch] = sgx;
        dbeta[ch] = sg;
        let scale = gamma[ch] * inv_std[ch];
        for k in channel(ch) {
            dx[k] = if batch {
                scale * (g[k] - sg / m - xhat[k] * sgx / m)
            } else {
                scale * g[k]
            };
        }
    }
    st.gamma
        .as_mut()
        .expect("validated bn")
        .grad
        .data_mut()
        .copy_from_slice(&dgamma);
    st.beta
        .as_mut()
        .expect("validated bn")
        .grad
        .data_mut()
        .copy_from_slice(&dbeta);
    Tensor::from_vec(dy.shape().to_vec(), dx)
}

fn pool_forward(i: usize, layer: &Layer, x: &Tensor) -> Result<(Tensor, Aux)> {
    let k = layer.spec.kernel;
    if x.rank() != 4 {
        return Err(Error::structural(
            i,
            format!("maxpool input {:?}", x.shape()),
        ));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (ho, wo) = (h / k, w / k);
    let data = x.data();
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + oh * k * w + ow * k;
                for di in 0..k {
                    for dj in 0..k {
                        let idx = base + (oh * k + di) * w + ow * k + dj;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                y.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::from_vec(vec![n, c, ho, wo], y)?,
        Aux::Pool { argmax },
    ))
}
