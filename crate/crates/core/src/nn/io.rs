//! Binary network format: magic `GRWN`, format version, input shape, layers
//! (spec, gain, BatchNorm epsilon, optional tensors), stage partition and
//! stage index. Integers are u64/u32 little-endian.

use std::io::{Read, Write};

use super::{
    Layer, LayerKind, LayerRole, LayerSpec, LayerState, Network, Param, ParamId, ParamKind,
};
use crate::binio::{BinReader, BinWriter};
use crate::error::Result;
use crate::growth::{Block, StagePartition, TensorBlocks};
use crate::tensor::{read_tensor, write_tensor, Tensor};

const MAGIC: &[u8; 4] = b"GRWN";
const FORMAT: u32 = 1;
const MAX_LAYERS: usize = 1 << 16;

fn write_opt<W: Write>(w: &mut BinWriter<W>, t: Option<&Tensor>) -> Result<()> {
    match t {
        Some(t) => {
            w.u32(1)?;
            write_tensor(w, t)
        }
        None => w.u32(0),
    }
}

fn read_opt<R: Read>(r: &mut BinReader<R>) -> Result<Option<Tensor>> {
    match r.u32()? {
        0 => Ok(None),
        1 => Ok(Some(read_tensor(r)?)),
        f => Err(r.error(format!("bad presence flag {f}"))),
    }
}

pub fn write_network<W: Write>(w: &mut BinWriter<W>, net: &Network) -> Result<()> {
    w.bytes(MAGIC)?;
    w.u32(FORMAT)?;
    w.u64(net.input_shape().len() as u64)?;
    for &d in net.input_shape() {
        w.u64(d as u64)?;
    }
    w.u64(net.layers().len() as u64)?;
    for l in net.layers() {
        let (code, arg) = l.spec.kind.code();
        w.u32(code)?;
        w.u64(arg)?;
        for v in [
            l.spec.in_width,
            l.spec.out_width,
            l.spec.kernel,
            l.spec.stride,
        ] {
            w.u64(v as u64)?;
        }
        w.u32(l.spec.role.code())?;
        w.f64(l.state.gain)?;
        w.f64(l.state.bn_eps)?;
        for k in ParamKind::ALL {
            write_opt(w, l.state.param(k).map(|p| &p.value))?;
        }
        write_opt(w, l.state.running_mean.as_ref())?;
        write_opt(w, l.state.running_var.as_ref())?;
    }
    let part = net.partition();
    w.u64(part.tensors.len() as u64)?;
    for tb in &part.tensors {
        w.u64(tb.id.layer as u64)?;
        w.u32(tb.id.kind.code())?;
        for v in [tb.rows, tb.cols, tb.inner, tb.blocks.len()] {
            w.u64(v as u64)?;
        }
        for b in &tb.blocks {
            for v in [b.stage, b.rows.start, b.rows.end, b.cols.start, b.cols.end] {
                w.u64(v as u64)?;
            }
        }
    }
    w.u64(net.stage_index() as u64)
}

pub fn read_network<R: Read>(r: &mut BinReader<R>) -> Result<Network> {
    if r.bytes(4)? != MAGIC {
        return Err(r.error("not a network file"));
    }
    let format = r.u32()?;
    if format != FORMAT {
        return Err(r.error(format!("unsupported network format {format}")));
    }
    let rank = r.count(8, "input rank")?;
    let input_shape = (0..rank)
        .map(|_| r.count(1 << 32, "input extent"))
        .collect::<Result<Vec<_>>>()?;
    let n = r.count(MAX_LAYERS, "layer count")?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let code = r.u32()?;
        let arg = r.u64()?;
        let kind = LayerKind::from_code(code, arg)
            .ok_or_else(|| r.error(format!("unknown layer kind {code}")))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.count(1 << 32, "layer dimension")?;
        }
        let rc = r.u32()?;
        let role =
            LayerRole::from_code(rc).ok_or_else(|| r.error(format!("unknown layer role {rc}")))?;
        let spec = LayerSpec {
            kind,
            in_width: dims[0],
            out_width: dims[1],
            kernel: dims[2],
            stride: dims[3],
            role,
        };
        let gain = r.f64()?;
        let bn_eps = r.f64()?;
        let mut p = [None, None, None, None];
        for slot in &mut p {
            *slot = read_opt(r)?.map(Param::new);
        }
        let [weight, bias, gamma, beta] = p;
        let state = LayerState {
            weight,
            bias,
            gamma,
            beta,
            running_mean: read_opt(r)?,
            running_var: read_opt(r)?,
            bn_eps,
            gain,
        };
        layers.push(Layer { spec, state });
    }
    let nt = r.count(4 * MAX_LAYERS, "partition size")?;
    let mut tensors = Vec::with_capacity(nt);
    for _ in 0..nt {
        let layer = r.count(MAX_LAYERS, "layer index")?;
        let kc = r.u32()?;
        let kind = ParamKind::from_code(kc)
            .ok_or_else(|| r.error(format!("unknown parameter kind {kc}")))?;
        let rows = r.count(1 << 32, "rows")?;
        let cols = r.count(1 << 32, "cols")?;
        let inner = r.count(1 << 32, "inner")?;
        let nb = r.count(1 << 20, "block count")?;
        let mut blocks = Vec::with_capacity(nb);
        for _ in 0..nb {
            let mut v = [0usize; 5];
            for x in &mut v {
                *x = r.count(1 << 32, "block bound")?;
            }
            blocks.push(Block {
                stage: v[0],
                rows: v[1]..v[2],
                cols: v[3]..v[4],
            });
        }
        tensors.push(TensorBlocks {
            id: ParamId { layer, kind },
            rows,
            cols,
            inner,
            blocks,
        });
    }
    let stage_index = r.count(1 << 20, "stage index")?;
    Network::from_parts(input_shape, layers, StagePartition { tensors }, stage_index)
}
