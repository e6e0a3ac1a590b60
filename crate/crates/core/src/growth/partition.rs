use std::ops::Range;

use crate::error::{Error, Result};
use crate::nn::{Network, ParamId};
use crate::tensor::Tensor;

/// One rectangle of a parameter tensor created at growth stage `stage`.
/// Rows index the leading axis, columns the second (1 for vectors);
/// trailing axes (conv kernels) are always whole.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub stage: usize,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

/// Stage blocks of one parameter tensor viewed as `rows × cols × inner`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorBlocks {
    pub id: ParamId,
    pub rows: usize,
    pub cols: usize,
    pub inner: usize,
    pub blocks: Vec<Block>,
}

pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (shape[0], 1, 1),
        _ => (shape[0], shape[1], shape[2..].iter().product()),
    }
}

impl TensorBlocks {
    pub fn whole(id: ParamId, shape: &[usize]) -> Self {
        let (rows, cols, inner) = matrix_dims(shape);
        Self {
            id,
            rows,
            cols,
            inner,
            blocks: vec![Block {
                stage: 0,
                rows: 0..rows,
                cols: 0..cols,
            }],
        }
    }

    /// Extends to `new_rows × new_cols` with the L-shaped region tagged `stage`:
    /// new columns of the old rows, then every column of the new rows.
    pub fn grow(&mut self, new_rows: usize, new_cols: usize, stage: usize) -> Result<()> {
        if new_rows < self.rows || new_cols < self.cols {
            return Err(Error::arg(format!(
                "cannot shrink {:?} from {}x{} to {new_rows}x{new_cols}",
                self.id, self.rows, self.cols
            )));
        }
        if let Some(last) = self.blocks.last() {
            if stage < last.stage {
                return Err(Error::arg("stage indices must be non-decreasing"));
            }
        }
        if new_cols > self.cols {
            self.blocks.push(Block {
                stage,
                rows: 0..self.rows,
                cols: self.cols..new_cols,
            });
        }
        if new_rows > self.rows {
            self.blocks.push(Block {
                stage,
                rows: self.rows..new_rows,
                cols: 0..new_cols,
            });
        }
        self.rows = new_rows;
        self.cols = new_cols;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols * self.inner
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Contiguous flat index ranges covered by `block`.
    pub fn flat_ranges(&self, block: &Block) -> impl Iterator<Item = Range<usize>> + '_ {
        let cols = block.cols.clone();
        block.rows.clone().map(move |r| {
            let base = r * self.cols;
            (base + cols.start) * self.inner..(base + cols.end) * self.inner
        })
    }

    /// Flat index ranges of every block created at `stage`.
    pub fn stage_ranges(&self, stage: usize) -> Vec<Range<usize>> {
        self.blocks
            .iter()
            .filter(|b| b.stage == stage)
            .flat_map(|b| self.flat_ranges(b).collect::<Vec<_>>())
            .collect()
    }

    pub fn stages(&self) -> impl Iterator<Item = usize> + '_ {
        let mut last = None;
        self.blocks.iter().filter_map(move |b| {
            if last == Some(b.stage) {
                None
            } else {
                last = Some(b.stage);
                Some(b.stage)
            }
        })
    }

    pub fn stage_len(&self, stage: usize) -> usize {
        self.stage_ranges(stage).iter().map(|r| r.len()).sum()
    }

    /// Squared Frobenius norm of the stage-`stage` part of `t`.
    pub fn stage_sum_squares(&self, t: &Tensor, stage: usize) -> f64 {
        self.stage_ranges(stage)
            .into_iter()
            .map(|r| t.data()[r].iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Checks that the blocks tile the tensor exactly with non-decreasing stages.
    pub fn check_tiling(&self) -> Result<()> {
        let mut seen = vec![false; self.rows * self.cols];
        let mut last = 0;
        for b in &self.blocks {
            if b.stage < last {
                return Err(Error::arg(format!("{:?}: stage order violated", self.id)));
            }
            last = b.stage;
            if b.rows.end > self.rows || b.cols.end > self.cols {
                return Err(Error::arg(format!("{:?}: block out of bounds", self.id)));
            }
            for r in b.rows.clone() {
                for c in b.cols.clone() {
                    let cell = &mut seen[r * self.cols + c];
                    if *cell {
                        return Err(Error::arg(format!(
                            "{:?}: blocks overlap at ({r},{c})",
                            self.id
                        )));
                    }
                    *cell = true;
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::arg(format!(
                "{:?}: blocks do not cover the tensor",
                self.id
            )));
        }
        Ok(())
    }
}

/// Which slices of every parameter tensor were added at which growth stage.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StagePartition {
    pub tensors: Vec<TensorBlocks>,
}

impl StagePartition {
    /// Single stage-0 block per parameter of `net`.
    pub fn whole(net: &Network) -> Self {
        let tensors = net
            .param_ids()
            .into_iter()
            .map(|id| {
                TensorBlocks::whole(id, net.param(id).expect("listed parameter").value.shape())
            })
            .collect();
        Self { tensors }
    }

    pub fn get(&self, id: ParamId) -> Option<&TensorBlocks> {
        self.tensors.iter().find(|t| t.id == id)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut TensorBlocks> {
        self.tensors.iter_mut().find(|t| t.id == id)
    }

    /// Number of stages seen so far (highest stage index plus one).
    pub fn num_stages(&self) -> usize {
        self.tensors
            .iter()
            .flat_map(|t| t.blocks.iter().map(|b| b.stage + 1))
            .max()
            .unwrap_or(1)
    }

    /// Verifies one entry per parameter, matching extents and exact tiling.
    pub fn validate(&self, net: &Network) -> Result<()> {
        let ids = net.param_ids();
        if ids.len() != self.tensors.len() {
            return Err(Error::arg(format!(
                "partition lists {} tensors, network has {}",
                self.tensors.len(),
                ids.len()
            )));
        }
        for (id, tb) in ids.into_iter().zip(&self.tensors) {
            if tb.id != id {
                return Err(Error::arg(format!(
                    "partition entry {:?} where {id:?} expected",
                    tb.id
                )));
            }
            let dims = matrix_dims(net.param(id).expect("listed parameter").value.shape());
            if dims != (tb.rows, tb.cols, tb.inner) {
                return Err(Error::arg(format!(
                    "partition extents for {id:?} do not match the tensor"
                )));
            }
            tb.check_tiling()?;
        }
        Ok(())
    }
}
