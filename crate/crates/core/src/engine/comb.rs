//! Combination-engine compute model: multi-granular systolic modules running
//! output-stationary tiled MVMs.
//!
//! A module is a rows x cols PE grid; a cooperative group of g modules stacks
//! into a (g*rows) x cols unit processing g*rows vertices per batch with a
//! single weight stream (weight-buffer reads divide by g). Tile latency is
//! fill + compute + drain: agg_len + rows + cols - 1 cycles; a batch costs
//! tiles x that, plus one cycle for the bias/activation stage to clear.

use serde::{Deserialize, Serialize};

use crate::config::{Activation, SystemConfig};
use crate::error::Result;
use crate::fixed::Fixed32;
use crate::graph::Matrix;
use crate::model::WeightStage;

/// One systolic module (or merged group) as a PE grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SystolicModule {
    pub rows: usize,
    pub cols: usize,
}

/// Working mode of a dispatch unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CombMode {
    Independent,
    Cooperative,
}

/// Dispatch units available under a mode: independent mode exposes each
/// module; cooperative mode merges modules_per_group into taller units.
pub fn units_for_mode(sys: &SystemConfig, mode: CombMode) -> (usize, SystolicModule) {
    match mode {
        CombMode::Independent => (
            sys.systolic_modules,
            SystolicModule {
                rows: sys.module_rows,
                cols: sys.module_cols,
            },
        ),
        CombMode::Cooperative => (
            sys.systolic_modules / sys.modules_per_group,
            SystolicModule {
                rows: sys.module_rows * sys.modules_per_group,
                cols: sys.module_cols,
            },
        ),
    }
}

/// Output-stationary tiled MVM latency for a batch of vertices.
pub fn mvm_latency(module: SystolicModule, agg_len: usize, out_len: usize, batch: usize) -> u64 {
    if batch == 0 || out_len == 0 || agg_len == 0 {
        return 0;
    }
    let tiles = out_len.div_ceil(module.cols) as u64 * batch.div_ceil(module.rows) as u64;
    tiles * (agg_len + module.rows + module.cols - 1) as u64
}

/// Latency of one batch through a (possibly multi-stage) MLP, including the
/// one-cycle activation clear per stage.
pub fn batch_cycles(module: SystolicModule, stages: &[(usize, usize)], batch: usize) -> u64 {
    stages
        .iter()
        .map(|&(inw, outw)| mvm_latency(module, inw, outw, batch) + 1)
        .sum()
}

/// Weight-buffer reads (elements) one batch dispatch streams: each stage's
/// full weight matrix once, shared by every vertex in the batch.
pub fn batch_weight_reads(stages: &[(usize, usize)]) -> u64 {
    stages.iter().map(|&(i, o)| (i * o) as u64).sum()
}

/// Logical multiply-accumulates a batch is charged, independent of mode.
pub fn batch_macs(stages: &[(usize, usize)], batch: usize) -> u64 {
    stages.iter().map(|&(i, o)| (i * o * batch) as u64).sum()
}

/// Run the MVM + bias + activation for a contiguous vertex range, tiled the
/// way the arrays consume it. Accumulation order per output cell is ascending
/// over the input index, so results are bit-identical to the functional path.
pub fn combine_batch(
    input: &Matrix,
    first_row: usize,
    batch: usize,
    stages: &[WeightStage],
    activation: Activation,
    module_cols: usize,
) -> Result<Matrix> {
    let mut cur = Matrix {
        rows: batch,
        cols: input.cols,
        data: input.data[first_row * input.cols..(first_row + batch) * input.cols].to_vec(),
    };
    for stage in stages {
        if cur.cols != stage.weights.rows {
            return Err(crate::error::SimError::Dimension(format!(
                "combination stage expects width {}, batch has {}",
                stage.weights.rows, cur.cols
            )));
        }
        let out_cols = stage.weights.cols;
        let mut next = Matrix::zeros(batch, out_cols);
        let mut tile_start = 0usize;
        while tile_start < out_cols {
            let tile_end = (tile_start + module_cols).min(out_cols);
            for v in 0..batch {
                let x = cur.row(v);
                let o = next.row_mut(v);
                for (k, &xk) in x.iter().enumerate() {
                    if xk == Fixed32::ZERO {
                        continue;
                    }
                    let wrow = stage.weights.row(k);
                    for j in tile_start..tile_end {
                        o[j] = o[j] + xk * wrow[j];
                    }
                }
            }
            tile_start = tile_end;
        }
        for v in 0..batch {
            let o = next.row_mut(v);
            for (oj, &bj) in o.iter_mut().zip(&stage.bias) {
                *oj = *oj + bj;
            }
            if activation == Activation::Relu {
                for oj in o.iter_mut() {
                    *oj = oj.relu();
                }
            }
        }
        cur = next;
    }
    Ok(cur)
}

/// Combination-engine counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CombStats {
    pub macs: u64,
    pub pool_macs: u64,
    pub busy_cycles: u64,
    pub stall_cycles: u64,
    pub batches: u64,
    pub weight_reads: u64,
    pub weight_bytes: u64,
    pub output_bytes: u64,
}
