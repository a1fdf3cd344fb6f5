//! Aggregation-engine compute model: vertex-disperse scheduling of per-edge
//! element operations onto the SIMD lane pool.
//!
//! Work unit: one element-op = folding one neighbor element into one
//! accumulator element. Ops on the same (vertex, element) accumulator cell
//! form a serial chain (read-modify-write), so a shard needs at least
//! max-per-vertex-edge-count cycles; everything else packs freely across
//! lanes, including elements of other vertices ("free" lanes take work from
//! other vertices). Longest-remaining-chain-first packing achieves the lower
//! bound max(ceil(total_ops / lanes), longest_chain) exactly; the closed form
//! is what the simulator charges and `schedule_shard` realizes it explicitly.

use serde::{Deserialize, Serialize};

use crate::config::{AggMode, SystemConfig};
use crate::partition::EffectualShard;

/// SIMD lane pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimdPool {
    pub cores: usize,
    pub lanes_per_core: usize,
}

impl SimdPool {
    pub fn from_config(sys: &SystemConfig) -> Self {
        SimdPool {
            cores: sys.simd_cores,
            lanes_per_core: sys.simd_width,
        }
    }

    #[inline]
    pub fn total_lanes(&self) -> usize {
        self.cores * self.lanes_per_core
    }
}

/// Lane assignment for one cycle: per-vertex element ranges, one op per
/// accumulator cell per cycle by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleAssignment {
    pub slots: Vec<(u32, std::ops::Range<u32>)>,
}

impl CycleAssignment {
    pub fn lanes_used(&self) -> usize {
        self.slots.iter().map(|(_, r)| r.len()).sum()
    }
}

/// Explicit schedule of one shard's aggregation work.
#[derive(Debug, Clone)]
pub struct AggTask {
    pub shard: EffectualShard,
    pub cycles: u64,
    pub assignments: Vec<CycleAssignment>,
}

/// Per-vertex edge multiplicities of a shard, ascending vertex order.
#[derive(Debug, Clone)]
pub struct ShardWork {
    /// (vertex id, edges of that vertex inside the shard)
    pub per_vertex: Vec<(u32, u32)>,
    pub feature_len: usize,
}

impl ShardWork {
    pub fn total_ops(&self) -> u64 {
        self.per_vertex
            .iter()
            .map(|&(_, k)| k as u64 * self.feature_len as u64)
            .sum()
    }

    pub fn longest_chain(&self) -> u64 {
        self.per_vertex.iter().map(|&(_, k)| k as u64).max().unwrap_or(0)
    }
}

/// Closed-form vertex-disperse cycle count.
pub fn disperse_cycles(work: &ShardWork, pool: &SimdPool) -> u64 {
    let total = work.total_ops();
    if total == 0 {
        return 0;
    }
    let lanes = pool.total_lanes() as u64;
    total.div_ceil(lanes).max(work.longest_chain())
}

/// Vertex-concentrated mode: each vertex is pinned to one core
/// (lanes_per_core lanes); vertices go to the least-loaded core in ascending
/// id order; the shard finishes when the slowest core does.
pub fn concentrated_cycles(work: &ShardWork, pool: &SimdPool) -> u64 {
    let mut load = vec![0u64; pool.cores];
    for &(_, k) in &work.per_vertex {
        let ops = k as u64 * work.feature_len as u64;
        let cycles = ops.div_ceil(pool.lanes_per_core as u64).max(k as u64);
        let min = (0..load.len()).min_by_key(|&i| (load[i], i)).unwrap();
        load[min] += cycles;
    }
    load.into_iter().max().unwrap_or(0)
}

pub fn shard_compute_cycles(work: &ShardWork, pool: &SimdPool, mode: AggMode) -> u64 {
    match mode {
        AggMode::Disperse => disperse_cycles(work, pool),
        AggMode::Concentrated => concentrated_cycles(work, pool),
    }
}

/// Build the explicit per-cycle lane assignment for a shard under the
/// vertex-disperse discipline: every (vertex, element) chain contributes at
/// most one op per cycle, longest remaining chain first, ties broken by
/// ascending (vertex, element).
pub fn schedule_shard(shard: &EffectualShard, work: &ShardWork, pool: &SimdPool) -> AggTask {
    let lanes = pool.total_lanes();
    let f = work.feature_len as u32;
    // one chain per (vertex index, element); remaining = edge count
    let mut chains: Vec<(u32, u32, u32)> = Vec::new(); // (vertex, element, remaining)
    for &(v, k) in &work.per_vertex {
        if k > 0 {
            for e in 0..f {
                chains.push((v, e, k));
            }
        }
    }
    let mut assignments = Vec::new();
    loop {
        let mut order: Vec<usize> = (0..chains.len()).filter(|&i| chains[i].2 > 0).collect();
        if order.is_empty() {
            break;
        }
        order.sort_by_key(|&i| (std::cmp::Reverse(chains[i].2), chains[i].0, chains[i].1));
        order.truncate(lanes);
        let mut picked: Vec<(u32, u32)> = Vec::with_capacity(order.len());
        for &i in &order {
            chains[i].2 -= 1;
            picked.push((chains[i].0, chains[i].1));
        }
        picked.sort_unstable();
        // merge contiguous element runs per vertex
        let mut slots: Vec<(u32, std::ops::Range<u32>)> = Vec::new();
        for (v, e) in picked {
            match slots.last_mut() {
                Some((lv, r)) if *lv == v && r.end == e => r.end = e + 1,
                _ => slots.push((v, e..e + 1)),
            }
        }
        assignments.push(CycleAssignment { slots });
    }
    AggTask {
        shard: *shard,
        cycles: assignments.len() as u64,
        assignments,
    }
}

/// Aggregation-engine counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AggStats {
    pub compute_cycles: u64,
    pub finalize_cycles: u64,
    pub stall_edge_wait: u64,
    pub stall_feature_wait: u64,
    pub stall_output_backpressure: u64,
    pub edge_bytes: u64,
    pub input_bytes: u64,
    pub element_ops: u64,
    pub rows_loaded: u64,
    pub rows_naive_grid: u64,
    pub window_area: u64,
    pub planned_edges: u64,
}
