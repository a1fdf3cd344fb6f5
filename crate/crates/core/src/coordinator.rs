//! Inter-engine coordination: typed off-chip requests, the fixed access
//! priority, batch-wise request ordering, address remapping, and the
//! ping-pong aggregation buffer bookkeeping.

use serde::{Deserialize, Serialize};

use crate::config::MemoryGeometry;
use crate::error::{Result, SimError};

/// Off-chip access class. Priority rank: Edge < Input < Weight < Output
/// (lower rank is served first inside a batch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RequestClass {
    Edge,
    Input,
    Weight,
    Output,
}

impl RequestClass {
    #[inline]
    pub fn rank(self) -> u8 {
        match self {
            RequestClass::Edge => 0,
            RequestClass::Input => 1,
            RequestClass::Weight => 2,
            RequestClass::Output => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RequestClass::Edge => "edge",
            RequestClass::Input => "input",
            RequestClass::Weight => "weight",
            RequestClass::Output => "output",
        }
    }
}

/// One off-chip access request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryRequest {
    pub class: RequestClass,
    pub addr: u64,
    pub size: u64,
    pub batch_id: u64,
    pub issue_cycle: u64,
    /// Arrival sequence number; ties in every ordering fall back to this.
    pub seq: u64,
}

/// Decomposed DRAM coordinates of a byte address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Location {
    pub channel: usize,
    pub bank: usize,
    pub row: u64,
    pub column: u64,
}

/// Low-bits interleaving: consecutive row-buffer-sized blocks stripe across
/// channels first, then banks.
pub fn remap_address(addr: u64, geom: &MemoryGeometry) -> Result<Location> {
    if !geom.channels.is_power_of_two()
        || !geom.banks_per_channel.is_power_of_two()
        || !geom.row_buffer_bytes.is_power_of_two()
    {
        return Err(SimError::Config(
            "memory geometry must use power-of-two channels/banks/row size".into(),
        ));
    }
    let block = addr / geom.row_buffer_bytes as u64;
    let channel = (block % geom.channels as u64) as usize;
    let bank = ((block / geom.channels as u64) % geom.banks_per_channel as u64) as usize;
    let row = block / (geom.channels as u64 * geom.banks_per_channel as u64);
    let column = addr % geom.row_buffer_bytes as u64;
    Ok(Location {
        channel,
        bank,
        row,
        column,
    })
}

/// Order a pending request list. Enabled: batches issue in batch_id order
/// and, inside a batch, by (priority rank, address), stable on arrival.
/// Disabled: plain arrival order. Returns indices into `pending`.
pub fn coordinate_requests(pending: &[MemoryRequest], enabled: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pending.len()).collect();
    if enabled {
        order.sort_by_key(|&i| {
            let r = &pending[i];
            (r.batch_id, r.class.rank(), r.addr, r.seq)
        });
    } else {
        order.sort_by_key(|&i| pending[i].seq);
    }
    order
}

/// State of one aggregation-buffer chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkState {
    Idle,
    Filling,
    Draining,
}

/// Ping-pong aggregation buffer: interval i fills chunk i % 2 while the
/// combination engine drains the other. An interval may start filling only
/// after the previous occupant of its chunk has fully drained.
#[derive(Debug, Clone)]
pub struct AggBufferImage {
    pub chunks: [ChunkState; 2],
    /// Cycle at which each chunk was last fully drained.
    pub drained_at: [u64; 2],
}

impl Default for AggBufferImage {
    fn default() -> Self {
        AggBufferImage {
            chunks: [ChunkState::Idle; 2],
            drained_at: [0; 2],
        }
    }
}

impl AggBufferImage {
    pub fn chunk_of(interval_idx: usize) -> usize {
        interval_idx % 2
    }

    /// Earliest cycle interval `idx` may begin filling.
    pub fn fill_ready_cycle(&self, idx: usize) -> u64 {
        self.drained_at[Self::chunk_of(idx)]
    }

    pub fn begin_fill(&mut self, idx: usize) {
        self.chunks[Self::chunk_of(idx)] = ChunkState::Filling;
    }

    pub fn begin_drain(&mut self, idx: usize) {
        self.chunks[Self::chunk_of(idx)] = ChunkState::Draining;
    }

    pub fn mark_drained(&mut self, idx: usize, cycle: u64) {
        let c = Self::chunk_of(idx);
        self.chunks[c] = ChunkState::Idle;
        self.drained_at[c] = self.drained_at[c].max(cycle);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> MemoryGeometry {
        MemoryGeometry {
            channels: 8,
            banks_per_channel: 4,
            row_buffer_bytes: 2048,
            ..MemoryGeometry::default()
        }
    }

    fn req(class: RequestClass, addr: u64, batch: u64, seq: u64) -> MemoryRequest {
        MemoryRequest {
            class,
            addr,
            size: 64,
            batch_id: batch,
            issue_cycle: 0,
            seq,
        }
    }

    #[test]
    fn remap_zero() {
        let loc = remap_address(0, &geom()).unwrap();
        assert_eq!(loc, Location { channel: 0, bank: 0, row: 0, column: 0 });
    }

    #[test]
    fn remap_strides_channels_then_banks() {
        let g = geom();
        let loc = remap_address(2048, &g).unwrap();
        assert_eq!((loc.channel, loc.bank, loc.row), (1, 0, 0));
        let loc = remap_address(2048 * 8, &g).unwrap();
        assert_eq!((loc.channel, loc.bank, loc.row), (0, 1, 0));
        let loc = remap_address(2048 * 8 * 4, &g).unwrap();
        assert_eq!((loc.channel, loc.bank, loc.row), (0, 0, 1));
    }

    #[test]
    fn remap_rejects_non_power_of_two() {
        let mut g = geom();
        g.channels = 6;
        assert!(remap_address(0, &g).is_err());
    }

    #[test]
    fn remap_is_bijective_on_a_window() {
        let g = geom();
        let mut seen = std::collections::HashSet::new();
        for addr in (0..(2048 * 8 * 4 * 4)).step_by(2048) {
            let loc = remap_address(addr, &g).unwrap();
            assert!(seen.insert((loc.channel, loc.bank, loc.row)), "addr {addr}");
            // reconstruct the address from the coordinates
            let block = loc.row * (g.channels * g.banks_per_channel) as u64
                + (loc.bank * g.channels) as u64
                + loc.channel as u64;
            assert_eq!(block * g.row_buffer_bytes as u64 + loc.column, addr);
        }
    }

    #[test]
    fn priority_order_within_batch() {
        let pending = vec![
            req(RequestClass::Output, 40, 1, 0),
            req(RequestClass::Weight, 30, 1, 1),
            req(RequestClass::Input, 20, 1, 2),
            req(RequestClass::Edge, 10, 1, 3),
        ];
        let order = coordinate_requests(&pending, true);
        let classes: Vec<_> = order.iter().map(|&i| pending[i].class).collect();
        assert_eq!(
            classes,
            vec![
                RequestClass::Edge,
                RequestClass::Input,
                RequestClass::Weight,
                RequestClass::Output
            ]
        );
    }

    #[test]
    fn batch_order_beats_priority() {
        let pending = vec![
            req(RequestClass::Output, 40, 1, 0),
            req(RequestClass::Edge, 10, 2, 1),
        ];
        let order = coordinate_requests(&pending, true);
        assert_eq!(order, vec![0, 1]);
    }

    #[test]
    fn same_class_sorts_by_address() {
        let pending = vec![
            req(RequestClass::Input, 300, 1, 0),
            req(RequestClass::Input, 100, 1, 1),
            req(RequestClass::Input, 200, 1, 2),
        ];
        let order = coordinate_requests(&pending, true);
        assert_eq!(order, vec![1, 2, 0]);
        // disabled keeps arrival order
        assert_eq!(coordinate_requests(&pending, false), vec![0, 1, 2]);
    }

    #[test]
    fn ping_pong_chunks_alternate() {
        let mut buf = AggBufferImage::default();
        assert_eq!(AggBufferImage::chunk_of(0), 0);
        assert_eq!(AggBufferImage::chunk_of(3), 1);
        buf.begin_fill(0);
        assert_eq!(buf.chunks[0], ChunkState::Filling);
        buf.begin_drain(0);
        buf.mark_drained(0, 100);
        assert_eq!(buf.fill_ready_cycle(2), 100);
        assert_eq!(buf.fill_ready_cycle(1), 0);
    }
}
