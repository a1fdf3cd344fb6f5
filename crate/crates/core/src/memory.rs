//! Banked HBM-style DRAM timing and energy model.
//!
//! Open-row policy: each bank keeps its last-accessed row open; hitting it
//! costs `row_hit_cycles`, anything else pays the miss latency. Requests are
//! split on row-buffer boundaries (consecutive blocks stripe across channels),
//! each piece occupying its channel for latency + size/bandwidth cycles.
//!
//! Service order is a pluggable policy: `Coordinated` drains batch by batch
//! with (priority, address) order inside a batch; `Interleaved` round-robins
//! across the distinct (batch, class) streams queued on a channel, which is
//! what concurrently-running buffer agents look like without coordination.

use serde::{Deserialize, Serialize};

use crate::config::{EnergyConstants, MemoryGeometry};
use crate::coordinator::{remap_address, MemoryRequest, RequestClass};
use crate::error::{Result, SimError};

/// Energy accumulator, picojoules per component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub dram: f64,
    pub edge_buf: f64,
    pub input_buf: f64,
    pub weight_buf: f64,
    pub output_buf: f64,
    pub agg_buf: f64,
    pub simd_compute: f64,
    pub systolic_compute: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Dram,
    EdgeBuf,
    InputBuf,
    WeightBuf,
    OutputBuf,
    AggBuf,
    SimdCompute,
    SystolicCompute,
}

impl EnergyLedger {
    pub fn charge(&mut self, component: Component, picojoules: f64) {
        debug_assert!(picojoules >= 0.0);
        match component {
            Component::Dram => self.dram += picojoules,
            Component::EdgeBuf => self.edge_buf += picojoules,
            Component::InputBuf => self.input_buf += picojoules,
            Component::WeightBuf => self.weight_buf += picojoules,
            Component::OutputBuf => self.output_buf += picojoules,
            Component::AggBuf => self.agg_buf += picojoules,
            Component::SimdCompute => self.simd_compute += picojoules,
            Component::SystolicCompute => self.systolic_compute += picojoules,
        }
    }

    pub fn buffer_component(class: RequestClass) -> Component {
        match class {
            RequestClass::Edge => Component::EdgeBuf,
            RequestClass::Input => Component::InputBuf,
            RequestClass::Weight => Component::WeightBuf,
            RequestClass::Output => Component::OutputBuf,
        }
    }

    pub fn total(&self) -> f64 {
        self.dram
            + self.edge_buf
            + self.input_buf
            + self.weight_buf
            + self.output_buf
            + self.agg_buf
            + self.simd_compute
            + self.systolic_compute
    }
}

/// Open row and occupancy of one bank.
#[derive(Debug, Clone, Copy, Default)]
pub struct BankState {
    pub open_row: Option<u64>,
    pub busy_until: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServiceOrder {
    Coordinated,
    Interleaved,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemStats {
    pub bytes_by_class: [u64; 4],
    pub requests: u64,
    pub row_hits: u64,
    pub row_misses: u64,
    pub busy_cycles: u64,
    pub per_channel_busy: Vec<u64>,
    pub last_completion: u64,
}

impl MemStats {
    pub fn total_bytes(&self) -> u64 {
        self.bytes_by_class.iter().sum()
    }

    pub fn hit_rate(&self) -> f64 {
        let total = self.row_hits + self.row_misses;
        if total == 0 {
            0.0
        } else {
            self.row_hits as f64 / total as f64
        }
    }
}

/// Bandwidth utilization over a window: bytes moved / peak capacity.
pub fn utilization(stats: &MemStats, geom: &MemoryGeometry, window: u64) -> Result<f64> {
    if window == 0 {
        return Err(SimError::Config("utilization window must be > 0".into()));
    }
    Ok(stats.total_bytes() as f64 / (geom.peak_bytes_per_cycle() as f64 * window as f64))
}

#[derive(Debug, Clone, Copy)]
struct Piece {
    parent: u64,
    class: RequestClass,
    batch_id: u64,
    addr: u64,
    size: u64,
    bank: usize,
    row: u64,
    piece_seq: u64,
}

#[derive(Debug, Clone, Copy)]
struct Parent {
    remaining: u32,
    completion: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub request: u64,
    pub cycle: u64,
}

/// One serviced access, for optional trace dumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub cycle: u64,
    pub class: RequestClass,
    pub addr: u64,
    pub channel: usize,
    pub bank: usize,
    pub row: u64,
    pub hit: bool,
}

pub struct MemoryModel {
    geom: MemoryGeometry,
    dram_pj_per_bit: f64,
    order: ServiceOrder,
    channel_busy: Vec<u64>,
    banks: Vec<BankState>,
    queues: Vec<Vec<Piece>>,
    rr_next: Vec<u64>,
    parents: std::collections::HashMap<u64, Parent>,
    next_request: u64,
    next_piece: u64,
    pub stats: MemStats,
    pub trace: Option<Vec<TraceRow>>,
}

impl MemoryModel {
    pub fn new(geom: MemoryGeometry, energy: &EnergyConstants, order: ServiceOrder) -> Self {
        MemoryModel {
            geom,
            dram_pj_per_bit: energy.dram_pj_per_bit,
            order,
            channel_busy: vec![0; geom.channels],
            banks: vec![BankState::default(); geom.channels * geom.banks_per_channel],
            queues: vec![Vec::new(); geom.channels],
            rr_next: vec![0; geom.channels],
            parents: std::collections::HashMap::new(),
            next_request: 0,
            next_piece: 0,
            stats: MemStats {
                per_channel_busy: vec![0; geom.channels],
                ..MemStats::default()
            },
            trace: None,
        }
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn geometry(&self) -> &MemoryGeometry {
        &self.geom
    }

    /// Split a request on row boundaries and queue the pieces. Returns the
    /// request id whose completion will be reported once every piece is done.
    pub fn enqueue(&mut self, req: &MemoryRequest) -> Result<u64> {
        debug_assert!(req.size > 0);
        let id = self.next_request;
        self.next_request += 1;
        let row_bytes = self.geom.row_buffer_bytes as u64;
        let mut addr = req.addr;
        let end = req.addr + req.size;
        let mut pieces = 0u32;
        while addr < end {
            let row_end = (addr / row_bytes + 1) * row_bytes;
            let size = row_end.min(end) - addr;
            let loc = remap_address(addr, &self.geom)?;
            self.queues[loc.channel].push(Piece {
                parent: id,
                class: req.class,
                batch_id: req.batch_id,
                addr,
                size,
                bank: loc.bank,
                row: loc.row,
                piece_seq: self.next_piece,
            });
            self.next_piece += 1;
            pieces += 1;
            addr = row_end;
        }
        self.parents.insert(
            id,
            Parent {
                remaining: pieces,
                completion: 0,
            },
        );
        self.stats.bytes_by_class[req.class.rank() as usize] += req.size;
        self.stats.requests += 1;
        Ok(id)
    }

    fn pick_piece(&mut self, ch: usize) -> Option<usize> {
        let q = &self.queues[ch];
        if q.is_empty() {
            return None;
        }
        match self.order {
            ServiceOrder::Coordinated => (0..q.len()).min_by_key(|&i| {
                let p = &q[i];
                (p.batch_id, p.class.rank(), p.addr, p.piece_seq)
            }),
            ServiceOrder::Interleaved => {
                // round-robin across distinct (batch, class) streams by
                // stream arrival, one piece per turn
                let mut streams: Vec<(u64, u8)> = q.iter().map(|p| (p.batch_id, p.class.rank())).collect();
                streams.sort_unstable();
                streams.dedup();
                let turn = (self.rr_next[ch] as usize) % streams.len();
                let key = streams[turn];
                self.rr_next[ch] = self.rr_next[ch].wrapping_add(1);
                (0..q.len())
                    .filter(|&i| (q[i].batch_id, q[i].class.rank()) == key)
                    .min_by_key(|&i| (q[i].piece_seq, q[i].addr))
            }
        }
    }

    /// If `channel` is free at `now` and has queued work, start the next
    /// piece per the service order. Returns (piece completion cycle,
    /// finished parent if this was its last piece).
    pub fn try_dispatch(
        &mut self,
        channel: usize,
        now: u64,
        ledger: &mut EnergyLedger,
    ) -> Option<(u64, Option<Completion>)> {
        if self.channel_busy[channel] > now {
            return None;
        }
        let idx = self.pick_piece(channel)?;
        let piece = self.queues[channel].swap_remove(idx);
        let completion = self.service_timing(channel, &piece, now, ledger);
        let parent = self.parents.get_mut(&piece.parent).unwrap();
        parent.remaining -= 1;
        parent.completion = parent.completion.max(completion);
        let done = if parent.remaining == 0 {
            let c = Completion {
                request: piece.parent,
                cycle: parent.completion,
            };
            self.parents.remove(&piece.parent);
            Some(c)
        } else {
            None
        };
        Some((completion, done))
    }

    pub fn has_pending(&self, channel: usize) -> bool {
        !self.queues[channel].is_empty()
    }

    pub fn channels(&self) -> usize {
        self.geom.channels
    }

    fn service_timing(
        &mut self,
        channel: usize,
        piece: &Piece,
        now: u64,
        ledger: &mut EnergyLedger,
    ) -> u64 {
        let bank = &mut self.banks[channel * self.geom.banks_per_channel + piece.bank];
        let start = now.max(self.channel_busy[channel]).max(bank.busy_until);
        let hit = bank.open_row == Some(piece.row);
        let latency = if hit {
            self.stats.row_hits += 1;
            self.geom.row_hit_cycles
        } else {
            self.stats.row_misses += 1;
            self.geom.row_miss_cycles
        };
        let transfer = piece.size.div_ceil(self.geom.channel_bytes_per_cycle as u64);
        let completion = start + latency + transfer;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRow {
                cycle: start,
                class: piece.class,
                addr: piece.addr,
                channel,
                bank: piece.bank,
                row: piece.row,
                hit,
            });
        }
        bank.open_row = Some(piece.row);
        bank.busy_until = completion;
        self.channel_busy[channel] = completion;
        self.stats.busy_cycles += completion - start;
        self.stats.per_channel_busy[channel] += completion - start;
        self.stats.last_completion = self.stats.last_completion.max(completion);
        ledger.charge(Component::Dram, piece.size as f64 * 8.0 * self.dram_pj_per_bit);
        completion
    }

    /// Convenience path for trace-style tests: service one request to
    /// completion immediately (no queueing against other requests).
    pub fn service_one(&mut self, req: &MemoryRequest, ledger: &mut EnergyLedger) -> Result<u64> {
        let id = self.enqueue(req)?;
        let mut completion = 0;
        loop {
            let mut progressed = false;
            for ch in 0..self.geom.channels {
                let now = self.channel_busy[ch].max(req.issue_cycle);
                if let Some((_, done)) = self.try_dispatch(ch, now, ledger) {
                    progressed = true;
                    if let Some(c) = done {
                        debug_assert_eq!(c.request, id);
                        completion = c.cycle;
                    }
                }
            }
            if !progressed {
                break;
            }
        }
        Ok(completion)
    }

    /// Drain every queued request in policy order, advancing greedily; used
    /// for standalone trace replays. Returns completions in finish order.
    pub fn drain(&mut self, ledger: &mut EnergyLedger) -> Vec<Completion> {
        let mut done = Vec::new();
        loop {
            let mut progressed = false;
            for ch in 0..self.geom.channels {
                let now = self.channel_busy[ch];
                while let Some((_, fin)) = self.try_dispatch(ch, now.max(self.channel_busy[ch]), ledger) {
                    progressed = true;
                    if let Some(c) = fin {
                        done.push(c);
                    }
                }
            }
            if !progressed {
                break;
            }
        }
        done.sort_by_key(|c| (c.cycle, c.request));
        done
    }
}
