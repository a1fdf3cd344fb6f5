//! Execution-driven simulation: both engines, the coordinator's pipeline
//! modes and the DRAM controller advance through one deterministic
//! discrete-event loop.
//!
//! Aggregation streams shard by shard per target interval: a two-stage
//! prefetch (edges first, then the feature rows the sparsity eliminator
//! kept) double-buffers against the SIMD compute of the previous shard.
//! Vertices finalize when their last shard completes and flow into the
//! combination dispatcher according to the pipeline mode. All numerics are
//! produced by the same kernels as the functional reference, in the same
//! order, so the run result can be compared bit for bit.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use crate::config::{Activation, LayerOrder, PipelineMode, SystemConfig};
use crate::coordinator::{AggBufferImage, MemoryRequest, RequestClass};
use crate::engine::agg::{shard_compute_cycles, AggStats, ShardWork, SimdPool};
use crate::engine::comb::{
    batch_cycles, batch_macs, batch_weight_reads, combine_batch, units_for_mode, CombMode,
    CombStats, SystolicModule,
};
use crate::error::{Result, SimError};
use crate::graph::{CscGraph, EdgeSet, Matrix};
use crate::kernels::{edge_coefficient, effective_degree, finalize_vertex, AggregateKernel, DegreeMode};
use crate::memory::{Component, EnergyLedger, MemStats, MemoryModel, ServiceOrder};
use crate::model::{
    pool_products, softmax_rows, GoldenRun, ResolvedLayer, ResolvedModel, ResolvedSubLayer,
    WeightStage,
};
use crate::partition::{build_plan, PartitionPlan};
use crate::sample::sample;

const REGION_STRIDE: u64 = 1 << 30;

fn feature_base(pass: usize) -> u64 {
    (1 + pass as u64) * REGION_STRIDE
}

fn weight_base(pass: usize) -> u64 {
    (256 + pass as u64) * REGION_STRIDE
}

fn intermediate_base(pass: usize) -> u64 {
    (512 + pass as u64) * REGION_STRIDE
}

const EDGE_BASE: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum GroupKey {
    EdgeFetch { interval: u32, shard: u32 },
    InputFetch { interval: u32, shard: u32 },
    SelfFetch { interval: u32 },
    WeightFetch,
    OutputWrite { batch: u32 },
    Spill { interval: u32 },
    Fetch { token: u32 },
}

#[derive(Debug, Clone, Copy)]
enum EvKind {
    ChannelSlot(usize),
    GroupDone(GroupKey),
    ShardComputeDone { interval: u32, shard: u32 },
    EmptyIntervalDone { interval: u32 },
}

#[derive(Debug)]
struct EvEntry {
    cycle: u64,
    seq: u64,
    kind: EvKind,
}

impl PartialEq for EvEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cycle == other.cycle && self.seq == other.seq
    }
}
impl Eq for EvEntry {}
impl PartialOrd for EvEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for EvEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.cycle, self.seq).cmp(&(other.cycle, other.seq))
    }
}

/// How finalized aggregation results leave the engine.
#[derive(Clone, Copy, PartialEq, Eq)]
enum AggSink {
    /// Feed the combination dispatcher (latency/energy pipeline).
    Pipeline,
    /// Write each interval image to DRAM; `intermediate` marks the traffic
    /// as pipeline-attributable (the unpipelined a_v round trip).
    Spill { base: u64, intermediate: bool },
    /// Keep results on chip (aggregation-only runs).
    Keep,
}

struct ShardMeta {
    edge_runs: Vec<(u64, u64)>,
    input_runs: Vec<(u64, u64)>,
    input_bytes: u64,
    compute_cycles: u64,
    finalize_cycles: u64,
    finalize_vertices: Vec<u32>,
}

struct IntervalState {
    start: usize,
    end: usize,
    shards: Vec<ShardMeta>,
    edge_done: Vec<Option<u64>>,
    data_done: Vec<Option<u64>>,
    compute_done: Vec<Option<u64>>,
    next_edge_fetch: usize,
    next_input_fetch: usize,
    self_done: Option<u64>,
    needs_self: bool,
    empty_fin_cycles: u64,
    opened_at: Option<u64>,
    agg_done: Option<u64>,
}

struct BatchState {
    interval: u32,
    first_vertex: usize,
    len: usize,
    remaining_vertices: usize,
    ready: Option<u64>,
    dispatched: bool,
}

/// One aggregate(-then-combine) pass over the graph.
struct PassSpec<'a> {
    edges: &'a EdgeSet,
    full: &'a EdgeSet,
    input: &'a Matrix,
    input_base: u64,
    kernel: &'a dyn AggregateKernel,
    epsilon: Option<f64>,
    degree_mode: DegreeMode,
    stages: &'a [WeightStage],
    activation: Activation,
    weight_base: u64,
    output_base: u64,
    sink: AggSink,
    comb_mode: CombMode,
    pipeline: PipelineMode,
}

/// Accumulated counters of a full run.
#[derive(Debug, Clone, Default)]
pub struct RunTotals {
    pub total_cycles: u64,
    pub agg: AggStats,
    pub comb: CombStats,
    pub mem: MemStats,
    pub energy: EnergyLedger,
    pub intermediate_bytes: u64,
    pub vertex_latencies: Vec<u64>,
    pub trace: Vec<crate::memory::TraceRow>,
}

/// Full simulation output: totals plus the simulated per-layer features.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub totals: RunTotals,
    pub layer_outputs: Vec<Matrix>,
    pub pooled_adjacency: Option<Matrix>,
}

impl RunResult {
    pub fn eliminated_sparsity_ratio(&self) -> f64 {
        if self.totals.agg.rows_naive_grid == 0 {
            0.0
        } else {
            1.0 - self.totals.agg.rows_loaded as f64 / self.totals.agg.rows_naive_grid as f64
        }
    }
}

struct Sim<'a> {
    sys: &'a SystemConfig,
    pool: SimdPool,
    mem: MemoryModel,
    ledger: EnergyLedger,
    heap: BinaryHeap<Reverse<EvEntry>>,
    seq: u64,
    groups: HashMap<GroupKey, (usize, u64)>,
    req2group: HashMap<u64, GroupKey>,
    totals: RunTotals,
    fetch_token: u32,
}

impl<'a> Sim<'a> {
    fn new(sys: &'a SystemConfig) -> Self {
        let order = if sys.coordination_enabled {
            ServiceOrder::Coordinated
        } else {
            ServiceOrder::Interleaved
        };
        let mut mem = MemoryModel::new(sys.memory, &sys.energy, order);
        if sys.trace_requests {
            mem.enable_trace();
        }
        Sim {
            sys,
            pool: SimdPool::from_config(sys),
            mem,
            ledger: EnergyLedger::default(),
            heap: BinaryHeap::new(),
            seq: 0,
            groups: HashMap::new(),
            req2group: HashMap::new(),
            totals: RunTotals::default(),
            fetch_token: 0,
        }
    }

    fn push(&mut self, cycle: u64, kind: EvKind) {
        self.seq += 1;
        self.heap.push(Reverse(EvEntry {
            cycle,
            seq: self.seq,
            kind,
        }));
    }

    fn issue_group(&mut self, key: GroupKey, class: RequestClass, runs: &[(u64, u64)], cycle: u64) {
        self.seq += 1;
        let batch_id = self.seq;
        let live: Vec<(u64, u64)> = runs.iter().copied().filter(|r| r.1 > 0).collect();
        if live.is_empty() {
            self.push(cycle, EvKind::GroupDone(key));
            return;
        }
        self.groups.insert(key, (live.len(), 0));
        for (addr, size) in live {
            self.seq += 1;
            let req = MemoryRequest {
                class,
                addr,
                size,
                batch_id,
                issue_cycle: cycle,
                seq: self.seq,
            };
            let id = self.mem.enqueue(&req).expect("validated geometry");
            self.req2group.insert(id, key);
        }
        for ch in 0..self.mem.channels() {
            self.push(cycle, EvKind::ChannelSlot(ch));
        }
    }

    fn on_request_done(&mut self, request: u64, cycle: u64) {
        let key = self.req2group.remove(&request).expect("unknown request");
        let entry = self.groups.get_mut(&key).expect("unknown group");
        entry.0 -= 1;
        entry.1 = entry.1.max(cycle);
        if entry.0 == 0 {
            let done = entry.1;
            self.groups.remove(&key);
            self.push(done, EvKind::GroupDone(key));
        }
    }

    fn handle_channel_slot(&mut self, ch: usize, cycle: u64) {
        if let Some((piece_done, completed)) = self.mem.try_dispatch(ch, cycle, &mut self.ledger) {
            self.push(piece_done, EvKind::ChannelSlot(ch));
            if let Some(c) = completed {
                self.on_request_done(c.request, c.cycle);
            }
        }
    }

    /// Charge an on-chip buffer for bytes moved through it (write + read).
    fn charge_buffer(&mut self, component: Component, bytes: u64) {
        self.ledger
            .charge(component, bytes as f64 * 2.0 * self.sys.energy.buffer_pj_per_byte);
    }

    /// Issue one fetch and block until it lands, servicing the memory
    /// controller meanwhile; other pending events stay queued.
    fn blocking_fetch(&mut self, class: RequestClass, addr: u64, size: u64, cycle: u64) -> u64 {
        self.fetch_token = self.fetch_token.wrapping_add(1);
        let key = GroupKey::Fetch {
            token: self.fetch_token,
        };
        self.issue_group(key, class, &[(addr, size)], cycle);
        let mut stash = Vec::new();
        let mut done = cycle;
        while let Some(Reverse(ev)) = self.heap.pop() {
            match ev.kind {
                EvKind::ChannelSlot(ch) => self.handle_channel_slot(ch, ev.cycle),
                EvKind::GroupDone(k) if k == key => {
                    done = done.max(ev.cycle);
                    break;
                }
                _ => stash.push(ev),
            }
        }
        for ev in stash {
            self.heap.push(Reverse(ev));
        }
        done
    }
}

pub fn run_simulation(
    graph: &CscGraph,
    model: &ResolvedModel,
    sys: &SystemConfig,
    seed: u64,
) -> Result<RunResult> {
    sys.validate()?;
    if graph.feature_len() != model.input_width {
        return Err(SimError::Dimension(format!(
            "graph feature_len {} != model input width {}",
            graph.feature_len(),
            model.input_width
        )));
    }
    let mut sim = Sim::new(sys);
    let full = &graph.edges;
    let mut feats = graph.features.clone();
    let mut clock = 0u64;
    let mut layer_outputs = Vec::new();
    let mut pooled_adjacency = None;
    let mut pass_idx = 0usize;

    for (li, layer) in model.layers.iter().enumerate() {
        let sset = sample(full, &layer.policy, seed, li)?;
        let edges = sset.filtered_edges(full);
        let out = match layer.order {
            LayerOrder::AggregateFirst => {
                let (mid, end) =
                    run_layer_agg_first(&mut sim, full, &edges, layer, &feats, clock, pass_idx)?;
                clock = end;
                pass_idx += 1;
                if let Some((assign, embed)) = &layer.pool {
                    let (ap, xp, end2) =
                        run_pool(&mut sim, full, &edges, layer, assign, embed, &mid, clock, &mut pass_idx)?;
                    clock = end2;
                    pooled_adjacency = Some(ap);
                    xp
                } else {
                    mid
                }
            }
            LayerOrder::CombineFirst => {
                let (out, end) =
                    run_layer_combine_first(&mut sim, full, &edges, layer, &feats, clock, &mut pass_idx)?;
                clock = end;
                out
            }
        };
        feats = out.clone();
        layer_outputs.push(out);
    }

    let mut totals = sim.totals.clone();
    totals.total_cycles = clock;
    totals.mem = sim.mem.stats.clone();
    totals.energy = sim.ledger;
    totals.trace = sim.mem.trace.take().unwrap_or_default();
    Ok(RunResult {
        totals,
        layer_outputs,
        pooled_adjacency,
    })
}

/// Aggregation-only run of a single layer's aggregation operator (the
/// combination engine stays idle, results stay on chip). Cross-checked
/// against the functional aggregation before returning.
pub fn run_aggregation_only(
    graph: &CscGraph,
    layer: &ResolvedLayer,
    sys: &SystemConfig,
    seed: u64,
) -> Result<(Matrix, RunTotals)> {
    sys.validate()?;
    let mut sim = Sim::new(sys);
    let full = &graph.edges;
    let sset = sample(full, &layer.policy, seed, 0)?;
    let edges = sset.filtered_edges(full);
    let spec = PassSpec {
        edges: &edges,
        full,
        input: &graph.features,
        input_base: feature_base(0),
        kernel: layer.kernel.as_ref(),
        epsilon: layer.epsilon,
        degree_mode: layer.degree_mode,
        stages: &[],
        activation: layer.activation,
        weight_base: weight_base(0),
        output_base: intermediate_base(0),
        sink: AggSink::Keep,
        comb_mode: CombMode::Independent,
        pipeline: sys.pipeline_mode,
    };
    let (acc, end) = run_pass(&mut sim, &spec, 0)?;
    let mut totals = sim.totals.clone();
    totals.total_cycles = end;
    totals.mem = sim.mem.stats.clone();
    totals.energy = sim.ledger;
    let want = crate::model::aggregate(
        &edges,
        full,
        layer.kernel.as_ref(),
        layer.epsilon,
        layer.degree_mode,
        &graph.features,
    )?;
    check_equal(&acc, &want, 0)?;
    Ok((acc, totals))
}

fn check_equal(got: &Matrix, want: &Matrix, layer: usize) -> Result<()> {
    debug_assert_eq!((got.rows, got.cols), (want.rows, want.cols));
    for v in 0..got.rows {
        for j in 0..got.cols {
            let (g, w) = (got.row(v)[j], want.row(v)[j]);
            if g != w {
                return Err(SimError::OracleMismatch {
                    layer,
                    vertex: v,
                    element: j,
                    got: g.raw(),
                    expected: w.raw(),
                });
            }
        }
    }
    Ok(())
}

/// Cross-check a full simulation against the functional reference.
pub fn verify_against_reference(result: &RunResult, golden: &GoldenRun) -> Result<()> {
    if result.layer_outputs.len() != golden.layer_outputs.len() {
        return Err(SimError::Dimension("layer count mismatch".into()));
    }
    for (li, (got, want)) in result
        .layer_outputs
        .iter()
        .zip(&golden.layer_outputs)
        .enumerate()
    {
        check_equal(got, want, li)?;
    }
    match (&result.pooled_adjacency, &golden.pooled_adjacency) {
        (Some(a), Some(b)) => check_equal(a, b, usize::MAX)?,
        (None, None) => {}
        _ => {
            return Err(SimError::Dimension(
                "pooled adjacency present on one path only".into(),
            ))
        }
    }
    Ok(())
}

fn run_layer_agg_first(
    sim: &mut Sim,
    full: &EdgeSet,
    edges: &EdgeSet,
    layer: &ResolvedLayer,
    input: &Matrix,
    clock: u64,
    pass_idx: usize,
) -> Result<(Matrix, u64)> {
    let sink = match sim.sys.pipeline_mode {
        PipelineMode::None => AggSink::Spill {
            base: intermediate_base(pass_idx),
            intermediate: true,
        },
        _ => AggSink::Pipeline,
    };
    let comb_mode = match sim.sys.pipeline_mode {
        PipelineMode::Latency => CombMode::Independent,
        _ => CombMode::Cooperative,
    };
    let spec = PassSpec {
        edges,
        full,
        input,
        input_base: feature_base(pass_idx),
        kernel: layer.kernel.as_ref(),
        epsilon: layer.epsilon,
        degree_mode: layer.degree_mode,
        stages: &layer.stages,
        activation: layer.activation,
        weight_base: weight_base(pass_idx),
        output_base: feature_base(pass_idx + 1),
        sink,
        comb_mode,
        pipeline: sim.sys.pipeline_mode,
    };
    run_pass(sim, &spec, clock)
}

fn run_layer_combine_first(
    sim: &mut Sim,
    full: &EdgeSet,
    edges: &EdgeSet,
    layer: &ResolvedLayer,
    input: &Matrix,
    clock: u64,
    pass_idx: &mut usize,
) -> Result<(Matrix, u64)> {
    // phase 1: combine every vertex; z written back to DRAM because the
    // following aggregation gathers its rows randomly
    let z_base = feature_base(*pass_idx + 1);
    let (z, end1) = run_comb_phase(
        sim,
        input,
        feature_base(*pass_idx),
        &layer.stages,
        layer.activation,
        weight_base(*pass_idx),
        z_base,
        clock,
    )?;
    *pass_idx += 1;
    // phase 2: aggregation over z; the result is the layer output
    let out_base = feature_base(*pass_idx + 1);
    let spec = PassSpec {
        edges,
        full,
        input: &z,
        input_base: z_base,
        kernel: layer.kernel.as_ref(),
        epsilon: layer.epsilon,
        degree_mode: layer.degree_mode,
        stages: &[],
        activation: layer.activation,
        weight_base: weight_base(*pass_idx),
        output_base: out_base,
        sink: AggSink::Spill {
            base: out_base,
            intermediate: false,
        },
        comb_mode: CombMode::Cooperative,
        pipeline: sim.sys.pipeline_mode,
    };
    *pass_idx += 1;
    run_pass(sim, &spec, end1)
}

/// Pooling on the engines: the assignment and embedding sub-layers run as
/// ordinary passes, then the pooled matrix products are charged to the
/// engines and computed by the shared functional code.
#[allow(clippy::too_many_arguments)]
fn run_pool(
    sim: &mut Sim,
    full: &EdgeSet,
    edges: &EdgeSet,
    layer: &ResolvedLayer,
    assign: &ResolvedSubLayer,
    embed: &ResolvedSubLayer,
    input: &Matrix,
    clock: u64,
    pass_idx: &mut usize,
) -> Result<(Matrix, Matrix, u64)> {
    let input_base = feature_base(*pass_idx);
    let mut run_sub = |sim: &mut Sim, sub: &ResolvedSubLayer, at: u64| -> Result<(Matrix, u64)> {
        let pass = *pass_idx;
        let sink = match sim.sys.pipeline_mode {
            PipelineMode::None => AggSink::Spill {
                base: intermediate_base(pass),
                intermediate: true,
            },
            _ => AggSink::Pipeline,
        };
        let spec = PassSpec {
            edges,
            full,
            input,
            input_base,
            kernel: sub.kernel.as_ref(),
            epsilon: None,
            degree_mode: layer.degree_mode,
            stages: &sub.stages,
            activation: sub.activation,
            weight_base: weight_base(pass),
            output_base: feature_base(pass + 1),
            sink,
            comb_mode: CombMode::Cooperative,
            pipeline: sim.sys.pipeline_mode,
        };
        *pass_idx += 1;
        run_pass(sim, &spec, at)
    };
    let (logits, end_a) = run_sub(sim, assign, clock)?;
    let (z, end_e) = run_sub(sim, embed, end_a)?;

    let c = softmax_rows(&logits);
    let (xp, ap) = pool_products(&c, &z, edges)?;

    // timing: A*C folds one cluster row per edge on the SIMD pool; the two
    // dense products run as cooperative MVM batches
    let n = edges.num_vertices;
    let clusters = c.cols;
    let lanes = sim.pool.total_lanes() as u64;
    let ac_ops = edges.num_edges() as u64 * clusters as u64;
    let ac_cycles = ac_ops.div_ceil(lanes);
    sim.totals.agg.element_ops += ac_ops;
    sim.totals.agg.compute_cycles += ac_cycles;
    sim.ledger
        .charge(Component::SimdCompute, ac_ops as f64 * sim.sys.energy.simd_op_pj);

    let (_, unit) = units_for_mode(sim.sys, CombMode::Cooperative);
    let mut t = end_e + ac_cycles;
    for (inw, outw) in [(n, z.cols), (n, clusters)] {
        let mut first = 0usize;
        while first < clusters {
            let b = unit.rows.min(clusters - first);
            t += batch_cycles(unit, &[(inw, outw)], b);
            let macs = (inw * outw * b) as u64;
            sim.totals.comb.pool_macs += macs;
            sim.ledger
                .charge(Component::SystolicCompute, macs as f64 * sim.sys.energy.mac_pj);
            first += b;
        }
    }
    sim.totals.comb.busy_cycles += t - end_e - ac_cycles;

    let xp_bytes = (xp.rows * xp.cols * 4) as u64;
    let ap_bytes = (ap.rows * ap.cols * 4) as u64;
    sim.charge_buffer(Component::OutputBuf, xp_bytes + ap_bytes);
    sim.totals.comb.output_bytes += xp_bytes + ap_bytes;
    sim.issue_group(
        GroupKey::OutputWrite { batch: u32::MAX },
        RequestClass::Output,
        &[
            (feature_base(*pass_idx), xp_bytes),
            (intermediate_base(*pass_idx) + REGION_STRIDE / 2, ap_bytes),
        ],
        t,
    );
    let end = drain_to_idle(sim, t);
    Ok((ap, xp, end))
}

/// Stand-alone combination phase over all vertices (combine-first layers and
/// the read-back half of the unpipelined mode).
#[allow(clippy::too_many_arguments)]
fn run_comb_phase(
    sim: &mut Sim,
    input: &Matrix,
    input_base: u64,
    stages: &[WeightStage],
    activation: Activation,
    wbase: u64,
    out_base: u64,
    clock: u64,
) -> Result<(Matrix, u64)> {
    let n = input.rows;
    let stage_dims: Vec<(usize, usize)> =
        stages.iter().map(|s| (s.weights.rows, s.weights.cols)).collect();
    let out_cols = stage_dims.last().map_or(input.cols, |d| d.1);
    let mut out = Matrix::zeros(n, out_cols);
    let (nunits, unit) = units_for_mode(sim.sys, CombMode::Cooperative);
    let weight_bytes: u64 = stages.iter().map(|s| s.param_bytes() as u64).sum();
    let fits = weight_bytes <= (sim.sys.weight_buffer_bytes / 2) as u64;

    let mut weight_ready = clock;
    if weight_bytes > 0 && fits {
        weight_ready = sim.blocking_fetch(RequestClass::Weight, wbase, weight_bytes, clock);
        sim.totals.comb.weight_bytes += weight_bytes;
        sim.charge_buffer(Component::WeightBuf, weight_bytes);
    }

    let mut units_free = vec![clock; nunits];
    let mut end = clock;
    let mut first = 0usize;
    let mut batch_idx = 0u32;
    while first < n {
        let b = unit.rows.min(n - first);
        let in_addr = input_base + (first * input.cols * 4) as u64;
        let in_bytes = (b * input.cols * 4) as u64;
        let data_ready = sim.blocking_fetch(RequestClass::Input, in_addr, in_bytes, clock);
        sim.totals.agg.input_bytes += in_bytes;
        sim.charge_buffer(Component::InputBuf, in_bytes);
        let u = (0..nunits).min_by_key(|&i| (units_free[i], i)).unwrap();
        let mut start = data_ready.max(units_free[u]).max(weight_ready);
        if weight_bytes > 0 && !fits {
            let w_ready = sim.blocking_fetch(RequestClass::Weight, wbase, weight_bytes, start);
            sim.totals.comb.weight_bytes += weight_bytes;
            sim.charge_buffer(Component::WeightBuf, weight_bytes);
            start = start.max(w_ready);
        }
        let cycles = batch_cycles(unit, &stage_dims, b);
        let done = start + cycles;
        units_free[u] = done;
        sim.totals.comb.busy_cycles += cycles;
        sim.totals.comb.stall_cycles += start - data_ready;
        sim.totals.comb.batches += 1;
        sim.totals.comb.macs += batch_macs(&stage_dims, b);
        sim.totals.comb.weight_reads += batch_weight_reads(&stage_dims);
        sim.ledger.charge(
            Component::SystolicCompute,
            batch_macs(&stage_dims, b) as f64 * sim.sys.energy.mac_pj,
        );
        sim.ledger.charge(
            Component::WeightBuf,
            batch_weight_reads(&stage_dims) as f64 * 4.0 * sim.sys.energy.buffer_pj_per_byte,
        );
        let result = combine_batch(input, first, b, stages, activation, unit.cols)?;
        out.data[first * out_cols..(first + b) * out_cols].copy_from_slice(&result.data);
        let out_bytes = (b * out_cols * 4) as u64;
        sim.charge_buffer(Component::OutputBuf, out_bytes);
        sim.totals.comb.output_bytes += out_bytes;
        sim.issue_group(
            GroupKey::OutputWrite { batch: batch_idx },
            RequestClass::Output,
            &[(out_base + (first * out_cols * 4) as u64, out_bytes)],
            done,
        );
        end = end.max(done);
        first += b;
        batch_idx += 1;
    }
    let end = drain_to_idle(sim, end);
    Ok((out, end))
}

/// Run the event loop until everything queued has settled.
fn drain_to_idle(sim: &mut Sim, mut clock: u64) -> u64 {
    while let Some(Reverse(ev)) = sim.heap.pop() {
        clock = clock.max(ev.cycle);
        if let EvKind::ChannelSlot(ch) = ev.kind {
            sim.handle_channel_slot(ch, ev.cycle);
        }
    }
    clock
}

struct PassState<'a, 'b> {
    spec: &'a PassSpec<'b>,
    plan: PartitionPlan,
    intervals: Vec<IntervalState>,
    opened: Vec<bool>,
    acc: Matrix,
    eff_degrees: Vec<u32>,
    agg_buffer: AggBufferImage,
    comb: Option<CombState<'a>>,
    layer_end: u64,
}

struct CombState<'a> {
    batches: Vec<BatchState>,
    vertex_batch: Vec<usize>,
    units_free: Vec<u64>,
    unit: SystolicModule,
    stage_dims: Vec<(usize, usize)>,
    weight_ready: Option<u64>,
    weight_fits: bool,
    out: Matrix,
    stages: &'a [WeightStage],
    activation: Activation,
    ready_cycle: Vec<u64>,
    pending_starts: Vec<usize>,
    drain_start_max: Vec<u64>,
}

/// The aggregate-first pass: plan, stream shards, finalize, dispatch.
fn run_pass(sim: &mut Sim, spec: &PassSpec, clock: u64) -> Result<(Matrix, u64)> {
    let f = spec.input.cols;
    let n = spec.edges.num_vertices;
    let plan = build_plan(spec.edges, sim.sys, f, f, sim.sys.sparsity_elimination_enabled)?;
    let grid = build_plan(spec.edges, sim.sys, f, f, false)?;
    sim.totals.agg.rows_loaded += plan.total_rows_loaded() as u64;
    sim.totals.agg.rows_naive_grid += grid.total_rows_loaded() as u64;
    for (iv, shards) in plan.intervals.iter().zip(&plan.shards) {
        for sh in shards {
            sim.totals.agg.window_area += (sh.rows() * iv.len()) as u64;
        }
    }
    sim.totals.agg.planned_edges += plan.total_edges() as u64;

    let eff_degrees: Vec<u32> = (0..n)
        .map(|v| effective_degree(spec.degree_mode, spec.full.in_neighbors(v).len()))
        .collect();

    let intervals = build_interval_states(sim, &plan, spec);
    let mut acc_data = Vec::with_capacity(n * f);
    for _ in 0..n {
        acc_data.extend(spec.kernel.init(f));
    }
    let acc = Matrix {
        rows: n,
        cols: f,
        data: acc_data,
    };

    let with_comb = spec.sink == AggSink::Pipeline && !spec.stages.is_empty();
    let comb = if with_comb {
        let stage_dims: Vec<(usize, usize)> =
            spec.stages.iter().map(|s| (s.weights.rows, s.weights.cols)).collect();
        let out_cols = stage_dims.last().map(|d| d.1).unwrap();
        let (nunits, unit) = units_for_mode(sim.sys, spec.comb_mode);
        let weight_bytes: u64 = spec.stages.iter().map(|s| s.param_bytes() as u64).sum();
        let weight_fits = weight_bytes <= (sim.sys.weight_buffer_bytes / 2) as u64;
        let mut batches = Vec::new();
        let mut vertex_batch = vec![usize::MAX; n];
        let mut pending_starts = vec![0usize; plan.intervals.len()];
        for (ii, iv) in plan.intervals.iter().enumerate() {
            let mut first = iv.start;
            while first < iv.end {
                let b = unit.rows.min(iv.end - first);
                let idx = batches.len();
                for v in first..first + b {
                    vertex_batch[v] = idx;
                }
                batches.push(BatchState {
                    interval: ii as u32,
                    first_vertex: first,
                    len: b,
                    remaining_vertices: b,
                    ready: None,
                    dispatched: false,
                });
                pending_starts[ii] += 1;
                first += b;
            }
        }
        let weight_ready = if weight_bytes > 0 && weight_fits {
            sim.issue_group(
                GroupKey::WeightFetch,
                RequestClass::Weight,
                &[(spec.weight_base, weight_bytes)],
                clock,
            );
            sim.totals.comb.weight_bytes += weight_bytes;
            sim.charge_buffer(Component::WeightBuf, weight_bytes);
            None
        } else {
            Some(clock)
        };
        Some(CombState {
            batches,
            vertex_batch,
            units_free: vec![clock; nunits],
            unit,
            stage_dims,
            weight_ready,
            weight_fits,
            out: Matrix::zeros(n, out_cols),
            stages: spec.stages,
            activation: spec.activation,
            ready_cycle: vec![0; n],
            pending_starts,
            drain_start_max: vec![0; plan.intervals.len()],
        })
    } else {
        None
    };

    let agg_buffer = AggBufferImage {
        drained_at: [clock; 2],
        ..AggBufferImage::default()
    };
    let nintervals = intervals.len();
    let mut st = PassState {
        spec,
        plan,
        intervals,
        opened: vec![false; nintervals],
        acc,
        eff_degrees,
        agg_buffer,
        comb,
        layer_end: clock,
    };

    if nintervals > 0 {
        open_interval(sim, &mut st, 0, clock, clock);
    }

    while let Some(Reverse(ev)) = sim.heap.pop() {
        st.layer_end = st.layer_end.max(ev.cycle);
        match ev.kind {
            EvKind::ChannelSlot(ch) => sim.handle_channel_slot(ch, ev.cycle),
            EvKind::GroupDone(key) => handle_group_done(sim, &mut st, key, ev.cycle)?,
            EvKind::ShardComputeDone { interval, shard } => {
                on_shard_done(sim, &mut st, interval as usize, shard as usize, ev.cycle)?;
            }
            EvKind::EmptyIntervalDone { interval } => {
                finish_interval_aggregation(sim, &mut st, interval as usize, ev.cycle, true)?;
            }
        }
        dispatch_ready_batches(sim, &mut st, ev.cycle)?;
    }

    let layer_end = st.layer_end;
    match spec.sink {
        AggSink::Keep => Ok((st.acc, layer_end)),
        AggSink::Spill { base, intermediate } => {
            if intermediate && !spec.stages.is_empty() {
                // unpipelined: read every image back and combine in a burst
                let read_back = (n * f * 4) as u64;
                sim.totals.intermediate_bytes += read_back;
                let (out, end) = run_comb_phase(
                    sim,
                    &st.acc,
                    base,
                    spec.stages,
                    spec.activation,
                    spec.weight_base,
                    spec.output_base,
                    layer_end,
                )?;
                Ok((out, end))
            } else {
                Ok((st.acc, layer_end))
            }
        }
        AggSink::Pipeline => {
            if let Some(comb) = st.comb {
                Ok((comb.out, layer_end))
            } else {
                Ok((st.acc, layer_end))
            }
        }
    }
}

fn build_interval_states(sim: &Sim, plan: &PartitionPlan, spec: &PassSpec) -> Vec<IntervalState> {
    let f = spec.input.cols;
    let record = if spec.kernel.uses_edge_coeff() {
        sim.sys.edge_record_bytes as u64 + 4
    } else {
        sim.sys.edge_record_bytes as u64
    };
    let needs_self = spec.kernel.self_coefficient(spec.epsilon, 1).is_some();
    let divides = spec.kernel.divides_on_finalize();
    let lanes = sim.pool.total_lanes() as u64;
    let fin_cost_one = {
        let mut c = 0u64;
        if needs_self {
            c += (f as u64).div_ceil(lanes);
        }
        if divides {
            c += (f as u64).div_ceil(lanes);
        }
        c
    };

    let mut states = Vec::with_capacity(plan.intervals.len());
    for (ii, iv) in plan.intervals.iter().enumerate() {
        let shards = &plan.shards[ii];
        let mut metas = Vec::with_capacity(shards.len());
        let mut last_shard: Vec<Option<usize>> = vec![None; iv.len()];
        for (si, s) in shards.iter().enumerate() {
            let mut per_vertex = Vec::new();
            let mut edge_runs: Vec<(u64, u64)> = Vec::new();
            for v in iv.start..iv.end {
                let ns = spec.edges.in_neighbors(v);
                let lo = ns.partition_point(|&r| (r as usize) < s.row_start);
                let hi = ns.partition_point(|&r| (r as usize) <= s.row_end);
                if hi > lo {
                    per_vertex.push((v as u32, (hi - lo) as u32));
                    last_shard[v - iv.start] = Some(si);
                    let addr = EDGE_BASE + (spec.edges.col_ptr[v] + lo) as u64 * record;
                    let size = (hi - lo) as u64 * record;
                    match edge_runs.last_mut() {
                        Some(prev) if prev.0 + prev.1 == addr => prev.1 += size,
                        _ => edge_runs.push((addr, size)),
                    }
                }
            }
            let work = ShardWork {
                per_vertex,
                feature_len: f,
            };
            let compute = shard_compute_cycles(&work, &sim.pool, sim.sys.agg_mode);
            // the eliminator streams one feature-row fetch per source row of
            // the surviving window
            let input_runs: Vec<(u64, u64)> = (s.row_start..=s.row_end)
                .map(|r| (spec.input_base + (r * f * 4) as u64, (f * 4) as u64))
                .collect();
            metas.push(ShardMeta {
                edge_runs,
                input_bytes: (s.rows() * f * 4) as u64,
                input_runs,
                compute_cycles: compute,
                finalize_cycles: 0,
                finalize_vertices: Vec::new(),
            });
        }
        let mut empty_fin = 0u64;
        for (off, ls) in last_shard.iter().enumerate() {
            let v = (iv.start + off) as u32;
            match ls {
                Some(si) => {
                    metas[*si].finalize_vertices.push(v);
                    metas[*si].finalize_cycles += fin_cost_one;
                }
                None if !metas.is_empty() => {
                    let last = metas.len() - 1;
                    metas[last].finalize_vertices.push(v);
                    metas[last].finalize_cycles += fin_cost_one;
                }
                None => empty_fin += fin_cost_one,
            }
        }
        let nshards = metas.len();
        states.push(IntervalState {
            start: iv.start,
            end: iv.end,
            shards: metas,
            edge_done: vec![None; nshards],
            data_done: vec![None; nshards],
            compute_done: vec![None; nshards],
            next_edge_fetch: 0,
            next_input_fetch: 0,
            self_done: None,
            needs_self,
            empty_fin_cycles: empty_fin,
            opened_at: None,
            agg_done: None,
        });
    }
    states
}

fn open_interval(sim: &mut Sim, st: &mut PassState, idx: usize, earliest: u64, natural: u64) {
    if idx >= st.intervals.len() || st.opened[idx] {
        return;
    }
    let open_at = earliest.max(st.agg_buffer.fill_ready_cycle(idx));
    sim.totals.agg.stall_output_backpressure += open_at.saturating_sub(natural);
    st.opened[idx] = true;
    st.agg_buffer.begin_fill(idx);
    let spec = st.spec;
    let f = spec.input.cols;
    let iv = &mut st.intervals[idx];
    iv.opened_at = Some(open_at);
    if iv.needs_self {
        let addr = spec.input_base + (iv.start * f * 4) as u64;
        let size = ((iv.end - iv.start) * f * 4) as u64;
        sim.issue_group(
            GroupKey::SelfFetch { interval: idx as u32 },
            RequestClass::Input,
            &[(addr, size)],
            open_at,
        );
    }
    if iv.shards.is_empty() {
        if !iv.needs_self {
            let done = open_at + iv.empty_fin_cycles;
            sim.totals.agg.finalize_cycles += iv.empty_fin_cycles;
            sim.push(done, EvKind::EmptyIntervalDone { interval: idx as u32 });
        }
        // with a self term the EmptyIntervalDone fires once the self fetch
        // lands (see the SelfFetch handler)
    } else {
        try_issue_fetches(sim, st, idx);
    }
}

fn maybe_open_next(sim: &mut Sim, st: &mut PassState, cycle: u64) {
    for i in 0..st.intervals.len() {
        if st.opened[i] {
            continue;
        }
        let prev_done = if i == 0 {
            Some(cycle)
        } else {
            st.intervals[i - 1].agg_done
        };
        if let Some(p) = prev_done {
            open_interval(sim, st, i, p, p);
        }
        break;
    }
}

fn handle_group_done(sim: &mut Sim, st: &mut PassState, key: GroupKey, cycle: u64) -> Result<()> {
    match key {
        GroupKey::EdgeFetch { interval, shard } => {
            let ii = interval as usize;
            {
                let iv = &mut st.intervals[ii];
                iv.edge_done[shard as usize] = Some(cycle);
                let bytes: u64 = iv.shards[shard as usize].edge_runs.iter().map(|r| r.1).sum();
                sim.totals.agg.edge_bytes += bytes;
            }
            let bytes: u64 = st.intervals[ii].shards[shard as usize]
                .edge_runs
                .iter()
                .map(|r| r.1)
                .sum();
            sim.charge_buffer(Component::EdgeBuf, bytes);
            try_issue_fetches(sim, st, ii);
        }
        GroupKey::InputFetch { interval, shard } => {
            let ii = interval as usize;
            let bytes = st.intervals[ii].shards[shard as usize].input_bytes;
            st.intervals[ii].data_done[shard as usize] = Some(cycle);
            sim.totals.agg.input_bytes += bytes;
            sim.charge_buffer(Component::InputBuf, bytes);
            try_issue_fetches(sim, st, ii);
            try_start_compute(sim, st, ii);
        }
        GroupKey::SelfFetch { interval } => {
            let ii = interval as usize;
            let bytes;
            let empty;
            let fin;
            {
                let iv = &mut st.intervals[ii];
                iv.self_done = Some(cycle);
                bytes = ((iv.end - iv.start) * st.spec.input.cols * 4) as u64;
                empty = iv.shards.is_empty();
                fin = iv.empty_fin_cycles;
            }
            sim.totals.agg.input_bytes += bytes;
            sim.charge_buffer(Component::InputBuf, bytes);
            if empty {
                sim.totals.agg.finalize_cycles += fin;
                sim.push(cycle + fin, EvKind::EmptyIntervalDone { interval });
            } else {
                try_start_compute(sim, st, ii);
            }
        }
        GroupKey::WeightFetch => {
            if let Some(comb) = st.comb.as_mut() {
                comb.weight_ready = Some(cycle);
            }
        }
        GroupKey::OutputWrite { .. } | GroupKey::Fetch { .. } => {}
        GroupKey::Spill { interval } => {
            st.agg_buffer.mark_drained(interval as usize, cycle);
            maybe_open_next(sim, st, cycle);
        }
    }
    Ok(())
}

/// Issue whatever prefetch stages are unblocked. Edge and input fetches run
/// concurrently (separate double-buffered buffers): edge(j) needs edge(j-1)
/// landed and its buffer half free (compute j-2 done); input(j) additionally
/// needs edge(j) landed, since the sparsity eliminator derives the row ids
/// from the arriving edges.
fn try_issue_fetches(sim: &mut Sim, st: &mut PassState, ii: usize) {
    loop {
        let iv = &mut st.intervals[ii];
        let mut progressed = false;
        let je = iv.next_edge_fetch;
        if je < iv.shards.len() {
            let prev = if je == 0 { iv.opened_at } else { iv.edge_done[je - 1] };
            let half_free = if je < 2 { iv.opened_at } else { iv.compute_done[je - 2] };
            if let (Some(a), Some(b)) = (prev, half_free) {
                iv.next_edge_fetch += 1;
                let runs = iv.shards[je].edge_runs.clone();
                let at = a.max(b);
                sim.issue_group(
                    GroupKey::EdgeFetch {
                        interval: ii as u32,
                        shard: je as u32,
                    },
                    RequestClass::Edge,
                    &runs,
                    at,
                );
                progressed = true;
            }
        }
        let iv = &mut st.intervals[ii];
        let ji = iv.next_input_fetch;
        if ji < iv.shards.len() {
            let edges_in = iv.edge_done[ji];
            let prev = if ji == 0 { iv.opened_at } else { iv.data_done[ji - 1] };
            let half_free = if ji < 2 { iv.opened_at } else { iv.compute_done[ji - 2] };
            if let (Some(a), Some(b), Some(c)) = (edges_in, prev, half_free) {
                iv.next_input_fetch += 1;
                let runs = iv.shards[ji].input_runs.clone();
                let at = a.max(b).max(c);
                sim.issue_group(
                    GroupKey::InputFetch {
                        interval: ii as u32,
                        shard: ji as u32,
                    },
                    RequestClass::Input,
                    &runs,
                    at,
                );
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
}

fn try_start_compute(sim: &mut Sim, st: &mut PassState, ii: usize) {
    let iv = &mut st.intervals[ii];
    let Some(j) = iv.compute_done.iter().position(|c| c.is_none()) else {
        return;
    };
    let Some(data) = iv.data_done[j] else { return };
    if iv.needs_self && iv.self_done.is_none() {
        return;
    }
    let engine_free = if j == 0 {
        iv.opened_at.unwrap()
    } else {
        match iv.compute_done[j - 1] {
            Some(c) => c,
            None => return,
        }
    };
    let gate = data.max(iv.self_done.unwrap_or(0));
    let start = engine_free.max(gate);
    if start > engine_free {
        let edge_ready = iv.edge_done[j].unwrap_or(start);
        let edge_share = edge_ready.saturating_sub(engine_free).min(start - engine_free);
        sim.totals.agg.stall_edge_wait += edge_share;
        sim.totals.agg.stall_feature_wait += (start - engine_free) - edge_share;
    }
    let meta = &iv.shards[j];
    let done = start + meta.compute_cycles + meta.finalize_cycles;
    sim.totals.agg.compute_cycles += meta.compute_cycles;
    sim.totals.agg.finalize_cycles += meta.finalize_cycles;
    iv.compute_done[j] = Some(done);
    sim.push(
        done,
        EvKind::ShardComputeDone {
            interval: ii as u32,
            shard: j as u32,
        },
    );
}

fn on_shard_done(sim: &mut Sim, st: &mut PassState, ii: usize, sj: usize, cycle: u64) -> Result<()> {
    // fold the shard's contributions in canonical order
    let shard = st.plan.shards[ii][sj];
    {
        let spec = st.spec;
        let iv = &st.intervals[ii];
        let mut ops = 0u64;
        for v in iv.start..iv.end {
            let ns = spec.edges.in_neighbors(v);
            let lo = ns.partition_point(|&r| (r as usize) < shard.row_start);
            let hi = ns.partition_point(|&r| (r as usize) <= shard.row_end);
            if hi > lo {
                let eff_v = st.eff_degrees[v];
                let row = st.acc.row_mut(v);
                for &u in &ns[lo..hi] {
                    let coeff = edge_coefficient(spec.kernel, st.eff_degrees[u as usize], eff_v);
                    spec.kernel.accumulate(row, spec.input.row(u as usize), coeff);
                }
                ops += (hi - lo) as u64 * spec.input.cols as u64;
            }
        }
        sim.totals.agg.element_ops += ops;
        sim.ledger
            .charge(Component::SimdCompute, ops as f64 * sim.sys.energy.simd_op_pj);
        sim.ledger.charge(
            Component::AggBuf,
            ops as f64 * 8.0 * sim.sys.energy.buffer_pj_per_byte,
        );
    }

    let finalized = st.intervals[ii].shards[sj].finalize_vertices.clone();
    finalize_vertices(st, &finalized, cycle);

    let is_last = sj + 1 == st.intervals[ii].shards.len();
    if is_last {
        finish_interval_aggregation(sim, st, ii, cycle, false)?;
    } else {
        try_issue_fetches(sim, st, ii);
        try_start_compute(sim, st, ii);
    }
    Ok(())
}

fn finalize_vertices(st: &mut PassState, vertices: &[u32], cycle: u64) {
    let spec = st.spec;
    for &v in vertices {
        let vu = v as usize;
        let ns = spec.edges.in_neighbors(vu);
        let has_self_edge = ns.binary_search(&v).is_ok();
        let row = st.acc.row_mut(vu);
        finalize_vertex(
            spec.kernel,
            row,
            spec.input.row(vu),
            spec.epsilon,
            st.eff_degrees[vu],
            ns.len(),
            has_self_edge,
        );
        if let Some(comb) = st.comb.as_mut() {
            comb.ready_cycle[vu] = cycle;
            let b = comb.vertex_batch[vu];
            if b != usize::MAX {
                let batch = &mut comb.batches[b];
                batch.remaining_vertices -= 1;
                if batch.remaining_vertices == 0 && spec.pipeline == PipelineMode::Latency {
                    batch.ready = Some(cycle);
                }
            }
        }
    }
}

fn finish_interval_aggregation(
    sim: &mut Sim,
    st: &mut PassState,
    ii: usize,
    cycle: u64,
    empty_interval: bool,
) -> Result<()> {
    if empty_interval {
        // vertices of an interval with no shards finalize together
        let (start, end) = {
            let iv = &st.intervals[ii];
            (iv.start, iv.end)
        };
        let vertices: Vec<u32> = (start as u32..end as u32).collect();
        finalize_vertices(st, &vertices, cycle);
    }
    st.intervals[ii].agg_done = Some(cycle);
    let spec = st.spec;
    match spec.sink {
        AggSink::Pipeline => {
            if st.comb.is_none() {
                st.agg_buffer.mark_drained(ii, cycle);
            } else if spec.pipeline != PipelineMode::Latency {
                // energy pipeline: the interval dispatches as a burst now
                if let Some(comb) = st.comb.as_mut() {
                    for b in comb.batches.iter_mut().filter(|b| b.interval == ii as u32) {
                        b.ready = Some(cycle);
                    }
                }
            }
        }
        AggSink::Spill { base, intermediate } => {
            let (start, end) = {
                let iv = &st.intervals[ii];
                (iv.start, iv.end)
            };
            let f = spec.input.cols;
            let bytes = ((end - start) * f * 4) as u64;
            if intermediate {
                sim.totals.intermediate_bytes += bytes;
            }
            sim.charge_buffer(Component::AggBuf, bytes);
            sim.issue_group(
                GroupKey::Spill { interval: ii as u32 },
                RequestClass::Output,
                &[(base + (start * f * 4) as u64, bytes)],
                cycle,
            );
        }
        AggSink::Keep => {
            st.agg_buffer.mark_drained(ii, cycle);
        }
    }
    maybe_open_next(sim, st, cycle);
    Ok(())
}

fn dispatch_ready_batches(sim: &mut Sim, st: &mut PassState, cycle: u64) -> Result<()> {
    if st.comb.is_none() {
        return Ok(());
    }
    let spec = st.spec;
    loop {
        // take the ready, undispatched batch with the lowest index
        let (bi, ready) = {
            let comb = st.comb.as_ref().unwrap();
            let Some(weight_ready) = comb.weight_ready else {
                return Ok(());
            };
            let cand = comb
                .batches
                .iter()
                .enumerate()
                .find(|(_, b)| !b.dispatched && b.ready.is_some());
            match cand {
                Some((bi, b)) => (bi, b.ready.unwrap().max(weight_ready)),
                None => return Ok(()),
            }
        };
        let mut extra_weight = 0u64;
        let (weight_fits, wbytes) = {
            let comb = st.comb.as_ref().unwrap();
            (
                comb.weight_fits,
                comb.stages.iter().map(|s| s.param_bytes() as u64).sum::<u64>(),
            )
        };
        if !weight_fits && wbytes > 0 {
            extra_weight = sim.blocking_fetch(RequestClass::Weight, spec.weight_base, wbytes, ready);
            sim.totals.comb.weight_bytes += wbytes;
            sim.charge_buffer(Component::WeightBuf, wbytes);
        }
        let comb = st.comb.as_mut().unwrap();
        let b = &comb.batches[bi];
        let (first, blen, interval) = (b.first_vertex, b.len, b.interval as usize);
        let u = (0..comb.units_free.len())
            .min_by_key(|&i| (comb.units_free[i], i))
            .unwrap();
        let start = ready.max(comb.units_free[u]).max(extra_weight);
        let cycles = batch_cycles(comb.unit, &comb.stage_dims, blen);
        let done = start + cycles;
        comb.units_free[u] = done;
        sim.totals.comb.busy_cycles += cycles;
        sim.totals.comb.stall_cycles += start - ready;
        sim.totals.comb.batches += 1;
        let macs = batch_macs(&comb.stage_dims, blen);
        sim.totals.comb.macs += macs;
        sim.totals.comb.weight_reads += batch_weight_reads(&comb.stage_dims);
        sim.ledger
            .charge(Component::SystolicCompute, macs as f64 * sim.sys.energy.mac_pj);
        sim.ledger.charge(
            Component::WeightBuf,
            batch_weight_reads(&comb.stage_dims) as f64 * 4.0 * sim.sys.energy.buffer_pj_per_byte,
        );
        let agg_read = (blen * st.acc.cols * 4) as u64;
        sim.ledger.charge(
            Component::AggBuf,
            agg_read as f64 * sim.sys.energy.buffer_pj_per_byte,
        );
        let result = combine_batch(&st.acc, first, blen, comb.stages, comb.activation, comb.unit.cols)?;
        let oc = comb.out.cols;
        comb.out.data[first * oc..(first + blen) * oc].copy_from_slice(&result.data);
        for v in first..first + blen {
            sim.totals.vertex_latencies.push(done - comb.ready_cycle[v]);
        }
        comb.batches[bi].dispatched = true;
        let out_bytes = (blen * oc * 4) as u64;
        sim.charge_buffer(Component::OutputBuf, out_bytes);
        sim.totals.comb.output_bytes += out_bytes;
        // chunk drain bookkeeping: a chunk frees once every batch of its
        // interval has begun reading
        comb.pending_starts[interval] -= 1;
        comb.drain_start_max[interval] = comb.drain_start_max[interval].max(start);
        let drained = comb.pending_starts[interval] == 0;
        let drain_at = comb.drain_start_max[interval];
        sim.issue_group(
            GroupKey::OutputWrite { batch: bi as u32 },
            RequestClass::Output,
            &[(spec.output_base + (first * oc * 4) as u64, out_bytes)],
            done,
        );
        if drained {
            st.agg_buffer.mark_drained(interval, drain_at);
            maybe_open_next(sim, st, cycle.max(drain_at));
        }
    }
}
