//! Run reports and experiment sweeps.
//!
//! Every simulated run ends in a `SimReport`: cycles, per-engine counters,
//! DRAM traffic by class, bandwidth utilization, row-buffer hit rate,
//! sparsity metrics, the energy ledger and the full config echo — enough to
//! reproduce the run byte for byte. Reports serialize to canonical JSON plus
//! plot-ready CSV tables.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, SamplePolicy, SystemConfig};
use crate::engine::agg::AggStats;
use crate::engine::comb::CombStats;
use crate::error::{Result, SimError};
use crate::graph::CscGraph;
use crate::kernels::KernelRegistry;
use crate::memory::{utilization, EnergyLedger, MemStats};
use crate::model::{resolve, run_reference};
use crate::sim::{run_simulation, verify_against_reference, RunResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphInfo {
    pub num_vertices: usize,
    pub num_edges: usize,
    pub feature_len: usize,
}

impl GraphInfo {
    pub fn of(graph: &CscGraph) -> Self {
        GraphInfo {
            num_vertices: graph.num_vertices(),
            num_edges: graph.edges.num_edges(),
            feature_len: graph.feature_len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: u64,
    pub p99: u64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[u64]) -> Self {
        if samples.is_empty() {
            return LatencyStats {
                count: 0,
                mean: 0.0,
                p50: 0,
                p99: 0,
            };
        }
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        let q = |p: f64| sorted[((p * (sorted.len() as f64 - 1.0)).round() as usize).min(sorted.len() - 1)];
        LatencyStats {
            count: sorted.len(),
            mean: sorted.iter().sum::<u64>() as f64 / sorted.len() as f64,
            p50: q(0.50),
            p99: q(0.99),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DramBytes {
    pub edge: u64,
    pub input: u64,
    pub weight: u64,
    pub output: u64,
    pub total: u64,
    pub intermediate: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    #[serde(flatten)]
    pub ledger: EnergyLedger,
    pub total_pj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub model: ModelConfig,
    pub system: SystemConfig,
    pub seed: u64,
    pub graph: GraphInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub config: ConfigEcho,
    pub total_cycles: u64,
    pub agg: AggStats,
    pub comb: CombStats,
    pub dram_bytes: DramBytes,
    pub mem: MemStats,
    pub bandwidth_utilization: f64,
    pub row_buffer_hit_rate: f64,
    pub eliminated_sparsity_ratio: f64,
    pub residual_sparsity: f64,
    pub vertex_latency: LatencyStats,
    pub energy: EnergyReport,
}

pub fn build_report(
    model: &ModelConfig,
    sys: &SystemConfig,
    seed: u64,
    graph: GraphInfo,
    result: &RunResult,
) -> Result<SimReport> {
    let t = &result.totals;
    let window = t.total_cycles.max(1);
    let dram = DramBytes {
        edge: t.mem.bytes_by_class[0],
        input: t.mem.bytes_by_class[1],
        weight: t.mem.bytes_by_class[2],
        output: t.mem.bytes_by_class[3],
        total: t.mem.total_bytes(),
        intermediate: t.intermediate_bytes,
    };
    let residual = if t.agg.window_area == 0 {
        0.0
    } else {
        1.0 - t.agg.planned_edges as f64 / t.agg.window_area as f64
    };
    Ok(SimReport {
        schema_version: SCHEMA_VERSION,
        config: ConfigEcho {
            model: model.clone(),
            system: sys.clone(),
            seed,
            graph,
        },
        total_cycles: t.total_cycles,
        agg: t.agg,
        comb: t.comb,
        dram_bytes: dram,
        mem: t.mem.clone(),
        bandwidth_utilization: utilization(&t.mem, &sys.memory, window)?,
        row_buffer_hit_rate: t.mem.hit_rate(),
        eliminated_sparsity_ratio: result.eliminated_sparsity_ratio(),
        residual_sparsity: residual,
        vertex_latency: LatencyStats::from_samples(&t.vertex_latencies),
        energy: EnergyReport {
            ledger: t.energy,
            total_pj: t.energy.total(),
        },
    })
}

/// End-to-end simulation with the mandatory cross-check against the
/// functional reference; a numeric divergence is a hard failure.
pub fn run_experiment(
    graph: &CscGraph,
    model: &ModelConfig,
    sys: &SystemConfig,
    seed: u64,
    registry: &KernelRegistry,
) -> Result<(SimReport, RunResult)> {
    let resolved = resolve(model, registry, graph.feature_len())?;
    let result = run_simulation(graph, &resolved, sys, seed)?;
    let golden = run_reference(graph, &resolved, seed)?;
    verify_against_reference(&result, &golden)?;
    let report = build_report(model, sys, seed, GraphInfo::of(graph), &result)?;
    Ok((report, result))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| SimError::io(path, e))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| SimError::io(path, e))
}

/// Write report.json, traffic.csv, latency_hist.csv (and trace.csv when the
/// run recorded one) into `dir`.
pub fn write_report_files(dir: &Path, report: &SimReport, result: &RunResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| SimError::Config(format!("report serialization: {e}")))?;
    write_file(&dir.join("report.json"), &(json + "\n"))?;

    let mut traffic = String::from("class,bytes\n");
    for (name, bytes) in [
        ("edge", report.dram_bytes.edge),
        ("input", report.dram_bytes.input),
        ("weight", report.dram_bytes.weight),
        ("output", report.dram_bytes.output),
        ("intermediate", report.dram_bytes.intermediate),
        ("total", report.dram_bytes.total),
    ] {
        traffic.push_str(&format!("{name},{bytes}\n"));
    }
    write_file(&dir.join("traffic.csv"), &traffic)?;

    let mut hist = String::from("latency_lo,latency_hi,count\n");
    if !result.totals.vertex_latencies.is_empty() {
        let max = *result.totals.vertex_latencies.iter().max().unwrap();
        let mut bounds = Vec::new();
        let mut lo = 0u64;
        let mut hi = 64u64;
        while lo <= max {
            bounds.push((lo, hi));
            lo = hi;
            hi *= 2;
        }
        for (lo, hi) in bounds {
            let count = result
                .totals
                .vertex_latencies
                .iter()
                .filter(|&&x| x >= lo && x < hi)
                .count();
            hist.push_str(&format!("{lo},{hi},{count}\n"));
        }
    }
    write_file(&dir.join("latency_hist.csv"), &hist)?;

    if !result.totals.trace.is_empty() {
        let mut trace = String::from("cycle,class,addr,channel,bank,row,hit\n");
        for r in &result.totals.trace {
            trace.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.cycle,
                r.class.name(),
                r.addr,
                r.channel,
                r.bank,
                r.row,
                if r.hit { 1 } else { 0 }
            ));
        }
        write_file(&dir.join("trace.csv"), &trace)?;
    }
    Ok(())
}

/// Ablation toggles mirroring the architecture studies: sparsity
/// elimination, pipeline mode, memory coordination.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub total_cycles: u64,
    pub dram_total: u64,
    pub dram_intermediate: u64,
    pub bandwidth_utilization: f64,
    pub row_buffer_hit_rate: f64,
    pub mean_vertex_latency: f64,
    pub energy_total_pj: f64,
}

impl AblationRow {
    fn of(name: &str, r: &SimReport) -> Self {
        AblationRow {
            name: name.to_string(),
            total_cycles: r.total_cycles,
            dram_total: r.dram_bytes.total,
            dram_intermediate: r.dram_bytes.intermediate,
            bandwidth_utilization: r.bandwidth_utilization,
            row_buffer_hit_rate: r.row_buffer_hit_rate,
            mean_vertex_latency: r.vertex_latency.mean,
            energy_total_pj: r.energy.total_pj,
        }
    }
}

/// Paired toggle runs. Every variant re-verifies against the reference, so
/// ablations can change timing and traffic but never numerics.
pub fn ablate(
    graph: &CscGraph,
    model: &ModelConfig,
    base: &SystemConfig,
    seed: u64,
    registry: &KernelRegistry,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    use crate::config::PipelineMode;
    let variants: Vec<(String, SystemConfig)> = vec![
        ("base".into(), base.clone()),
        (
            "no-elimination".into(),
            SystemConfig {
                sparsity_elimination_enabled: false,
                ..base.clone()
            },
        ),
        (
            "pipeline-none".into(),
            SystemConfig {
                pipeline_mode: PipelineMode::None,
                ..base.clone()
            },
        ),
        (
            "pipeline-latency".into(),
            SystemConfig {
                pipeline_mode: PipelineMode::Latency,
                ..base.clone()
            },
        ),
        (
            "pipeline-energy".into(),
            SystemConfig {
                pipeline_mode: PipelineMode::Energy,
                ..base.clone()
            },
        ),
        (
            "no-coordination".into(),
            SystemConfig {
                coordination_enabled: false,
                ..base.clone()
            },
        ),
    ];
    let mut rows = Vec::new();
    for (name, sys) in &variants {
        let (report, result) = run_experiment(graph, model, sys, seed, registry)?;
        if let Some(dir) = out_dir {
            write_report_files(&dir.join(name), &report, &result)?;
        }
        rows.push(AblationRow::of(name, &report));
    }
    if let Some(dir) = out_dir {
        let mut csv = String::from(
            "name,total_cycles,dram_total,dram_intermediate,bandwidth_utilization,row_buffer_hit_rate,mean_vertex_latency,energy_total_pj\n",
        );
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.name,
                r.total_cycles,
                r.dram_total,
                r.dram_intermediate,
                r.bandwidth_utilization,
                r.row_buffer_hit_rate,
                r.mean_vertex_latency,
                r.energy_total_pj
            ));
        }
        write_file(&dir.join("ablation.csv"), &csv)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    SamplingFactor,
    AggBufferCapacity,
    ModuleGranularity,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sampling_factor" => Ok(SweepParam::SamplingFactor),
            "agg_buffer_capacity" => Ok(SweepParam::AggBufferCapacity),
            "module_granularity" => Ok(SweepParam::ModuleGranularity),
            _ => Err(SimError::Config(format!(
                "unknown sweep parameter '{s}' (sampling_factor, agg_buffer_capacity, module_granularity)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub skipped: Option<String>,
    pub report: Option<SimReport>,
}

fn apply_sweep_value(
    param: SweepParam,
    value: f64,
    model: &ModelConfig,
    sys: &SystemConfig,
) -> Result<(ModelConfig, SystemConfig)> {
    let mut model = model.clone();
    let mut sys = sys.clone();
    match param {
        SweepParam::SamplingFactor => {
            if value.is_nan() || value < 1.0 {
                return Err(SimError::Config("sampling factor must be >= 1".into()));
            }
            for layer in model.layers.iter_mut() {
                layer.sampling = SamplePolicy::Factor(value).to_string();
            }
        }
        SweepParam::AggBufferCapacity => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(SimError::Config("capacity must be a positive byte count".into()));
            }
            sys.agg_buffer_bytes = value as usize;
        }
        SweepParam::ModuleGranularity => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(SimError::Config("granularity must be a positive integer".into()));
            }
            sys.set_granularity(value as usize)?;
            // the sweep exercises cooperative grouping
            sys.pipeline_mode = crate::config::PipelineMode::Energy;
        }
    }
    Ok((model, sys))
}

fn sweep_threads(points: usize) -> usize {
    let env = std::env::var("HYGCN_SIM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1);
    let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    env.unwrap_or(hw).min(points.max(1))
}

/// One report per value; invalid values are skipped with the reason
/// recorded. Points run in parallel (bounded by HYGCN_SIM_THREADS).
pub fn sweep(
    graph: &CscGraph,
    model: &ModelConfig,
    sys: &SystemConfig,
    seed: u64,
    registry: &KernelRegistry,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(SimError::Config("sweep needs at least one value".into()));
    }
    let threads = sweep_threads(values.len());
    let mut points: Vec<Option<SweepPoint>> = (0..values.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let points_ref = std::sync::Mutex::new(&mut points);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= values.len() {
                    break;
                }
                let value = values[i];
                let point = match apply_sweep_value(param, value, model, sys) {
                    Err(e) => SweepPoint {
                        value,
                        skipped: Some(e.to_string()),
                        report: None,
                    },
                    Ok((m, s)) => match run_experiment(graph, &m, &s, seed, registry) {
                        Err(e) => SweepPoint {
                            value,
                            skipped: Some(e.to_string()),
                            report: None,
                        },
                        Ok((report, _)) => SweepPoint {
                            value,
                            skipped: None,
                            report: Some(report),
                        },
                    },
                };
                points_ref.lock().unwrap()[i] = Some(point);
            });
        }
    });
    Ok(points.into_iter().map(|p| p.unwrap()).collect())
}

/// Trend table backing the sweep plots.
pub fn write_sweep_csv(path: &Path, param: SweepParam, points: &[SweepPoint]) -> Result<()> {
    let mut csv = String::from(
        "value,skipped,total_cycles,dram_total,eliminated_sparsity_ratio,residual_sparsity,mean_vertex_latency,weight_buf_energy_pj\n",
    );
    for p in points {
        match (&p.skipped, &p.report) {
            (Some(reason), _) => {
                csv.push_str(&format!("{},\"{}\",,,,,,\n", p.value, reason.replace('"', "'")));
            }
            (None, Some(r)) => {
                csv.push_str(&format!(
                    "{},,{},{},{},{},{},{}\n",
                    p.value,
                    r.total_cycles,
                    r.dram_bytes.total,
                    r.eliminated_sparsity_ratio,
                    r.residual_sparsity,
                    r.vertex_latency.mean,
                    r.energy.ledger.weight_buf
                ));
            }
            _ => unreachable!(),
        }
    }
    let _ = param;
    write_file(path, &csv)
}
