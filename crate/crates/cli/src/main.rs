//! Command-line front end for the simulator: end-to-end runs, golden dumps,
//! ablations, parameter sweeps and synthetic dataset generation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hygcn_core::config::{PipelineMode, SystemConfig};
use hygcn_core::gen::{generate, write_dataset, EdgeModel, GenSpec};
use hygcn_core::graph::{load_edge_list, load_features_csv, read_container, CscGraph};
use hygcn_core::model::{read_golden, resolve, run_reference, write_golden};
use hygcn_core::report::{
    ablate, run_experiment, sweep, write_report_files, write_sweep_csv, SweepParam,
};
use hygcn_core::{KernelRegistry, ModelConfig, SimError};

#[derive(Parser)]
#[command(name = "hygcn", version, about = "Cycle-level hybrid GCN accelerator simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GraphArgs {
    /// Binary graph container (.hyg)
    #[arg(long, conflicts_with_all = ["edges", "features", "num_vertices"])]
    graph: Option<PathBuf>,
    /// Edge-list text file ("src dst" per line, '#' comments)
    #[arg(long, requires_all = ["features", "num_vertices"])]
    edges: Option<PathBuf>,
    /// Feature matrix CSV
    #[arg(long)]
    features: Option<PathBuf>,
    /// Vertex count for edge-list input
    #[arg(long)]
    num_vertices: Option<usize>,
    /// Feature length for CSV input (defaults to the first row's width)
    #[arg(long)]
    feature_len: Option<usize>,
    /// Mirror each edge when loading the edge list
    #[arg(long)]
    undirected: bool,
}

impl GraphArgs {
    fn load(&self) -> Result<CscGraph, SimError> {
        require_exists(&[
            self.graph.as_ref(),
            self.edges.as_ref(),
            self.features.as_ref(),
        ])?;
        if let Some(path) = &self.graph {
            return read_container(path);
        }
        let (Some(edges), Some(features), Some(n)) =
            (&self.edges, &self.features, self.num_vertices)
        else {
            return Err(SimError::Config(
                "provide --graph or --edges/--features/--num-vertices".into(),
            ));
        };
        let edge_set = load_edge_list(edges, n, self.undirected)?;
        let feature_len = match self.feature_len {
            Some(f) => f,
            None => {
                let first = std::fs::read_to_string(features)
                    .map_err(|e| SimError::io(features, e))?
                    .lines()
                    .next()
                    .map(|l| l.split(',').count())
                    .unwrap_or(0);
                if first == 0 {
                    return Err(SimError::Config("empty feature file".into()));
                }
                first
            }
        };
        let matrix = load_features_csv(features, n, feature_len)?;
        CscGraph::new(edge_set, matrix)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    graph: GraphArgs,
    /// Model config (TOML)
    #[arg(long)]
    model: PathBuf,
    /// System config (TOML); defaults to the reference machine
    #[arg(long)]
    system: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(short, long)]
    out: PathBuf,
    /// Override the pipeline mode
    #[arg(long)]
    pipeline: Option<String>,
    /// Disable priority-based memory access coordination
    #[arg(long)]
    no_coordination: bool,
    /// Disable window sliding/shrinking sparsity elimination
    #[arg(long)]
    no_elimination: bool,
    /// Cooperative group size (modules per group)
    #[arg(long)]
    granularity: Option<usize>,
    /// Record a DRAM request trace (trace.csv)
    #[arg(long)]
    trace: bool,
    /// Dump the per-layer partition plans (plan_layer_NN.csv)
    #[arg(long)]
    dump_plan: bool,
}

impl RunArgs {
    fn system(&self) -> Result<SystemConfig, SimError> {
        let mut sys = match &self.system {
            Some(path) => SystemConfig::load(path)?,
            None => SystemConfig::default(),
        };
        if let Some(p) = &self.pipeline {
            sys.pipeline_mode = match p.as_str() {
                "latency" => PipelineMode::Latency,
                "energy" => PipelineMode::Energy,
                "none" => PipelineMode::None,
                other => {
                    return Err(SimError::Config(format!(
                        "unknown pipeline mode '{other}' (latency, energy, none)"
                    )))
                }
            };
        }
        if self.no_coordination {
            sys.coordination_enabled = false;
        }
        if self.no_elimination {
            sys.sparsity_elimination_enabled = false;
        }
        if let Some(g) = self.granularity {
            sys.set_granularity(g)?;
        }
        if self.trace {
            sys.trace_requests = true;
        }
        sys.validate()?;
        Ok(sys)
    }

    fn model(&self) -> Result<ModelConfig, SimError> {
        require_exists(&[Some(&self.model), self.system.as_ref()])?;
        ModelConfig::load(&self.model)
    }
}

#[derive(Args)]
struct GoldenArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate end to end, cross-check against the functional reference,
    /// and write report files
    Run(RunArgs),
    /// Run the functional reference only and dump per-layer golden outputs
    Golden(GoldenArgs),
    /// Re-run the functional reference and compare against a golden dump
    Validate {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory written by `golden`
        #[arg(long)]
        golden: PathBuf,
    },
    /// Paired toggle runs (elimination, pipeline modes, coordination)
    Ablate(RunArgs),
    /// Sweep one parameter over a value list
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// sampling_factor | agg_buffer_capacity | module_granularity
        #[arg(long)]
        param: String,
        /// Comma-separated values
        #[arg(long)]
        values: String,
    },
    /// Generate a synthetic dataset (edge list + feature CSV + container)
    Gen {
        #[arg(long)]
        vertices: usize,
        /// er:<p> or powerlaw:<alpha>
        #[arg(long)]
        edge_model: String,
        #[arg(long, default_value_t = 16)]
        feature_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path prefix (writes <prefix>.edges/.features.csv/.hyg)
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &SimError) -> u8 {
    match err {
        SimError::OracleMismatch { .. } | SimError::Capacity(_) => 1,
        SimError::Io { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn require_exists(paths: &[Option<&PathBuf>]) -> Result<(), SimError> {
    for p in paths.iter().flatten() {
        if !p.exists() {
            return Err(SimError::Config(format!("file not found: {}", p.display())));
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), SimError> {
    let registry = KernelRegistry::with_builtins();
    match cli.command {
        Command::Run(args) => {
            let graph = args.graph.load()?;
            let model = args.model()?;
            let sys = args.system()?;
            let (report, result) = run_experiment(&graph, &model, &sys, args.seed, &registry)?;
            write_report_files(&args.out, &report, &result)?;
            if args.dump_plan {
                dump_plans(&graph, &model, &sys, args.seed, &registry, &args.out)?;
            }
            println!(
                "ok: {} cycles, {} DRAM bytes, utilization {:.4}, hit rate {:.4} -> {}",
                report.total_cycles,
                report.dram_bytes.total,
                report.bandwidth_utilization,
                report.row_buffer_hit_rate,
                args.out.join("report.json").display()
            );
            Ok(())
        }
        Command::Golden(args) => {
            let graph = args.graph.load()?;
            let model_cfg = ModelConfig::load(&args.model)?;
            let model = resolve(&model_cfg, &registry, graph.feature_len())?;
            let run = run_reference(&graph, &model, args.seed)?;
            write_golden(&args.out, &run)?;
            println!(
                "ok: {} layer outputs -> {}",
                run.layer_outputs.len(),
                args.out.display()
            );
            Ok(())
        }
        Command::Validate {
            graph,
            model,
            seed,
            golden,
        } => {
            let graph = graph.load()?;
            let model_cfg = ModelConfig::load(&model)?;
            let resolved = resolve(&model_cfg, &registry, graph.feature_len())?;
            let run = run_reference(&graph, &resolved, seed)?;
            let stored = read_golden(&golden, run.layer_outputs.len())?;
            for (li, (got, want)) in run.layer_outputs.iter().zip(&stored).enumerate() {
                if got != want {
                    let (v, e) = first_diff(got, want);
                    return Err(SimError::OracleMismatch {
                        layer: li,
                        vertex: v,
                        element: e,
                        got: got.row(v)[e].raw(),
                        expected: want.row(v)[e].raw(),
                    });
                }
            }
            println!("ok: golden outputs match");
            Ok(())
        }
        Command::Ablate(args) => {
            let graph = args.graph.load()?;
            let model = args.model()?;
            let sys = args.system()?;
            let rows = ablate(&graph, &model, &sys, args.seed, &registry, Some(&args.out))?;
            for r in &rows {
                println!(
                    "{:<18} cycles {:>10} dram {:>10} util {:.4}",
                    r.name, r.total_cycles, r.dram_total, r.bandwidth_utilization
                );
            }
            Ok(())
        }
        Command::Sweep { run, param, values } => {
            let graph = run.graph.load()?;
            let model = run.model()?;
            let sys = run.system()?;
            let param = SweepParam::parse(&param)?;
            let values: Vec<f64> = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| SimError::Config(format!("bad sweep value '{v}'")))
                })
                .collect::<Result<_, _>>()?;
            let points = sweep(&graph, &model, &sys, run.seed, &registry, param, &values)?;
            std::fs::create_dir_all(&run.out).map_err(|e| SimError::io(&run.out, e))?;
            write_sweep_csv(&run.out.join("sweep.csv"), param, &points)?;
            for p in &points {
                match (&p.skipped, &p.report) {
                    (Some(reason), _) => println!("{:<10} skipped: {reason}", p.value),
                    (None, Some(r)) => println!(
                        "{:<10} cycles {:>10} dram {:>10}",
                        p.value, r.total_cycles, r.dram_bytes.total
                    ),
                    _ => unreachable!(),
                }
            }
            Ok(())
        }
        Command::Gen {
            vertices,
            edge_model,
            feature_len,
            seed,
            out,
        } => {
            let spec = GenSpec {
                num_vertices: vertices,
                edge_model: EdgeModel::parse(&edge_model)?,
                feature_len,
                seed,
            };
            let graph = generate(&spec)?;
            write_dataset(&out, &graph)?;
            println!(
                "ok: {} vertices, {} edges -> {}.{{edges,features.csv,hyg}}",
                graph.num_vertices(),
                graph.edges.num_edges(),
                out.display()
            );
            Ok(())
        }
    }
}

/// Rebuild and dump the partition plan each layer's aggregation used.
fn dump_plans(
    graph: &CscGraph,
    model: &ModelConfig,
    sys: &SystemConfig,
    seed: u64,
    registry: &KernelRegistry,
    out: &std::path::Path,
) -> Result<(), SimError> {
    use hygcn_core::partition::build_plan;
    use hygcn_core::sample::sample;
    let resolved = resolve(model, registry, graph.feature_len())?;
    for (li, layer) in resolved.layers.iter().enumerate() {
        let sset = sample(&graph.edges, &layer.policy, seed, li)?;
        let edges = sset.filtered_edges(&graph.edges);
        let f = layer.agg_width();
        let plan = build_plan(&edges, sys, f, f, sys.sparsity_elimination_enabled)?;
        plan.write_csv(&out.join(format!("plan_layer_{li:02}.csv")))?;
    }
    Ok(())
}

fn first_diff(a: &hygcn_core::Matrix, b: &hygcn_core::Matrix) -> (usize, usize) {
    for v in 0..a.rows {
        for e in 0..a.cols {
            if a.row(v)[e] != b.row(v)[e] {
                return (v, e);
            }
        }
    }
    (0, 0)
}
