//! Synthetic dataset generation (desk-scale stand-ins for the published
//! benchmark graphs).

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Zeta};

use crate::error::{Result, SimError};
use crate::graph::{CscGraph, EdgeSet, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdgeModel {
    /// Independent directed edges with probability p.
    ErdosRenyi(f64),
    /// Out-degrees drawn from a zeta distribution with exponent alpha.
    PowerLaw(f64),
}

impl EdgeModel {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("er:") {
            let p: f64 = rest
                .parse()
                .map_err(|_| SimError::Config(format!("bad edge probability '{rest}'")))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::Config("edge probability must be in [0,1]".into()));
            }
            return Ok(EdgeModel::ErdosRenyi(p));
        }
        if let Some(rest) = s.strip_prefix("powerlaw:") {
            let a: f64 = rest
                .parse()
                .map_err(|_| SimError::Config(format!("bad power-law exponent '{rest}'")))?;
            if a <= 1.0 {
                return Err(SimError::Config("power-law exponent must be > 1".into()));
            }
            return Ok(EdgeModel::PowerLaw(a));
        }
        Err(SimError::Config(format!(
            "unknown edge model '{s}' (expected er:<p> or powerlaw:<alpha>)"
        )))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenSpec {
    pub num_vertices: usize,
    pub edge_model: EdgeModel,
    pub feature_len: usize,
    pub seed: u64,
}

pub fn generate(spec: &GenSpec) -> Result<CscGraph> {
    if spec.num_vertices == 0 || spec.feature_len == 0 {
        return Err(SimError::Config("vertices and feature_len must be >= 1".into()));
    }
    let n = spec.num_vertices;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    match spec.edge_model {
        EdgeModel::ErdosRenyi(p) => {
            for u in 0..n as u32 {
                for v in 0..n as u32 {
                    if u != v && rng.gen::<f64>() < p {
                        pairs.push((u, v));
                    }
                }
            }
        }
        EdgeModel::PowerLaw(alpha) => {
            let zeta = Zeta::new(alpha)
                .map_err(|e| SimError::Config(format!("bad power-law exponent: {e}")))?;
            let mut targets: Vec<u32> = (0..n as u32).collect();
            for u in 0..n as u32 {
                let d = (zeta.sample(&mut rng) as usize).min(n - 1);
                targets.shuffle(&mut rng);
                let mut taken = 0;
                for &v in targets.iter() {
                    if taken == d {
                        break;
                    }
                    if v != u {
                        pairs.push((u, v));
                        taken += 1;
                    }
                }
            }
        }
    }
    let edges = EdgeSet::from_pairs(n, &pairs)?;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..spec.feature_len).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    CscGraph::new(edges, Matrix::from_f64_rows(&rows)?)
}

/// Write the generated dataset as an edge-list, a feature CSV and the binary
/// container, under `prefix` (prefix.edges, prefix.features.csv, prefix.hyg).
pub fn write_dataset(prefix: &Path, graph: &CscGraph) -> Result<()> {
    if let Some(parent) = prefix.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| SimError::io(parent, e))?;
        }
    }
    let edges_path = prefix.with_extension("edges");
    let mut f = std::fs::File::create(&edges_path).map_err(|e| SimError::io(&edges_path, e))?;
    writeln!(f, "# {} vertices, {} edges", graph.num_vertices(), graph.edges.num_edges())
        .map_err(|e| SimError::io(&edges_path, e))?;
    for v in 0..graph.num_vertices() {
        for &u in graph.edges.in_neighbors(v) {
            writeln!(f, "{u} {v}").map_err(|e| SimError::io(&edges_path, e))?;
        }
    }
    let feat_path = prefix.with_extension("features.csv");
    let mut f = std::fs::File::create(&feat_path).map_err(|e| SimError::io(&feat_path, e))?;
    for v in 0..graph.num_vertices() {
        let line = graph
            .features
            .row(v)
            .iter()
            .map(|x| format!("{}", x.to_f64()))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(f, "{line}").map_err(|e| SimError::io(&feat_path, e))?;
    }
    crate::graph::write_container(&prefix.with_extension("hyg"), graph)
}
