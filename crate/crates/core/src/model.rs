//! Functional (architecture-free) execution of GCN models.
//!
//! This module is the numerical ground truth: it runs every operator with a
//! pinned operation order (neighbors ascending by source id, self term last,
//! MVM accumulation ascending over the input index) so that the engine
//! simulation can be checked against it bit for bit.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::config::{
    Activation, LayerConfig, LayerOrder, MlpShape, ModelConfig, PoolSubLayer, SamplePolicy,
};
use crate::error::{Result, SimError};
use crate::fixed::Fixed32;
use crate::graph::{CscGraph, EdgeSet, Matrix};
use crate::kernels::{
    edge_coefficient, effective_degree, finalize_vertex, AggregateKernel, DegreeMode,
    KernelRegistry,
};
use crate::sample::{sample, SampleSet};

/// One MLP stage with synthesized parameters. `weights` is input x output.
#[derive(Debug, Clone)]
pub struct WeightStage {
    pub weights: Matrix,
    pub bias: Vec<Fixed32>,
}

impl WeightStage {
    pub fn identity(n: usize) -> Self {
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            w.row_mut(i)[i] = Fixed32::ONE;
        }
        WeightStage {
            weights: w,
            bias: vec![Fixed32::ZERO; n],
        }
    }

    pub fn param_bytes(&self) -> usize {
        (self.weights.data.len() + self.bias.len()) * 4
    }
}

const WEIGHT_SEED: u64 = 0x4a77_90cd;

/// Synthesize a stage's parameters deterministically from its position.
/// Independent of the run seed so goldens only vary with sampling.
pub fn synth_stage(layer: usize, role: u8, stage: usize, shape: MlpShape) -> WeightStage {
    let mut rng = ChaCha12Rng::seed_from_u64(WEIGHT_SEED);
    rng.set_stream(((role as u64) << 56) | ((layer as u64) << 28) | stage as u64);
    let scale = 0.5 / (shape.rows as f64).sqrt();
    let mut weights = Matrix::zeros(shape.rows, shape.cols);
    for x in weights.data.iter_mut() {
        *x = Fixed32::from_f64(rng.gen_range(-scale..scale));
    }
    let bias = (0..shape.cols)
        .map(|_| Fixed32::from_f64(rng.gen_range(-0.05..0.05)))
        .collect();
    WeightStage { weights, bias }
}

#[derive(Clone)]
pub struct ResolvedSubLayer {
    pub kernel: Arc<dyn AggregateKernel>,
    pub stages: Vec<WeightStage>,
    pub activation: Activation,
}

#[derive(Clone)]
pub struct ResolvedLayer {
    pub kernel: Arc<dyn AggregateKernel>,
    pub stages: Vec<WeightStage>,
    pub activation: Activation,
    pub policy: SamplePolicy,
    pub order: LayerOrder,
    pub epsilon: Option<f64>,
    pub degree_mode: DegreeMode,
    /// (assignment, embedding) sub-layers when the layer pools the graph.
    pub pool: Option<(ResolvedSubLayer, ResolvedSubLayer)>,
    pub in_width: usize,
    pub out_width: usize,
}

impl ResolvedLayer {
    /// Width of the vectors entering aggregation (post-MLP width for
    /// combine-first layers).
    pub fn agg_width(&self) -> usize {
        match self.order {
            LayerOrder::AggregateFirst => self.in_width,
            LayerOrder::CombineFirst => self.out_width,
        }
    }

    pub fn weight_bytes(&self) -> usize {
        self.stages.iter().map(|s| s.param_bytes()).sum()
    }
}

#[derive(Clone)]
pub struct ResolvedModel {
    pub name: String,
    pub input_width: usize,
    pub layers: Vec<ResolvedLayer>,
}

fn resolve_sub(
    layer_idx: usize,
    role: u8,
    sub: &PoolSubLayer,
    registry: &KernelRegistry,
    in_width: usize,
) -> Result<ResolvedSubLayer> {
    if sub.mlp[0].rows != in_width {
        return Err(SimError::Config(format!(
            "layer {layer_idx} pool sub-layer expects input width {}, got {}",
            sub.mlp[0].rows, in_width
        )));
    }
    Ok(ResolvedSubLayer {
        kernel: registry.get(&sub.aggregate)?,
        stages: sub
            .mlp
            .iter()
            .enumerate()
            .map(|(si, &shape)| synth_stage(layer_idx, role, si, shape))
            .collect(),
        activation: sub.activation,
    })
}

/// Bind kernel names to registry entries, synthesize parameters, and check
/// that widths chain through the whole model.
pub fn resolve(cfg: &ModelConfig, registry: &KernelRegistry, input_width: usize) -> Result<ResolvedModel> {
    cfg.validate()?;
    let mut layers = Vec::with_capacity(cfg.layers.len());
    let mut width = input_width;
    for (li, lc) in cfg.layers.iter().enumerate() {
        let layer = resolve_layer(li, lc, registry, width)?;
        if layer.pool.is_some() && li + 1 != cfg.layers.len() {
            return Err(SimError::Config(format!(
                "layer {li}: pooling is only supported on the final layer"
            )));
        }
        width = layer.out_width;
        layers.push(layer);
    }
    Ok(ResolvedModel {
        name: cfg.name.clone(),
        input_width,
        layers,
    })
}

fn resolve_layer(
    li: usize,
    lc: &LayerConfig,
    registry: &KernelRegistry,
    in_width: usize,
) -> Result<ResolvedLayer> {
    let kernel = registry.get(&lc.aggregate)?;
    let stages: Vec<WeightStage> = lc
        .mlp
        .iter()
        .enumerate()
        .map(|(si, &shape)| synth_stage(li, 0, si, shape))
        .collect();
    if let Some(first) = lc.mlp.first() {
        if first.rows != in_width {
            return Err(SimError::Config(format!(
                "layer {li}: MLP expects input width {}, got {in_width}",
                first.rows
            )));
        }
    }
    let mid_width = lc.mlp.last().map_or(in_width, |s| s.cols);
    let pool = match &lc.pool {
        None => None,
        Some(pc) => Some((
            resolve_sub(li, 1, &pc.assign, registry, mid_width)?,
            resolve_sub(li, 2, &pc.embed, registry, mid_width)?,
        )),
    };
    let out_width = match &pool {
        Some((_, embed)) => embed.stages.last().unwrap().weights.cols,
        None => mid_width,
    };
    Ok(ResolvedLayer {
        kernel,
        stages,
        activation: lc.activation,
        policy: lc.sampling_policy()?,
        order: lc.order,
        epsilon: lc.epsilon,
        degree_mode: lc.degree_mode,
        pool,
        in_width,
        out_width,
    })
}

/// Per-vertex neighbor aggregation over the (already sampled) edge set.
/// `full` supplies the degrees for coefficient computation.
pub fn aggregate(
    edges: &EdgeSet,
    full: &EdgeSet,
    kernel: &dyn AggregateKernel,
    epsilon: Option<f64>,
    degree_mode: DegreeMode,
    input: &Matrix,
) -> Result<Matrix> {
    if input.rows != edges.num_vertices {
        return Err(SimError::Dimension(format!(
            "feature matrix has {} rows for {} vertices",
            input.rows, edges.num_vertices
        )));
    }
    let cols = input.cols;
    let mut out = Matrix::zeros(edges.num_vertices, cols);
    for v in 0..edges.num_vertices {
        let eff_v = effective_degree(degree_mode, full.degree(v)?);
        let neighbors = edges.in_neighbors(v);
        let mut acc = kernel.init(cols);
        for &u in neighbors {
            let eff_u = effective_degree(degree_mode, full.degree(u as usize)?);
            let coeff = edge_coefficient(kernel, eff_u, eff_v);
            kernel.accumulate(&mut acc, input.row(u as usize), coeff);
        }
        let has_self_edge = neighbors.binary_search(&(v as u32)).is_ok();
        finalize_vertex(
            kernel,
            &mut acc,
            input.row(v),
            epsilon,
            eff_v,
            neighbors.len(),
            has_self_edge,
        );
        out.row_mut(v).copy_from_slice(&acc);
    }
    Ok(out)
}

fn apply_activation(row: &mut [Fixed32], act: Activation) {
    if act == Activation::Relu {
        for x in row.iter_mut() {
            *x = x.relu();
        }
    }
}

/// Chained MVM + bias + activation. Accumulation runs ascending over the
/// input index; bias is added after the dot product; the layer activation is
/// applied after every stage.
pub fn combine(input: &Matrix, stages: &[WeightStage], activation: Activation) -> Result<Matrix> {
    let mut cur = input.clone();
    for stage in stages {
        if cur.cols != stage.weights.rows {
            return Err(SimError::Dimension(format!(
                "combine: input width {} does not match weight rows {}",
                cur.cols, stage.weights.rows
            )));
        }
        let out_cols = stage.weights.cols;
        let mut next = Matrix::zeros(cur.rows, out_cols);
        for v in 0..cur.rows {
            let x = cur.row(v);
            let o = next.row_mut(v);
            for (k, &xk) in x.iter().enumerate() {
                if xk == Fixed32::ZERO {
                    continue; // exact-zero products add nothing
                }
                let wrow = stage.weights.row(k);
                for j in 0..out_cols {
                    o[j] = o[j] + xk * wrow[j];
                }
            }
            for (oj, &bj) in o.iter_mut().zip(&stage.bias) {
                *oj = *oj + bj;
            }
            apply_activation(o, activation);
        }
        cur = next;
    }
    Ok(cur)
}

/// Graph readout: sum of all vertex features (ascending vertex order).
pub fn readout_sum(features: &Matrix) -> Result<Vec<Fixed32>> {
    if features.rows == 0 {
        return Err(SimError::Dimension("readout over an empty graph".into()));
    }
    let mut acc = vec![Fixed32::ZERO; features.cols];
    for v in 0..features.rows {
        for (a, &x) in acc.iter_mut().zip(features.row(v)) {
            *a = *a + x;
        }
    }
    Ok(acc)
}

/// Concatenation of per-layer readout sums.
pub fn readout_concat(per_layer: &[Matrix]) -> Result<Vec<Fixed32>> {
    let mut out = Vec::new();
    for m in per_layer {
        out.extend(readout_sum(m)?);
    }
    Ok(out)
}

/// Row-wise softmax computed in f64 and quantized back.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for v in 0..logits.rows {
        let row = logits.row(v);
        let max = row.iter().map(|x| x.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x.to_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let o = out.row_mut(v);
        for (j, e) in exps.iter().enumerate() {
            o[j] = Fixed32::from_f64(e / total);
        }
    }
    out
}

/// Pooling matrix products: X' = C^T Z and A' = C^T (A C), with A the 0/1
/// adjacency implied by `edges` (A[u][v] = 1 iff edge u -> v). Accumulation
/// order is an ascending sweep over source vertices.
pub fn pool_products(c: &Matrix, z: &Matrix, edges: &EdgeSet) -> Result<(Matrix, Matrix)> {
    if c.rows != z.rows || c.rows != edges.num_vertices {
        return Err(SimError::Dimension("pool_products: row mismatch".into()));
    }
    let clusters = c.cols;
    // X' = C^T Z
    let mut xp = Matrix::zeros(clusters, z.cols);
    for v in 0..c.rows {
        let cv = c.row(v);
        let zv = z.row(v);
        for j in 0..clusters {
            let cj = cv[j];
            if cj == Fixed32::ZERO {
                continue;
            }
            let o = xp.row_mut(j);
            for (oj, &zk) in o.iter_mut().zip(zv) {
                *oj = *oj + cj * zk;
            }
        }
    }
    // T = A C : T[u] += C[v] for each edge u -> v, sweeping v ascending
    let mut t = Matrix::zeros(c.rows, clusters);
    for v in 0..edges.num_vertices {
        let cv = c.row(v).to_vec();
        for &u in edges.in_neighbors(v) {
            let o = t.row_mut(u as usize);
            for (oj, &cj) in o.iter_mut().zip(&cv) {
                *oj = *oj + cj;
            }
        }
    }
    // A' = C^T T
    let mut ap = Matrix::zeros(clusters, clusters);
    for u in 0..c.rows {
        let cu = c.row(u);
        let tu = t.row(u);
        for j in 0..clusters {
            let cj = cu[j];
            if cj == Fixed32::ZERO {
                continue;
            }
            let o = ap.row_mut(j);
            for (oj, &tk) in o.iter_mut().zip(tu) {
                *oj = *oj + cj * tk;
            }
        }
    }
    Ok((xp, ap))
}

fn sub_forward(
    sub: &ResolvedSubLayer,
    edges: &EdgeSet,
    full: &EdgeSet,
    degree_mode: DegreeMode,
    input: &Matrix,
) -> Result<Matrix> {
    let agg = aggregate(edges, full, sub.kernel.as_ref(), None, degree_mode, input)?;
    combine(&agg, &sub.stages, sub.activation)
}

/// Graph pooling: softmax assignments from one sub-layer, embeddings from the
/// other, then the matrix transformation onto the smaller graph. Returns the
/// pooled (dense adjacency, features).
pub fn diffpool(
    edges: &EdgeSet,
    full: &EdgeSet,
    input: &Matrix,
    assign: &ResolvedSubLayer,
    embed: &ResolvedSubLayer,
    degree_mode: DegreeMode,
) -> Result<(Matrix, Matrix)> {
    let logits = sub_forward(assign, edges, full, degree_mode, input)?;
    let c = softmax_rows(&logits);
    let z = sub_forward(embed, edges, full, degree_mode, input)?;
    let (xp, ap) = pool_products(&c, &z, edges)?;
    Ok((ap, xp))
}

/// Output of a reference run: per-layer feature matrices plus the pooled
/// adjacency when the model pools.
#[derive(Debug, Clone)]
pub struct GoldenRun {
    pub layer_outputs: Vec<Matrix>,
    pub pooled_adjacency: Option<Matrix>,
}

/// Forward one layer functionally. The caller has already sampled `edges`.
pub fn run_layer_reference(
    layer: &ResolvedLayer,
    edges: &EdgeSet,
    full: &EdgeSet,
    input: &Matrix,
) -> Result<(Matrix, Option<Matrix>)> {
    let mid = match layer.order {
        LayerOrder::AggregateFirst => {
            let agg = aggregate(
                edges,
                full,
                layer.kernel.as_ref(),
                layer.epsilon,
                layer.degree_mode,
                input,
            )?;
            if layer.stages.is_empty() {
                agg
            } else {
                combine(&agg, &layer.stages, layer.activation)?
            }
        }
        LayerOrder::CombineFirst => {
            let z = combine(input, &layer.stages, layer.activation)?;
            aggregate(
                edges,
                full,
                layer.kernel.as_ref(),
                layer.epsilon,
                layer.degree_mode,
                &z,
            )?
        }
    };
    match &layer.pool {
        None => Ok((mid, None)),
        Some((assign, embed)) => {
            let (ap, xp) = diffpool(edges, full, &mid, assign, embed, layer.degree_mode)?;
            Ok((xp, Some(ap)))
        }
    }
}

/// Run the whole model functionally; this is the golden baseline the
/// simulator is checked against.
pub fn run_reference(graph: &CscGraph, model: &ResolvedModel, seed: u64) -> Result<GoldenRun> {
    if graph.feature_len() != model.input_width {
        return Err(SimError::Dimension(format!(
            "graph feature_len {} != model input width {}",
            graph.feature_len(),
            model.input_width
        )));
    }
    let full = &graph.edges;
    let mut feats = graph.features.clone();
    let mut outputs = Vec::with_capacity(model.layers.len());
    let mut pooled_adjacency = None;
    for (li, layer) in model.layers.iter().enumerate() {
        let sset: SampleSet = sample(full, &layer.policy, seed, li)?;
        let edges = sset.filtered_edges(full);
        let (out, ap) = run_layer_reference(layer, &edges, full, &feats)?;
        if ap.is_some() {
            pooled_adjacency = ap;
        }
        feats = out.clone();
        outputs.push(out);
    }
    Ok(GoldenRun {
        layer_outputs: outputs,
        pooled_adjacency,
    })
}

/// Write per-layer golden outputs into a directory.
pub fn write_golden(dir: &Path, run: &GoldenRun) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    for (i, m) in run.layer_outputs.iter().enumerate() {
        crate::graph::write_matrix(&dir.join(format!("layer_{i:02}.hyg")), m)?;
    }
    if let Some(ap) = &run.pooled_adjacency {
        crate::graph::write_matrix(&dir.join("pooled_adjacency.hyg"), ap)?;
    }
    Ok(())
}

/// Read a golden directory back (layer outputs only).
pub fn read_golden(dir: &Path, num_layers: usize) -> Result<Vec<Matrix>> {
    (0..num_layers)
        .map(|i| crate::graph::read_matrix(&dir.join(format!("layer_{i:02}.hyg"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MlpShape;

    fn fx(x: f64) -> Fixed32 {
        Fixed32::from_f64(x)
    }

    fn registry() -> KernelRegistry {
        KernelRegistry::with_builtins()
    }

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_f64_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn star_graph_add_no_self() {
        // center vertex 0 aggregates neighbors 1 and 2
        let edges = EdgeSet::from_pairs(3, &[(1, 0), (2, 0)]).unwrap();
        let input = mat(&[&[0.0, 0.0], &[1.0, 2.0], &[3.0, 4.0]]);
        let k = registry().get("add").unwrap();
        let out = aggregate(&edges, &edges, k.as_ref(), None, DegreeMode::Augmented, &input).unwrap();
        assert_eq!(out.row(0), &[fx(4.0), fx(6.0)]);
    }

    #[test]
    fn weighted_add_unit_degrees_spec_example() {
        // 2 vertices, edge (0,1), unit features, raw degree mode -> both
        // effective degrees 1, every coefficient exactly 1.
        let edges = EdgeSet::from_pairs(2, &[(0, 1)]).unwrap();
        let input = mat(&[&[1.0], &[1.0]]);
        let k = registry().get("weighted-add").unwrap();
        let out = aggregate(&edges, &edges, k.as_ref(), None, DegreeMode::Raw, &input).unwrap();
        assert_eq!(out.row(1), &[fx(2.0)]);
        // vertex 0 has no in-edges: self term only
        assert_eq!(out.row(0), &[fx(1.0)]);
    }

    #[test]
    fn gin_epsilon_self_term() {
        let edges = EdgeSet::from_pairs(2, &[(0, 1)]).unwrap();
        let input = mat(&[&[2.0], &[4.0]]);
        let k = registry().get("add").unwrap();
        let out = aggregate(&edges, &edges, k.as_ref(), Some(0.5), DegreeMode::Augmented, &input).unwrap();
        // a_1 = h_0 + 1.5 * h_1 = 2 + 6 = 8
        assert_eq!(out.row(1), &[fx(8.0)]);
    }

    #[test]
    fn combine_identity_relu() {
        let input = mat(&[&[-1.0, 2.0]]);
        let stage = WeightStage::identity(2);
        let out = combine(&input, &[stage], Activation::Relu).unwrap();
        assert_eq!(out.row(0), &[fx(0.0), fx(2.0)]);
    }

    #[test]
    fn combine_identity_none_is_identity_map() {
        let input = mat(&[&[-1.5, 2.25], &[0.5, -0.125]]);
        let stage = WeightStage::identity(2);
        let out = combine(&input, &[stage], Activation::None).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn combine_scalar_affine() {
        let input = mat(&[&[3.0]]);
        let stage = WeightStage {
            weights: mat(&[&[2.0]]),
            bias: vec![fx(1.0)],
        };
        let out = combine(&input, &[stage], Activation::Relu).unwrap();
        assert_eq!(out.row(0), &[fx(7.0)]);
    }

    #[test]
    fn combine_shape_mismatch() {
        let input = mat(&[&[1.0, 2.0]]);
        let stage = WeightStage {
            weights: mat(&[&[1.0]]),
            bias: vec![fx(0.0)],
        };
        assert!(combine(&input, &[stage], Activation::None).is_err());
    }

    // plain f64 references, written independently of the fixed-point path
    fn aggregate_mean_f64(edges: &EdgeSet, input: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..edges.num_vertices)
            .map(|v| {
                let ns = edges.in_neighbors(v);
                let cols = input[0].len();
                let mut acc = vec![0.0; cols];
                for &u in ns {
                    for (a, x) in acc.iter_mut().zip(&input[u as usize]) {
                        *a += x;
                    }
                }
                for (a, x) in acc.iter_mut().zip(&input[v]) {
                    *a += x;
                }
                let d = (ns.len() + 1) as f64;
                acc.iter().map(|a| a / d).collect()
            })
            .collect()
    }

    fn combine_f64(input: &[Vec<f64>], w: &Matrix, b: &[Fixed32], relu: bool) -> Vec<Vec<f64>> {
        let wf: Vec<Vec<f64>> = w.to_f64();
        input
            .iter()
            .map(|x| {
                let mut o = vec![0.0; w.cols];
                for (k, xk) in x.iter().enumerate() {
                    for j in 0..w.cols {
                        o[j] += xk * wf[k][j];
                    }
                }
                for (j, oj) in o.iter_mut().enumerate() {
                    *oj += b[j].to_f64();
                    if relu && *oj < 0.0 {
                        *oj = 0.0;
                    }
                }
                o
            })
            .collect()
    }

    fn random_edges(n: usize, p: f64, seed: u64) -> EdgeSet {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        for u in 0..n as u32 {
            for v in 0..n as u32 {
                if u != v && rng.gen::<f64>() < p {
                    pairs.push((u, v));
                }
            }
        }
        EdgeSet::from_pairs(n, &pairs).unwrap()
    }

    fn random_features(n: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn mean_matches_f64_reference() {
        let edges = random_edges(50, 0.1, 11);
        let feats = random_features(50, 8, 12);
        let input = Matrix::from_f64_rows(&feats).unwrap();
        let quantized: Vec<Vec<f64>> = input.to_f64();
        let k = registry().get("mean").unwrap();
        let got = aggregate(&edges, &edges, k.as_ref(), None, DegreeMode::Augmented, &input).unwrap();
        let want = aggregate_mean_f64(&edges, &quantized);
        let bound = 2f64.powi(-10);
        for v in 0..50 {
            for j in 0..8 {
                let err = (got.row(v)[j].to_f64() - want[v][j]).abs();
                assert!(err <= bound, "v={v} j={j} err={err}");
            }
        }
    }

    #[test]
    fn combine_matches_f64_reference() {
        let stage = synth_stage(0, 0, 0, MlpShape { rows: 16, cols: 8 });
        let feats = random_features(20, 16, 3);
        let input = Matrix::from_f64_rows(&feats).unwrap();
        let got = combine(&input, &[stage.clone()], Activation::Relu).unwrap();
        let want = combine_f64(&input.to_f64(), &stage.weights, &stage.bias, true);
        let bound = 2f64.powi(-8);
        for v in 0..20 {
            for j in 0..8 {
                let err = (got.row(v)[j].to_f64() - want[v][j]).abs();
                assert!(err <= bound, "v={v} j={j} err={err}");
            }
        }
    }

    #[test]
    fn readout_examples() {
        let m = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(readout_sum(&m).unwrap(), vec![fx(4.0), fx(6.0)]);
        let l1 = mat(&[&[1.0]]);
        let l2 = mat(&[&[2.0]]);
        assert_eq!(readout_concat(&[l1, l2]).unwrap(), vec![fx(1.0), fx(2.0)]);
        assert!(readout_sum(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn readout_equals_hub_vertex_aggregation() {
        // a synthetic hub (last vertex) with in-edges from every other vertex
        let n = 20;
        let feats = random_features(n, 4, 7);
        let mut rows = feats.clone();
        rows.push(vec![0.0; 4]);
        let input = Matrix::from_f64_rows(&rows).unwrap();
        let pairs: Vec<(u32, u32)> = (0..n as u32).map(|u| (u, n as u32)).collect();
        let edges = EdgeSet::from_pairs(n + 1, &pairs).unwrap();
        let k = registry().get("add").unwrap();
        let agg = aggregate(&edges, &edges, k.as_ref(), None, DegreeMode::Augmented, &input).unwrap();
        let body = Matrix::from_f64_rows(&feats).unwrap();
        assert_eq!(agg.row(n), readout_sum(&body).unwrap().as_slice());
    }

    #[test]
    fn pool_identity_assignment() {
        let edges = random_edges(6, 0.4, 5);
        let z = Matrix::from_f64_rows(&random_features(6, 3, 6)).unwrap();
        let c = WeightStage::identity(6).weights;
        let (xp, ap) = pool_products(&c, &z, &edges).unwrap();
        assert_eq!(xp, z);
        // A' must equal the adjacency as a dense matrix
        for u in 0..6 {
            for v in 0..6 {
                let want = if edges.in_neighbors(v).contains(&(u as u32)) {
                    Fixed32::ONE
                } else {
                    Fixed32::ZERO
                };
                assert_eq!(ap.row(u)[v], want, "u={u} v={v}");
            }
        }
    }

    #[test]
    fn pool_single_cluster_sums() {
        // constant logits over a single column -> softmax gives exactly 1.0
        let logits = Matrix::zeros(5, 1);
        let c = softmax_rows(&logits);
        assert!(c.data.iter().all(|&x| x == Fixed32::ONE));
        let z = Matrix::from_f64_rows(&random_features(5, 3, 8)).unwrap();
        let edges = EdgeSet::empty(5);
        let (xp, _) = pool_products(&c, &z, &edges).unwrap();
        assert_eq!(xp.row(0), readout_sum(&z).unwrap().as_slice());
    }

    #[test]
    fn diffpool_matches_f64_reference() {
        let n = 12;
        let edges = random_edges(n, 0.3, 21);
        let feats = random_features(n, 6, 22);
        let input = Matrix::from_f64_rows(&feats).unwrap();
        let reg = registry();
        let assign = ResolvedSubLayer {
            kernel: reg.get("min").unwrap(),
            stages: vec![synth_stage(0, 1, 0, MlpShape { rows: 6, cols: 3 })],
            activation: Activation::Relu,
        };
        let embed = ResolvedSubLayer {
            kernel: reg.get("min").unwrap(),
            stages: vec![synth_stage(0, 2, 0, MlpShape { rows: 6, cols: 4 })],
            activation: Activation::Relu,
        };
        let (ap, xp) = diffpool(&edges, &edges, &input, &assign, &embed, DegreeMode::Augmented).unwrap();

        // f64 reference of the same pipeline
        let inputs = input.to_f64();
        let min_agg = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
            (0..n)
                .map(|v| {
                    let mut acc = m[v].clone();
                    for &u in edges.in_neighbors(v) {
                        for (a, x) in acc.iter_mut().zip(&m[u as usize]) {
                            *a = a.min(*x);
                        }
                    }
                    acc
                })
                .collect()
        };
        let fwd = |stage: &WeightStage| -> Vec<Vec<f64>> {
            combine_f64(&min_agg(&inputs), &stage.weights, &stage.bias, true)
        };
        let logits = fwd(&assign.stages[0]);
        let zf = fwd(&embed.stages[0]);
        let cf: Vec<Vec<f64>> = logits
            .iter()
            .map(|row| {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
                let s: f64 = exps.iter().sum();
                exps.iter().map(|e| e / s).collect()
            })
            .collect();
        let clusters = 3;
        let mut xw = vec![vec![0.0; 4]; clusters];
        for v in 0..n {
            for j in 0..clusters {
                for d in 0..4 {
                    xw[j][d] += cf[v][j] * zf[v][d];
                }
            }
        }
        let mut tw = vec![vec![0.0; clusters]; n];
        for v in 0..n {
            for &u in edges.in_neighbors(v) {
                for j in 0..clusters {
                    tw[u as usize][j] += cf[v][j];
                }
            }
        }
        let mut aw = vec![vec![0.0; clusters]; clusters];
        for u in 0..n {
            for j in 0..clusters {
                for j2 in 0..clusters {
                    aw[j][j2] += cf[u][j] * tw[u][j2];
                }
            }
        }
        let bound = 2f64.powi(-6);
        for j in 0..clusters {
            for d in 0..4 {
                let err = (xp.row(j)[d].to_f64() - xw[j][d]).abs();
                assert!(err <= bound, "X' j={j} d={d} err={err}");
            }
            for j2 in 0..clusters {
                let err = (ap.row(j)[j2].to_f64() - aw[j][j2]).abs();
                assert!(err <= bound, "A' {j},{j2} err={err}");
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let n = 10;
        let edges = random_edges(n, 0.3, 31);
        let feats = random_features(n, 4, 32);
        let input = Matrix::from_f64_rows(&feats).unwrap();
        // permutation: reverse
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut ppairs = Vec::new();
        for v in 0..n {
            for &u in edges.in_neighbors(v) {
                ppairs.push((perm[u as usize] as u32, perm[v] as u32));
            }
        }
        let pedges = EdgeSet::from_pairs(n, &ppairs).unwrap();
        let pinput =
            Matrix::from_f64_rows(&(0..n).map(|v| feats[perm.iter().position(|&x| x == v).unwrap()].clone()).collect::<Vec<_>>())
                .unwrap();
        for name in ["add", "max", "min"] {
            let k = registry().get(name).unwrap();
            let a = aggregate(&edges, &edges, k.as_ref(), None, DegreeMode::Augmented, &input).unwrap();
            let b = aggregate(&pedges, &pedges, k.as_ref(), None, DegreeMode::Augmented, &pinput).unwrap();
            for v in 0..n {
                assert_eq!(a.row(v), b.row(perm[v]), "kernel {name} vertex {v}");
            }
        }
    }

    #[test]
    fn max_idempotent_under_duplicate_edges() {
        let pairs = [(1u32, 0u32), (2, 0)];
        let dup = [(1u32, 0u32), (1, 0), (2, 0)];
        let e1 = EdgeSet::from_pairs(3, &pairs).unwrap();
        let e2 = EdgeSet::from_pairs(3, &dup).unwrap();
        let input = mat(&[&[0.0], &[5.0], &[-2.0]]);
        for name in ["max", "min"] {
            let k = registry().get(name).unwrap();
            let a = aggregate(&e1, &e1, k.as_ref(), None, DegreeMode::Augmented, &input).unwrap();
            let b = aggregate(&e2, &e2, k.as_ref(), None, DegreeMode::Augmented, &input).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn synth_weights_deterministic() {
        let a = synth_stage(2, 0, 1, MlpShape { rows: 8, cols: 8 });
        let b = synth_stage(2, 0, 1, MlpShape { rows: 8, cols: 8 });
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.bias, b.bias);
        let c = synth_stage(3, 0, 1, MlpShape { rows: 8, cols: 8 });
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn resolve_checks_widths() {
        let reg = registry();
        let cfg: ModelConfig = toml::from_str(
            r#"
            [[layers]]
            aggregate = "add"
            mlp = [{ rows = 8, cols = 4 }]
            "#,
        )
        .unwrap();
        assert!(resolve(&cfg, &reg, 8).is_ok());
        assert!(resolve(&cfg, &reg, 9).is_err());
        let bad: ModelConfig = toml::from_str(
            r#"
            [[layers]]
            aggregate = "median"
            mlp = [{ rows = 8, cols = 4 }]
            "#,
        )
        .unwrap();
        assert!(matches!(
            resolve(&bad, &reg, 8),
            Err(SimError::UnknownKernel { .. })
        ));
    }
}
