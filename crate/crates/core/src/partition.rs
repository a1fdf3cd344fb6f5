//! Interval-shard partitioning and window-based sparsity elimination.
//!
//! Target vertices are tiled into intervals sized by the aggregation buffer;
//! source rows are processed through windows sized by the input buffer. With
//! sparsity elimination enabled, each window first slides downward until its
//! top row carries an edge into the interval, then its bottom row shrinks
//! upward to the last edge — only the surviving row span is fetched. With
//! elimination disabled the plan is the fixed window grid restricted to
//! non-empty windows.
//!
//! The next window restarts below the window's *pre-shrink* bottom row, so
//! rows trimmed by shrinking are revisited by the following window. This is
//! observable in shard counts and is covered by tests.

use std::io::Write;
use std::path::Path;

use crate::config::SystemConfig;
use crate::error::{Result, SimError};
use crate::graph::EdgeSet;

/// Contiguous target-vertex range [start, end).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    #[inline]
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// A surviving window: source rows [row_start, row_end] (inclusive) into a
/// target interval, with at least one edge on each boundary row when
/// elimination produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EffectualShard {
    pub target: Interval,
    pub row_start: usize,
    pub row_end: usize,
    pub edge_count: usize,
}

impl EffectualShard {
    #[inline]
    pub fn rows(&self) -> usize {
        self.row_end - self.row_start + 1
    }
}

/// Partitioning outcome for one layer: the interval grid and, per interval,
/// the ordered shard list.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    pub interval_width: usize,
    pub window_height: usize,
    pub intervals: Vec<Interval>,
    /// Shards of interval i, ordered by ascending row range.
    pub shards: Vec<Vec<EffectualShard>>,
}

impl PartitionPlan {
    pub fn total_edges(&self) -> usize {
        self.shards
            .iter()
            .flat_map(|s| s.iter())
            .map(|s| s.edge_count)
            .sum()
    }

    /// Source rows loaded across all shards (a row is counted once per shard
    /// that spans it).
    pub fn total_rows_loaded(&self) -> usize {
        self.shards
            .iter()
            .flat_map(|s| s.iter())
            .map(|s| s.rows())
            .sum()
    }

    /// Input-buffer fill traffic the plan implies, in bytes.
    pub fn traffic_estimate(&self, feature_len: usize) -> usize {
        self.total_rows_loaded() * feature_len * 4
    }

    /// Fraction of zero entries inside the loaded windows: the sparsity the
    /// plan could not eliminate.
    pub fn residual_sparsity(&self) -> f64 {
        let mut area = 0usize;
        for (iv, shards) in self.intervals.iter().zip(&self.shards) {
            for s in shards {
                area += s.rows() * iv.len();
            }
        }
        if area == 0 {
            0.0
        } else {
            1.0 - self.total_edges() as f64 / area as f64
        }
    }

    /// CSV dump: target interval bounds, row span, edge count per shard.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| SimError::io(path, e))?;
        writeln!(f, "target_start,target_end,row_start,row_end,edge_count")
            .map_err(|e| SimError::io(path, e))?;
        for shards in &self.shards {
            for s in shards {
                writeln!(
                    f,
                    "{},{},{},{},{}",
                    s.target.start, s.target.end, s.row_start, s.row_end, s.edge_count
                )
                .map_err(|e| SimError::io(path, e))?;
            }
        }
        Ok(())
    }
}

/// Derive interval width and window height from buffer halves (both the
/// aggregation buffer's ping-pong chunks and the input buffer's double
/// buffering leave half the capacity per active working set).
pub fn plan_dimensions(
    sys: &SystemConfig,
    feature_len: usize,
    agg_len: usize,
) -> Result<(usize, usize)> {
    if feature_len == 0 || agg_len == 0 {
        return Err(SimError::Config("feature widths must be >= 1".into()));
    }
    let interval_width = (sys.agg_buffer_bytes / 2) / (agg_len * 4);
    if interval_width == 0 {
        return Err(SimError::Config(format!(
            "aggregation buffer half ({} B) cannot hold one {}-element vector",
            sys.agg_buffer_bytes / 2,
            agg_len
        )));
    }
    let window_height = (sys.input_buffer_bytes / 2) / (feature_len * 4);
    if window_height == 0 {
        return Err(SimError::Config(format!(
            "input buffer half ({} B) cannot hold one {}-element feature row",
            sys.input_buffer_bytes / 2,
            feature_len
        )));
    }
    Ok((interval_width, window_height))
}

/// Sorted source rows (with multiplicity) of all edges into `target`.
fn rows_into_interval(edges: &EdgeSet, target: Interval) -> Vec<u32> {
    let mut rows: Vec<u32> = edges.col_ptr[target.start..target.end]
        .iter()
        .zip(&edges.col_ptr[target.start + 1..=target.end])
        .flat_map(|(&a, &b)| edges.row_idx[a..b].iter().copied())
        .collect();
    rows.sort_unstable();
    rows
}

fn count_in_range(sorted: &[u32], lo: usize, hi: usize) -> usize {
    let a = sorted.partition_point(|&r| (r as usize) < lo);
    let b = sorted.partition_point(|&r| (r as usize) <= hi);
    b - a
}

/// One sliding/shrinking step over the interval's sorted edge rows.
/// Returns the shard (or None once rows at/below `row_pos` are exhausted)
/// and the next scan position (pre-shrink bottom + 1).
pub fn get_one_effectual_interval(
    edges: &EdgeSet,
    target: Interval,
    row_pos: usize,
    window_height: usize,
) -> (Option<EffectualShard>, usize) {
    let rows = rows_into_interval(edges, target);
    next_window(&rows, edges.num_vertices, target, row_pos, window_height)
}

fn next_window(
    sorted_rows: &[u32],
    num_vertices: usize,
    target: Interval,
    row_pos: usize,
    window_height: usize,
) -> (Option<EffectualShard>, usize) {
    // window sliding: first edge row at or below the scan position
    let idx = sorted_rows.partition_point(|&r| (r as usize) < row_pos);
    if idx == sorted_rows.len() {
        return (None, num_vertices);
    }
    let win_start = sorted_rows[idx] as usize;
    let tentative_end = (win_start + window_height - 1).min(num_vertices - 1);
    let next_pos = tentative_end + 1;
    // window shrinking: last edge row within the tentative span
    let last_idx = sorted_rows.partition_point(|&r| (r as usize) <= tentative_end);
    debug_assert!(last_idx > idx);
    let win_end = sorted_rows[last_idx - 1] as usize;
    let edge_count = last_idx - idx;
    (
        Some(EffectualShard {
            target,
            row_start: win_start,
            row_end: win_end,
            edge_count,
        }),
        next_pos,
    )
}

fn grid_shards(
    sorted_rows: &[u32],
    num_vertices: usize,
    target: Interval,
    window_height: usize,
) -> Vec<EffectualShard> {
    let mut shards = Vec::new();
    let mut row = 0usize;
    while row < num_vertices {
        let end = (row + window_height - 1).min(num_vertices - 1);
        let edge_count = count_in_range(sorted_rows, row, end);
        if edge_count > 0 {
            shards.push(EffectualShard {
                target,
                row_start: row,
                row_end: end,
                edge_count,
            });
        }
        row = end + 1;
    }
    shards
}

/// Split shards whose edge count exceeds the edge-buffer half capacity into
/// row-range sub-shards, trimming each piece to its boundary edge rows. A
/// single row's edges are never split.
fn split_oversized(
    sorted_rows: &[u32],
    shard: EffectualShard,
    max_edges: usize,
    out: &mut Vec<EffectualShard>,
) {
    if shard.edge_count <= max_edges {
        out.push(shard);
        return;
    }
    let lo = sorted_rows.partition_point(|&r| (r as usize) < shard.row_start);
    let hi = sorted_rows.partition_point(|&r| (r as usize) <= shard.row_end);
    let mut i = lo;
    while i < hi {
        let start_row = sorted_rows[i] as usize;
        let mut j = i;
        let mut end_row = start_row;
        while j < hi {
            let r = sorted_rows[j] as usize;
            // all edges of one row stay together
            let row_end_idx = sorted_rows[..hi].partition_point(|&x| (x as usize) <= r);
            if row_end_idx - i > max_edges && r != start_row {
                break;
            }
            end_row = r;
            j = row_end_idx;
            if j - i >= max_edges {
                break;
            }
        }
        out.push(EffectualShard {
            target: shard.target,
            row_start: start_row,
            row_end: end_row,
            edge_count: j - i,
        });
        i = j;
    }
}

/// Build the full plan for one layer over the (sampled) edge set.
pub fn build_plan(
    edges: &EdgeSet,
    sys: &SystemConfig,
    feature_len: usize,
    agg_len: usize,
    sparsity_elimination: bool,
) -> Result<PartitionPlan> {
    let (interval_width, window_height) = plan_dimensions(sys, feature_len, agg_len)?;
    let n = edges.num_vertices;
    let mut intervals = Vec::new();
    let mut start = 0usize;
    while start < n {
        let end = (start + interval_width).min(n);
        intervals.push(Interval { start, end });
        start = end;
    }
    // one edge record per edge must fit the edge-buffer half
    let record = sys.edge_record_bytes.max(1);
    let max_edges = ((sys.edge_buffer_bytes / 2) / record).max(1);

    let mut all_shards = Vec::with_capacity(intervals.len());
    for &target in &intervals {
        let rows = rows_into_interval(edges, target);
        let raw = if sparsity_elimination {
            let mut shards = Vec::new();
            let mut pos = 0usize;
            loop {
                let (shard, next) = next_window(&rows, n, target, pos, window_height);
                match shard {
                    Some(s) => shards.push(s),
                    None => break,
                }
                pos = next;
            }
            shards
        } else {
            grid_shards(&rows, n, target, window_height)
        };
        let mut shards = Vec::with_capacity(raw.len());
        for s in raw {
            split_oversized(&rows, s, max_edges, &mut shards);
        }
        all_shards.push(shards);
    }
    Ok(PartitionPlan {
        interval_width,
        window_height,
        intervals,
        shards: all_shards,
    })
}

/// Rows skipped relative to the naive window grid, as a fraction of the
/// grid's rows. Zero when nothing was eliminated (or the graph is empty).
pub fn eliminated_sparsity_ratio(plan: &PartitionPlan, grid: &PartitionPlan) -> f64 {
    let naive = grid.total_rows_loaded();
    if naive == 0 {
        return 0.0;
    }
    1.0 - plan.total_rows_loaded() as f64 / naive as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn sys_with(agg: usize, input: usize) -> SystemConfig {
        SystemConfig {
            agg_buffer_bytes: agg,
            input_buffer_bytes: input,
            ..SystemConfig::default()
        }
    }

    #[test]
    fn dimensions_from_buffer_halves() {
        let sys = SystemConfig::default();
        let (w, _) = plan_dimensions(&sys, 1024, 1024).unwrap();
        assert_eq!(w, 2048);
        let (_, h) = plan_dimensions(&sys, 1433, 1433).unwrap();
        assert_eq!(h, 11);
    }

    #[test]
    fn oversized_vector_is_an_error() {
        let sys = sys_with(1 << 10, 1 << 10);
        // one vector of 1024 elements needs 4096 B, half buffer is 512 B
        assert!(plan_dimensions(&sys, 1024, 16).is_err());
        assert!(plan_dimensions(&sys, 16, 1024).is_err());
    }

    fn edges_at_rows(n: usize, targets: &[u32], rows: &[u32]) -> EdgeSet {
        let mut pairs = Vec::new();
        for &r in rows {
            for &t in targets {
                pairs.push((r, t));
            }
        }
        EdgeSet::from_pairs(n, &pairs).unwrap()
    }

    #[test]
    fn slide_then_shrink() {
        // targets 0..4, edges only from source rows 2 and 5, window height 2
        let edges = edges_at_rows(8, &[0, 1, 2, 3], &[2, 5]);
        let target = Interval { start: 0, end: 4 };
        let (s, next) = get_one_effectual_interval(&edges, target, 0, 2);
        let s = s.unwrap();
        assert_eq!((s.row_start, s.row_end), (2, 2));
        assert_eq!(next, 4);
        let (s2, next2) = get_one_effectual_interval(&edges, target, next, 2);
        let s2 = s2.unwrap();
        assert_eq!((s2.row_start, s2.row_end), (5, 5));
        assert_eq!(next2, 7);
        let (s3, _) = get_one_effectual_interval(&edges, target, next2, 2);
        assert!(s3.is_none());
    }

    #[test]
    fn dense_column_no_sliding() {
        let edges = edges_at_rows(8, &[0], &[0, 1, 2, 3, 4, 5, 6, 7]);
        let target = Interval { start: 0, end: 1 };
        let (s, next) = get_one_effectual_interval(&edges, target, 0, 3);
        let s = s.unwrap();
        assert_eq!((s.row_start, s.row_end), (0, 2));
        assert_eq!(next, 3);
    }

    #[test]
    fn no_edges_returns_none() {
        let edges = EdgeSet::empty(4);
        let target = Interval { start: 0, end: 4 };
        let (s, _) = get_one_effectual_interval(&edges, target, 0, 2);
        assert!(s.is_none());
    }

    /// Brute-force plan: literally simulate the sliding/shrinking scan on a
    /// dense adjacency bitmap, independent of the CSC machinery.
    fn brute_force_plan(
        edges: &EdgeSet,
        interval_width: usize,
        window_height: usize,
        eliminate: bool,
    ) -> Vec<Vec<(usize, usize, usize)>> {
        let n = edges.num_vertices;
        let mut adj = vec![vec![false; n]; n]; // adj[src][dst]
        for v in 0..n {
            for &u in edges.in_neighbors(v) {
                adj[u as usize][v] = true;
            }
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + interval_width).min(n);
            let has_edge = |row: usize| (start..end).any(|t| adj[row][t]);
            let count_edges =
                |a: usize, b: usize| (a..=b).map(|r| (start..end).filter(|&t| adj[r][t]).count()).sum::<usize>();
            let mut shards = Vec::new();
            if eliminate {
                let mut pos = 0usize;
                loop {
                    while pos < n && !has_edge(pos) {
                        pos += 1;
                    }
                    if pos >= n {
                        break;
                    }
                    let ws = pos;
                    let tentative = (ws + window_height - 1).min(n - 1);
                    pos = tentative + 1;
                    let mut we = tentative;
                    while !has_edge(we) {
                        we -= 1;
                    }
                    shards.push((ws, we, count_edges(ws, we)));
                }
            } else {
                let mut row = 0;
                while row < n {
                    let e = (row + window_height - 1).min(n - 1);
                    let c = count_edges(row, e);
                    if c > 0 {
                        shards.push((row, e, c));
                    }
                    row = e + 1;
                }
            }
            out.push(shards);
            start = end;
        }
        out
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

    fn plan_tuples(plan: &PartitionPlan) -> Vec<Vec<(usize, usize, usize)>> {
        plan.shards
            .iter()
            .map(|s| s.iter().map(|x| (x.row_start, x.row_end, x.edge_count)).collect())
            .collect()
    }

    #[test]
    fn matches_brute_force_on_random_graphs() {
        // interval 4 / window 4 over 16 vertices: agg half 64 B at 4-elem
        // agg_len, input half 64 B at 4-elem feature rows
        let sys = sys_with(128, 128);
        for seed in 0..30 {
            let edges = random_edges(16, 0.1, seed);
            for elim in [true, false] {
                let plan = build_plan(&edges, &sys, 4, 4, elim).unwrap();
                assert_eq!(plan.interval_width, 4);
                assert_eq!(plan.window_height, 4);
                let want = brute_force_plan(&edges, 4, 4, elim);
                assert_eq!(plan_tuples(&plan), want, "seed={seed} elim={elim}");
            }
        }
    }

    #[test]
    fn elimination_loads_fewer_rows() {
        let sys = sys_with(128, 128);
        let edges = random_edges(16, 0.1, 99);
        let on = build_plan(&edges, &sys, 4, 4, true).unwrap();
        let off = build_plan(&edges, &sys, 4, 4, false).unwrap();
        assert!(on.total_rows_loaded() < off.total_rows_loaded());
        assert_eq!(on.total_edges(), off.total_edges());
    }

    #[test]
    fn dense_block_identical_plans() {
        // complete bipartite rows 0..4 -> targets 0..4 fills whole windows
        let mut pairs = Vec::new();
        for u in 0..4u32 {
            for v in 0..4u32 {
                pairs.push((u, v));
            }
        }
        let edges = EdgeSet::from_pairs(4, &pairs).unwrap();
        let sys = sys_with(128, 128);
        let on = build_plan(&edges, &sys, 4, 4, true).unwrap();
        let off = build_plan(&edges, &sys, 4, 4, false).unwrap();
        assert_eq!(plan_tuples(&on), plan_tuples(&off));
    }

    #[test]
    fn empty_graph_empty_plan() {
        let edges = EdgeSet::empty(16);
        let sys = sys_with(128, 128);
        let plan = build_plan(&edges, &sys, 4, 4, true).unwrap();
        assert!(plan.shards.iter().all(|s| s.is_empty()));
        assert_eq!(plan.traffic_estimate(4), 0);
    }

    #[test]
    fn traffic_estimate_single_shard() {
        let edges = edges_at_rows(8, &[0], &[2]);
        let sys = sys_with(4096, 4096);
        let plan = build_plan(&edges, &sys, 8, 8, true).unwrap();
        let shards: Vec<_> = plan.shards.iter().flatten().collect();
        assert_eq!(shards.len(), 1);
        assert_eq!((shards[0].row_start, shards[0].row_end), (2, 2));
        assert_eq!(plan.traffic_estimate(8), 32);
    }

    #[test]
    fn edge_conservation_property() {
        let sys = sys_with(256, 192);
        for seed in 0..200 {
            let n = 12 + (seed as usize % 21);
            let edges = random_edges(n, 0.08 + (seed as f64 % 7.0) / 50.0, seed);
            for elim in [true, false] {
                let plan = build_plan(&edges, &sys, 6, 6, elim).unwrap();
                assert_eq!(plan.total_edges(), edges.num_edges(), "seed={seed}");
                // boundary tightness with elimination on
                if elim {
                    for shards in &plan.shards {
                        for s in shards {
                            let rows = rows_into_interval(&edges, s.target);
                            assert!(count_in_range(&rows, s.row_start, s.row_start) > 0);
                            assert!(count_in_range(&rows, s.row_end, s.row_end) > 0);
                            assert!(s.rows() <= plan.window_height);
                            assert!(s.edge_count >= 1);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn elimination_dominance_property() {
        let sys = sys_with(256, 192);
        for seed in 100..200 {
            let edges = random_edges(24, 0.05, seed);
            let on = build_plan(&edges, &sys, 6, 6, true).unwrap();
            let off = build_plan(&edges, &sys, 6, 6, false).unwrap();
            assert!(
                on.total_rows_loaded() <= off.total_rows_loaded(),
                "seed={seed}"
            );
            assert!(on.traffic_estimate(6) <= off.traffic_estimate(6));
        }
    }

    #[test]
    fn oversized_shards_split_on_row_boundaries() {
        // 64 edges into one interval from 8 rows; cap edges per shard at 24
        let mut pairs = Vec::new();
        for u in 0..8u32 {
            for v in 0..8u32 {
                pairs.push((u, v));
            }
        }
        let edges = EdgeSet::from_pairs(8, &pairs).unwrap();
        let mut sys = sys_with(1 << 20, 1 << 20);
        sys.edge_record_bytes = 8;
        sys.edge_buffer_bytes = 24 * 8 * 2; // half holds 24 records
        let plan = build_plan(&edges, &sys, 8, 8, true).unwrap();
        let shards: Vec<_> = plan.shards.iter().flatten().collect();
        assert!(shards.len() > 1);
        assert_eq!(shards.iter().map(|s| s.edge_count).sum::<usize>(), 64);
        assert!(shards.iter().all(|s| s.edge_count <= 24));
        // row ranges stay disjoint and ordered
        for w in shards.windows(2) {
            assert!(w[0].row_end < w[1].row_start);
        }
    }

    #[test]
    fn sampling_monotonicity_trend() {
        use crate::config::SamplePolicy;
        use crate::sample::sample;
        let sys = sys_with(256, 192);
        for seed in [1u64, 2, 3, 4, 5] {
            let edges = random_edges(48, 0.15, seed);
            let mut prev_ratio = -1.0f64;
            for factor in [1.0f64, 2.0, 4.0] {
                let s = sample(&edges, &SamplePolicy::Factor(factor), seed, 0).unwrap();
                let fe = s.filtered_edges(&edges);
                let on = build_plan(&fe, &sys, 6, 6, true).unwrap();
                let off = build_plan(&fe, &sys, 6, 6, false).unwrap();
                let ratio = eliminated_sparsity_ratio(&on, &off);
                assert!(
                    ratio + 1e-12 >= prev_ratio,
                    "seed={seed} factor={factor}: {ratio} < {prev_ratio}"
                );
                prev_ratio = ratio;
            }
        }
    }

    #[test]
    fn csv_dump_round_trips_textually() {
        let edges = random_edges(16, 0.2, 5);
        let sys = sys_with(128, 128);
        let plan = build_plan(&edges, &sys, 4, 4, true).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        plan.write_csv(f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "target_start,target_end,row_start,row_end,edge_count");
        assert_eq!(lines.len() - 1, plan.shards.iter().map(|s| s.len()).sum::<usize>());
    }
}
