//! Neighbor sampling.
//!
//! The sampler is the single source of truth for edge selection: the
//! functional reference and the aggregation engine both consume the
//! `SampleSet` produced here, so a given (seed, layer, vertex) always selects
//! the same neighbors no matter which path runs.
//!
//! Selection is a per-vertex seeded shuffle of the in-edge positions followed
//! by taking the first k (sorted back to ascending order). The shuffle depends
//! only on (seed, layer, vertex), which makes uniform(k) draws uniform without
//! replacement and makes factor-based subsets nested across factors.

use std::borrow::Cow;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::SamplePolicy;
use crate::error::{Result, SimError};
use crate::graph::EdgeSet;

/// Per-vertex kept edge positions (indices into the vertex's in-neighbor
/// list), ascending. `None` keeps every edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSet {
    kept: Option<Vec<Vec<u32>>>,
}

impl SampleSet {
    pub fn all() -> Self {
        SampleSet { kept: None }
    }

    pub fn is_all(&self) -> bool {
        self.kept.is_none()
    }

    pub fn kept_count(&self, edges: &EdgeSet, v: usize) -> usize {
        match &self.kept {
            None => edges.in_neighbors(v).len(),
            Some(kept) => kept[v].len(),
        }
    }

    /// Kept in-neighbor source ids of `v`, ascending.
    pub fn neighbors<'a>(&'a self, edges: &'a EdgeSet, v: usize) -> Cow<'a, [u32]> {
        let all = edges.in_neighbors(v);
        match &self.kept {
            None => Cow::Borrowed(all),
            Some(kept) => Cow::Owned(kept[v].iter().map(|&p| all[p as usize]).collect()),
        }
    }

    /// Materialize the sampled edge structure (identity borrow when nothing
    /// was sampled). The planner slides windows over this.
    pub fn filtered_edges<'a>(&self, edges: &'a EdgeSet) -> Cow<'a, EdgeSet> {
        match &self.kept {
            None => Cow::Borrowed(edges),
            Some(kept) => {
                let mut col_ptr = Vec::with_capacity(edges.num_vertices + 1);
                let mut row_idx = Vec::new();
                col_ptr.push(0);
                for v in 0..edges.num_vertices {
                    let all = edges.in_neighbors(v);
                    row_idx.extend(kept[v].iter().map(|&p| all[p as usize]));
                    col_ptr.push(row_idx.len());
                }
                Cow::Owned(EdgeSet {
                    num_vertices: edges.num_vertices,
                    col_ptr,
                    row_idx,
                })
            }
        }
    }
}

fn vertex_rng(seed: u64, layer: usize, v: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(((layer as u64) << 40) ^ (v as u64));
    rng
}

fn keep_k(edges: &EdgeSet, seed: u64, layer: usize, k_of: impl Fn(usize) -> usize) -> Vec<Vec<u32>> {
    (0..edges.num_vertices)
        .map(|v| {
            let d = edges.in_neighbors(v).len();
            let k = k_of(d).min(d);
            if k == d {
                return (0..d as u32).collect();
            }
            let mut perm: Vec<u32> = (0..d as u32).collect();
            perm.shuffle(&mut vertex_rng(seed, layer, v));
            let mut kept: Vec<u32> = perm[..k].to_vec();
            kept.sort_unstable();
            kept
        })
        .collect()
}

/// Select neighbors per the policy, deterministic in (seed, layer, vertex).
pub fn sample(edges: &EdgeSet, policy: &SamplePolicy, seed: u64, layer: usize) -> Result<SampleSet> {
    match policy {
        SamplePolicy::None => Ok(SampleSet::all()),
        SamplePolicy::Uniform(k) => {
            let k = *k as usize;
            Ok(SampleSet {
                kept: Some(keep_k(edges, seed, layer, |_| k)),
            })
        }
        SamplePolicy::Factor(f) => {
            let f = *f;
            Ok(SampleSet {
                kept: Some(keep_k(edges, seed, layer, move |d| {
                    if d == 0 {
                        0
                    } else {
                        ((d as f64 / f).ceil() as usize).max(1)
                    }
                })),
            })
        }
        SamplePolicy::Predefined(path) => load_predefined(path, edges),
    }
}

/// Predefined index file: one line per vertex, whitespace-separated 0-based
/// positions into the vertex's in-neighbor list.
fn load_predefined(path: &Path, edges: &EdgeSet) -> Result<SampleSet> {
    let file = File::open(path).map_err(|e| SimError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut kept: Vec<Vec<u32>> = Vec::with_capacity(edges.num_vertices);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SimError::io(path, e))?;
        if kept.len() == edges.num_vertices {
            if line.trim().is_empty() {
                continue;
            }
            return Err(SimError::parse(path, lineno + 1, "more lines than vertices"));
        }
        let v = kept.len();
        let d = edges.in_neighbors(v).len();
        let mut positions = Vec::new();
        for tok in line.split_whitespace() {
            let p: u32 = tok
                .parse()
                .map_err(|_| SimError::parse(path, lineno + 1, format!("bad index '{tok}'")))?;
            if p as usize >= d {
                return Err(SimError::parse(
                    path,
                    lineno + 1,
                    format!("index {p} >= degree {d} of vertex {v}"),
                ));
            }
            positions.push(p);
        }
        positions.sort_unstable();
        positions.dedup();
        kept.push(positions);
    }
    if kept.len() != edges.num_vertices {
        return Err(SimError::Dimension(format!(
            "predefined sample file has {} lines, expected {}",
            kept.len(),
            edges.num_vertices
        )));
    }
    Ok(SampleSet { kept: Some(kept) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn chain_edges(n: usize, deg: usize) -> EdgeSet {
        // vertex v has in-edges from the `deg` vertices before it (mod n)
        let mut pairs = Vec::new();
        for v in 0..n as u32 {
            for d in 1..=deg as u32 {
                let u = (v + n as u32 - d) % n as u32;
                pairs.push((u, v));
            }
        }
        EdgeSet::from_pairs(n, &pairs).unwrap()
    }

    #[test]
    fn none_keeps_all() {
        let e = chain_edges(6, 3);
        let s = sample(&e, &SamplePolicy::None, 1, 0).unwrap();
        assert!(s.is_all());
        assert_eq!(s.neighbors(&e, 3).as_ref(), e.in_neighbors(3));
    }

    #[test]
    fn uniform_caps_at_degree() {
        let e = chain_edges(12, 10);
        let s = sample(&e, &SamplePolicy::Uniform(25), 7, 0).unwrap();
        for v in 0..12 {
            assert_eq!(s.kept_count(&e, v), 10);
        }
    }

    #[test]
    fn uniform_is_deterministic_per_seed() {
        let e = chain_edges(10, 5);
        let a = sample(&e, &SamplePolicy::Uniform(2), 42, 1).unwrap();
        let b = sample(&e, &SamplePolicy::Uniform(2), 42, 1).unwrap();
        assert_eq!(a, b);
        let c = sample(&e, &SamplePolicy::Uniform(2), 43, 1).unwrap();
        assert_ne!(a, c);
        for v in 0..10 {
            assert_eq!(a.kept_count(&e, v), 2);
            let kept = a.neighbors(&e, v);
            assert!(kept.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn factor_subsets_are_nested() {
        let e = chain_edges(20, 8);
        let f2 = sample(&e, &SamplePolicy::Factor(2.0), 9, 0).unwrap();
        let f4 = sample(&e, &SamplePolicy::Factor(4.0), 9, 0).unwrap();
        for v in 0..20 {
            let big: Vec<u32> = f2.neighbors(&e, v).to_vec();
            let small: Vec<u32> = f4.neighbors(&e, v).to_vec();
            assert_eq!(big.len(), 4);
            assert_eq!(small.len(), 2);
            assert!(small.iter().all(|x| big.contains(x)));
        }
    }

    #[test]
    fn predefined_round_trip_and_bounds() {
        let e = chain_edges(3, 2);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "0").unwrap();
        writeln!(f, "0 1").unwrap();
        writeln!(f).unwrap();
        let s = sample(&e, &SamplePolicy::Predefined(f.path().into()), 0, 0).unwrap();
        assert_eq!(s.kept_count(&e, 0), 1);
        assert_eq!(s.kept_count(&e, 1), 2);
        assert_eq!(s.kept_count(&e, 2), 0);

        let mut bad = tempfile::NamedTempFile::new().unwrap();
        writeln!(bad, "5").unwrap();
        writeln!(bad).unwrap();
        writeln!(bad).unwrap();
        let err = sample(&e, &SamplePolicy::Predefined(bad.path().into()), 0, 0).unwrap_err();
        assert!(err.to_string().contains(">= degree"));
    }

    #[test]
    fn filtered_edges_stay_sorted_and_valid() {
        let e = chain_edges(16, 6);
        let s = sample(&e, &SamplePolicy::Uniform(3), 5, 2).unwrap();
        let fe = s.filtered_edges(&e);
        fe.validate().unwrap();
        assert_eq!(fe.num_edges(), 16 * 3);
    }
}
