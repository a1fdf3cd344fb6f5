//! Graph and feature-matrix representation.
//!
//! Graphs are stored as compressed sparse columns over incoming edges:
//! column v holds the source ids of v's in-neighbors, sorted ascending.
//! The sorted order is load-bearing — window sliding walks source rows in
//! order, and the fixed neighbor enumeration order is what makes aggregation
//! results reproducible bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SimError};
use crate::fixed::Fixed32;

/// Edge structure alone (no features): column pointers plus sorted row ids.
/// Sampling produces filtered `EdgeSet`s that the planner and the engines
/// consume in place of the full one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSet {
    pub num_vertices: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<u32>,
}

impl EdgeSet {
    pub fn empty(num_vertices: usize) -> Self {
        EdgeSet {
            num_vertices,
            col_ptr: vec![0; num_vertices + 1],
            row_idx: Vec::new(),
        }
    }

    /// Build from (src, dst) pairs: dedup, sort rows per column.
    pub fn from_pairs(num_vertices: usize, pairs: &[(u32, u32)]) -> Result<Self> {
        let mut per_col: Vec<Vec<u32>> = vec![Vec::new(); num_vertices];
        for &(src, dst) in pairs {
            if src as usize >= num_vertices || dst as usize >= num_vertices {
                return Err(SimError::Dimension(format!(
                    "edge ({src},{dst}) out of range for {num_vertices} vertices"
                )));
            }
            per_col[dst as usize].push(src);
        }
        let mut col_ptr = Vec::with_capacity(num_vertices + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for col in per_col.iter_mut() {
            col.sort_unstable();
            col.dedup();
            row_idx.extend_from_slice(col);
            col_ptr.push(row_idx.len());
        }
        Ok(EdgeSet {
            num_vertices,
            col_ptr,
            row_idx,
        })
    }

    #[inline]
    pub fn num_edges(&self) -> usize {
        self.row_idx.len()
    }

    /// Incoming degree of `v`.
    pub fn degree(&self, v: usize) -> Result<usize> {
        if v >= self.num_vertices {
            return Err(SimError::Dimension(format!(
                "vertex {v} out of range (num_vertices={})",
                self.num_vertices
            )));
        }
        Ok(self.col_ptr[v + 1] - self.col_ptr[v])
    }

    /// Sorted in-neighbor ids of `v`.
    #[inline]
    pub fn in_neighbors(&self, v: usize) -> &[u32] {
        &self.row_idx[self.col_ptr[v]..self.col_ptr[v + 1]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.col_ptr.len() != self.num_vertices + 1 {
            return Err(SimError::Dimension("col_ptr length mismatch".into()));
        }
        if self.col_ptr[0] != 0 || *self.col_ptr.last().unwrap() != self.row_idx.len() {
            return Err(SimError::Dimension("col_ptr endpoints invalid".into()));
        }
        for w in self.col_ptr.windows(2) {
            if w[1] < w[0] {
                return Err(SimError::Dimension("col_ptr not non-decreasing".into()));
            }
        }
        for v in 0..self.num_vertices {
            let rows = self.in_neighbors(v);
            for (i, &r) in rows.iter().enumerate() {
                if r as usize >= self.num_vertices {
                    return Err(SimError::Dimension(format!("row id {r} out of range")));
                }
                if i > 0 && rows[i - 1] >= r {
                    return Err(SimError::Dimension(format!(
                        "rows of column {v} not strictly increasing"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Dense matrix of fixed-point values, row-major (one row per vertex).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Fixed32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![Fixed32::ZERO; rows * cols],
        }
    }

    pub fn from_f64_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(SimError::Dimension("ragged feature rows".into()));
            }
            data.extend(row.iter().map(|&x| Fixed32::from_f64(x)));
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[Fixed32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [Fixed32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_f64(&self) -> Vec<Vec<f64>> {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|x| x.to_f64()).collect())
            .collect()
    }
}

/// CSC graph plus the per-vertex feature matrix.
#[derive(Debug, Clone)]
pub struct CscGraph {
    pub edges: EdgeSet,
    pub features: Matrix,
}

impl CscGraph {
    pub fn new(edges: EdgeSet, features: Matrix) -> Result<Self> {
        if features.rows != edges.num_vertices {
            return Err(SimError::Dimension(format!(
                "feature matrix has {} rows for {} vertices",
                features.rows, edges.num_vertices
            )));
        }
        if features.cols == 0 {
            return Err(SimError::Dimension("feature_len must be >= 1".into()));
        }
        edges.validate()?;
        Ok(CscGraph { edges, features })
    }

    #[inline]
    pub fn num_vertices(&self) -> usize {
        self.edges.num_vertices
    }

    #[inline]
    pub fn feature_len(&self) -> usize {
        self.features.cols
    }

    pub fn degree(&self, v: usize) -> Result<usize> {
        self.edges.degree(v)
    }
}

/// Parse a whitespace-separated "src dst" edge list. Lines starting with '#'
/// are comments. Duplicate edges are removed; `undirected` mirrors each edge.
pub fn load_edge_list(path: &Path, num_vertices: usize, undirected: bool) -> Result<EdgeSet> {
    let file = File::open(path).map_err(|e| SimError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SimError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let src: u32 = it
            .next()
            .unwrap()
            .parse()
            .map_err(|_| SimError::parse(path, lineno + 1, "bad source id"))?;
        let dst: u32 = match it.next() {
            Some(tok) => tok
                .parse()
                .map_err(|_| SimError::parse(path, lineno + 1, "bad destination id"))?,
            None => return Err(SimError::parse(path, lineno + 1, "missing destination id")),
        };
        if src as usize >= num_vertices || dst as usize >= num_vertices {
            return Err(SimError::parse(
                path,
                lineno + 1,
                format!("vertex id out of range (num_vertices={num_vertices})"),
            ));
        }
        pairs.push((src, dst));
        if undirected && src != dst {
            pairs.push((dst, src));
        }
    }
    EdgeSet::from_pairs(num_vertices, &pairs)
}

/// Load a CSV feature matrix and quantize to Q16.16.
pub fn load_features_csv(path: &Path, num_vertices: usize, feature_len: usize) -> Result<Matrix> {
    let file = File::open(path).map_err(|e| SimError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut data: Vec<Fixed32> = Vec::with_capacity(num_vertices * feature_len);
    let mut rows = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SimError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut count = 0usize;
        for tok in line.split(',') {
            let x: f64 = tok
                .trim()
                .parse()
                .map_err(|_| SimError::parse(path, lineno + 1, format!("bad value '{tok}'")))?;
            data.push(Fixed32::from_f64(x));
            count += 1;
        }
        if count != feature_len {
            return Err(SimError::Dimension(format!(
                "feature row {rows} has {count} values, expected {feature_len}"
            )));
        }
        rows += 1;
    }
    if rows != num_vertices {
        return Err(SimError::Dimension(format!(
            "feature file has {rows} rows, expected {num_vertices}"
        )));
    }
    Ok(Matrix {
        rows,
        cols: feature_len,
        data,
    })
}

const MAGIC: &[u8; 4] = b"HYG1";

/// Write the binary container: magic "HYG1", little-endian u64 header
/// {num_vertices, num_edges, feature_len}, then col_ptr (u64 each),
/// row_idx (u32 each), raw feature values (i32 each).
pub fn write_container(path: &Path, graph: &CscGraph) -> Result<()> {
    let file = File::create(path).map_err(|e| SimError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| SimError::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(graph.num_vertices() as u64).to_le_bytes())
        .map_err(io)?;
    w.write_all(&(graph.edges.num_edges() as u64).to_le_bytes())
        .map_err(io)?;
    w.write_all(&(graph.feature_len() as u64).to_le_bytes())
        .map_err(io)?;
    for &p in &graph.edges.col_ptr {
        w.write_all(&(p as u64).to_le_bytes()).map_err(io)?;
    }
    for &r in &graph.edges.row_idx {
        w.write_all(&r.to_le_bytes()).map_err(io)?;
    }
    for &x in &graph.features.data {
        w.write_all(&x.raw().to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_container(path: &Path) -> Result<CscGraph> {
    let file = File::open(path).map_err(|e| SimError::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| SimError::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(SimError::parse(path, 0, "bad magic, not a HYG1 container"));
    }
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
        r.read_exact(&mut u64buf)
            .map_err(|e| SimError::io(path, e))?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let num_vertices = read_u64(&mut r)? as usize;
    let num_edges = read_u64(&mut r)? as usize;
    let feature_len = read_u64(&mut r)? as usize;
    let mut col_ptr = Vec::with_capacity(num_vertices + 1);
    for _ in 0..=num_vertices {
        col_ptr.push(read_u64(&mut r)? as usize);
    }
    let mut row_idx = Vec::with_capacity(num_edges);
    let mut u32buf = [0u8; 4];
    for _ in 0..num_edges {
        r.read_exact(&mut u32buf).map_err(io)?;
        row_idx.push(u32::from_le_bytes(u32buf));
    }
    let mut data = Vec::with_capacity(num_vertices * feature_len);
    let mut i32buf = [0u8; 4];
    for _ in 0..num_vertices * feature_len {
        r.read_exact(&mut i32buf).map_err(io)?;
        data.push(Fixed32::from_raw(i32::from_le_bytes(i32buf)));
    }
    CscGraph::new(
        EdgeSet {
            num_vertices,
            col_ptr,
            row_idx,
        },
        Matrix {
            rows: num_vertices,
            cols: feature_len,
            data,
        },
    )
}

/// Dump a feature matrix alone as a degenerate container (zero edges); used
/// for per-layer golden outputs.
pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let graph = CscGraph {
        edges: EdgeSet::empty(m.rows),
        features: m.clone(),
    };
    write_container(path, &graph)
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    Ok(read_container(path)?.features)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        std::io::Write::write_all(&mut f, contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn edge_list_to_csc() {
        let f = tmpfile("# comment\n0 1\n2 1\n");
        let e = load_edge_list(f.path(), 3, false).unwrap();
        assert_eq!(e.col_ptr, vec![0, 0, 2, 2]);
        assert_eq!(e.row_idx, vec![0, 2]);
    }

    #[test]
    fn empty_file() {
        let f = tmpfile("");
        let e = load_edge_list(f.path(), 4, false).unwrap();
        assert_eq!(e.col_ptr, vec![0, 0, 0, 0, 0]);
        assert!(e.row_idx.is_empty());
    }

    #[test]
    fn duplicates_removed() {
        let f = tmpfile("0 1\n0 1\n2 1\n");
        let e = load_edge_list(f.path(), 3, false).unwrap();
        assert_eq!(e.num_edges(), 2);
    }

    #[test]
    fn out_of_range_reports_line() {
        let f = tmpfile("0 1\n9 1\n");
        let err = load_edge_list(f.path(), 3, false).unwrap_err();
        match err {
            SimError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn degrees() {
        let f = tmpfile("0 1\n2 1\n");
        let e = load_edge_list(f.path(), 3, false).unwrap();
        assert_eq!(e.degree(1).unwrap(), 2);
        assert_eq!(e.degree(0).unwrap(), 0);
        assert!(e.degree(3).is_err());
        // sum of degrees equals total edge count
        let total: usize = (0..3).map(|v| e.degree(v).unwrap()).sum();
        assert_eq!(total, e.num_edges());
    }

    #[test]
    fn complete_clique_degree() {
        // complete directed 4-clique without self loops
        let mut pairs = Vec::new();
        for s in 0..4u32 {
            for d in 0..4u32 {
                if s != d {
                    pairs.push((s, d));
                }
            }
        }
        let e = EdgeSet::from_pairs(4, &pairs).unwrap();
        for v in 0..4 {
            assert_eq!(e.degree(v).unwrap(), 3);
        }
    }

    #[test]
    fn cora_scale_load() {
        // 2708 vertices, 10556 distinct directed edges
        let n = 2708u32;
        let mut s = String::new();
        let mut count = 0u32;
        'outer: for stride in 1..n {
            for v in 0..n {
                s.push_str(&format!("{} {}\n", v, (v + stride) % n));
                count += 1;
                if count == 10556 {
                    break 'outer;
                }
            }
        }
        let f = tmpfile(&s);
        let e = load_edge_list(f.path(), n as usize, false).unwrap();
        assert_eq!(e.col_ptr[2708], 10556);
    }

    #[test]
    fn features_quantized() {
        let f = tmpfile("1.0,0.5\n0,-1\n");
        let m = load_features_csv(f.path(), 2, 2).unwrap();
        let raws: Vec<i32> = m.data.iter().map(|x| x.raw()).collect();
        assert_eq!(raws, vec![65536, 32768, 0, -65536]);
    }

    #[test]
    fn feature_shape_mismatch() {
        let f = tmpfile("1.0,0.5\n");
        assert!(load_features_csv(f.path(), 2, 2).is_err());
        let f2 = tmpfile("1.0,0.5,3.0\n1,2,3\n");
        assert!(load_features_csv(f2.path(), 2, 2).is_err());
    }

    #[test]
    fn container_round_trip() {
        let edges = EdgeSet::from_pairs(3, &[(0, 1), (2, 1), (1, 0)]).unwrap();
        let feats = Matrix::from_f64_rows(&[vec![1.0, -0.5], vec![0.25, 3.0], vec![0.0, 2.0]]).unwrap();
        let g = CscGraph::new(edges, feats).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_container(f.path(), &g).unwrap();
        let g2 = read_container(f.path()).unwrap();
        assert_eq!(g.edges, g2.edges);
        assert_eq!(g.features, g2.features);
    }

    #[test]
    fn undirected_mirrors() {
        let f = tmpfile("0 1\n");
        let e = load_edge_list(f.path(), 2, true).unwrap();
        assert_eq!(e.num_edges(), 2);
        assert_eq!(e.in_neighbors(0), &[1]);
        assert_eq!(e.in_neighbors(1), &[0]);
    }
}
