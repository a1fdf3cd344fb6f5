//! Aggregate-function kernels.
//!
//! Every aggregation variant lives behind `AggregateKernel` and is looked up
//! by name in a `KernelRegistry` when a model config is resolved. The same
//! kernel object drives both the functional reference path and the engine's
//! streamed accumulation, so the two can only differ if the *order* of
//! operations differs — which is exactly what the equivalence tests pin down.
//!
//! Canonical ordering contract: neighbor contributions are accumulated in
//! ascending source-id order, the self term (when the kernel/layer has one)
//! is applied last, and Mean divides after the self term.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::fixed::Fixed32;

/// Degree convention for degree-weighted aggregation coefficients:
/// `Augmented` uses D+1 (implicit self loop added to every vertex),
/// `Raw` uses max(D, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DegreeMode {
    #[default]
    Augmented,
    Raw,
}

pub fn effective_degree(mode: DegreeMode, deg: usize) -> u32 {
    match mode {
        DegreeMode::Augmented => deg as u32 + 1,
        DegreeMode::Raw => (deg as u32).max(1),
    }
}

pub trait AggregateKernel: Send + Sync {
    fn name(&self) -> &'static str;

    /// Fresh accumulator for one vertex.
    fn init(&self, len: usize) -> Vec<Fixed32>;

    /// Fold one neighbor's feature vector into the accumulator. `coeff` is
    /// the per-edge coefficient (ONE unless the kernel is degree-weighted).
    fn accumulate(&self, acc: &mut [Fixed32], contrib: &[Fixed32], coeff: Fixed32);

    /// Apply the self term (if any) and the final reduction. `divisor` is
    /// |S(v) union {v}| and only used by Mean.
    fn finalize(
        &self,
        acc: &mut [Fixed32],
        self_term: Option<(&[Fixed32], Fixed32)>,
        divisor: u32,
    );

    /// Whether edges carry a precomputed degree coefficient (affects the
    /// edge-record size charged to DRAM traffic).
    fn uses_edge_coeff(&self) -> bool {
        false
    }

    /// Self-term coefficient for vertex `v`, or None when the kernel has no
    /// self term. `epsilon` comes from the layer config; `eff_degree` is the
    /// vertex's effective degree under the configured `DegreeMode`.
    fn self_coefficient(&self, epsilon: Option<f64>, eff_degree: u32) -> Option<Fixed32>;

    /// Whether finalize performs a division (charged extra SIMD cycles).
    fn divides_on_finalize(&self) -> bool {
        false
    }

    /// Set-semantics kernels (max/min/mean) operate over S(v) union {v}:
    /// a self-loop edge already in the neighbor set must not be counted a
    /// second time by the self term.
    fn set_semantics(&self) -> bool {
        false
    }
}

/// Per-edge coefficient for an edge u -> v given effective degrees.
/// Degree-weighted kernels use 1/sqrt(D_u * D_v); everything else is 1.
pub fn edge_coefficient(kernel: &dyn AggregateKernel, eff_u: u32, eff_v: u32) -> Fixed32 {
    if kernel.uses_edge_coeff() {
        Fixed32::from_f64(1.0 / ((eff_u as f64) * (eff_v as f64)).sqrt())
    } else {
        Fixed32::ONE
    }
}

/// Apply the self term and final reduction for one vertex — the one place
/// that decides whether a self term exists and what the Mean divisor is.
/// Both the functional reference and the engine finalize through here.
#[allow(clippy::too_many_arguments)]
pub fn finalize_vertex(
    kernel: &dyn AggregateKernel,
    acc: &mut [Fixed32],
    self_feats: &[Fixed32],
    epsilon: Option<f64>,
    eff_degree: u32,
    kept_neighbors: usize,
    has_self_edge: bool,
) {
    let coeff = kernel.self_coefficient(epsilon, eff_degree);
    let skip_self = kernel.set_semantics() && has_self_edge;
    let (self_term, divisor) = match coeff {
        Some(c) if !skip_self => (Some((self_feats, c)), kept_neighbors as u32 + 1),
        _ => (None, kept_neighbors as u32),
    };
    kernel.finalize(acc, self_term, divisor.max(1));
}

struct AddKernel;

impl AggregateKernel for AddKernel {
    fn name(&self) -> &'static str {
        "add"
    }
    fn init(&self, len: usize) -> Vec<Fixed32> {
        vec![Fixed32::ZERO; len]
    }
    fn accumulate(&self, acc: &mut [Fixed32], contrib: &[Fixed32], _coeff: Fixed32) {
        for (a, &c) in acc.iter_mut().zip(contrib) {
            *a = *a + c;
        }
    }
    fn finalize(&self, acc: &mut [Fixed32], self_term: Option<(&[Fixed32], Fixed32)>, _d: u32) {
        if let Some((feats, coeff)) = self_term {
            for (a, &f) in acc.iter_mut().zip(feats) {
                *a = *a + coeff * f;
            }
        }
    }
    fn self_coefficient(&self, epsilon: Option<f64>, _aug_degree: u32) -> Option<Fixed32> {
        epsilon.map(|e| Fixed32::from_f64(1.0 + e))
    }
}

struct WeightedAddKernel;

impl AggregateKernel for WeightedAddKernel {
    fn name(&self) -> &'static str {
        "weighted-add"
    }
    fn init(&self, len: usize) -> Vec<Fixed32> {
        vec![Fixed32::ZERO; len]
    }
    fn accumulate(&self, acc: &mut [Fixed32], contrib: &[Fixed32], coeff: Fixed32) {
        for (a, &c) in acc.iter_mut().zip(contrib) {
            *a = *a + coeff * c;
        }
    }
    fn finalize(&self, acc: &mut [Fixed32], self_term: Option<(&[Fixed32], Fixed32)>, _d: u32) {
        if let Some((feats, coeff)) = self_term {
            for (a, &f) in acc.iter_mut().zip(feats) {
                *a = *a + coeff * f;
            }
        }
    }
    fn uses_edge_coeff(&self) -> bool {
        true
    }
    fn self_coefficient(&self, _epsilon: Option<f64>, eff_degree: u32) -> Option<Fixed32> {
        Some(Fixed32::from_f64(1.0 / eff_degree as f64))
    }
}

struct MaxKernel;

impl AggregateKernel for MaxKernel {
    fn name(&self) -> &'static str {
        "max"
    }
    fn init(&self, len: usize) -> Vec<Fixed32> {
        vec![Fixed32::MIN; len]
    }
    fn accumulate(&self, acc: &mut [Fixed32], contrib: &[Fixed32], _coeff: Fixed32) {
        for (a, &c) in acc.iter_mut().zip(contrib) {
            *a = (*a).max(c);
        }
    }
    fn finalize(&self, acc: &mut [Fixed32], self_term: Option<(&[Fixed32], Fixed32)>, _d: u32) {
        if let Some((feats, _)) = self_term {
            for (a, &f) in acc.iter_mut().zip(feats) {
                *a = (*a).max(f);
            }
        }
    }
    fn self_coefficient(&self, _epsilon: Option<f64>, _aug: u32) -> Option<Fixed32> {
        Some(Fixed32::ONE)
    }
    fn set_semantics(&self) -> bool {
        true
    }
}

struct MinKernel;

impl AggregateKernel for MinKernel {
    fn name(&self) -> &'static str {
        "min"
    }
    fn init(&self, len: usize) -> Vec<Fixed32> {
        vec![Fixed32::MAX; len]
    }
    fn accumulate(&self, acc: &mut [Fixed32], contrib: &[Fixed32], _coeff: Fixed32) {
        for (a, &c) in acc.iter_mut().zip(contrib) {
            *a = (*a).min(c);
        }
    }
    fn finalize(&self, acc: &mut [Fixed32], self_term: Option<(&[Fixed32], Fixed32)>, _d: u32) {
        if let Some((feats, _)) = self_term {
            for (a, &f) in acc.iter_mut().zip(feats) {
                *a = (*a).min(f);
            }
        }
    }
    fn self_coefficient(&self, _epsilon: Option<f64>, _aug: u32) -> Option<Fixed32> {
        Some(Fixed32::ONE)
    }
    fn set_semantics(&self) -> bool {
        true
    }
}

struct MeanKernel;

impl AggregateKernel for MeanKernel {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn init(&self, len: usize) -> Vec<Fixed32> {
        vec![Fixed32::ZERO; len]
    }
    fn accumulate(&self, acc: &mut [Fixed32], contrib: &[Fixed32], _coeff: Fixed32) {
        for (a, &c) in acc.iter_mut().zip(contrib) {
            *a = *a + c;
        }
    }
    fn finalize(&self, acc: &mut [Fixed32], self_term: Option<(&[Fixed32], Fixed32)>, divisor: u32) {
        if let Some((feats, _)) = self_term {
            for (a, &f) in acc.iter_mut().zip(feats) {
                *a = *a + f;
            }
        }
        if divisor > 1 {
            for a in acc.iter_mut() {
                *a = a.div_round_nearest(divisor);
            }
        }
    }
    fn self_coefficient(&self, _epsilon: Option<f64>, _aug: u32) -> Option<Fixed32> {
        Some(Fixed32::ONE)
    }
    fn divides_on_finalize(&self) -> bool {
        true
    }
    fn set_semantics(&self) -> bool {
        true
    }
}

#[derive(Clone)]
pub struct KernelRegistry {
    map: BTreeMap<String, Arc<dyn AggregateKernel>>,
}

impl KernelRegistry {
    /// Registry with the built-in kernels: add, max, mean, min, weighted-add.
    pub fn with_builtins() -> Self {
        let mut reg = KernelRegistry {
            map: BTreeMap::new(),
        };
        reg.register(Arc::new(AddKernel));
        reg.register(Arc::new(WeightedAddKernel));
        reg.register(Arc::new(MaxKernel));
        reg.register(Arc::new(MinKernel));
        reg.register(Arc::new(MeanKernel));
        reg
    }

    pub fn register(&mut self, kernel: Arc<dyn AggregateKernel>) {
        self.map.insert(kernel.name().to_string(), kernel);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn AggregateKernel>> {
        self.map
            .get(name)
            .cloned()
            .ok_or_else(|| SimError::UnknownKernel {
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }
}

impl Default for KernelRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fx(x: f64) -> Fixed32 {
        Fixed32::from_f64(x)
    }

    #[test]
    fn registry_lookup() {
        let reg = KernelRegistry::with_builtins();
        assert_eq!(
            reg.names(),
            vec!["add", "max", "mean", "min", "weighted-add"]
        );
        assert!(reg.get("max").is_ok());
        let msg = match reg.get("median") {
            Err(e) => e.to_string(),
            Ok(_) => panic!("median should not resolve"),
        };
        assert!(msg.contains("median") && msg.contains("weighted-add"));
    }

    #[test]
    fn add_accumulates_exactly() {
        let reg = KernelRegistry::with_builtins();
        let k = reg.get("add").unwrap();
        let mut acc = k.init(2);
        k.accumulate(&mut acc, &[fx(1.0), fx(2.0)], Fixed32::ONE);
        k.accumulate(&mut acc, &[fx(3.0), fx(4.0)], Fixed32::ONE);
        k.finalize(&mut acc, None, 2);
        assert_eq!(acc, vec![fx(4.0), fx(6.0)]);
    }

    #[test]
    fn add_epsilon_self_term() {
        let reg = KernelRegistry::with_builtins();
        let k = reg.get("add").unwrap();
        assert_eq!(k.self_coefficient(None, 5), None);
        let c = k.self_coefficient(Some(0.5), 5).unwrap();
        assert_eq!(c, fx(1.5));
        let mut acc = k.init(1);
        k.accumulate(&mut acc, &[fx(2.0)], Fixed32::ONE);
        k.finalize(&mut acc, Some((&[fx(2.0)], c)), 2);
        assert_eq!(acc, vec![fx(5.0)]);
    }

    #[test]
    fn weighted_add_unit_degrees() {
        let reg = KernelRegistry::with_builtins();
        let k = reg.get("weighted-add").unwrap();
        // effective degrees both 1 -> coefficient 1
        let c = edge_coefficient(k.as_ref(), 1, 1);
        assert_eq!(c, Fixed32::ONE);
        let mut acc = k.init(1);
        k.accumulate(&mut acc, &[fx(1.0)], c);
        let sc = k.self_coefficient(None, 1).unwrap();
        assert_eq!(sc, Fixed32::ONE);
        k.finalize(&mut acc, Some((&[fx(1.0)], sc)), 2);
        assert_eq!(acc, vec![fx(2.0)]);
    }

    #[test]
    fn max_min_extremum_with_self() {
        let reg = KernelRegistry::with_builtins();
        let k = reg.get("max").unwrap();
        let mut acc = k.init(2);
        k.accumulate(&mut acc, &[fx(1.0), fx(-3.0)], Fixed32::ONE);
        k.finalize(&mut acc, Some((&[fx(0.5), fx(2.0)], Fixed32::ONE)), 2);
        assert_eq!(acc, vec![fx(1.0), fx(2.0)]);

        let k = reg.get("min").unwrap();
        let mut acc = k.init(2);
        k.accumulate(&mut acc, &[fx(1.0), fx(-3.0)], Fixed32::ONE);
        k.finalize(&mut acc, Some((&[fx(0.5), fx(2.0)], Fixed32::ONE)), 2);
        assert_eq!(acc, vec![fx(0.5), fx(-3.0)]);
    }

    #[test]
    fn mean_divides_after_self() {
        let reg = KernelRegistry::with_builtins();
        let k = reg.get("mean").unwrap();
        assert!(k.divides_on_finalize());
        let mut acc = k.init(1);
        k.accumulate(&mut acc, &[fx(1.0)], Fixed32::ONE);
        k.accumulate(&mut acc, &[fx(2.0)], Fixed32::ONE);
        k.finalize(&mut acc, Some((&[fx(3.0)], Fixed32::ONE)), 3);
        assert_eq!(acc, vec![fx(2.0)]);
    }

    #[test]
    fn mean_identical_vectors_is_identity() {
        let reg = KernelRegistry::with_builtins();
        let k = reg.get("mean").unwrap();
        let v = [fx(0.75), fx(-1.25)];
        let mut acc = k.init(2);
        for _ in 0..3 {
            k.accumulate(&mut acc, &v, Fixed32::ONE);
        }
        k.finalize(&mut acc, Some((&v, Fixed32::ONE)), 4);
        assert_eq!(acc.as_slice(), &v);
    }
}
