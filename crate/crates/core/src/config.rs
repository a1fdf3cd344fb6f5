//! Model and system configuration.
//!
//! Config files are TOML key-value files mapping one-to-one onto these
//! structs; `SystemConfig::default()` is the reference 1 GHz machine
//! (32 SIMD16 cores, 8 systolic modules of 4x128, 128 KB / 2 MB / 2 MB /
//! 4 MB / 16 MB buffers, 256 GB/s HBM at 7 pJ/bit).

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerOrder {
    AggregateFirst,
    CombineFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Latency,
    Energy,
    None,
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineMode::Latency => write!(f, "latency"),
            PipelineMode::Energy => write!(f, "energy"),
            PipelineMode::None => write!(f, "none"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggMode {
    /// Spread each vertex's element ops over all SIMD lanes, backfilling idle
    /// lanes with other vertices.
    Disperse,
    /// Pin each vertex's workload to a single core.
    Concentrated,
}

/// Neighbor sampling policy. `Factor(f)` keeps ceil(D_v / f) neighbors per
/// vertex using a per-vertex seeded shuffle, so larger factors select nested
/// subsets of smaller ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SamplePolicy {
    None,
    Uniform(u32),
    Predefined(PathBuf),
    Factor(f64),
}

impl SamplePolicy {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "none" {
            return Ok(SamplePolicy::None);
        }
        if let Some(rest) = s.strip_prefix("uniform(").and_then(|r| r.strip_suffix(')')) {
            let k: u32 = rest
                .trim()
                .parse()
                .map_err(|_| SimError::Config(format!("bad uniform sample count '{rest}'")))?;
            if k < 1 {
                return Err(SimError::Config("uniform(k) requires k >= 1".into()));
            }
            return Ok(SamplePolicy::Uniform(k));
        }
        if let Some(rest) = s.strip_prefix("predefined(").and_then(|r| r.strip_suffix(')')) {
            return Ok(SamplePolicy::Predefined(PathBuf::from(rest.trim())));
        }
        if let Some(rest) = s.strip_prefix("factor(").and_then(|r| r.strip_suffix(')')) {
            let f: f64 = rest
                .trim()
                .parse()
                .map_err(|_| SimError::Config(format!("bad sampling factor '{rest}'")))?;
            if f.is_nan() || f < 1.0 {
                return Err(SimError::Config("factor(f) requires f >= 1".into()));
            }
            return Ok(SamplePolicy::Factor(f));
        }
        Err(SimError::Config(format!(
            "unknown sampling policy '{s}' (expected none, uniform(k), predefined(file), factor(f))"
        )))
    }
}

impl fmt::Display for SamplePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplePolicy::None => write!(f, "none"),
            SamplePolicy::Uniform(k) => write!(f, "uniform({k})"),
            SamplePolicy::Predefined(p) => write!(f, "predefined({})", p.display()),
            SamplePolicy::Factor(x) => write!(f, "factor({x})"),
        }
    }
}

/// One MLP stage: a weight matrix shape (rows = input width, cols = output
/// width) with a bias of `cols` values. Weight values are synthesized
/// deterministically; config files carry shapes only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub rows: usize,
    pub cols: usize,
}

/// A sub-layer used inside pooling: aggregation function plus MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSubLayer {
    pub aggregate: String,
    pub mlp: Vec<MlpShape>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

/// Graph pooling configuration: an assignment sub-layer (its final width is
/// the pooled vertex count) and an embedding sub-layer (its final width is
/// the pooled feature length).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub assign: PoolSubLayer,
    pub embed: PoolSubLayer,
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_order() -> LayerOrder {
    LayerOrder::AggregateFirst
}

fn default_sampling() -> String {
    "none".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    /// Aggregate kernel name, looked up in the kernel registry.
    pub aggregate: String,
    /// MLP stage shapes; consecutive shapes must compose.
    #[serde(default)]
    pub mlp: Vec<MlpShape>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Sampling policy string: none | uniform(k) | predefined(file) | factor(f).
    #[serde(default = "default_sampling")]
    pub sampling: String,
    #[serde(default = "default_order")]
    pub order: LayerOrder,
    /// Self-feature scale for add-aggregation (the epsilon term).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Degree convention for degree-weighted coefficients.
    #[serde(default)]
    pub degree_mode: crate::kernels::DegreeMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolConfig>,
}

impl LayerConfig {
    pub fn sampling_policy(&self) -> Result<SamplePolicy> {
        SamplePolicy::parse(&self.sampling)
    }

    pub fn output_width(&self) -> Option<usize> {
        self.mlp.last().map(|s| s.cols)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub layers: Vec<LayerConfig>,
}

impl ModelConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        let cfg: ModelConfig = toml::from_str(&text)
            .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(SimError::Config("model has no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for w in layer.mlp.windows(2) {
                if w[0].cols != w[1].rows {
                    return Err(SimError::Config(format!(
                        "layer {i}: MLP stages do not compose ({}x{} then {}x{})",
                        w[0].rows, w[0].cols, w[1].rows, w[1].cols
                    )));
                }
            }
            layer.sampling_policy()?;
            if let Some(pool) = &layer.pool {
                for sub in [&pool.assign, &pool.embed] {
                    if sub.mlp.is_empty() {
                        return Err(SimError::Config(format!(
                            "layer {i}: pool sub-layer needs at least one MLP stage"
                        )));
                    }
                    for w in sub.mlp.windows(2) {
                        if w[0].cols != w[1].rows {
                            return Err(SimError::Config(format!(
                                "layer {i}: pool MLP stages do not compose"
                            )));
                        }
                    }
                }
            } else if layer.mlp.is_empty() {
                return Err(SimError::Config(format!(
                    "layer {i}: needs at least one MLP stage"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryGeometry {
    pub channels: usize,
    pub banks_per_channel: usize,
    pub row_buffer_bytes: usize,
    /// Per-channel data rate; aggregate peak is channels x this.
    pub channel_bytes_per_cycle: usize,
    pub row_hit_cycles: u64,
    pub row_miss_cycles: u64,
}

impl Default for MemoryGeometry {
    fn default() -> Self {
        MemoryGeometry {
            channels: 8,
            banks_per_channel: 16,
            row_buffer_bytes: 2048,
            channel_bytes_per_cycle: 32,
            row_hit_cycles: 20,
            row_miss_cycles: 60,
        }
    }
}

impl MemoryGeometry {
    pub fn peak_bytes_per_cycle(&self) -> usize {
        self.channels * self.channel_bytes_per_cycle
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConstants {
    pub dram_pj_per_bit: f64,
    pub buffer_pj_per_byte: f64,
    pub simd_op_pj: f64,
    pub mac_pj: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        EnergyConstants {
            dram_pj_per_bit: 7.0,
            buffer_pj_per_byte: 0.5,
            simd_op_pj: 0.2,
            mac_pj: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub simd_cores: usize,
    pub simd_width: usize,
    pub systolic_modules: usize,
    pub module_rows: usize,
    pub module_cols: usize,
    /// Cooperative grouping: modules merged per group (must divide
    /// systolic_modules). Energy-aware pipelining uses groups; latency-aware
    /// uses single modules.
    pub modules_per_group: usize,
    pub edge_buffer_bytes: usize,
    pub input_buffer_bytes: usize,
    pub weight_buffer_bytes: usize,
    pub output_buffer_bytes: usize,
    pub agg_buffer_bytes: usize,
    /// Bytes charged per edge record; weighted aggregation adds 4 for the
    /// precomputed coefficient.
    pub edge_record_bytes: usize,
    pub memory: MemoryGeometry,
    pub energy: EnergyConstants,
    pub pipeline_mode: PipelineMode,
    pub coordination_enabled: bool,
    pub sparsity_elimination_enabled: bool,
    pub agg_mode: AggMode,
    /// Record a per-request trace row for trace.csv dumps.
    pub trace_requests: bool,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            simd_cores: 32,
            simd_width: 16,
            systolic_modules: 8,
            module_rows: 4,
            module_cols: 128,
            modules_per_group: 8,
            edge_buffer_bytes: 2 << 20,
            input_buffer_bytes: 128 << 10,
            weight_buffer_bytes: 2 << 20,
            output_buffer_bytes: 4 << 20,
            agg_buffer_bytes: 16 << 20,
            edge_record_bytes: 8,
            memory: MemoryGeometry::default(),
            energy: EnergyConstants::default(),
            pipeline_mode: PipelineMode::Latency,
            coordination_enabled: true,
            sparsity_elimination_enabled: true,
            agg_mode: AggMode::Disperse,
            trace_requests: false,
        }
    }
}

impl SystemConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        let cfg: SystemConfig = toml::from_str(&text)
            .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn total_lanes(&self) -> usize {
        self.simd_cores * self.simd_width
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("simd_cores", self.simd_cores),
            ("simd_width", self.simd_width),
            ("systolic_modules", self.systolic_modules),
            ("module_rows", self.module_rows),
            ("module_cols", self.module_cols),
            ("modules_per_group", self.modules_per_group),
            ("edge_record_bytes", self.edge_record_bytes),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(SimError::Config(format!("{name} must be >= 1")));
            }
        }
        let caps = [
            ("edge_buffer_bytes", self.edge_buffer_bytes),
            ("input_buffer_bytes", self.input_buffer_bytes),
            ("weight_buffer_bytes", self.weight_buffer_bytes),
            ("output_buffer_bytes", self.output_buffer_bytes),
            ("agg_buffer_bytes", self.agg_buffer_bytes),
        ];
        for (name, v) in caps {
            if v == 0 {
                return Err(SimError::Config(format!("{name} must be > 0")));
            }
        }
        if self.systolic_modules % self.modules_per_group != 0 {
            return Err(SimError::Config(format!(
                "modules_per_group ({}) must divide systolic_modules ({})",
                self.modules_per_group, self.systolic_modules
            )));
        }
        let m = &self.memory;
        if m.channels == 0 || m.banks_per_channel == 0 || m.row_buffer_bytes == 0 {
            return Err(SimError::Config("memory geometry counts must be >= 1".into()));
        }
        for (name, v) in [
            ("channels", m.channels),
            ("banks_per_channel", m.banks_per_channel),
            ("row_buffer_bytes", m.row_buffer_bytes),
        ] {
            if !v.is_power_of_two() {
                return Err(SimError::Config(format!("memory {name} must be a power of two")));
            }
        }
        if m.channel_bytes_per_cycle == 0 {
            return Err(SimError::Config("channel_bytes_per_cycle must be >= 1".into()));
        }
        Ok(())
    }

    /// Grouped-module configuration check plus the resulting batch capacity
    /// (vertices per cooperative batch).
    pub fn set_granularity(&mut self, modules_per_group: usize) -> Result<usize> {
        if modules_per_group == 0 || self.systolic_modules % modules_per_group != 0 {
            return Err(SimError::Config(format!(
                "group size {} does not divide module count {}",
                modules_per_group, self.systolic_modules
            )));
        }
        self.modules_per_group = modules_per_group;
        Ok(modules_per_group * self.module_rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matches_reference_machine() {
        let sys = SystemConfig::default();
        assert_eq!(sys.simd_cores, 32);
        assert_eq!(sys.simd_width, 16);
        assert_eq!(sys.total_lanes(), 512);
        assert_eq!(sys.systolic_modules, 8);
        assert_eq!(sys.module_rows, 4);
        assert_eq!(sys.module_cols, 128);
        assert_eq!(sys.input_buffer_bytes, 128 * 1024);
        assert_eq!(sys.edge_buffer_bytes, 2 * 1024 * 1024);
        assert_eq!(sys.weight_buffer_bytes, 2 * 1024 * 1024);
        assert_eq!(sys.output_buffer_bytes, 4 * 1024 * 1024);
        assert_eq!(sys.agg_buffer_bytes, 16 * 1024 * 1024);
        assert_eq!(sys.energy.dram_pj_per_bit, 7.0);
        assert_eq!(sys.memory.peak_bytes_per_cycle(), 256);
        sys.validate().unwrap();
    }

    #[test]
    fn granularity_divisor_check() {
        let mut sys = SystemConfig::default();
        assert_eq!(sys.set_granularity(4).unwrap(), 16);
        assert!(sys.set_granularity(3).is_err());
        assert_eq!(sys.set_granularity(1).unwrap(), 4);
    }

    #[test]
    fn sampling_policy_parse() {
        assert_eq!(SamplePolicy::parse("none").unwrap(), SamplePolicy::None);
        assert_eq!(
            SamplePolicy::parse("uniform(25)").unwrap(),
            SamplePolicy::Uniform(25)
        );
        assert!(matches!(
            SamplePolicy::parse("predefined(idx.txt)").unwrap(),
            SamplePolicy::Predefined(_)
        ));
        assert_eq!(
            SamplePolicy::parse("factor(2)").unwrap(),
            SamplePolicy::Factor(2.0)
        );
        assert!(SamplePolicy::parse("uniform(0)").is_err());
        assert!(SamplePolicy::parse("bogus").is_err());
    }

    #[test]
    fn model_validation() {
        let toml_text = r#"
            name = "gin"
            [[layers]]
            aggregate = "add"
            epsilon = 0.1
            mlp = [{ rows = 16, cols = 128 }, { rows = 128, cols = 128 }]
        "#;
        let cfg: ModelConfig = toml::from_str(toml_text).unwrap();
        cfg.validate().unwrap();

        let bad = r#"
            [[layers]]
            aggregate = "add"
            mlp = [{ rows = 16, cols = 128 }, { rows = 64, cols = 128 }]
        "#;
        let cfg: ModelConfig = toml::from_str(bad).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn system_toml_round_trip() {
        let sys = SystemConfig::default();
        let text = toml::to_string(&sys).unwrap();
        let back: SystemConfig = toml::from_str(&text).unwrap();
        assert_eq!(sys, back);
    }
}
