//! Single pipeline configuration file. Every key has a built-in default;
//! precedence is CLI flag > config file > default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use scenario_forge::decompose::ModeThresholds;
use scenario_forge::genscen::{SynthesisConfig, VerifyConfig};
use scenario_forge::ingest::CleaningPolicy;
use scenario_forge::simulate::{ControllerParams, KpiThresholds, SensorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Outlier removal during ingest.
    pub cleaning: CleaningPolicy,
    /// Resample ingested logs onto this grid; `null` keeps the source rate.
    pub resample_dt: Option<f64>,
    /// Mode-detection thresholds for decomposition.
    pub thresholds: ModeThresholds,
    /// Trajectory synthesis timing.
    pub synthesis: SynthesisConfig,
    /// Criticality screening and fault-variant generation.
    pub verify: VerifyConfig,
    /// Perception model of the vehicle under test.
    pub sensor: SensorConfig,
    /// Longitudinal controller of the vehicle under test.
    pub controller: ControllerParams,
    /// KPI pass/fail thresholds.
    pub kpi: KpiThresholds,
    /// Simulation step \[s\].
    pub sim_dt: f64,
    /// Assessor-authored qualitative judgment echoed into reports.
    pub judgment: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            cleaning: CleaningPolicy::default(),
            resample_dt: None,
            thresholds: ModeThresholds::default(),
            synthesis: SynthesisConfig::default(),
            verify: VerifyConfig::default(),
            sensor: SensorConfig::default(),
            controller: ControllerParams::default(),
            kpi: KpiThresholds::default(),
            sim_dt: 0.02,
            judgment: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))
    }
}
