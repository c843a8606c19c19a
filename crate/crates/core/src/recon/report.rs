use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lrq::RoundVariant;

use super::config::{QuantScheme, ReconConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    /// Held-in loss after this many optimizer steps.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    pub variant: RoundVariant,
    /// Held-in loss of the round-to-nearest starting point.
    pub initial_loss: f64,
    /// Held-in loss of the retained parameters.
    pub final_loss: f64,
    pub best_iteration: usize,
    pub learnable_params: usize,
    pub trajectory: Vec<TrajectoryPoint>,
    /// Kept out of the JSON report so that reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub scheme: QuantScheme,
    pub config: ReconConfig,
    pub blocks: Vec<BlockReport>,
}

impl ReconReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn timing_json(&self) -> Result<String> {
        let t: Vec<serde_json::Value> = self
            .blocks
            .iter()
            .map(|b| serde_json::json!({"block": b.block, "wall_time_s": b.wall_time_s}))
            .collect();
        Ok(serde_json::to_string_pretty(&t)?)
    }

    /// `block,iteration,loss` rows in block then iteration order.
    pub fn write_trajectory_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["block", "iteration", "loss"])?;
        for b in &self.blocks {
            for p in &b.trajectory {
                w.write_record([b.block.to_string(), p.iteration.to_string(), format!("{:e}", p.loss)])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("timing.json"), self.timing_json()?)?;
        self.write_trajectory_csv(std::fs::File::create(dir.join("trajectory.csv"))?)
    }
}
