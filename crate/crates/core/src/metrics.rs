//! Block-efficiency accounting and the analytic walltime speedup model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of one draft/verify round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    /// Index into the generated sequence where the block started.
    pub position: usize,
    pub accepted_count: usize,
    /// Always `accepted_count + 1`.
    pub tokens_emitted: usize,
    pub weight_used: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecords {
    pub seed: u64,
    pub gamma: usize,
    pub blocks: Vec<BlockRecord>,
}

impl RunRecords {
    pub fn new(seed: u64, gamma: usize) -> Self {
        Self {
            seed,
            gamma,
            blocks: Vec::new(),
        }
    }

    pub fn push(&mut self, position: usize, accepted_count: usize, weight_used: Vec<f64>) {
        self.blocks.push(BlockRecord {
            position,
            accepted_count,
            tokens_emitted: accepted_count + 1,
            weight_used,
        });
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn total_accepted(&self) -> usize {
        self.blocks.iter().map(|b| b.accepted_count).sum()
    }

    pub fn total_emitted(&self) -> usize {
        self.blocks.iter().map(|b| b.tokens_emitted).sum()
    }
}

/// Mean tokens produced per block, `mean(accepted_count + 1)`.
pub fn block_efficiency(records: &RunRecords) -> Result<f64> {
    pooled_block_efficiency(std::slice::from_ref(records))
}

/// Block efficiency over the concatenation of several runs' blocks.
pub fn pooled_block_efficiency(runs: &[RunRecords]) -> Result<f64> {
    let blocks: usize = runs.iter().map(RunRecords::num_blocks).sum();
    if blocks == 0 {
        return Err(Error::EmptyRun);
    }
    let produced: usize = runs
        .iter()
        .flat_map(|r| &r.blocks)
        .map(|b| b.accepted_count + 1)
        .sum();
    Ok(produced as f64 / blocks as f64)
}

/// Measured draft-to-target per-token latency ratios `T_q / T_p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatencyPreset {
    #[serde(rename = "7b-68m")]
    Target7bDraft68m,
    #[serde(rename = "7b-160m")]
    Target7bDraft160m,
    #[serde(rename = "13b-68m")]
    Target13bDraft68m,
    #[serde(rename = "13b-160m")]
    Target13bDraft160m,
}

impl LatencyPreset {
    pub const ALL: [LatencyPreset; 4] = [
        LatencyPreset::Target7bDraft68m,
        LatencyPreset::Target7bDraft160m,
        LatencyPreset::Target13bDraft68m,
        LatencyPreset::Target13bDraft160m,
    ];

    pub fn ratio(self) -> f64 {
        match self {
            LatencyPreset::Target7bDraft68m => 0.063,
            LatencyPreset::Target7bDraft160m => 0.206,
            LatencyPreset::Target13bDraft68m => 0.042,
            LatencyPreset::Target13bDraft160m => 0.137,
        }
    }

    /// `(target size, draft size)` labels.
    pub fn sizes(self) -> (&'static str, &'static str) {
        match self {
            LatencyPreset::Target7bDraft68m => ("7B", "68M"),
            LatencyPreset::Target7bDraft160m => ("7B", "160M"),
            LatencyPreset::Target13bDraft68m => ("13B", "68M"),
            LatencyPreset::Target13bDraft160m => ("13B", "160M"),
        }
    }

    pub fn lookup(target: &str, draft: &str) -> Option<LatencyPreset> {
        Self::ALL.into_iter().find(|p| {
            let (t, d) = p.sizes();
            t.eq_ignore_ascii_case(target) && d.eq_ignore_ascii_case(draft)
        })
    }
}

/// Invariances the factorized speedup relies on. They are recorded, not
/// checked: target latency is taken to be flat in block length, sequence
/// length and batch size over the operating range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyAssumptions {
    pub flat_in_block_length: bool,
    pub flat_in_sequence_length: bool,
    pub flat_in_batch_size: bool,
}

impl Default for LatencyAssumptions {
    fn default() -> Self {
        Self {
            flat_in_block_length: true,
            flat_in_sequence_length: true,
            flat_in_batch_size: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub ratio: f64,
    #[serde(default)]
    pub assumptions: LatencyAssumptions,
}

impl LatencyModel {
    pub fn new(ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(Error::DomainError(format!("latency ratio must be > 0, got {ratio}")));
        }
        Ok(Self {
            ratio,
            assumptions: LatencyAssumptions::default(),
        })
    }

    pub fn preset(p: LatencyPreset) -> Self {
        Self {
            ratio: p.ratio(),
            assumptions: LatencyAssumptions::default(),
        }
    }
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self::preset(LatencyPreset::Target7bDraft68m)
    }
}

/// `tau / (gamma · T_q/T_p + 1)`.
pub fn expected_speedup(tau: f64, gamma: usize, latency: &LatencyModel) -> Result<f64> {
    if gamma == 0 {
        return Err(Error::DomainError("gamma must be >= 1".into()));
    }
    if !(tau >= 1.0 && tau <= gamma as f64 + 1.0) {
        return Err(Error::DomainError(format!(
            "block efficiency {tau} outside [1, {}]",
            gamma + 1
        )));
    }
    if !(latency.ratio > 0.0 && latency.ratio.is_finite()) {
        return Err(Error::DomainError(format!("latency ratio must be > 0, got {}", latency.ratio)));
    }
    Ok(tau / (gamma as f64 * latency.ratio + 1.0))
}
