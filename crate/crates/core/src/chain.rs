//! Hierarchy-aware reasoning chain: the level schedule visited by the mask
//! slots and the prompt template rendered from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::LabelId;

pub const DEFAULT_ITERATIONS: usize = 5;
pub const DEFAULT_MASK: &str = "[MASK]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainSchedule {
    levels: Vec<usize>,
    depth: usize,
    iterations: usize,
}

impl ChainSchedule {
    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Position of the last slot carrying each level, indexed by `level - 1`.
    pub fn readout_positions(&self) -> Vec<usize> {
        let mut last = vec![0; self.depth];
        for (i, &v) in self.levels.iter().enumerate() {
            last[v - 1] = i;
        }
        last
    }
}

/// Expected chain length for `iterations >= 1`.
pub fn chain_length(depth: usize, iterations: usize) -> usize {
    if iterations == 0 {
        depth
    } else {
        depth + (depth - 1) + (iterations - 1) * depth
    }
}

/// Ascend `1..=D`, descend `D-1..=1`, then repeat `D..=1` for each further
/// iteration. Zero iterations gives the plain ascending schedule.
pub fn build_schedule(depth: usize, iterations: usize) -> Result<ChainSchedule> {
    if depth < 1 {
        return Err(Error::InvalidArgument(format!(
            "chain depth must be >= 1, got {depth}"
        )));
    }
    let mut levels: Vec<usize> = (1..=depth).collect();
    if iterations >= 1 {
        levels.extend((1..depth).rev());
        for _ in 1..iterations {
            levels.extend((1..=depth).rev());
        }
    }
    Ok(ChainSchedule {
        levels,
        depth,
        iterations,
    })
}

pub fn render_template(text: &str, schedule: &ChainSchedule, mask_token: &str) -> String {
    debug_assert!(!mask_token.is_empty());
    let mut out = format!("{text}. It was ");
    for v in schedule.levels() {
        out.push_str(&format!("{v} level: {mask_token} "));
    }
    let trimmed = out.trim_end().len();
    out.truncate(trimmed);
    out.push('.');
    out
}

/// Repeat the gold path along the schedule: slot `i` gets the gold label of
/// level `schedule[i]`.
pub fn golden_sequence(path: &[LabelId], schedule: &ChainSchedule) -> Result<Vec<LabelId>> {
    if path.len() != schedule.depth() {
        return Err(Error::LengthMismatch {
            expected: schedule.depth(),
            found: path.len(),
        });
    }
    Ok(schedule.levels().iter().map(|&v| path[v - 1]).collect())
}
