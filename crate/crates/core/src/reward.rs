//! Per-step reward: fODF/smoothness alignment plus a terminal oracle bonus.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::{PeakFinder, ShVolume};
use crate::geometry::{trilinear, Streamline, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// bonus α added at the last step of an oracle-plausible streamline
    pub oracle_bonus: f64,
    pub oracle_threshold: f64,
    pub peak_rel_threshold: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            oracle_bonus: 10.0,
            oracle_threshold: 0.5,
            peak_rel_threshold: 0.25,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.oracle_bonus >= 0.0) || !(self.oracle_threshold > 0.0 && self.oracle_threshold < 1.0) {
            return Err(crate::Error::Config(
                "oracle_bonus must be >= 0 and oracle_threshold in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Anything that maps streamlines to plausibility scores in [0, 1].
pub trait StreamlineScorer: Sync {
    fn score_batch(&self, streamlines: &[Streamline]) -> Result<Vec<f64>>;
}

/// `max_v |<v, a_t>| * <a_t, a_prev>`, or 0 without peaks.
pub fn local_reward_from_peaks(peaks: &[Vec3], a_t: Vec3, a_prev: Vec3) -> f64 {
    if peaks.is_empty() {
        return 0.0;
    }
    let align = peaks.iter().map(|v| v.dot(a_t).abs()).fold(0.0, f64::max);
    align * a_t.dot(a_prev)
}

/// Local term at `p_t`, with peaks taken from the interpolated fODF.
/// Positions outside the volume give 0.
pub fn local_reward(p_t: Vec3, a_t: Vec3, a_prev: Vec3, vol: &ShVolume, finder: &PeakFinder) -> f64 {
    match trilinear(vol, p_t) {
        Ok(c) => local_reward_from_peaks(&finder.peaks(&c), a_t, a_prev),
        Err(_) => 0.0,
    }
}

pub fn bonus_from_score(score: f64, cfg: &RewardConfig) -> f64 {
    if score >= cfg.oracle_threshold {
        cfg.oracle_bonus
    } else {
        0.0
    }
}

/// α if the oracle deems the finished streamline plausible, else 0.
pub fn terminal_bonus(s: &Streamline, oracle: &dyn StreamlineScorer, cfg: &RewardConfig) -> Result<f64> {
    if cfg.oracle_bonus == 0.0 {
        return Ok(0.0);
    }
    let score = oracle.score_batch(std::slice::from_ref(s))?[0];
    Ok(bonus_from_score(score, cfg))
}

/// `r_t = local + bonus`, the bonus only counting on the final step.
pub fn step_reward(local: f64, is_final: bool, bonus: f64) -> f64 {
    if is_final {
        local + bonus
    } else {
        local
    }
}
