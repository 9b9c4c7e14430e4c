//! Hybrid terminal + intermediate reward.
//!
//! Terminal transitions pay ±R on survival/death. Non-terminal transitions
//! pay `C0·[SOFA unchanged ∧ SOFA > 0] + C1·ΔSOFA + C2·tanh(Δlactate)` with
//! `C0 = −0.025`, `C1 = −0.125`, `C2 = −2`. SOFA and lactate are read on
//! their raw clinical scales, never normalized values.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const C0: f64 = -0.025;
pub const C1: f64 = -0.125;
pub const C2: f64 = -2.0;

/// Default terminal reward magnitude; config key `terminal_reward_R`.
pub const DEFAULT_TERMINAL_R: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Survived,
    Deceased,
    None,
}

/// Clinical markers read from one timestep, on raw scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClinicalMarkers {
    pub sofa: u32,
    pub lactate: f64,
    pub terminal: bool,
    pub outcome: Outcome,
}

impl ClinicalMarkers {
    pub fn intermediate(sofa: u32, lactate: f64) -> Self {
        ClinicalMarkers { sofa, lactate, terminal: false, outcome: Outcome::None }
    }

    pub fn terminal(sofa: u32, lactate: f64, survived: bool) -> Self {
        ClinicalMarkers {
            sofa,
            lactate,
            terminal: true,
            outcome: if survived { Outcome::Survived } else { Outcome::Deceased },
        }
    }
}

/// Reward for the transition `prev -> next` with terminal magnitude `r_terminal`.
pub fn reward(prev: &ClinicalMarkers, next: &ClinicalMarkers, r_terminal: f64) -> Result<f64> {
    if r_terminal <= 0.0 {
        return Err(Error::Contract(format!("terminal R must be > 0, got {r_terminal}")));
    }
    if next.terminal != (next.outcome != Outcome::None) {
        return Err(Error::Contract(
            "outcome must be set on terminal markers and absent otherwise".into(),
        ));
    }
    if next.terminal {
        return Ok(match next.outcome {
            Outcome::Survived => r_terminal,
            Outcome::Deceased => -r_terminal,
            Outcome::None => unreachable!(),
        });
    }
    let stagnation = if next.sofa == prev.sofa && next.sofa > 0 { C0 } else { 0.0 };
    let delta_sofa = next.sofa as f64 - prev.sofa as f64;
    let delta_lactate = next.lactate - prev.lactate;
    Ok(stagnation + C1 * delta_sofa + C2 * delta_lactate.tanh())
}
