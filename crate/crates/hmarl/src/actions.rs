//! Six-treatment action model: dosage discretization, the joint action
//! space under the renal-exclusivity constraint, and the bijection between
//! joint actions and hierarchy paths.
//!
//! Axis order is fixed everywhere as `S1, S2, IV, Vaso, Diuretic, Dialysis`.
//! Dosed axes carry levels 0..=4 (no-action + 4 quantiles); dialysis is 0/1.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const NUM_AXES: usize = 6;
/// Valid joint actions under renal exclusivity: 25 neuro x 25 cardio x 6 renal.
pub const JOINT_COUNT: usize = 3750;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Organ {
    Neu,
    Car,
    Ren,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Treatment {
    S1,
    S2,
    Iv,
    Vaso,
    Diuretic,
    Dialysis,
}

impl Treatment {
    pub const ALL: [Treatment; 6] = [
        Treatment::S1,
        Treatment::S2,
        Treatment::Iv,
        Treatment::Vaso,
        Treatment::Diuretic,
        Treatment::Dialysis,
    ];

    pub fn organ(self) -> Organ {
        match self {
            Treatment::S1 | Treatment::S2 => Organ::Neu,
            Treatment::Iv | Treatment::Vaso => Organ::Car,
            Treatment::Diuretic | Treatment::Dialysis => Organ::Ren,
        }
    }

    pub fn axis_index(self) -> usize {
        match self {
            Treatment::S1 => 0,
            Treatment::S2 => 1,
            Treatment::Iv => 2,
            Treatment::Vaso => 3,
            Treatment::Diuretic => 4,
            Treatment::Dialysis => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Treatment::S1 => "s1",
            Treatment::S2 => "s2",
            Treatment::Iv => "iv",
            Treatment::Vaso => "vaso",
            Treatment::Diuretic => "diuretic",
            Treatment::Dialysis => "dialysis",
        }
    }
}

/// One treatment axis with its discretization thresholds (raw dose units).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreatmentAxis {
    pub treatment: Treatment,
    /// Ascending quantile thresholds for dosed axes; `None` for dialysis.
    pub thresholds: Option<[f64; 4]>,
}

impl TreatmentAxis {
    pub fn level_count(&self) -> usize {
        if self.thresholds.is_some() {
            5
        } else {
            2
        }
    }
}

/// The full six-axis space with the default (published 4-hourly dose)
/// thresholds. Quantiles can be re-derived from data via `with_thresholds`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionSpace {
    pub axes: [TreatmentAxis; NUM_AXES],
}

impl Default for ActionSpace {
    fn default() -> Self {
        let t = |treatment, thr| TreatmentAxis { treatment, thresholds: Some(thr) };
        ActionSpace {
            axes: [
                t(Treatment::S1, [3.40, 6.01, 9.53, f64::INFINITY]),
                t(Treatment::S2, [0.65, 2.08, 4.30, f64::INFINITY]),
                t(Treatment::Iv, [56.17, 227.50, 530.93, f64::INFINITY]),
                t(Treatment::Vaso, [9.40, 20.66, 44.42, f64::INFINITY]),
                t(Treatment::Diuretic, [20.00, 160.00, 902.10, f64::INFINITY]),
                TreatmentAxis { treatment: Treatment::Dialysis, thresholds: None },
            ],
        }
    }
}

impl ActionSpace {
    /// Discretize a raw dose on one axis. Boundary doses go to the lower bin
    /// (dose <= threshold_q -> level q).
    pub fn discretize(&self, treatment: Treatment, raw_dose: f64) -> Result<u8> {
        if raw_dose < 0.0 || !raw_dose.is_finite() {
            return Err(Error::Data(format!(
                "invalid raw dose {raw_dose} for {}",
                treatment.name()
            )));
        }
        let axis = &self.axes[treatment.axis_index()];
        match &axis.thresholds {
            None => Ok(if raw_dose > 0.0 { 1 } else { 0 }),
            Some(thr) => {
                if raw_dose == 0.0 {
                    return Ok(0);
                }
                for (q, &t) in thr.iter().enumerate() {
                    if raw_dose <= t {
                        return Ok((q + 1) as u8);
                    }
                }
                Ok(4)
            }
        }
    }
}

/// A joint action: one discrete level per axis, in canonical axis order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointAction {
    pub levels: [u8; NUM_AXES],
}

impl JointAction {
    pub const NO_ACTION: JointAction = JointAction { levels: [0; NUM_AXES] };

    pub fn new(levels: [u8; NUM_AXES]) -> Result<Self> {
        let a = JointAction { levels };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &l) in self.levels.iter().enumerate() {
            let max = if i == 5 { 1 } else { 4 };
            if l > max {
                return Err(Error::Data(format!("axis {i} level {l} out of range")));
            }
        }
        if self.levels[4] > 0 && self.levels[5] > 0 {
            return Err(Error::Constraint(
                "renal exclusivity: diuretic and dialysis both active".into(),
            ));
        }
        Ok(())
    }

    pub fn level(&self, t: Treatment) -> u8 {
        self.levels[t.axis_index()]
    }

    pub fn organ_active(&self, organ: Organ) -> bool {
        match organ {
            Organ::Neu => self.levels[0] > 0 || self.levels[1] > 0,
            Organ::Car => self.levels[2] > 0 || self.levels[3] > 0,
            Organ::Ren => self.levels[4] > 0 || self.levels[5] > 0,
        }
    }

    pub fn active_organ_count(&self) -> usize {
        [Organ::Neu, Organ::Car, Organ::Ren]
            .into_iter()
            .filter(|&o| self.organ_active(o))
            .count()
    }

    /// Per-organ sub-action codes: neuro `s1*5+s2` in 0..25, cardio
    /// `iv*5+vaso` in 0..25, renal 0 = none, 1..=4 = diuretic level,
    /// 5 = dialysis.
    pub fn organ_codes(&self) -> (usize, usize, usize) {
        let neu = self.levels[0] as usize * 5 + self.levels[1] as usize;
        let car = self.levels[2] as usize * 5 + self.levels[3] as usize;
        let ren = if self.levels[5] > 0 { 5 } else { self.levels[4] as usize };
        (neu, car, ren)
    }

    pub fn from_organ_codes(neu: usize, car: usize, ren: usize) -> Result<Self> {
        if neu >= 25 || car >= 25 || ren >= 6 {
            return Err(Error::Data(format!("organ codes out of range: {neu},{car},{ren}")));
        }
        let (diur, dial) = if ren == 5 { (0, 1) } else { (ren as u8, 0) };
        JointAction::new([
            (neu / 5) as u8,
            (neu % 5) as u8,
            (car / 5) as u8,
            (car % 5) as u8,
            diur,
            dial,
        ])
    }

    /// Canonical flat index over the 3750 valid joint actions.
    pub fn joint_index(&self) -> usize {
        let (neu, car, ren) = self.organ_codes();
        (neu * 25 + car) * 6 + ren
    }

    pub fn from_joint_index(idx: usize) -> Result<Self> {
        if idx >= JOINT_COUNT {
            return Err(Error::Data(format!("joint index {idx} out of range")));
        }
        JointAction::from_organ_codes(idx / 150, (idx / 6) % 25, idx % 6)
    }
}

/// Intra-organ option taken when the organ is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeuOption {
    S1(u8),
    S2(u8),
    Mix { s1: u8, s2: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CarOption {
    Iv(u8),
    Vaso(u8),
    Mix { iv: u8, vaso: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RenOption {
    Diuretic(u8),
    Dialysis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RootOption {
    NoAction,
    Neu,
    Car,
    Ren,
    OMix,
}

impl RootOption {
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        match self {
            RootOption::NoAction => 0,
            RootOption::Neu => 1,
            RootOption::Car => 2,
            RootOption::Ren => 3,
            RootOption::OMix => 4,
        }
    }
}

/// Full hierarchy decomposition of a joint action: which root option it
/// corresponds to, and the per-organ options for every invoked organ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyPath {
    pub root: RootOption,
    pub neu: Option<NeuOption>,
    pub car: Option<CarOption>,
    pub ren: Option<RenOption>,
}

/// Decompose a valid joint action into its hierarchy path.
pub fn decompose(a: &JointAction) -> Result<HierarchyPath> {
    a.validate()?;
    let neu = match (a.levels[0], a.levels[1]) {
        (0, 0) => None,
        (s1, 0) => Some(NeuOption::S1(s1)),
        (0, s2) => Some(NeuOption::S2(s2)),
        (s1, s2) => Some(NeuOption::Mix { s1, s2 }),
    };
    let car = match (a.levels[2], a.levels[3]) {
        (0, 0) => None,
        (iv, 0) => Some(CarOption::Iv(iv)),
        (0, vaso) => Some(CarOption::Vaso(vaso)),
        (iv, vaso) => Some(CarOption::Mix { iv, vaso }),
    };
    let ren = match (a.levels[4], a.levels[5]) {
        (0, 0) => None,
        (d, 0) => Some(RenOption::Diuretic(d)),
        (0, _) => Some(RenOption::Dialysis),
        _ => unreachable!("validated above"),
    };
    let root = match (neu.is_some(), car.is_some(), ren.is_some()) {
        (false, false, false) => RootOption::NoAction,
        (true, false, false) => RootOption::Neu,
        (false, true, false) => RootOption::Car,
        (false, false, true) => RootOption::Ren,
        _ => RootOption::OMix,
    };
    Ok(HierarchyPath { root, neu, car, ren })
}

/// Inverse of [`decompose`]; `compose(decompose(a)) == a` for every valid `a`.
pub fn compose(p: &HierarchyPath) -> Result<JointAction> {
    let mut levels = [0u8; NUM_AXES];
    if let Some(n) = p.neu {
        match n {
            NeuOption::S1(l) => levels[0] = l,
            NeuOption::S2(l) => levels[1] = l,
            NeuOption::Mix { s1, s2 } => {
                levels[0] = s1;
                levels[1] = s2;
            }
        }
    }
    if let Some(c) = p.car {
        match c {
            CarOption::Iv(l) => levels[2] = l,
            CarOption::Vaso(l) => levels[3] = l,
            CarOption::Mix { iv, vaso } => {
                levels[2] = iv;
                levels[3] = vaso;
            }
        }
    }
    if let Some(r) = p.ren {
        match r {
            RenOption::Diuretic(l) => levels[4] = l,
            RenOption::Dialysis => levels[5] = 1,
        }
    }
    let dosed_valid = |l: u8| (1..=4).contains(&l);
    let well_formed = match p.neu {
        None => true,
        Some(NeuOption::S1(l)) | Some(NeuOption::S2(l)) => dosed_valid(l),
        Some(NeuOption::Mix { s1, s2 }) => dosed_valid(s1) && dosed_valid(s2),
    } && match p.car {
        None => true,
        Some(CarOption::Iv(l)) | Some(CarOption::Vaso(l)) => dosed_valid(l),
        Some(CarOption::Mix { iv, vaso }) => dosed_valid(iv) && dosed_valid(vaso),
    } && match p.ren {
        None | Some(RenOption::Dialysis) => true,
        Some(RenOption::Diuretic(l)) => dosed_valid(l),
    };
    if !well_formed {
        return Err(Error::Contract("malformed hierarchy path: leaf level out of 1..=4".into()));
    }
    let a = JointAction::new(levels)?;
    let expected_root = decompose(&a)?.root;
    if expected_root != p.root {
        return Err(Error::Contract(format!(
            "path root {:?} inconsistent with invoked organs (expected {:?})",
            p.root, expected_root
        )));
    }
    Ok(a)
}

/// Iterate every valid joint action in canonical `joint_index` order.
pub fn enumerate_space() -> impl Iterator<Item = JointAction> {
    (0..JOINT_COUNT).map(|i| JointAction::from_joint_index(i).unwrap())
}

/// Count of joint actions with or without the renal-exclusivity constraint.
pub fn joint_count(renal_exclusive: bool) -> usize {
    if renal_exclusive {
        JOINT_COUNT
    } else {
        5 * 5 * 5 * 5 * (5 * 2)
    }
}

/// Hierarchical per-step decision bound O(d * b * k).
pub fn hierarchical_decision_bound(depth: usize, branch: usize, options: usize) -> usize {
    depth * branch * options
}
