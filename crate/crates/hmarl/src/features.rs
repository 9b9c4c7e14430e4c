//! Feature pipeline: raw per-event records -> 4-hour windows -> LOCF
//! imputation -> normalization -> episode store.
//!
//! Window intervals are half-open `[w*window, (w+1)*window)`. Leading
//! missing values (no prior observation) take per-feature population
//! medians from the train split and stay flagged in the mask.
//! Normalization constants are fit on the train split only and reused
//! verbatim for held-out data, so held-out values may fall outside [0, 1];
//! nothing is clamped.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::actions::{ActionSpace, JointAction, Treatment};
use crate::persist::{read_f64s, write_f64s};
use crate::reward::{reward, ClinicalMarkers, Outcome};
use crate::{Error, Result};

pub const EPISODES_FORMAT: &str = "hmarl-episodes-v1";
pub const DEFAULT_WINDOW_MINUTES: u32 = 240;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Binary,
    Normal,
    Lognormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub aggregation: Aggregation,
}

/// Ordered feature list plus the designated raw SOFA / lactate columns the
/// reward reads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
    pub sofa_index: usize,
    pub lactate_index: usize,
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>, sofa_index: usize, lactate_index: usize) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::Schema("schema needs at least 2 features".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for f in &features {
            if !seen.insert(f.name.clone()) {
                return Err(Error::Schema(format!("duplicate feature name {:?}", f.name)));
            }
        }
        if sofa_index >= features.len() || lactate_index >= features.len() {
            return Err(Error::Schema("designated column index out of range".into()));
        }
        Ok(FeatureSchema { features, sofa_index, lactate_index })
    }

    pub fn d(&self) -> usize {
        self.features.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Desk-scale synthetic schema: 12 features (2 binary, 7 normal,
    /// 3 lognormal) standing in for the full 44-feature clinical set.
    pub fn synthetic_default() -> Self {
        let f = |name: &str, kind, aggregation| FeatureSpec { name: name.into(), kind, aggregation };
        FeatureSchema::new(
            vec![
                f("gender", FeatureKind::Binary, Aggregation::Mean),
                f("readmission", FeatureKind::Binary, Aggregation::Mean),
                f("sofa", FeatureKind::Normal, Aggregation::Mean),
                f("neu_score", FeatureKind::Normal, Aggregation::Mean),
                f("car_score", FeatureKind::Normal, Aggregation::Mean),
                f("ren_score", FeatureKind::Normal, Aggregation::Mean),
                f("hr", FeatureKind::Normal, Aggregation::Mean),
                f("map", FeatureKind::Normal, Aggregation::Mean),
                f("temp", FeatureKind::Normal, Aggregation::Mean),
                f("lactate", FeatureKind::Lognormal, Aggregation::Mean),
                f("creatinine", FeatureKind::Lognormal, Aggregation::Mean),
                f("fluid_out", FeatureKind::Lognormal, Aggregation::Sum),
            ],
            2,
            9,
        )
        .unwrap()
    }
}

/// One raw per-event record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawEvent {
    pub patient_id: String,
    pub timestamp_min: f64,
    pub feature: String,
    pub value: f64,
}

/// Per-patient window aggregates with a missingness mask
/// (`true` = observed).
#[derive(Debug, Clone)]
pub struct WindowMatrix {
    pub values: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
}

/// Aggregate one patient's events into fixed windows.
pub fn aggregate_windows(
    events: &[RawEvent],
    schema: &FeatureSchema,
    window_minutes: u32,
) -> Result<WindowMatrix> {
    if window_minutes == 0 {
        return Err(Error::Contract("window_minutes must be > 0".into()));
    }
    let d = schema.d();
    let mut max_window = 0usize;
    let mut indexed = Vec::with_capacity(events.len());
    for ev in events {
        if ev.timestamp_min < 0.0 || !ev.timestamp_min.is_finite() {
            return Err(Error::Data(format!("negative or non-finite timestamp {}", ev.timestamp_min)));
        }
        let col = schema
            .index_of(&ev.feature)
            .ok_or_else(|| Error::Schema(format!("unknown feature {:?}", ev.feature)))?;
        let w = (ev.timestamp_min / window_minutes as f64).floor() as usize;
        max_window = max_window.max(w);
        indexed.push((w, col, ev.value));
    }
    let rows = if events.is_empty() { 0 } else { max_window + 1 };
    let mut sums = vec![vec![0.0; d]; rows];
    let mut counts = vec![vec![0usize; d]; rows];
    for (w, col, v) in indexed {
        sums[w][col] += v;
        counts[w][col] += 1;
    }
    let mut values = vec![vec![0.0; d]; rows];
    let mut mask = vec![vec![false; d]; rows];
    for w in 0..rows {
        for c in 0..d {
            if counts[w][c] > 0 {
                mask[w][c] = true;
                values[w][c] = match schema.features[c].aggregation {
                    Aggregation::Mean => sums[w][c] / counts[w][c] as f64,
                    Aggregation::Sum => sums[w][c],
                };
            }
        }
    }
    Ok(WindowMatrix { values, mask })
}

/// Last-observation-carried-forward. Cells missing before any observation
/// take `defaults` and remain flagged missing in the mask.
pub fn impute_locf(matrix: &mut WindowMatrix, defaults: &[f64]) {
    let rows = matrix.values.len();
    if rows == 0 {
        return;
    }
    let d = matrix.values[0].len();
    for c in 0..d {
        let mut last: Option<f64> = None;
        for r in 0..rows {
            if matrix.mask[r][c] {
                last = Some(matrix.values[r][c]);
            } else {
                matrix.values[r][c] = last.unwrap_or(defaults[c]);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureConstants {
    pub kind: FeatureKind,
    /// Lower anchor: binary low value, normal train min, lognormal log1p min.
    pub a: f64,
    /// Upper anchor.
    pub b: f64,
    /// Train-split population median (raw scale), the LOCF leading-gap default.
    pub median: f64,
    /// Set when the train split had max == min for this feature.
    pub degenerate: bool,
}

/// Per-feature normalization constants fit on the train split; persisted and
/// reused verbatim on held-out data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizationConstants {
    pub format: String,
    pub per_feature: Vec<FeatureConstants>,
}

impl NormalizationConstants {
    /// Fit from raw (imputed) matrices.
    pub fn fit(matrices: &[&WindowMatrix], schema: &FeatureSchema) -> Result<Self> {
        let d = schema.d();
        let mut per_feature = Vec::with_capacity(d);
        for c in 0..d {
            let kind = schema.features[c].kind;
            let mut observed: Vec<f64> = Vec::new();
            for m in matrices {
                for r in 0..m.values.len() {
                    if m.mask[r][c] {
                        observed.push(m.values[r][c]);
                    }
                }
            }
            if observed.is_empty() {
                return Err(Error::Data(format!(
                    "feature {:?} has no observed values in the train split",
                    schema.features[c].name
                )));
            }
            observed.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let median = observed[observed.len() / 2];
            let (a, b) = match kind {
                FeatureKind::Binary => {
                    let lo = observed[0];
                    let hi = observed[observed.len() - 1];
                    let distinct: std::collections::BTreeSet<u64> =
                        observed.iter().map(|v| v.to_bits()).collect();
                    if distinct.len() > 2 {
                        return Err(Error::Data(format!(
                            "binary feature {:?} has {} distinct raw values",
                            schema.features[c].name,
                            distinct.len()
                        )));
                    }
                    (lo, hi)
                }
                FeatureKind::Normal => (observed[0], observed[observed.len() - 1]),
                FeatureKind::Lognormal => {
                    (observed[0].ln_1p(), observed[observed.len() - 1].ln_1p())
                }
            };
            per_feature.push(FeatureConstants { kind, a, b, median, degenerate: a == b });
        }
        Ok(NormalizationConstants { format: "hmarl-normalization-v1".into(), per_feature })
    }

    /// Constants under which `apply` is the identity map.
    pub fn identity(d: usize) -> Self {
        NormalizationConstants {
            format: "hmarl-normalization-v1".into(),
            per_feature: (0..d)
                .map(|_| FeatureConstants {
                    kind: FeatureKind::Normal,
                    a: 0.0,
                    b: 1.0,
                    median: 0.0,
                    degenerate: false,
                })
                .collect(),
        }
    }

    pub fn leading_gap_defaults(&self) -> Vec<f64> {
        self.per_feature.iter().map(|f| f.median).collect()
    }

    fn transform_one(fc: &FeatureConstants, v: f64) -> f64 {
        if fc.degenerate {
            return 0.5;
        }
        match fc.kind {
            FeatureKind::Binary => (v - fc.a) / (fc.b - fc.a) - 0.5,
            FeatureKind::Normal => (v - fc.a) / (fc.b - fc.a),
            FeatureKind::Lognormal => (v.ln_1p() - fc.a) / (fc.b - fc.a),
        }
    }

    /// Normalize a raw matrix in place. Returns warnings for degenerate
    /// features encountered.
    pub fn apply(&self, matrix: &mut WindowMatrix) -> Vec<String> {
        let mut warnings = Vec::new();
        for (c, fc) in self.per_feature.iter().enumerate() {
            if fc.degenerate {
                warnings.push(format!("feature column {c} degenerate (max == min); mapped to 0.5"));
            }
            for row in matrix.values.iter_mut() {
                row[c] = Self::transform_one(fc, row[c]);
            }
        }
        warnings
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for (c, fc) in self.per_feature.iter().enumerate() {
            row[c] = Self::transform_one(fc, row[c]);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// One 4-hour step of an episode, post-pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeFrame {
    /// Normalized feature vector, length d.
    pub x: Vec<f64>,
    /// Raw-scale clinical markers read by the reward.
    pub sofa_raw: u32,
    pub lactate_raw: f64,
    /// `true` = originally observed (not imputed).
    pub observed: Vec<bool>,
    pub action: JointAction,
    pub reward: f64,
    pub terminal: bool,
    pub outcome: Outcome,
    /// Logged behavior probability of `action`, when the generator recorded it.
    pub behavior_prob: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Episode {
    pub patient_id: String,
    pub frames: Vec<EpisodeFrame>,
}

impl Episode {
    pub fn outcome(&self) -> Outcome {
        self.frames.last().map(|f| f.outcome).unwrap_or(Outcome::None)
    }

    pub fn deceased(&self) -> bool {
        self.outcome() == Outcome::Deceased
    }

    /// Empirical discounted return of the logged trajectory.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.frames.iter().enumerate().map(|(t, f)| gamma.powi(t as i32) * f.reward).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (t, f) in self.frames.iter().enumerate() {
            let last = t + 1 == self.frames.len();
            if f.terminal != last {
                return Err(Error::Data(format!(
                    "episode {}: terminal flag must be set exactly on the last frame",
                    self.patient_id
                )));
            }
            if f.terminal != (f.outcome != Outcome::None) {
                return Err(Error::Data(format!(
                    "episode {}: outcome label only on terminal frames",
                    self.patient_id
                )));
            }
            f.action.validate()?;
        }
        Ok(())
    }
}

/// A cohort of episodes plus the schema they follow.
#[derive(Debug, Clone)]
pub struct EpisodeStore {
    pub schema: FeatureSchema,
    pub episodes: Vec<Episode>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeStoreManifest {
    format: String,
    schema: FeatureSchema,
    payload: String,
    episodes: Vec<EpisodeMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeMeta {
    patient_id: String,
    steps: usize,
}

impl EpisodeStore {
    pub fn mortality(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().filter(|e| e.deceased()).count() as f64 / self.episodes.len() as f64
    }

    pub fn mean_length(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.frames.len()).sum::<usize>() as f64
            / self.episodes.len() as f64
    }

    /// Write `{name}.json` + `{name}.bin` under `dir` (format
    /// `hmarl-episodes-v1`).
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let d = self.schema.d();
        // Per step: x(d), sofa, lactate, 6 action levels, reward, terminal,
        // outcome (0 none / 1 survived / 2 deceased), behavior prob (-1 if
        // absent), observed bitmask as a float-encoded integer per chunk of 52.
        let mask_words = d.div_ceil(52);
        let mut payload = Vec::new();
        let mut metas = Vec::new();
        for ep in &self.episodes {
            metas.push(EpisodeMeta { patient_id: ep.patient_id.clone(), steps: ep.frames.len() });
            for f in &ep.frames {
                payload.extend_from_slice(&f.x);
                payload.push(f.sofa_raw as f64);
                payload.push(f.lactate_raw);
                for l in f.action.levels {
                    payload.push(l as f64);
                }
                payload.push(f.reward);
                payload.push(if f.terminal { 1.0 } else { 0.0 });
                payload.push(match f.outcome {
                    Outcome::None => 0.0,
                    Outcome::Survived => 1.0,
                    Outcome::Deceased => 2.0,
                });
                payload.push(f.behavior_prob.unwrap_or(-1.0));
                for w in 0..mask_words {
                    let mut bits: u64 = 0;
                    for j in 0..52 {
                        let idx = w * 52 + j;
                        if idx < d && f.observed[idx] {
                            bits |= 1 << j;
                        }
                    }
                    payload.push(bits as f64);
                }
            }
        }
        write_f64s(&dir.join(format!("{name}.bin")), &payload)?;
        let manifest = EpisodeStoreManifest {
            format: EPISODES_FORMAT.into(),
            schema: self.schema.clone(),
            payload: format!("{name}.bin"),
            episodes: metas,
        };
        fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let manifest: EpisodeStoreManifest =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("{name}.json")))?)?;
        if manifest.format != EPISODES_FORMAT {
            return Err(Error::Format(format!(
                "unsupported episode format {:?}, expected {EPISODES_FORMAT}",
                manifest.format
            )));
        }
        let values = read_f64s(&dir.join(&manifest.payload))?;
        let d = manifest.schema.d();
        let mask_words = d.div_ceil(52);
        let frame_width = d + 2 + 6 + 3 + 1 + mask_words;
        let mut off = 0usize;
        let mut episodes = Vec::with_capacity(manifest.episodes.len());
        for meta in &manifest.episodes {
            let mut frames = Vec::with_capacity(meta.steps);
            for _ in 0..meta.steps {
                if off + frame_width > values.len() {
                    return Err(Error::Format("episode payload truncated".into()));
                }
                let row = &values[off..off + frame_width];
                off += frame_width;
                let x = row[..d].to_vec();
                let sofa_raw = row[d] as u32;
                let lactate_raw = row[d + 1];
                let mut levels = [0u8; 6];
                for (i, l) in levels.iter_mut().enumerate() {
                    *l = row[d + 2 + i] as u8;
                }
                let rew = row[d + 8];
                let terminal = row[d + 9] != 0.0;
                let outcome = match row[d + 10] as u8 {
                    1 => Outcome::Survived,
                    2 => Outcome::Deceased,
                    _ => Outcome::None,
                };
                let bp = row[d + 11];
                let behavior_prob = if bp < 0.0 { None } else { Some(bp) };
                let mut observed = vec![false; d];
                for w in 0..mask_words {
                    let bits = row[d + 12 + w] as u64;
                    for j in 0..52 {
                        let idx = w * 52 + j;
                        if idx < d {
                            observed[idx] = bits & (1 << j) != 0;
                        }
                    }
                }
                frames.push(EpisodeFrame {
                    x,
                    sofa_raw,
                    lactate_raw,
                    observed,
                    action: JointAction { levels },
                    reward: rew,
                    terminal,
                    outcome,
                    behavior_prob,
                });
            }
            episodes.push(Episode { patient_id: meta.patient_id.clone(), frames });
        }
        if off != values.len() {
            return Err(Error::Format("episode payload has trailing data".into()));
        }
        let store = EpisodeStore { schema: manifest.schema, episodes };
        for ep in &store.episodes {
            ep.validate()?;
        }
        Ok(store)
    }
}

/// One row of the actions CSV.
#[derive(Debug, Deserialize)]
struct ActionRow {
    patient_id: String,
    step: usize,
    s1: f64,
    s2: f64,
    iv: f64,
    vaso: f64,
    diuretic: f64,
    dialysis: f64,
    terminal: u8,
    outcome: String,
    #[serde(default)]
    behavior_prob: Option<f64>,
}

/// Build an episode store from the two CSV inputs. When `constants` is
/// `None`, normalization constants are fit from this data (train split) and
/// returned; otherwise the supplied constants are reused verbatim.
pub fn build_episodes(
    events_csv: &Path,
    actions_csv: &Path,
    schema: &FeatureSchema,
    space: &ActionSpace,
    constants: Option<NormalizationConstants>,
    window_minutes: u32,
    terminal_r: f64,
) -> Result<(EpisodeStore, NormalizationConstants)> {
    // Group events by patient, preserving first-seen patient order.
    let mut by_patient: BTreeMap<String, Vec<RawEvent>> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(events_csv)?;
    for rec in rdr.deserialize::<RawEvent>() {
        let ev = rec?;
        by_patient.entry(ev.patient_id.clone()).or_default().push(ev);
    }

    let mut actions: BTreeMap<String, Vec<ActionRow>> = BTreeMap::new();
    let mut ardr = csv::Reader::from_path(actions_csv)?;
    for rec in ardr.deserialize::<ActionRow>() {
        let row = rec?;
        actions.entry(row.patient_id.clone()).or_default().push(row);
    }

    // Aggregate all patients first so constants can be fit before imputation
    // defaults are needed; medians come from observed cells only.
    let mut matrices: BTreeMap<String, WindowMatrix> = BTreeMap::new();
    for (pid, events) in &by_patient {
        matrices.insert(pid.clone(), aggregate_windows(events, schema, window_minutes)?);
    }
    let constants = match constants {
        Some(c) => c,
        None => {
            let refs: Vec<&WindowMatrix> = matrices.values().collect();
            NormalizationConstants::fit(&refs, schema)?
        }
    };
    let defaults = constants.leading_gap_defaults();

    let mut episodes = Vec::new();
    for (pid, mut matrix) in matrices {
        let rows = actions
            .remove(&pid)
            .ok_or_else(|| Error::Data(format!("no actions for patient {pid}")))?;
        impute_locf(&mut matrix, &defaults);
        let steps = rows.len().min(matrix.values.len());
        if steps == 0 {
            continue;
        }
        // Raw markers before normalization.
        let markers: Vec<(u32, f64)> = (0..steps)
            .map(|t| {
                (
                    matrix.values[t][schema.sofa_index].round().max(0.0) as u32,
                    matrix.values[t][schema.lactate_index],
                )
            })
            .collect();
        let mask = matrix.mask.clone();
        constants.apply(&mut matrix);

        let mut frames = Vec::with_capacity(steps);
        for (t, row) in rows.iter().take(steps).enumerate() {
            if row.step != t {
                return Err(Error::Data(format!(
                    "patient {pid}: action steps not contiguous at {t}"
                )));
            }
            let action = JointAction::new([
                space.discretize(Treatment::S1, row.s1)?,
                space.discretize(Treatment::S2, row.s2)?,
                space.discretize(Treatment::Iv, row.iv)?,
                space.discretize(Treatment::Vaso, row.vaso)?,
                space.discretize(Treatment::Diuretic, row.diuretic)?,
                space.discretize(Treatment::Dialysis, row.dialysis)?,
            ])?;
            let terminal = row.terminal != 0 || t + 1 == steps;
            let outcome = match (terminal, row.outcome.as_str()) {
                (true, "survived") => Outcome::Survived,
                (true, "deceased") => Outcome::Deceased,
                (true, other) => {
                    return Err(Error::Data(format!(
                        "patient {pid}: terminal frame needs outcome, got {other:?}"
                    )))
                }
                (false, _) => Outcome::None,
            };
            let (sofa, lactate) = markers[t];
            let prev = if t == 0 { markers[0] } else { markers[t - 1] };
            let prev_m = ClinicalMarkers::intermediate(prev.0, prev.1);
            let next_m = ClinicalMarkers {
                sofa,
                lactate,
                terminal,
                outcome,
            };
            let r = reward(&prev_m, &next_m, terminal_r)?;
            frames.push(EpisodeFrame {
                x: matrix.values[t].clone(),
                sofa_raw: sofa,
                lactate_raw: lactate,
                observed: mask[t].clone(),
                action,
                reward: r,
                terminal,
                outcome,
                behavior_prob: row.behavior_prob.filter(|p| *p > 0.0),
            });
        }
        let ep = Episode { patient_id: pid, frames };
        ep.validate()?;
        episodes.push(ep);
    }
    Ok((EpisodeStore { schema: schema.clone(), episodes }, constants))
}
