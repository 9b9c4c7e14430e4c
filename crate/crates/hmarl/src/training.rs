//! Two-phase offline training orchestration.
//!
//! Phase 1 trains the hierarchy bottom-sensitive, top-first: the root learns
//! its embedding table end-to-end; each organ master fine-tunes a copy of
//! that table; treatment leaves, intra-organ mixture agents (with sibling
//! communication) and the cooperatively-mixed cross-organ agents follow.
//! Phase 2 retrains only the root, with targets supplied by the now-frozen
//! lower agents (hash-checked).
//!
//! Every agent trains only on samples from its own action subspace; routing
//! is derived from the hierarchy decomposition of the logged action.
//! Communication inputs use the clinician's logged sibling/peer dosages
//! during training (teacher forcing) and peer-agent greedy outputs at
//! inference.
//!
//! Training is single-threaded and seeded: the same config and dataset give
//! bit-identical parameters.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actions::{
    decompose, CarOption, HierarchyPath, JointAction, NeuOption, Organ, RenOption, RootOption,
};
use crate::agents::{
    greedy_option, mix_communicated_state, mix_option_index, mix_option_levels,
    omix_communicated_state, qmix_argmax, root_q_target, AgentId, AgentSet, AgentSpec,
    RootTargetInputs,
};
use crate::features::EpisodeStore;
use crate::numerics::GradientTape;
use crate::persist::params_sha256;
use crate::state_repr::{EmbeddingTable, LevelTag};
use crate::{Error, Result};

/// Batch-mean loss above which a stage aborts as diverged.
const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard target-network sync period, in batch steps.
    pub target_sync: usize,
    pub seed: u64,
    pub k: usize,
    pub terminal_r: f64,
    /// Hidden widths of every Q-network.
    pub hidden: Vec<usize>,
    pub mixer_hidden: usize,
    pub hyper_hidden: usize,
    pub no_communication: bool,
    pub no_state_repr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 2e-3,
            gamma: 0.99,
            batch_size: 64,
            epochs: 20,
            target_sync: 100,
            seed: 7,
            k: 8,
            terminal_r: 10.0,
            hidden: vec![32],
            mixer_hidden: 8,
            hyper_hidden: 16,
            no_communication: false,
            no_state_repr: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.gamma && self.gamma <= 1.0) {
            return Err(Error::Contract(format!("gamma {} out of (0, 1]", self.gamma)));
        }
        if !(0.0 < self.alpha && self.alpha <= 1.0) {
            return Err(Error::Contract(format!("alpha {} out of (0, 1]", self.alpha)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.target_sync == 0 {
            return Err(Error::Contract(
                "batch_size, epochs and target_sync must be >= 1".into(),
            ));
        }
        if self.k == 0 {
            return Err(Error::Contract("k must be >= 1".into()));
        }
        Ok(())
    }

    /// Upper bound on any feasible discounted return (and therefore on any
    /// true action value). The terminal reward contributes +-terminal_r and
    /// the per-step shaping penalties are small fractions of it, so
    /// 4 * terminal_r comfortably contains every achievable return; the
    /// discount-series bound terminal_r / (1 - gamma) caps it for small
    /// gamma. Bootstrap targets are clamped to this range, which cannot bias
    /// a correct fixed point but stops max-bias runaway.
    pub fn target_bound(&self) -> f64 {
        (4.0 * self.terminal_r).min(self.terminal_r / (1.0 - self.gamma))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn sha256(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        Ok(hex::encode(h.finalize()))
    }
}

/// Observation context at one step: the normalized feature row and up to
/// three previous rows (oldest first).
#[derive(Debug, Clone, PartialEq)]
pub struct StateBundle {
    pub x: Vec<f64>,
    pub history: Vec<Vec<f64>>,
}

impl StateBundle {
    fn history_refs(&self) -> Vec<&[f64]> {
        self.history.iter().map(|v| v.as_slice()).collect()
    }
}

/// One offline transition with its hierarchy decomposition.
#[derive(Debug, Clone)]
pub struct TransitionRecord {
    pub s: StateBundle,
    pub s_next: StateBundle,
    pub action: JointAction,
    /// The clinician's next logged action (teacher-forced peer inputs for
    /// next-state targets); absent on terminal transitions.
    pub action_next: Option<JointAction>,
    pub path: HierarchyPath,
    pub reward: f64,
    pub terminal: bool,
    pub behavior_prob: Option<f64>,
}

/// Flatten an episode store into per-step transitions with history windows.
pub fn transitions_from_store(store: &EpisodeStore) -> Result<Vec<TransitionRecord>> {
    let mut out = Vec::new();
    for ep in &store.episodes {
        ep.validate()?;
        for t in 0..ep.frames.len() {
            let f = &ep.frames[t];
            let hist = |upto: usize| -> Vec<Vec<f64>> {
                let lo = upto.saturating_sub(3);
                (lo..upto).map(|i| ep.frames[i].x.clone()).collect()
            };
            let s = StateBundle { x: f.x.clone(), history: hist(t) };
            let (s_next, action_next) = if f.terminal {
                (s.clone(), None)
            } else {
                let nf = &ep.frames[t + 1];
                (
                    StateBundle { x: nf.x.clone(), history: hist(t + 1) },
                    Some(nf.action),
                )
            };
            out.push(TransitionRecord {
                s,
                s_next,
                action: f.action,
                action_next,
                path: decompose(&f.action)?,
                reward: f.reward,
                terminal: f.terminal,
                behavior_prob: f.behavior_prob,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sample routing
// ---------------------------------------------------------------------------

/// Per-agent training subsets (indices into the transition list). Sibling
/// leaf subsets are disjoint by construction; communication inputs for
/// mixture agents come from the sample itself (teacher forcing), so the
/// single-treatment agents are input providers, not trainees, there.
#[derive(Debug, Clone, Default)]
pub struct RoutedSamples {
    pub rt: Vec<usize>,
    pub neu: Vec<usize>,
    pub car: Vec<usize>,
    pub ren: Vec<usize>,
    pub neu_s1: Vec<usize>,
    pub neu_s2: Vec<usize>,
    pub neu_mix: Vec<usize>,
    pub car_iv: Vec<usize>,
    pub car_vaso: Vec<usize>,
    pub car_mix: Vec<usize>,
    /// Cross-organ samples: the mixing network trains on all of these.
    pub omix: Vec<usize>,
    pub omix_neu: Vec<usize>,
    pub omix_car: Vec<usize>,
    pub omix_ren: Vec<usize>,
}

impl RoutedSamples {
    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        m.insert("Rt".into(), self.rt.len());
        m.insert("Neu".into(), self.neu.len());
        m.insert("Car".into(), self.car.len());
        m.insert("Ren".into(), self.ren.len());
        m.insert("Neu.S1".into(), self.neu_s1.len());
        m.insert("Neu.S2".into(), self.neu_s2.len());
        m.insert("Neu.Mix".into(), self.neu_mix.len());
        m.insert("Car.IV".into(), self.car_iv.len());
        m.insert("Car.Vaso".into(), self.car_vaso.len());
        m.insert("Car.Mix".into(), self.car_mix.len());
        m.insert("OMix".into(), self.omix.len());
        m.insert("OMix.Neu".into(), self.omix_neu.len());
        m.insert("OMix.Car".into(), self.omix_car.len());
        m.insert("OMix.Ren".into(), self.omix_ren.len());
        m
    }
}

pub fn route_samples(data: &[TransitionRecord]) -> Result<RoutedSamples> {
    let mut r = RoutedSamples::default();
    for (i, rec) in data.iter().enumerate() {
        r.rt.push(i);
        match rec.path.root {
            RootOption::NoAction => {}
            RootOption::Neu => {
                r.neu.push(i);
                match rec.path.neu.expect("Neu root implies a Neu option") {
                    NeuOption::S1(_) => r.neu_s1.push(i),
                    NeuOption::S2(_) => r.neu_s2.push(i),
                    NeuOption::Mix { .. } => r.neu_mix.push(i),
                }
            }
            RootOption::Car => {
                r.car.push(i);
                match rec.path.car.expect("Car root implies a Car option") {
                    CarOption::Iv(_) => r.car_iv.push(i),
                    CarOption::Vaso(_) => r.car_vaso.push(i),
                    CarOption::Mix { .. } => r.car_mix.push(i),
                }
            }
            RootOption::Ren => r.ren.push(i),
            RootOption::OMix => {
                r.omix.push(i);
                if rec.path.neu.is_some() {
                    r.omix_neu.push(i);
                }
                if rec.path.car.is_some() {
                    r.omix_car.push(i);
                }
                if rec.path.ren.is_some() {
                    r.omix_ren.push(i);
                }
            }
        }
    }
    Ok(r)
}

// ---------------------------------------------------------------------------
// State construction
// ---------------------------------------------------------------------------

fn s_rt(set: &AgentSet, b: &StateBundle) -> Result<Vec<f64>> {
    if set.no_state_repr {
        return Ok(b.x.clone());
    }
    set.e_rt.state(&b.x, &b.history_refs())
}

fn organ_table<'a>(set: &'a AgentSet, organ: Organ) -> &'a EmbeddingTable {
    match organ {
        Organ::Neu => &set.e_neu,
        Organ::Car => &set.e_car,
        Organ::Ren => &set.e_ren,
    }
}

fn s_organ(set: &AgentSet, organ: Organ, b: &StateBundle) -> Result<Vec<f64>> {
    if set.no_state_repr {
        return Ok(b.x.clone());
    }
    organ_table(set, organ).state(&b.x, &b.history_refs())
}

fn s_omix(set: &AgentSet, b: &StateBundle) -> Result<Vec<f64>> {
    if set.no_state_repr {
        return Ok(b.x.clone());
    }
    let mut s = s_organ(set, Organ::Neu, b)?;
    s.extend(s_organ(set, Organ::Car, b)?);
    s.extend(s_organ(set, Organ::Ren, b)?);
    Ok(s)
}

// ---------------------------------------------------------------------------
// Option extraction per agent
// ---------------------------------------------------------------------------

pub(crate) fn neu_master_option(p: &HierarchyPath) -> usize {
    match p.neu.expect("routed Neu sample") {
        NeuOption::S1(_) => 0,
        NeuOption::S2(_) => 1,
        NeuOption::Mix { .. } => 2,
    }
}

pub(crate) fn car_master_option(p: &HierarchyPath) -> usize {
    match p.car.expect("routed Car sample") {
        CarOption::Iv(_) => 0,
        CarOption::Vaso(_) => 1,
        CarOption::Mix { .. } => 2,
    }
}

pub(crate) fn ren_master_option(p: &HierarchyPath) -> usize {
    match p.ren.expect("routed Ren sample") {
        RenOption::Diuretic(l) => (l - 1) as usize,
        RenOption::Dialysis => 4,
    }
}

/// Sibling levels for an intra-organ mixture agent's communication slots.
fn mix_sibling_levels(organ: Organ, a: &JointAction) -> [u8; 2] {
    match organ {
        Organ::Neu => [a.levels[0], a.levels[1]],
        Organ::Car => [a.levels[2], a.levels[3]],
        Organ::Ren => unreachable!("Ren has no intra-organ mixture agent"),
    }
}

// ---------------------------------------------------------------------------
// Train log and run manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// Per-epoch mean squared TD error, per agent.
    pub curves: BTreeMap<String, Vec<f64>>,
    pub sample_counts: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    format: String,
    seed: u64,
    config_sha256: String,
    sample_counts: BTreeMap<String, usize>,
    warnings: Vec<String>,
    curves: BTreeMap<String, String>,
}

/// Write `run.json` plus one loss-curve CSV per agent under `curves/`.
pub fn write_run_manifest(dir: &Path, cfg: &TrainConfig, log: &TrainLog) -> Result<()> {
    let curve_dir = dir.join("curves");
    fs::create_dir_all(&curve_dir)?;
    let mut curve_files = BTreeMap::new();
    for (agent, losses) in &log.curves {
        let file = format!("curves/{agent}_loss.csv");
        let mut w = csv::Writer::from_path(dir.join(&file))?;
        w.write_record(["epoch", "loss"])?;
        for (e, l) in losses.iter().enumerate() {
            w.write_record([format!("{e}"), format!("{l}")])?;
        }
        w.flush()?;
        curve_files.insert(agent.clone(), file);
    }
    let manifest = RunManifest {
        format: "hmarl-run-v1".to_string(),
        seed: cfg.seed,
        config_sha256: cfg.sha256()?,
        sample_counts: log.sample_counts.clone(),
        warnings: log.warnings.clone(),
        curves: curve_files,
    };
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Phase-1 training
// ---------------------------------------------------------------------------

fn max_q(qs: &[f64]) -> f64 {
    qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// A fully materialized training sample in one agent's own input space.
struct Sample {
    s: Vec<f64>,
    a: usize,
    r: f64,
    s_next: Vec<f64>,
    terminal: bool,
}

/// Plain TD(0) minibatch loop over precomputed samples.
fn td_loop(
    agent: &mut AgentSpec,
    samples: &[Sample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut tape = GradientTape::new(&agent.online);
    let mut steps = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            tape.reset();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let smp = &samples[i];
                let b = cfg.target_bound();
                let y = if smp.terminal {
                    smp.r
                } else {
                    (smp.r + cfg.gamma * max_q(&agent.q_values_target(&smp.s_next)?))
                        .clamp(-b, b)
                };
                if !y.is_finite() {
                    return Err(Error::Numeric(format!(
                        "{}: non-finite TD target",
                        agent.id.name()
                    )));
                }
                let q = agent.online.forward_taped(&smp.s, &mut tape)?;
                let err = q[smp.a] - y;
                batch_loss += 0.5 * err * err;
                let mut out_grad = vec![0.0; agent.options];
                // Clip the TD error on the gradient path (Huber-style) so a
                // single outlier target cannot blow up the step size; the
                // reported loss stays unclipped for divergence detection.
                out_grad[smp.a] = err.clamp(-cfg.terminal_r, cfg.terminal_r);
                agent.online.backward(&mut tape, &out_grad)?;
            }
            batch_loss /= chunk.len() as f64;
            if batch_loss > DIVERGENCE_LOSS {
                return Err(Error::Numeric(format!(
                    "{} diverged: batch loss {batch_loss}",
                    agent.id.name()
                )));
            }
            tape.scale(1.0 / chunk.len() as f64);
            agent.online.sgd_step(&tape, cfg.alpha)?;
            steps += 1;
            if steps % cfg.target_sync == 0 {
                agent.sync_target()?;
            }
            epoch_loss += batch_loss * chunk.len() as f64;
        }
        curve.push(epoch_loss / samples.len().max(1) as f64);
    }
    agent.sync_target()?;
    Ok(curve)
}

/// TD(0) loop that also fine-tunes the embedding table producing the
/// states, using the closed-form table gradient.
#[allow(clippy::too_many_arguments)]
fn td_loop_with_embedding(
    agent: &mut AgentSpec,
    table: &mut EmbeddingTable,
    idx: &[usize],
    data: &[TransitionRecord],
    option_of: &dyn Fn(&TransitionRecord) -> usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = idx.to_vec();
    let mut tape = GradientTape::new(&agent.online);
    let mut steps = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            tape.reset();
            let mut table_grad = vec![0.0; table.d * table.k];
            let mut batch_loss = 0.0;
            for &i in chunk {
                let rec = &data[i];
                let hist = rec.s.history_refs();
                let s = table.state(&rec.s.x, &hist)?;
                let b = cfg.target_bound();
                let y = if rec.terminal {
                    rec.reward
                } else {
                    let s_next = table.state(&rec.s_next.x, &rec.s_next.history_refs())?;
                    (rec.reward + cfg.gamma * max_q(&agent.q_values_target(&s_next)?))
                        .clamp(-b, b)
                };
                if !y.is_finite() {
                    return Err(Error::Numeric(format!(
                        "{}: non-finite TD target",
                        agent.id.name()
                    )));
                }
                let a = option_of(rec);
                let q = agent.online.forward_taped(&s, &mut tape)?;
                let err = q[a] - y;
                batch_loss += 0.5 * err * err;
                let mut out_grad = vec![0.0; agent.options];
                out_grad[a] = err.clamp(-cfg.terminal_r, cfg.terminal_r);
                let input_grad = agent.online.backward(&mut tape, &out_grad)?;
                let tg = table.state_grad(&rec.s.x, &hist, &input_grad)?;
                for (acc, g) in table_grad.iter_mut().zip(tg.iter()) {
                    *acc += g;
                }
            }
            batch_loss /= chunk.len() as f64;
            if batch_loss > DIVERGENCE_LOSS {
                return Err(Error::Numeric(format!(
                    "{} diverged: batch loss {batch_loss}",
                    agent.id.name()
                )));
            }
            let scale = 1.0 / chunk.len() as f64;
            tape.scale(scale);
            agent.online.sgd_step(&tape, cfg.alpha)?;
            table_grad.iter_mut().for_each(|g| *g *= scale);
            table.apply_grad(&table_grad, cfg.alpha)?;
            steps += 1;
            if steps % cfg.target_sync == 0 {
                agent.sync_target()?;
            }
            epoch_loss += batch_loss * chunk.len() as f64;
        }
        curve.push(epoch_loss / order.len().max(1) as f64);
    }
    agent.sync_target()?;
    Ok(curve)
}

/// Run one plain-TD stage for `id`: materialize its samples, train, log.
fn run_stage(
    set: &mut AgentSet,
    id: AgentId,
    idx: &[usize],
    data: &[TransitionRecord],
    option_of: &dyn Fn(&TransitionRecord) -> usize,
    state_of: &dyn Fn(&AgentSet, &TransitionRecord) -> Result<(Vec<f64>, Vec<f64>)>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
) -> Result<()> {
    if idx.is_empty() {
        log.warnings.push(format!("{}: no routed samples, agent skipped", id.name()));
        set.skipped.push(id);
        return Ok(());
    }
    let mut samples = Vec::with_capacity(idx.len());
    for &i in idx {
        let rec = &data[i];
        let (s, s_next) = state_of(set, rec)?;
        samples.push(Sample {
            s,
            a: option_of(rec),
            r: rec.reward,
            s_next,
            terminal: rec.terminal,
        });
    }
    let mut agent = set
        .agents
        .remove(&id)
        .ok_or_else(|| Error::Contract(format!("agent {} missing", id.name())))?;
    let curve = td_loop(&mut agent, &samples, cfg, rng);
    set.agents.insert(id, agent);
    log.curves.insert(id.name().to_string(), curve?);
    Ok(())
}

/// Embedding-fine-tuning stage (root and organ masters).
#[allow(clippy::too_many_arguments)]
fn run_embedding_stage(
    set: &mut AgentSet,
    id: AgentId,
    level: LevelTag,
    idx: &[usize],
    data: &[TransitionRecord],
    option_of: &dyn Fn(&TransitionRecord) -> usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
) -> Result<()> {
    if idx.is_empty() {
        log.warnings.push(format!("{}: no routed samples, agent skipped", id.name()));
        set.skipped.push(id);
        return Ok(());
    }
    let mut agent = set
        .agents
        .remove(&id)
        .ok_or_else(|| Error::Contract(format!("agent {} missing", id.name())))?;
    let curve = if set.no_state_repr {
        // Raw-features ablation: no table to fine-tune.
        let mut samples = Vec::with_capacity(idx.len());
        for &i in idx {
            let rec = &data[i];
            samples.push(Sample {
                s: rec.s.x.clone(),
                a: option_of(rec),
                r: rec.reward,
                s_next: rec.s_next.x.clone(),
                terminal: rec.terminal,
            });
        }
        td_loop(&mut agent, &samples, cfg, rng)
    } else {
        let table = match level {
            LevelTag::Rt => &mut set.e_rt,
            LevelTag::Neu => &mut set.e_neu,
            LevelTag::Car => &mut set.e_car,
            LevelTag::Ren => &mut set.e_ren,
        };
        td_loop_with_embedding(&mut agent, table, idx, data, option_of, cfg, rng)
    };
    set.agents.insert(id, agent);
    log.curves.insert(id.name().to_string(), curve?);
    Ok(())
}

/// Cooperative cross-organ stage: the three sub-agents share one TD loss on
/// the mixed value.
fn run_omix_stage(
    set: &mut AgentSet,
    routed: &RoutedSamples,
    data: &[TransitionRecord],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
) -> Result<()> {
    if routed.omix.is_empty() {
        for id in [AgentId::OMixNeu, AgentId::OMixCar, AgentId::OMixRen] {
            log.warnings.push(format!("{}: no routed samples, agent skipped", id.name()));
            set.skipped.push(id);
        }
        return Ok(());
    }
    // Materialize communicated states and organ codes; embeddings are
    // frozen at this stage, so states are static.
    struct OmixSample {
        s_shared: Vec<f64>,
        s_sub: [Vec<f64>; 3],
        s_shared_next: Vec<f64>,
        s_sub_next: [Vec<f64>; 3],
        codes: [usize; 3],
        r: f64,
        terminal: bool,
    }
    let organs = [Organ::Neu, Organ::Car, Organ::Ren];
    let mut samples = Vec::with_capacity(routed.omix.len());
    for &i in &routed.omix {
        let rec = &data[i];
        let shared = s_omix(set, &rec.s)?;
        let (n, c, rn) = rec.action.organ_codes();
        let codes = [n, c, rn];
        let sub = |shared: &[f64], codes: [usize; 3]| -> Result<[Vec<f64>; 3]> {
            let mk = |o: Organ| {
                omix_communicated_state(o, shared, codes, set.no_communication)
                    .map(|cs| cs.data)
            };
            Ok([mk(Organ::Neu)?, mk(Organ::Car)?, mk(Organ::Ren)?])
        };
        let s_sub = sub(&shared, codes)?;
        let (shared_next, s_sub_next) = if rec.terminal {
            (shared.clone(), s_sub.clone())
        } else {
            let sn = s_omix(set, &rec.s_next)?;
            let next_codes = rec
                .action_next
                .map(|a| {
                    let (n, c, r) = a.organ_codes();
                    [n, c, r]
                })
                .unwrap_or([0, 0, 0]);
            let subs = sub(&sn, next_codes)?;
            (sn, subs)
        };
        samples.push(OmixSample {
            s_shared: shared,
            s_sub,
            s_shared_next: shared_next,
            s_sub_next,
            codes,
            r: rec.reward,
            terminal: rec.terminal,
        });
    }

    let mut subs: Vec<AgentSpec> = [AgentId::OMixNeu, AgentId::OMixCar, AgentId::OMixRen]
        .iter()
        .map(|id| {
            set.agents
                .remove(id)
                .ok_or_else(|| Error::Contract(format!("agent {} missing", id.name())))
        })
        .collect::<Result<_>>()?;
    let mut mixer = set.mixer.clone();
    let mut mixer_target = mixer.clone();
    let mut mixer_tapes = mixer.tapes();
    let mut sub_tapes: Vec<GradientTape> =
        subs.iter().map(|a| GradientTape::new(&a.online)).collect();

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;
    let mut result = Ok(());
    'train: for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            mixer_tapes.reset();
            for t in sub_tapes.iter_mut() {
                t.reset();
            }
            let mut batch_loss = 0.0;
            for &si in chunk {
                let smp = &samples[si];
                let y = if smp.terminal {
                    smp.r
                } else {
                    // Double-Q: factored greedy selection under the online
                    // networks, evaluation under the targets. Selecting and
                    // evaluating with the same networks inflates the mixed
                    // value through max bias.
                    let qo: Vec<Vec<f64>> = (0..3)
                        .map(|o| subs[o].q_values(&smp.s_sub_next[o]))
                        .collect::<Result<_>>()?;
                    let next_codes =
                        qmix_argmax(&mixer, &smp.s_shared_next, &qo[0], &qo[1], &qo[2])?;
                    let next_sub = [
                        subs[0].q_values_target(&smp.s_sub_next[0])?[next_codes[0]],
                        subs[1].q_values_target(&smp.s_sub_next[1])?[next_codes[1]],
                        subs[2].q_values_target(&smp.s_sub_next[2])?[next_codes[2]],
                    ];
                    smp.r + cfg.gamma * mixer_target.forward(&next_sub, &smp.s_shared_next)?
                };
                let b = cfg.target_bound();
                let y = y.clamp(-b, b);
                if !y.is_finite() {
                    result = Err(Error::Numeric("OMix: non-finite TD target".into()));
                    break 'train;
                }
                // Shared loss on the mixed value at the logged organ codes.
                let sub_q = [
                    subs[0].q_values(&smp.s_sub[0])?[smp.codes[0]],
                    subs[1].q_values(&smp.s_sub[1])?[smp.codes[1]],
                    subs[2].q_values(&smp.s_sub[2])?[smp.codes[2]],
                ];
                let q_tot = mixer.forward(&sub_q, &smp.s_shared)?;
                let err = q_tot - y;
                batch_loss += 0.5 * err * err;
                // The hypernet gradients scale with err·Q; clipping the TD
                // error bounds them and keeps the mixing stage stable.
                let err_g = err.clamp(-cfg.terminal_r, cfg.terminal_r);
                let dq = mixer.accumulate(&sub_q, &smp.s_shared, err_g, &mut mixer_tapes)?;
                for o in 0..organs.len() {
                    // Every sub-agent receives the cooperative gradient at
                    // its logged code — including code 0 (organ untreated) —
                    // so the "none" entries are trained and the greedy
                    // argmax never reads values left at initialization.
                    subs[o].online.forward_taped(&smp.s_sub[o], &mut sub_tapes[o])?;
                    let mut og = vec![0.0; subs[o].options];
                    og[smp.codes[o]] = dq[o];
                    subs[o].online.backward(&mut sub_tapes[o], &og)?;
                }
            }
            batch_loss /= chunk.len() as f64;
            if batch_loss > DIVERGENCE_LOSS {
                result = Err(Error::Numeric(format!("OMix diverged: batch loss {batch_loss}")));
                break 'train;
            }
            let scale = 1.0 / chunk.len() as f64;
            mixer_tapes.scale(scale);
            mixer.apply(&mixer_tapes, 0.5 * cfg.alpha)?;
            for (o, t) in sub_tapes.iter_mut().enumerate() {
                t.scale(scale);
                subs[o].online.sgd_step(t, 0.5 * cfg.alpha)?;
            }
            steps += 1;
            if steps % cfg.target_sync == 0 {
                for a in subs.iter_mut() {
                    a.sync_target()?;
                }
                mixer_target = mixer.clone();
            }
            epoch_loss += batch_loss * chunk.len() as f64;
        }
        curve.push(epoch_loss / samples.len() as f64);
    }
    for a in subs.iter_mut() {
        a.sync_target()?;
    }
    set.mixer = mixer;
    for (id, a) in [AgentId::OMixNeu, AgentId::OMixCar, AgentId::OMixRen]
        .into_iter()
        .zip(subs.into_iter())
    {
        set.agents.insert(id, a);
    }
    result?;
    log.curves.insert("OMix".to_string(), curve);
    Ok(())
}

fn rec_organ_active(codes: [usize; 3], organ: Organ) -> bool {
    codes[organ as usize] != 0
}

/// Phase 1: train the full hierarchy, root first, on routed subsets.
pub fn train_phase1(data: &[TransitionRecord], cfg: &TrainConfig) -> Result<(AgentSet, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no training transitions".into()));
    }
    let d = data[0].s.x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut set = AgentSet::init(
        cfg.k,
        d,
        cfg.no_communication,
        cfg.no_state_repr,
        &cfg.hidden,
        cfg.mixer_hidden,
        cfg.hyper_hidden,
        &mut rng,
    )?;
    let routed = route_samples(data)?;
    let mut log = TrainLog {
        sample_counts: routed.counts(),
        ..Default::default()
    };

    // Root first: it learns the shared embedding end-to-end.
    run_embedding_stage(
        &mut set,
        AgentId::Rt,
        LevelTag::Rt,
        &routed.rt,
        data,
        &|rec| rec.path.root.index(),
        cfg,
        &mut rng,
        &mut log,
    )?;

    // Organ masters fine-tune fresh copies of the trained root table.
    set.e_neu = set.e_rt.retagged(LevelTag::Neu);
    set.e_car = set.e_rt.retagged(LevelTag::Car);
    set.e_ren = set.e_rt.retagged(LevelTag::Ren);
    run_embedding_stage(
        &mut set,
        AgentId::Neu,
        LevelTag::Neu,
        &routed.neu,
        data,
        &|rec| neu_master_option(&rec.path),
        cfg,
        &mut rng,
        &mut log,
    )?;
    run_embedding_stage(
        &mut set,
        AgentId::Car,
        LevelTag::Car,
        &routed.car,
        data,
        &|rec| car_master_option(&rec.path),
        cfg,
        &mut rng,
        &mut log,
    )?;
    run_embedding_stage(
        &mut set,
        AgentId::Ren,
        LevelTag::Ren,
        &routed.ren,
        data,
        &|rec| ren_master_option(&rec.path),
        cfg,
        &mut rng,
        &mut log,
    )?;

    // Treatment leaves (levels 1..=4 -> options 0..=3).
    let leaf_level = |t_axis: usize| {
        move |rec: &TransitionRecord| (rec.action.levels[t_axis] - 1) as usize
    };
    let organ_states = |organ: Organ| {
        move |set: &AgentSet, rec: &TransitionRecord| -> Result<(Vec<f64>, Vec<f64>)> {
            Ok((s_organ(set, organ, &rec.s)?, s_organ(set, organ, &rec.s_next)?))
        }
    };
    run_stage(
        &mut set,
        AgentId::NeuS1,
        &routed.neu_s1,
        data,
        &leaf_level(0),
        &organ_states(Organ::Neu),
        cfg,
        &mut rng,
        &mut log,
    )?;
    run_stage(
        &mut set,
        AgentId::NeuS2,
        &routed.neu_s2,
        data,
        &leaf_level(1),
        &organ_states(Organ::Neu),
        cfg,
        &mut rng,
        &mut log,
    )?;
    run_stage(
        &mut set,
        AgentId::CarIv,
        &routed.car_iv,
        data,
        &leaf_level(2),
        &organ_states(Organ::Car),
        cfg,
        &mut rng,
        &mut log,
    )?;
    run_stage(
        &mut set,
        AgentId::CarVaso,
        &routed.car_vaso,
        data,
        &leaf_level(3),
        &organ_states(Organ::Car),
        cfg,
        &mut rng,
        &mut log,
    )?;

    // Intra-organ mixtures: sibling dosages appended (teacher forcing with
    // the clinician's logged levels; next-state peers from the next logged
    // action).
    let mix_states = |organ: Organ| {
        move |set: &AgentSet, rec: &TransitionRecord| -> Result<(Vec<f64>, Vec<f64>)> {
            let s = mix_communicated_state(
                &s_organ(set, organ, &rec.s)?,
                mix_sibling_levels(organ, &rec.action),
                set.no_communication,
            )?;
            let next_levels = rec
                .action_next
                .map(|a| mix_sibling_levels(organ, &a))
                .unwrap_or([0, 0]);
            let sn = mix_communicated_state(
                &s_organ(set, organ, &rec.s_next)?,
                next_levels,
                set.no_communication,
            )?;
            Ok((s.data, sn.data))
        }
    };
    let mix_option = |organ: Organ| {
        move |rec: &TransitionRecord| -> usize {
            let [a, b] = mix_sibling_levels(organ, &rec.action);
            mix_option_index(a, b).expect("routed Mix sample has levels 1..=4")
        }
    };
    run_stage(
        &mut set,
        AgentId::NeuMix,
        &routed.neu_mix,
        data,
        &mix_option(Organ::Neu),
        &mix_states(Organ::Neu),
        cfg,
        &mut rng,
        &mut log,
    )?;
    run_stage(
        &mut set,
        AgentId::CarMix,
        &routed.car_mix,
        data,
        &mix_option(Organ::Car),
        &mix_states(Organ::Car),
        cfg,
        &mut rng,
        &mut log,
    )?;

    run_omix_stage(&mut set, &routed, data, cfg, &mut rng, &mut log)?;
    Ok((set, log))
}

// ---------------------------------------------------------------------------
// Phase-2 root retraining
// ---------------------------------------------------------------------------

/// Hashes of everything that must not change during phase 2.
fn freeze_hashes(set: &AgentSet) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    for (id, a) in &set.agents {
        if *id != AgentId::Rt {
            m.insert(id.name().to_string(), params_sha256(&a.online));
        }
    }
    m.insert("mixer.w1".into(), params_sha256(&set.mixer.hyper_w1));
    m.insert("mixer.b1".into(), params_sha256(&set.mixer.hyper_b1));
    m.insert("mixer.w2".into(), params_sha256(&set.mixer.hyper_w2));
    m.insert("mixer.b2".into(), params_sha256(&set.mixer.hyper_b2));
    m
}

/// The phase-2 target for one sample's root option, from the frozen lower
/// agents evaluated at the *current* state.
fn phase2_target(set: &AgentSet, rec: &TransitionRecord) -> Result<f64> {
    let option = rec.path.root;
    let mut inputs = RootTargetInputs {
        reward: rec.reward,
        ..Default::default()
    };
    match option {
        RootOption::NoAction => {}
        RootOption::Neu => {
            let q = set.agent(AgentId::Neu)?.q_values(&s_organ(set, Organ::Neu, &rec.s)?)?;
            inputs.neu_max = Some(max_q(&q));
        }
        RootOption::Car => {
            let q = set.agent(AgentId::Car)?.q_values(&s_organ(set, Organ::Car, &rec.s)?)?;
            inputs.car_max = Some(max_q(&q));
        }
        RootOption::Ren => {
            let q = set.agent(AgentId::Ren)?.q_values(&s_organ(set, Organ::Ren, &rec.s)?)?;
            inputs.ren_max = Some(max_q(&q));
        }
        RootOption::OMix => {
            let shared = s_omix(set, &rec.s)?;
            let (n, c, r) = rec.action.organ_codes();
            let codes = [n, c, r];
            let q: Vec<Vec<f64>> = [Organ::Neu, Organ::Car, Organ::Ren]
                .iter()
                .enumerate()
                .map(|(o, organ)| {
                    let cs =
                        omix_communicated_state(*organ, &shared, codes, set.no_communication)?;
                    let id = [AgentId::OMixNeu, AgentId::OMixCar, AgentId::OMixRen][o];
                    set.agent(id)?.q_values(&cs.data)
                })
                .collect::<Result<_>>()?;
            let best = qmix_argmax(&set.mixer, &shared, &q[0], &q[1], &q[2])?;
            let sub = [q[0][best[0]], q[1][best[1]], q[2][best[2]]];
            inputs.omix_max = Some(set.mixer.forward(&sub, &shared)?);
        }
    }
    root_q_target(option, &inputs)
}

/// Phase 2: retrain only the root toward targets from the frozen lower
/// agents. Everything else is hash-checked for equality.
pub fn train_phase2(
    data: &[TransitionRecord],
    set: &mut AgentSet,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let before = freeze_hashes(set);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut log = TrainLog::default();
    log.sample_counts.insert("Rt".into(), data.len());

    // Targets depend only on frozen agents and frozen organ tables, so they
    // can be materialized once.
    let mut targets = Vec::with_capacity(data.len());
    let b = cfg.target_bound();
    for rec in data {
        targets.push(phase2_target(set, rec)?.clamp(-b, b));
    }

    let mut root = set
        .agents
        .remove(&AgentId::Rt)
        .ok_or_else(|| Error::Contract("agent Rt missing".into()))?;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut tape = GradientTape::new(&root.online);
    let mut result = Ok(());
    'train: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            tape.reset();
            let mut table_grad = vec![0.0; set.e_rt.d * set.e_rt.k];
            let mut batch_loss = 0.0;
            for &i in chunk {
                let rec = &data[i];
                let y = targets[i];
                let a = rec.path.root.index();
                let (s, hist) = if set.no_state_repr {
                    (rec.s.x.clone(), Vec::new())
                } else {
                    let hist = rec.s.history_refs();
                    (set.e_rt.state(&rec.s.x, &hist)?, hist)
                };
                let q = root.online.forward_taped(&s, &mut tape)?;
                let err = q[a] - y;
                batch_loss += 0.5 * err * err;
                let mut og = vec![0.0; root.options];
                og[a] = err.clamp(-cfg.terminal_r, cfg.terminal_r);
                let input_grad = root.online.backward(&mut tape, &og)?;
                if !set.no_state_repr {
                    let tg = set.e_rt.state_grad(&rec.s.x, &hist, &input_grad)?;
                    for (acc, g) in table_grad.iter_mut().zip(tg.iter()) {
                        *acc += g;
                    }
                }
            }
            batch_loss /= chunk.len() as f64;
            if batch_loss > DIVERGENCE_LOSS {
                result = Err(Error::Numeric(format!("Rt diverged: batch loss {batch_loss}")));
                break 'train;
            }
            let scale = 1.0 / chunk.len() as f64;
            tape.scale(scale);
            root.online.sgd_step(&tape, cfg.alpha)?;
            if !set.no_state_repr {
                table_grad.iter_mut().for_each(|g| *g *= scale);
                set.e_rt.apply_grad(&table_grad, cfg.alpha)?;
            }
            epoch_loss += batch_loss * chunk.len() as f64;
        }
        curve.push(epoch_loss / data.len().max(1) as f64);
    }
    root.sync_target()?;
    set.agents.insert(AgentId::Rt, root);
    result?;

    let after = freeze_hashes(set);
    if before != after {
        return Err(Error::Contract(
            "phase-2 freeze violated: a non-root agent's parameters changed".into(),
        ));
    }
    log.curves.insert("Rt.phase2".to_string(), curve);
    Ok(log)
}

// ---------------------------------------------------------------------------
// Greedy recommendation
// ---------------------------------------------------------------------------

/// One visited node of the greedy descent, for transparency surfaces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeEval {
    pub agent: String,
    pub option: usize,
    pub q: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Recommendation {
    pub action: JointAction,
    pub trace: Vec<NodeEval>,
    /// Number of Q-network evaluations performed. Bounded by 15: one root,
    /// at most five single-organ evaluations for the peer seeds, and at most
    /// three rounds of the three cross-organ dosage agents.
    pub evaluations: usize,
}

struct Descent<'a> {
    set: &'a AgentSet,
    trace: Vec<NodeEval>,
    evals: usize,
}

impl<'a> Descent<'a> {
    fn greedy(&mut self, id: AgentId, state: &[f64]) -> Result<(usize, f64)> {
        let q = self.set.agent(id)?.q_values(state)?;
        self.evals += 1;
        let opt = greedy_option(&q);
        self.trace.push(NodeEval {
            agent: id.name().to_string(),
            option: opt,
            q: q[opt],
        });
        Ok((opt, q[opt]))
    }

    fn q_vector(&mut self, id: AgentId, state: &[f64]) -> Result<Vec<f64>> {
        let q = self.set.agent(id)?.q_values(state)?;
        self.evals += 1;
        Ok(q)
    }

    /// Leaf dosage level (1..=4) for a single treatment.
    fn leaf_level(&mut self, id: AgentId, state: &[f64]) -> Result<u8> {
        let (opt, _) = self.greedy(id, state)?;
        Ok(opt as u8 + 1)
    }

    /// Greedy mixture pair with sibling communication from the two leaves.
    fn mix_pair(
        &mut self,
        organ: Organ,
        s_org: &[f64],
        sibling_levels: [u8; 2],
    ) -> Result<(u8, u8)> {
        let id = if organ == Organ::Neu { AgentId::NeuMix } else { AgentId::CarMix };
        let cs = mix_communicated_state(s_org, sibling_levels, self.set.no_communication)?;
        let (opt, _) = self.greedy(id, &cs.data)?;
        mix_option_levels(opt)
    }

    /// Cheap peer dosage code for the cross-organ channel: master argmax
    /// plus at most one dosage network (leaf, or the mixture agent with
    /// no-action sibling slots).
    fn peer_code(&mut self, organ: Organ, s_org: &[f64]) -> Result<usize> {
        match organ {
            Organ::Neu => {
                let (opt, _) = self.greedy(AgentId::Neu, s_org)?;
                Ok(match opt {
                    0 => (self.leaf_level(AgentId::NeuS1, s_org)? as usize) * 5,
                    1 => self.leaf_level(AgentId::NeuS2, s_org)? as usize,
                    _ => {
                        let (a, b) = self.mix_pair(Organ::Neu, s_org, [0, 0])?;
                        a as usize * 5 + b as usize
                    }
                })
            }
            Organ::Car => {
                let (opt, _) = self.greedy(AgentId::Car, s_org)?;
                Ok(match opt {
                    0 => (self.leaf_level(AgentId::CarIv, s_org)? as usize) * 5,
                    1 => self.leaf_level(AgentId::CarVaso, s_org)? as usize,
                    _ => {
                        let (a, b) = self.mix_pair(Organ::Car, s_org, [0, 0])?;
                        a as usize * 5 + b as usize
                    }
                })
            }
            Organ::Ren => {
                let (opt, _) = self.greedy(AgentId::Ren, s_org)?;
                Ok(if opt == 4 { 5 } else { opt + 1 })
            }
        }
    }
}

/// Greedy descent through the trained hierarchy: root option, organ
/// option(s), leaf dosages, with communication states built from peer-agent
/// greedy outputs. Returns the composed action and the Q value at every
/// visited node.
pub fn recommend(set: &AgentSet, x: &[f64], history: &[Vec<f64>]) -> Result<Recommendation> {
    let b = StateBundle { x: x.to_vec(), history: history.to_vec() };
    let mut d = Descent { set, trace: Vec::new(), evals: 0 };
    let (root_opt, _) = d.greedy(AgentId::Rt, &s_rt(set, &b)?)?;

    let mut levels = [0u8; 6];
    match root_opt {
        0 => {}
        1 => {
            let s = s_organ(set, Organ::Neu, &b)?;
            let (opt, _) = d.greedy(AgentId::Neu, &s)?;
            match opt {
                0 => levels[0] = d.leaf_level(AgentId::NeuS1, &s)?,
                1 => levels[1] = d.leaf_level(AgentId::NeuS2, &s)?,
                _ => {
                    let l1 = d.leaf_level(AgentId::NeuS1, &s)?;
                    let l2 = d.leaf_level(AgentId::NeuS2, &s)?;
                    let (a, bb) = d.mix_pair(Organ::Neu, &s, [l1, l2])?;
                    levels[0] = a;
                    levels[1] = bb;
                }
            }
        }
        2 => {
            let s = s_organ(set, Organ::Car, &b)?;
            let (opt, _) = d.greedy(AgentId::Car, &s)?;
            match opt {
                0 => levels[2] = d.leaf_level(AgentId::CarIv, &s)?,
                1 => levels[3] = d.leaf_level(AgentId::CarVaso, &s)?,
                _ => {
                    let l1 = d.leaf_level(AgentId::CarIv, &s)?;
                    let l2 = d.leaf_level(AgentId::CarVaso, &s)?;
                    let (a, bb) = d.mix_pair(Organ::Car, &s, [l1, l2])?;
                    levels[2] = a;
                    levels[3] = bb;
                }
            }
        }
        3 => {
            let s = s_organ(set, Organ::Ren, &b)?;
            let (opt, _) = d.greedy(AgentId::Ren, &s)?;
            if opt == 4 {
                levels[5] = 1;
            } else {
                levels[4] = opt as u8 + 1;
            }
        }
        _ => {
            // Cross-organ mixture: peer recommendations from the
            // single-organ agents, then the factored mixed argmax.
            let mut peers = [
                d.peer_code(Organ::Neu, &s_organ(set, Organ::Neu, &b)?)?,
                d.peer_code(Organ::Car, &s_organ(set, Organ::Car, &b)?)?,
                d.peer_code(Organ::Ren, &s_organ(set, Organ::Ren, &b)?)?,
            ];
            let shared = s_omix(set, &b)?;
            // The communicated slots were trained on the codes that were
            // actually executed, so iterate the mixed argmax until the
            // communicated codes agree with the chosen ones (the masters'
            // single-organ picks only seed the first round).
            let mut qv = Vec::new();
            let mut codes = peers;
            for _ in 0..3 {
                qv.clear();
                for (o, id) in [AgentId::OMixNeu, AgentId::OMixCar, AgentId::OMixRen]
                    .into_iter()
                    .enumerate()
                {
                    let organ = [Organ::Neu, Organ::Car, Organ::Ren][o];
                    let cs =
                        omix_communicated_state(organ, &shared, peers, set.no_communication)?;
                    qv.push(d.q_vector(id, &cs.data)?);
                }
                codes = qmix_argmax(&set.mixer, &shared, &qv[0], &qv[1], &qv[2])?;
                if codes == peers {
                    break;
                }
                peers = codes;
            }
            let sub = [qv[0][codes[0]], qv[1][codes[1]], qv[2][codes[2]]];
            let mixed = set.mixer.forward(&sub, &shared)?;
            for (o, id) in [AgentId::OMixNeu, AgentId::OMixCar, AgentId::OMixRen]
                .into_iter()
                .enumerate()
            {
                d.trace.push(NodeEval {
                    agent: id.name().to_string(),
                    option: codes[o],
                    q: qv[o][codes[o]],
                });
            }
            d.trace.push(NodeEval { agent: "OMix".into(), option: 0, q: mixed });
            let a = JointAction::from_organ_codes(codes[0], codes[1], codes[2])?;
            levels = a.levels;
        }
    }
    let action = JointAction::new(levels)?;
    Ok(Recommendation { action, trace: d.trace, evaluations: d.evals })
}

impl crate::ope::Policy for AgentSet {
    fn action(&self, x: &[f64], history: &[Vec<f64>]) -> Result<JointAction> {
        recommend(self, x, history).map(|r| r.action)
    }

    fn state_value(&self, x: &[f64], history: &[Vec<f64>]) -> Result<f64> {
        let q = root_q_values(self, x, history)?;
        Ok(q.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Root-level option values for a single observation, for advisory output.
pub fn root_q_values(set: &AgentSet, x: &[f64], history: &[Vec<f64>]) -> Result<Vec<f64>> {
    let b = StateBundle { x: x.to_vec(), history: history.to_vec() };
    set.agent(AgentId::Rt)?.q_values(&s_rt(set, &b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::MixingNetwork;
    use crate::numerics::{Activation, Approximator, Layer};
    use rand::Rng;

    fn bundle(x: Vec<f64>) -> StateBundle {
        StateBundle { x, history: Vec::new() }
    }

    fn rec(action: JointAction, x: Vec<f64>, r: f64, terminal: bool) -> TransitionRecord {
        TransitionRecord {
            s: bundle(x.clone()),
            s_next: bundle(x),
            action,
            action_next: if terminal { None } else { Some(JointAction::NO_ACTION) },
            path: decompose(&action).unwrap(),
            reward: r,
            terminal,
            behavior_prob: None,
        }
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = TrainConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.json");
        cfg.save(&p).unwrap();
        let back = TrainConfig::load(&p).unwrap();
        assert_eq!(back.gamma, 0.99);
        assert_eq!(back.k, 8);
        let mut bad = cfg.clone();
        bad.gamma = 1.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn routing_examples() {
        let a_none = JointAction::NO_ACTION;
        let a_car_mix = JointAction::new([0, 0, 2, 1, 0, 0]).unwrap();
        let a_two_organ = JointAction::new([1, 0, 0, 0, 0, 1]).unwrap();
        let data = vec![
            rec(a_none, vec![0.0; 4], -0.025, false),
            rec(a_car_mix, vec![0.0; 4], 0.1, false),
            rec(a_two_organ, vec![0.0; 4], 0.2, true),
        ];
        let r = route_samples(&data).unwrap();
        assert_eq!(r.rt, vec![0, 1, 2]);
        // No-action sample reaches only the root.
        assert!(!r.neu.contains(&0) && !r.car.contains(&0) && !r.omix.contains(&0));
        // IV=2, Vaso=1: root, Car master, Car.Mix — not the single leaves.
        assert_eq!(r.car, vec![1]);
        assert_eq!(r.car_mix, vec![1]);
        assert!(r.car_iv.is_empty() && r.car_vaso.is_empty());
        // S1=1 + dialysis: two-organ path.
        assert_eq!(r.omix, vec![2]);
        assert_eq!(r.omix_neu, vec![2]);
        assert_eq!(r.omix_ren, vec![2]);
        assert!(r.omix_car.is_empty());
    }

    #[test]
    fn routed_sibling_leaves_are_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut data = Vec::new();
        for _ in 0..300 {
            let idx = rng.gen_range(0..crate::actions::JOINT_COUNT);
            let a = JointAction::from_joint_index(idx).unwrap();
            data.push(rec(a, vec![0.0; 4], 0.0, false));
        }
        let r = route_samples(&data).unwrap();
        let disjoint = |a: &[usize], b: &[usize]| a.iter().all(|i| !b.contains(i));
        assert!(disjoint(&r.neu_s1, &r.neu_s2));
        assert!(disjoint(&r.neu_s1, &r.neu_mix));
        assert!(disjoint(&r.neu_s2, &r.neu_mix));
        assert!(disjoint(&r.car_iv, &r.car_vaso));
        assert!(disjoint(&r.car_iv, &r.car_mix));
        assert!(disjoint(&r.car_vaso, &r.car_mix));
        // Single-organ and cross-organ routes never share samples.
        assert!(disjoint(&r.neu, &r.omix));
        assert!(disjoint(&r.car, &r.omix));
        assert!(disjoint(&r.ren, &r.omix));
    }

    #[test]
    fn transitions_carry_history_windows() {
        use crate::features::{Episode, EpisodeFrame, EpisodeStore, FeatureSchema};
        use crate::reward::Outcome;
        let d = 12;
        let frames: Vec<EpisodeFrame> = (0..5)
            .map(|t| EpisodeFrame {
                x: vec![t as f64; d],
                sofa_raw: 5,
                lactate_raw: 1.0,
                observed: vec![true; d],
                action: JointAction::NO_ACTION,
                reward: 0.0,
                terminal: t == 4,
                outcome: if t == 4 { Outcome::Survived } else { Outcome::None },
                behavior_prob: None,
            })
            .collect();
        let store = EpisodeStore {
            schema: FeatureSchema::synthetic_default(),
            episodes: vec![Episode { patient_id: "p0".into(), frames }],
        };
        let ts = transitions_from_store(&store).unwrap();
        assert_eq!(ts.len(), 5);
        assert_eq!(ts[0].s.history.len(), 0);
        assert_eq!(ts[2].s.history.len(), 2);
        assert_eq!(ts[4].s.history.len(), 3);
        // Oldest-first windows.
        assert_eq!(ts[4].s.history[0][0], 1.0);
        assert_eq!(ts[4].s.history[2][0], 3.0);
        assert!(ts[4].terminal && ts[4].action_next.is_none());
        assert_eq!(ts[2].s_next.x[0], 3.0);
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            k: 4,
            hidden: vec![8],
            mixer_hidden: 3,
            hyper_hidden: 6,
            epochs: 2,
            batch_size: 16,
            target_sync: 10,
            ..Default::default()
        }
    }

    /// A small mixed dataset touching every branch of the hierarchy:
    /// alternating branch-representative actions and uniform joint draws.
    fn mixed_dataset(n: usize, seed: u64) -> Vec<TransitionRecord> {
        let reps = [
            [0, 0, 0, 0, 0, 0],
            [2, 0, 0, 0, 0, 0],
            [0, 3, 0, 0, 0, 0],
            [1, 2, 0, 0, 0, 0],
            [0, 0, 4, 0, 0, 0],
            [0, 0, 0, 1, 0, 0],
            [0, 0, 3, 2, 0, 0],
            [0, 0, 0, 0, 2, 0],
            [0, 0, 0, 0, 0, 1],
            [1, 0, 2, 0, 3, 0],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        while data.len() < n {
            let a = if data.len() % 2 == 0 {
                JointAction::new(reps[(data.len() / 2) % reps.len()]).unwrap()
            } else {
                let idx = rng.gen_range(0..crate::actions::JOINT_COUNT);
                JointAction::from_joint_index(idx).unwrap()
            };
            let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = rng.gen_range(-1.0..1.0);
            data.push(rec(a, x, r, data.len() % 7 == 6));
        }
        data
    }

    #[test]
    fn phase1_trains_every_agent_on_mixed_data() {
        let data = mixed_dataset(400, 9);
        let (set, log) = train_phase1(&data, &small_cfg()).unwrap();
        assert!(set.skipped.is_empty(), "skipped: {:?}", set.skipped);
        for id in AgentId::ALL {
            let key = if matches!(id, AgentId::OMixNeu | AgentId::OMixCar | AgentId::OMixRen) {
                "OMix".to_string()
            } else {
                id.name().to_string()
            };
            let curve = log.curves.get(&key).unwrap_or_else(|| panic!("no curve for {key}"));
            assert_eq!(curve.len(), 2);
            assert!(curve.iter().all(|l| l.is_finite()));
        }
        assert_eq!(log.sample_counts["Rt"], 400);
    }

    #[test]
    fn phase1_skips_agents_without_samples() {
        // Only no-action and Car-only samples.
        let mut data = Vec::new();
        for i in 0..60 {
            let a = if i % 2 == 0 {
                JointAction::NO_ACTION
            } else {
                JointAction::new([0, 0, (i % 4 + 1) as u8, 0, 0, 0]).unwrap()
            };
            data.push(rec(a, vec![0.1 * i as f64; 12], 0.0, i % 6 == 5));
        }
        let (set, log) = train_phase1(&data, &small_cfg()).unwrap();
        assert!(log.curves.contains_key("Rt"));
        assert!(log.curves.contains_key("Car"));
        assert!(log.curves.contains_key("Car.IV"));
        assert!(!log.curves.contains_key("Neu"));
        assert!(set.skipped.contains(&AgentId::Neu));
        assert!(set.skipped.contains(&AgentId::OMixRen));
        assert!(!log.warnings.is_empty());
    }

    #[test]
    fn phase1_is_deterministic_under_seed() {
        let data = mixed_dataset(200, 11);
        let cfg = small_cfg();
        let (a, _) = train_phase1(&data, &cfg).unwrap();
        let (b, _) = train_phase1(&data, &cfg).unwrap();
        for id in AgentId::ALL {
            assert_eq!(
                params_sha256(&a.agent(id).unwrap().online),
                params_sha256(&b.agent(id).unwrap().online),
                "{} differs",
                id.name()
            );
        }
        assert_eq!(a.e_rt.rows, b.e_rt.rows);
        assert_eq!(params_sha256(&a.mixer.hyper_w1), params_sha256(&b.mixer.hyper_w1));
    }

    /// Constant-output network: zero weights, bias c on every option.
    fn constant_net(input: usize, options: usize, c: f64) -> Approximator {
        let mut l = Layer::zeros(input, options, Activation::Identity);
        l.bias.iter_mut().for_each(|b| *b = c);
        Approximator::from_layers(vec![l]).unwrap()
    }

    fn constant_lower_set(k: usize, d: usize, c: f64) -> AgentSet {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut set = AgentSet::init(k, d, false, true, &[8], 3, 6, &mut rng).unwrap();
        for id in AgentId::ALL {
            if id == AgentId::Rt {
                // Tabular root over a 2-state one-hot input.
                let net = Approximator::from_layers(vec![Layer::linear_no_bias(d, 5)]).unwrap();
                set.agents.insert(id, AgentSpec::from_network(id, net));
                continue;
            }
            let net = constant_net(id.input_width(k, d, true), id.option_count(), c);
            set.agents.insert(id, AgentSpec::from_network(id, net));
        }
        set.mixer = MixingNetwork::fixed_sum(d).unwrap();
        set
    }

    #[test]
    fn phase2_fixed_point_under_constant_lower_agents() {
        // no_state_repr with one-hot states makes the root tabular, so each
        // update lands exactly on the target.
        let d = 2;
        let mut set = constant_lower_set(4, d, 3.0);
        let s0 = vec![1.0, 0.0];
        let a_car = JointAction::new([0, 0, 2, 0, 0, 0]).unwrap();
        let a_ren = JointAction::new([0, 0, 0, 0, 3, 0]).unwrap();
        let data = vec![
            rec(a_car, s0.clone(), 0.4, false),
            rec(a_ren, s0.clone(), -0.2, false),
            rec(JointAction::NO_ACTION, s0.clone(), -0.025, false),
        ];
        let cfg = TrainConfig {
            alpha: 1.0,
            batch_size: 1,
            epochs: 3,
            no_state_repr: true,
            ..small_cfg()
        };
        train_phase2(&data, &mut set, &cfg).unwrap();
        let q = set.agent(AgentId::Rt).unwrap().q_values(&s0).unwrap();
        // Organ options converge to the constant lower value.
        assert!((q[2] - 3.0).abs() < 1e-9, "Car option: {}", q[2]);
        assert!((q[3] - 3.0).abs() < 1e-9, "Ren option: {}", q[3]);
        // No-action option target is the reward itself.
        assert!((q[0] - (-0.025)).abs() < 1e-9, "no-action: {}", q[0]);
    }

    #[test]
    fn phase2_freezes_everything_but_the_root() {
        let data = mixed_dataset(150, 13);
        let cfg = small_cfg();
        let (mut set, _) = train_phase1(&data, &cfg).unwrap();
        let before: BTreeMap<_, _> = AgentId::ALL
            .into_iter()
            .map(|id| (id, params_sha256(&set.agent(id).unwrap().online)))
            .collect();
        train_phase2(&data, &mut set, &cfg).unwrap();
        for id in AgentId::ALL {
            let now = params_sha256(&set.agent(id).unwrap().online);
            if id == AgentId::Rt {
                assert_ne!(before[&id], now, "root should have changed");
            } else {
                assert_eq!(before[&id], now, "{} changed in phase 2", id.name());
            }
        }
    }

    #[test]
    fn recommend_no_action_stops_descent() {
        let d = 12;
        let mut set = constant_lower_set(4, d, 0.0);
        // Root prefers option 0 everywhere.
        let mut bias = constant_net(d, 5, 0.0);
        bias.set_param(d * 5, 1.0); // bias of option 0
        set.agents.insert(AgentId::Rt, AgentSpec::from_network(AgentId::Rt, bias));
        let x = vec![0.3; d];
        let r = recommend(&set, &x, &[]).unwrap();
        assert_eq!(r.action, JointAction::NO_ACTION);
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.evaluations, 1);
    }

    #[test]
    fn recommend_descends_to_car_mix_with_sibling_dosages() {
        let d = 12;
        let k = 4;
        let mut set = constant_lower_set(k, d, 0.0);
        let favor = |input: usize, options: usize, opt: usize| {
            let mut net = constant_net(input, options, 0.0);
            net.set_param(input * options + opt, 1.0);
            net
        };
        set.agents.insert(
            AgentId::Rt,
            AgentSpec::from_network(AgentId::Rt, favor(d, 5, 2)),
        );
        set.agents.insert(
            AgentId::Car,
            AgentSpec::from_network(AgentId::Car, favor(d, 3, 2)),
        );
        set.agents.insert(
            AgentId::CarIv,
            AgentSpec::from_network(AgentId::CarIv, favor(d, 4, 0)), // level 1
        );
        set.agents.insert(
            AgentId::CarVaso,
            AgentSpec::from_network(AgentId::CarVaso, favor(d, 4, 3)), // level 4
        );
        let mix_in = AgentId::CarMix.input_width(k, d, true);
        let mix_opt = mix_option_index(2, 3).unwrap();
        set.agents.insert(
            AgentId::CarMix,
            AgentSpec::from_network(AgentId::CarMix, favor(mix_in, 16, mix_opt)),
        );
        let x = vec![0.2; d];
        let r = recommend(&set, &x, &[]).unwrap();
        assert_eq!(r.action, JointAction::new([0, 0, 2, 3, 0, 0]).unwrap());
        let agents: Vec<&str> = r.trace.iter().map(|n| n.agent.as_str()).collect();
        assert_eq!(agents, vec!["Rt", "Car", "Car.IV", "Car.Vaso", "Car.Mix"]);
        assert_eq!(r.evaluations, 5);
    }

    #[test]
    fn recommend_is_valid_and_bounded_on_trained_sets() {
        let data = mixed_dataset(250, 17);
        let (set, _) = train_phase1(&data, &small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hist: Vec<Vec<f64>> =
                (0..rng.gen_range(0..4)).map(|_| vec![0.1; 12]).collect();
            let r = recommend(&set, &x, &hist).unwrap();
            r.action.validate().unwrap();
            assert!(r.evaluations <= 15, "evaluations = {}", r.evaluations);
            assert!(!r.trace.is_empty());
        }
    }

    #[test]
    fn run_manifest_written_with_curves() {
        let data = mixed_dataset(120, 23);
        let cfg = small_cfg();
        let (_, log) = train_phase1(&data, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run_manifest(dir.path(), &cfg, &log).unwrap();
        assert!(dir.path().join("run.json").exists());
        assert!(dir.path().join("curves/Rt_loss.csv").exists());
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("run.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["format"], "hmarl-run-v1");
        assert_eq!(manifest["seed"], cfg.seed);
    }
}
