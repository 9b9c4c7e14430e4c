//! Flat and factored comparison policies built from the same primitives as
//! the hierarchy: a single dueling double-Q agent over the full joint action
//! space, independent per-organ / per-treatment dueling agents, and flat
//! cooperative QMix variants.
//!
//! All kinds consume the same episode stores, the same learned unified state
//! (an embedding table trained end-to-end with the agents), the same action
//! discretization and the same rewards as the proposed model. Renal
//! exclusivity is structural: the renal component is one six-way head
//! (none, diuretic 1-4, dialysis), so no arbitration between diuretic and
//! dialysis agents is ever needed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actions::{JointAction, JOINT_COUNT};
use crate::agents::{greedy_option, MixingNetwork};
use crate::numerics::{Activation, Approximator, GradientTape};
use crate::ope::Policy;
use crate::persist;
use crate::state_repr::{EmbeddingTable, LevelTag};
use crate::training::{StateBundle, TrainConfig, TrainLog, TransitionRecord};
use crate::{Error, Result};

pub const BASELINE_FORMAT: &str = "hmarl-baseline-v1";

const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    /// Single dueling agent over the 3750-action flat space.
    D3qnS,
    /// Three independent per-organ dueling agents.
    D3qnO,
    /// Five independent per-treatment dueling agents.
    D3qnT,
    /// Three cooperative per-organ agents under a mixing network.
    QmixO,
    /// Five cooperative per-treatment agents under a mixing network.
    QmixT,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::D3qnS,
        BaselineKind::D3qnO,
        BaselineKind::D3qnT,
        BaselineKind::QmixO,
        BaselineKind::QmixT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::D3qnS => "d3qn-s",
            BaselineKind::D3qnO => "d3qn-o",
            BaselineKind::D3qnT => "d3qn-t",
            BaselineKind::QmixO => "qmix-o",
            BaselineKind::QmixT => "qmix-t",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Contract(format!("unknown baseline kind {name:?}")))
    }

    fn cooperative(self) -> bool {
        matches!(self, BaselineKind::QmixO | BaselineKind::QmixT)
    }

    /// Per-agent action-head widths.
    fn head_widths(self) -> Vec<usize> {
        match self {
            BaselineKind::D3qnS => vec![JOINT_COUNT],
            BaselineKind::D3qnO | BaselineKind::QmixO => vec![25, 25, 6],
            BaselineKind::D3qnT | BaselineKind::QmixT => vec![5, 5, 5, 5, 6],
        }
    }

    fn agent_names(self) -> Vec<&'static str> {
        match self {
            BaselineKind::D3qnS => vec!["flat"],
            BaselineKind::D3qnO | BaselineKind::QmixO => vec!["neu", "car", "ren"],
            BaselineKind::D3qnT | BaselineKind::QmixT => {
                vec!["s1", "s2", "iv", "vaso", "renal"]
            }
        }
    }

    /// The sub-action index each agent trains on for a logged joint action.
    fn components(self, a: &JointAction) -> Vec<usize> {
        match self {
            BaselineKind::D3qnS => vec![a.joint_index()],
            BaselineKind::D3qnO | BaselineKind::QmixO => {
                let (n, c, r) = a.organ_codes();
                vec![n, c, r]
            }
            BaselineKind::D3qnT | BaselineKind::QmixT => vec![
                a.levels[0] as usize,
                a.levels[1] as usize,
                a.levels[2] as usize,
                a.levels[3] as usize,
                if a.levels[5] > 0 { 5 } else { a.levels[4] as usize },
            ],
        }
    }

    /// Compose a joint action back from per-agent choices.
    fn compose(self, choices: &[usize]) -> Result<JointAction> {
        match self {
            BaselineKind::D3qnS => JointAction::from_joint_index(choices[0]),
            BaselineKind::D3qnO | BaselineKind::QmixO => {
                JointAction::from_organ_codes(choices[0], choices[1], choices[2])
            }
            BaselineKind::D3qnT | BaselineKind::QmixT => {
                let (diur, dial) = if choices[4] == 5 { (0, 1) } else { (choices[4] as u8, 0) };
                JointAction::new([
                    choices[0] as u8,
                    choices[1] as u8,
                    choices[2] as u8,
                    choices[3] as u8,
                    diur,
                    dial,
                ])
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dueling double-Q agent
// ---------------------------------------------------------------------------

/// Value + advantage network pair: Q = V + A − mean(A).
#[derive(Debug, Clone)]
pub struct DuelingNet {
    pub value: Approximator,
    pub advantage: Approximator,
    pub actions: usize,
}

impl DuelingNet {
    pub fn seeded(
        input: usize,
        actions: usize,
        hidden: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut dims_v = vec![input];
        dims_v.extend_from_slice(hidden);
        dims_v.push(1);
        let mut dims_a = vec![input];
        dims_a.extend_from_slice(hidden);
        dims_a.push(actions);
        Ok(DuelingNet {
            value: Approximator::seeded(&dims_v, Activation::Relu, Activation::Identity, rng)?,
            advantage: Approximator::seeded(&dims_a, Activation::Relu, Activation::Identity, rng)?,
            actions,
        })
    }

    pub fn q_values(&self, s: &[f64]) -> Result<Vec<f64>> {
        let v = self.value.forward(s)?[0];
        let a = self.advantage.forward(s)?;
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        Ok(a.iter().map(|ai| v + ai - mean).collect())
    }

    fn copy_from(&mut self, other: &DuelingNet) -> Result<()> {
        self.value.copy_from(&other.value)?;
        self.advantage.copy_from(&other.advantage)
    }
}

#[derive(Debug, Clone)]
pub struct DuelingAgent {
    pub online: DuelingNet,
    pub target: DuelingNet,
    pub actions: usize,
}

struct DuelingTapes {
    value: GradientTape,
    advantage: GradientTape,
}

impl DuelingAgent {
    fn seeded(input: usize, actions: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let online = DuelingNet::seeded(input, actions, hidden, rng)?;
        let target = online.clone();
        Ok(DuelingAgent { online, target, actions })
    }

    pub fn q_values(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.online.q_values(s)
    }

    pub fn q_values_target(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.target.q_values(s)
    }

    pub fn sync_target(&mut self) -> Result<()> {
        self.target.copy_from(&self.online)
    }

    /// Double-Q target: online argmax evaluated by the target network.
    pub fn double_q_target(&self, r: f64, gamma: f64, s_next: &[f64], terminal: bool) -> Result<f64> {
        if terminal {
            return Ok(r);
        }
        let a_star = greedy_option(&self.q_values(s_next)?);
        Ok(r + gamma * self.q_values_target(s_next)?[a_star])
    }

    fn tapes(&self) -> DuelingTapes {
        DuelingTapes {
            value: GradientTape::new(&self.online.value),
            advantage: GradientTape::new(&self.online.advantage),
        }
    }

    /// Accumulate gradients of ½(Q(s,a) − y)² and return (error, input
    /// gradient through both heads) for embedding fine-tuning.
    fn accumulate(
        &self,
        tapes: &mut DuelingTapes,
        s: &[f64],
        a: usize,
        y: f64,
        clip: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let v = self.online.value.forward_taped(s, &mut tapes.value)?[0];
        let adv = self.online.advantage.forward_taped(s, &mut tapes.advantage)?;
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        let err = v + adv[a] - mean - y;
        // Clip the TD error on the gradient path only; the returned error is
        // unclipped so loss reporting still detects divergence.
        let err_g = err.clamp(-clip, clip);
        // dQ_a/dV = 1; dQ_a/dA_i = δ_ia − 1/n.
        let gv = self.online.value.backward(&mut tapes.value, &[err_g])?;
        let n = adv.len() as f64;
        let mut og = vec![-err_g / n; adv.len()];
        og[a] += err_g;
        let ga = self.online.advantage.backward(&mut tapes.advantage, &og)?;
        let input_grad = gv.iter().zip(ga.iter()).map(|(x, y)| x + y).collect();
        Ok((err, input_grad))
    }

    fn apply(&mut self, tapes: &DuelingTapes, alpha: f64) -> Result<()> {
        self.online.value.sgd_step(&tapes.value, alpha)?;
        self.online.advantage.sgd_step(&tapes.advantage, alpha)
    }
}

/// Plain Q agent for the cooperative baselines.
#[derive(Debug, Clone)]
pub struct FlatAgent {
    pub online: Approximator,
    pub target: Approximator,
    pub actions: usize,
}

impl FlatAgent {
    fn seeded(input: usize, actions: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(actions);
        let online = Approximator::seeded(&dims, Activation::Relu, Activation::Identity, rng)?;
        let target = online.clone();
        Ok(FlatAgent { online, target, actions })
    }

    pub fn q_values(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.online.forward(s)
    }

    pub fn q_values_target(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.target.forward(s)
    }

    fn sync_target(&mut self) -> Result<()> {
        self.target.copy_from(&self.online)
    }
}

// ---------------------------------------------------------------------------
// Baseline model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub k: usize,
    pub d: usize,
    pub no_state_repr: bool,
    /// Unified state table, trained end-to-end with the agents.
    pub table: EmbeddingTable,
    pub dueling: Vec<DuelingAgent>,
    pub flat: Vec<FlatAgent>,
    pub mixer: Option<MixingNetwork>,
}

impl BaselineModel {
    fn state(&self, b: &StateBundle) -> Result<Vec<f64>> {
        if self.no_state_repr {
            return Ok(b.x.clone());
        }
        let hist: Vec<&[f64]> = b.history.iter().map(|v| v.as_slice()).collect();
        self.table.state(&b.x, &hist)
    }

    /// Greedy joint recommendation: independent argmaxes per agent (the
    /// cooperative variants' monotone mixer makes per-agent argmaxes exact).
    pub fn recommend(&self, x: &[f64], history: &[Vec<f64>]) -> Result<JointAction> {
        let b = StateBundle { x: x.to_vec(), history: history.to_vec() };
        let s = self.state(&b)?;
        let choices: Vec<usize> = if self.kind.cooperative() {
            self.flat
                .iter()
                .map(|a| Ok(greedy_option(&a.q_values(&s)?)))
                .collect::<Result<_>>()?
        } else {
            self.dueling
                .iter()
                .map(|a| Ok(greedy_option(&a.q_values(&s)?)))
                .collect::<Result<_>>()?
        };
        self.kind.compose(&choices)
    }

    /// Greedy value estimate for the current state: the mixed value at the
    /// per-agent argmaxes for cooperative kinds, otherwise the mean of the
    /// per-agent maxima (independent heads have no joint value function).
    pub fn state_value(&self, x: &[f64], history: &[Vec<f64>]) -> Result<f64> {
        let b = StateBundle { x: x.to_vec(), history: history.to_vec() };
        let s = self.state(&b)?;
        if let Some(mixer) = &self.mixer {
            let maxes: Vec<f64> = self
                .flat
                .iter()
                .map(|a| {
                    let q = a.q_values(&s)?;
                    Ok(q[greedy_option(&q)])
                })
                .collect::<Result<_>>()?;
            return mixer.forward(&maxes, &s);
        }
        let maxes: Vec<f64> = self
            .dueling
            .iter()
            .map(|a| {
                let q = a.q_values(&s)?;
                Ok(q[greedy_option(&q)])
            })
            .collect::<Result<_>>()?;
        Ok(maxes.iter().sum::<f64>() / maxes.len().max(1) as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let no_tags = BTreeMap::new();
        let names = self.kind.agent_names();
        if self.kind.cooperative() {
            for (a, name) in self.flat.iter().zip(names.iter()) {
                persist::save_weights(dir, &format!("{name}_online"), &a.online, &no_tags)?;
            }
        } else {
            for (a, name) in self.dueling.iter().zip(names.iter()) {
                persist::save_weights(dir, &format!("{name}_value"), &a.online.value, &no_tags)?;
                persist::save_weights(
                    dir,
                    &format!("{name}_advantage"),
                    &a.online.advantage,
                    &no_tags,
                )?;
            }
        }
        if let Some(m) = &self.mixer {
            persist::save_weights(dir, "mixer_w1", &m.hyper_w1, &no_tags)?;
            persist::save_weights(dir, "mixer_b1", &m.hyper_b1, &no_tags)?;
            persist::save_weights(dir, "mixer_w2", &m.hyper_w2, &no_tags)?;
            persist::save_weights(dir, "mixer_b2", &m.hyper_b2, &no_tags)?;
        }
        fs::write(dir.join("embedding.json"), serde_json::to_string(&self.table)?)?;
        let manifest = serde_json::json!({
            "format": BASELINE_FORMAT,
            "kind": self.kind.name(),
            "k": self.k,
            "d": self.d,
            "no_state_repr": self.no_state_repr,
            "mixer_hidden": self.mixer.as_ref().map(|m| m.hidden),
            "mixer_inputs": self.mixer.as_ref().map(|m| m.inputs),
            // Flat heads index actions by the canonical joint-index order.
            "action_order": "joint_index",
        });
        fs::write(dir.join("baseline.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("baseline.json"))?)?;
        if manifest["format"] != BASELINE_FORMAT {
            return Err(Error::Format(format!(
                "unsupported baseline format {}, expected {BASELINE_FORMAT}",
                manifest["format"]
            )));
        }
        let kind = BaselineKind::from_name(
            manifest["kind"].as_str().ok_or_else(|| Error::Format("missing kind".into()))?,
        )?;
        let k = manifest["k"].as_u64().unwrap_or(0) as usize;
        let d = manifest["d"].as_u64().unwrap_or(0) as usize;
        let no_state_repr = manifest["no_state_repr"].as_bool().unwrap_or(false);
        let table: EmbeddingTable =
            serde_json::from_str(&fs::read_to_string(dir.join("embedding.json"))?)?;
        let names = kind.agent_names();
        let widths = kind.head_widths();
        let mut dueling = Vec::new();
        let mut flat = Vec::new();
        if kind.cooperative() {
            for (name, w) in names.iter().zip(widths.iter()) {
                let online = persist::load_weights(dir, &format!("{name}_online"))?.0;
                let target = online.clone();
                flat.push(FlatAgent { online, target, actions: *w });
            }
        } else {
            for (name, w) in names.iter().zip(widths.iter()) {
                let value = persist::load_weights(dir, &format!("{name}_value"))?.0;
                let advantage = persist::load_weights(dir, &format!("{name}_advantage"))?.0;
                let online = DuelingNet { value, advantage, actions: *w };
                let target = online.clone();
                dueling.push(DuelingAgent { online, target, actions: *w });
            }
        }
        let mixer = if kind.cooperative() {
            Some(MixingNetwork {
                hyper_w1: persist::load_weights(dir, "mixer_w1")?.0,
                hyper_b1: persist::load_weights(dir, "mixer_b1")?.0,
                hyper_w2: persist::load_weights(dir, "mixer_w2")?.0,
                hyper_b2: persist::load_weights(dir, "mixer_b2")?.0,
                hidden: manifest["mixer_hidden"].as_u64().unwrap_or(1) as usize,
                inputs: manifest["mixer_inputs"].as_u64().unwrap_or(3) as usize,
            })
        } else {
            None
        };
        Ok(BaselineModel { kind, k, d, no_state_repr, table, dueling, flat, mixer })
    }
}

impl Policy for BaselineModel {
    fn action(&self, x: &[f64], history: &[Vec<f64>]) -> Result<JointAction> {
        self.recommend(x, history)
    }

    fn state_value(&self, x: &[f64], history: &[Vec<f64>]) -> Result<f64> {
        BaselineModel::state_value(self, x, history)
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Train one baseline kind on the full transition set. All kinds see every
/// sample; factored kinds read their own component of each logged action.
pub fn train_baseline(
    kind: BaselineKind,
    data: &[TransitionRecord],
    cfg: &TrainConfig,
) -> Result<(BaselineModel, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no training transitions".into()));
    }
    let d = data[0].s.x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let table = EmbeddingTable::seeded(LevelTag::Rt, d, cfg.k, &mut rng);
    let input = if cfg.no_state_repr { d } else { 2 * cfg.k };
    let widths = kind.head_widths();
    let mut model = BaselineModel {
        kind,
        k: cfg.k,
        d,
        no_state_repr: cfg.no_state_repr,
        table,
        dueling: Vec::new(),
        flat: Vec::new(),
        mixer: None,
    };
    if kind.cooperative() {
        for w in &widths {
            model.flat.push(FlatAgent::seeded(input, *w, &cfg.hidden, &mut rng)?);
        }
        model.mixer = Some(MixingNetwork::seeded_n(
            widths.len(),
            input,
            cfg.mixer_hidden,
            cfg.hyper_hidden,
            &mut rng,
        )?);
    } else {
        for w in &widths {
            model.dueling.push(DuelingAgent::seeded(input, *w, &cfg.hidden, &mut rng)?);
        }
    }

    // Precompute the per-sample action components once.
    let components: Vec<Vec<usize>> = data.iter().map(|r| kind.components(&r.action)).collect();

    let mut log = TrainLog::default();
    log.sample_counts.insert(kind.name().to_string(), data.len());
    let curve = if kind.cooperative() {
        train_cooperative(&mut model, data, &components, cfg, &mut rng)?
    } else {
        train_independent(&mut model, data, &components, cfg, &mut rng)?
    };
    log.curves.insert(kind.name().to_string(), curve);
    Ok((model, log))
}

fn bundle_state(
    table: &EmbeddingTable,
    no_state_repr: bool,
    b: &StateBundle,
) -> Result<Vec<f64>> {
    if no_state_repr {
        return Ok(b.x.clone());
    }
    let hist: Vec<&[f64]> = b.history.iter().map(|v| v.as_slice()).collect();
    table.state(&b.x, &hist)
}

fn train_independent(
    model: &mut BaselineModel,
    data: &[TransitionRecord],
    components: &[Vec<usize>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut tapes: Vec<DuelingTapes> = model.dueling.iter().map(|a| a.tapes()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            for t in tapes.iter_mut() {
                t.value.reset();
                t.advantage.reset();
            }
            let mut table_grad = vec![0.0; model.table.d * model.table.k];
            let mut batch_loss = 0.0;
            for &i in chunk {
                let rec = &data[i];
                let s = bundle_state(&model.table, model.no_state_repr, &rec.s)?;
                let s_next = bundle_state(&model.table, model.no_state_repr, &rec.s_next)?;
                let mut input_grad = vec![0.0; s.len()];
                // Any true action value is bounded by the maximum discounted
                // return; clamping the bootstrap target to that range stops
                // max-bias runaway without biasing a correct fixed point.
                let y_max = cfg.target_bound();
                for (ai, agent) in model.dueling.iter().enumerate() {
                    let y = agent
                        .double_q_target(rec.reward, cfg.gamma, &s_next, rec.terminal)?
                        .clamp(-y_max, y_max);
                    let (err, g) = agent.accumulate(&mut tapes[ai], &s, components[i][ai], y, cfg.terminal_r)?;
                    batch_loss += 0.5 * err * err;
                    for (acc, gi) in input_grad.iter_mut().zip(g.iter()) {
                        *acc += gi;
                    }
                }
                if !model.no_state_repr {
                    let hist: Vec<&[f64]> = rec.s.history.iter().map(|v| v.as_slice()).collect();
                    let tg = model.table.state_grad(&rec.s.x, &hist, &input_grad)?;
                    for (acc, g) in table_grad.iter_mut().zip(tg.iter()) {
                        *acc += g;
                    }
                }
            }
            batch_loss /= chunk.len() as f64;
            if batch_loss > DIVERGENCE_LOSS {
                return Err(Error::Numeric(format!(
                    "{} diverged: batch loss {batch_loss}",
                    model.kind.name()
                )));
            }
            let scale = 1.0 / chunk.len() as f64;
            for (agent, t) in model.dueling.iter_mut().zip(tapes.iter_mut()) {
                t.value.scale(scale);
                t.advantage.scale(scale);
                agent.apply(t, cfg.alpha)?;
            }
            if !model.no_state_repr {
                table_grad.iter_mut().for_each(|g| *g *= scale);
                model.table.apply_grad(&table_grad, cfg.alpha)?;
            }
            steps += 1;
            if steps % cfg.target_sync == 0 {
                for agent in model.dueling.iter_mut() {
                    agent.sync_target()?;
                }
            }
            epoch_loss += batch_loss * chunk.len() as f64;
        }
        curve.push(epoch_loss / data.len() as f64);
    }
    for agent in model.dueling.iter_mut() {
        agent.sync_target()?;
    }
    Ok(curve)
}

fn train_cooperative(
    model: &mut BaselineModel,
    data: &[TransitionRecord],
    components: &[Vec<usize>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let n_agents = model.flat.len();
    let mut mixer = model.mixer.take().expect("cooperative model has a mixer");
    let mut mixer_target = mixer.clone();
    let mut mixer_tapes = mixer.tapes();
    let mut agent_tapes: Vec<GradientTape> =
        model.flat.iter().map(|a| GradientTape::new(&a.online)).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            mixer_tapes.reset();
            for t in agent_tapes.iter_mut() {
                t.reset();
            }
            let mut table_grad = vec![0.0; model.table.d * model.table.k];
            let mut batch_loss = 0.0;
            for &i in chunk {
                let rec = &data[i];
                let s = bundle_state(&model.table, model.no_state_repr, &rec.s)?;
                let y = if rec.terminal {
                    rec.reward
                } else {
                    let s_next = bundle_state(&model.table, model.no_state_repr, &rec.s_next)?;
                    // Double-Q: per-agent greedy selection under the online
                    // nets, evaluation under the targets; the monotone mixer
                    // makes per-agent argmaxes exact.
                    let mut next_sub = Vec::with_capacity(n_agents);
                    for a in model.flat.iter() {
                        let a_star = greedy_option(&a.q_values(&s_next)?);
                        next_sub.push(a.q_values_target(&s_next)?[a_star]);
                    }
                    rec.reward + cfg.gamma * mixer_target.forward(&next_sub, &s_next)?
                };
                // Bound the bootstrap target by the maximum feasible
                // discounted return to prevent max-bias runaway.
                let y_max = cfg.target_bound();
                let y = y.clamp(-y_max, y_max);
                let mut sub = Vec::with_capacity(n_agents);
                for (ai, a) in model.flat.iter().enumerate() {
                    sub.push(a.q_values(&s)?[components[i][ai]]);
                }
                let q_tot = mixer.forward(&sub, &s)?;
                let err = q_tot - y;
                batch_loss += 0.5 * err * err;
                // Clip the TD error driving the hypernet gradients, as in
                // the hierarchy's cooperative stage.
                let err_g = err.clamp(-cfg.terminal_r, cfg.terminal_r);
                let dq = mixer.accumulate(&sub, &s, err_g, &mut mixer_tapes)?;
                let mut input_grad = vec![0.0; s.len()];
                for (ai, a) in model.flat.iter().enumerate() {
                    a.online.forward_taped(&s, &mut agent_tapes[ai])?;
                    let mut og = vec![0.0; a.actions];
                    og[components[i][ai]] = dq[ai];
                    let g = a.online.backward(&mut agent_tapes[ai], &og)?;
                    for (acc, gi) in input_grad.iter_mut().zip(g.iter()) {
                        *acc += gi;
                    }
                }
                if !model.no_state_repr {
                    let hist: Vec<&[f64]> = rec.s.history.iter().map(|v| v.as_slice()).collect();
                    let tg = model.table.state_grad(&rec.s.x, &hist, &input_grad)?;
                    for (acc, g) in table_grad.iter_mut().zip(tg.iter()) {
                        *acc += g;
                    }
                }
            }
            batch_loss /= chunk.len() as f64;
            if batch_loss > DIVERGENCE_LOSS {
                return Err(Error::Numeric(format!(
                    "{} diverged: batch loss {batch_loss}",
                    model.kind.name()
                )));
            }
            let scale = 1.0 / chunk.len() as f64;
            mixer_tapes.scale(scale);
            mixer.apply(&mixer_tapes, cfg.alpha)?;
            for (a, t) in model.flat.iter_mut().zip(agent_tapes.iter_mut()) {
                t.scale(scale);
                a.online.sgd_step(t, cfg.alpha)?;
            }
            if !model.no_state_repr {
                table_grad.iter_mut().for_each(|g| *g *= scale);
                model.table.apply_grad(&table_grad, cfg.alpha)?;
            }
            steps += 1;
            if steps % cfg.target_sync == 0 {
                for a in model.flat.iter_mut() {
                    a.sync_target()?;
                }
                mixer_target = mixer.clone();
            }
            epoch_loss += batch_loss * chunk.len() as f64;
        }
        curve.push(epoch_loss / data.len() as f64);
    }
    for a in model.flat.iter_mut() {
        a.sync_target()?;
    }
    model.mixer = Some(mixer);
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::decompose;
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

    fn random_dataset(n: usize, seed: u64) -> Vec<TransitionRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let a = JointAction::from_joint_index(rng.gen_range(0..JOINT_COUNT)).unwrap();
                let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
                rec(a, x, rng.gen_range(-1.0..1.0), i % 7 == 6)
            })
            .collect()
    }

    #[test]
    fn advantage_centering_yields_value_and_preserves_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DuelingNet::seeded(6, 4, &[8], &mut rng).unwrap();
        for _ in 0..20 {
            let s: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q = net.q_values(&s).unwrap();
            let v = net.value.forward(&s).unwrap()[0];
            let a = net.advantage.forward(&s).unwrap();
            // Centering: mean(Q) = V.
            let mean_q = q.iter().sum::<f64>() / q.len() as f64;
            assert!((mean_q - v).abs() < 1e-12);
            // Argmax invariance.
            assert_eq!(greedy_option(&q), greedy_option(&a));
        }
        // Constant advantages give Q = V everywhere.
        use crate::numerics::Layer;
        let mut l = Layer::zeros(6, 3, Activation::Identity);
        l.bias.iter_mut().for_each(|b| *b = 2.5);
        let net = DuelingNet {
            value: Approximator::seeded(&[6, 1], Activation::Relu, Activation::Identity, &mut rng)
                .unwrap(),
            advantage: Approximator::from_layers(vec![l]).unwrap(),
            actions: 3,
        };
        let s = vec![0.4; 6];
        let v = net.value.forward(&s).unwrap()[0];
        for q in net.q_values(&s).unwrap() {
            assert!((q - v).abs() < 1e-12);
        }
    }

    #[test]
    fn double_q_target_uses_online_argmax_on_target_net() {
        // Hand-built 2-action fixture: online prefers action 1, target
        // disagrees; y must be r + γ·Q_target(s', 1).
        use crate::numerics::Layer;
        let constant = |vals: &[f64]| {
            let mut l = Layer::zeros(2, vals.len(), Activation::Identity);
            l.bias.copy_from_slice(vals);
            Approximator::from_layers(vec![l]).unwrap()
        };
        let online = DuelingNet {
            value: constant(&[1.0]),
            advantage: constant(&[0.0, 2.0]), // argmax = 1
            actions: 2,
        };
        let target = DuelingNet {
            value: constant(&[0.5]),
            advantage: constant(&[4.0, 0.0]), // Q_target = (2.5, -1.5)
            actions: 2,
        };
        let agent = DuelingAgent { online, target, actions: 2 };
        let y = agent.double_q_target(1.0, 0.9, &[0.0, 0.0], false).unwrap();
        assert!((y - (1.0 + 0.9 * (-1.5))).abs() < 1e-12, "{y}");
        assert_eq!(agent.double_q_target(3.0, 0.9, &[0.0, 0.0], true).unwrap(), 3.0);
    }

    #[test]
    fn head_widths_match_action_spaces() {
        assert_eq!(BaselineKind::D3qnS.head_widths(), vec![3750]);
        assert_eq!(BaselineKind::D3qnO.head_widths(), vec![25, 25, 6]);
        assert_eq!(BaselineKind::QmixT.head_widths(), vec![5, 5, 5, 5, 6]);
        let data = random_dataset(40, 5);
        let (m, _) = train_baseline(BaselineKind::QmixT, &data, &small_cfg()).unwrap();
        assert_eq!(m.mixer.as_ref().unwrap().inputs, 5);
    }

    #[test]
    fn components_round_trip_through_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a = JointAction::from_joint_index(rng.gen_range(0..JOINT_COUNT)).unwrap();
            for kind in BaselineKind::ALL {
                let c = kind.components(&a);
                assert_eq!(kind.compose(&c).unwrap(), a, "{:?} {:?}", kind, a);
            }
        }
    }

    #[test]
    fn every_kind_trains_and_recommends_valid_actions() {
        let data = random_dataset(120, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for kind in BaselineKind::ALL {
            let (m, log) = train_baseline(kind, &data, &small_cfg()).unwrap();
            let curve = &log.curves[kind.name()];
            assert_eq!(curve.len(), 2);
            assert!(curve.iter().all(|l| l.is_finite()), "{kind:?}");
            for _ in 0..20 {
                let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let a = m.recommend(&x, &[]).unwrap();
                a.validate().unwrap();
            }
        }
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let data = random_dataset(80, 23);
        let cfg = small_cfg();
        let (a, _) = train_baseline(BaselineKind::D3qnO, &data, &cfg).unwrap();
        let (b, _) = train_baseline(BaselineKind::D3qnO, &data, &cfg).unwrap();
        for (x, y) in a.dueling.iter().zip(b.dueling.iter()) {
            assert_eq!(
                persist::params_sha256(&x.online.value),
                persist::params_sha256(&y.online.value)
            );
            assert_eq!(
                persist::params_sha256(&x.online.advantage),
                persist::params_sha256(&y.online.advantage)
            );
        }
        assert_eq!(a.table.rows, b.table.rows);
    }

    #[test]
    fn independent_organ_recommendation_is_tuple_of_argmaxes() {
        let data = random_dataset(60, 29);
        let (m, _) = train_baseline(BaselineKind::D3qnO, &data, &small_cfg()).unwrap();
        let x: Vec<f64> = vec![0.3; 12];
        let s = m.state(&bundle(x.clone())).unwrap();
        let codes: Vec<usize> = m
            .dueling
            .iter()
            .map(|a| greedy_option(&a.q_values(&s).unwrap()))
            .collect();
        let expect = JointAction::from_organ_codes(codes[0], codes[1], codes[2]).unwrap();
        assert_eq!(m.recommend(&x, &[]).unwrap(), expect);
    }

    #[test]
    fn save_load_round_trip_preserves_recommendations() {
        let data = random_dataset(60, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for kind in [BaselineKind::D3qnS, BaselineKind::QmixO] {
            let (m, _) = train_baseline(kind, &data, &small_cfg()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            m.save(dir.path()).unwrap();
            let back = BaselineModel::load(dir.path()).unwrap();
            assert_eq!(back.kind, kind);
            for _ in 0..10 {
                let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
                assert_eq!(m.recommend(&x, &[]).unwrap(), back.recommend(&x, &[]).unwrap());
            }
        }
    }
}
