//! The agent hierarchy and its coordination machinery.
//!
//! A root option-value agent chooses among no-action, three organ-specific
//! branches, and a cross-organ mixture. Organ masters delegate to
//! single-treatment dosage leaves or intra-organ mixture agents; the
//! cross-organ mixture is a trio of sub-agents whose values are combined by
//! a monotone state-conditioned mixing network, so the factored per-agent
//! argmax equals the argmax of the mixed value.
//!
//! Communication channels append one-hot peer dosage recommendations to an
//! agent's state input. Peer encodings are one-hot over levels rather than
//! scalars: scale-free, no implicit ordinality.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actions::{Organ, RootOption};
use crate::numerics::{Activation, Approximator, GradientTape};
use crate::persist;
use crate::state_repr::EmbeddingTable;
use crate::{Error, Result};

/// Every trainable Q-network in the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentId {
    Rt,
    Neu,
    Car,
    Ren,
    NeuS1,
    NeuS2,
    NeuMix,
    CarIv,
    CarVaso,
    CarMix,
    OMixNeu,
    OMixCar,
    OMixRen,
}

impl AgentId {
    pub const ALL: [AgentId; 13] = [
        AgentId::Rt,
        AgentId::Neu,
        AgentId::Car,
        AgentId::Ren,
        AgentId::NeuS1,
        AgentId::NeuS2,
        AgentId::NeuMix,
        AgentId::CarIv,
        AgentId::CarVaso,
        AgentId::CarMix,
        AgentId::OMixNeu,
        AgentId::OMixCar,
        AgentId::OMixRen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AgentId::Rt => "Rt",
            AgentId::Neu => "Neu",
            AgentId::Car => "Car",
            AgentId::Ren => "Ren",
            AgentId::NeuS1 => "Neu.S1",
            AgentId::NeuS2 => "Neu.S2",
            AgentId::NeuMix => "Neu.Mix",
            AgentId::CarIv => "Car.IV",
            AgentId::CarVaso => "Car.Vaso",
            AgentId::CarMix => "Car.Mix",
            AgentId::OMixNeu => "OMix.Neu",
            AgentId::OMixCar => "OMix.Car",
            AgentId::OMixRen => "OMix.Ren",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        AgentId::ALL
            .into_iter()
            .find(|id| id.name() == name)
            .ok_or_else(|| Error::Contract(format!("unknown agent id {name:?}")))
    }

    /// Output width: one Q value per option.
    pub fn option_count(self) -> usize {
        match self {
            AgentId::Rt => RootOption::COUNT,
            AgentId::Neu | AgentId::Car => 3,
            AgentId::Ren => 5,
            AgentId::NeuS1 | AgentId::NeuS2 | AgentId::CarIv | AgentId::CarVaso => 4,
            AgentId::NeuMix | AgentId::CarMix => 16,
            AgentId::OMixNeu | AgentId::OMixCar => 25,
            AgentId::OMixRen => 6,
        }
    }

    /// Input width given the latent width `k`, raw feature width `d`, and
    /// the raw-features ablation flag. The base is the targeted state (2k
    /// locally, 6k for the cross-organ agents), plus any appended peer
    /// encodings.
    pub fn input_width(self, k: usize, d: usize, no_state_repr: bool) -> usize {
        let local = if no_state_repr { d } else { 2 * k };
        let omix = if no_state_repr { d } else { 6 * k };
        match self {
            AgentId::Rt
            | AgentId::Neu
            | AgentId::Car
            | AgentId::Ren
            | AgentId::NeuS1
            | AgentId::NeuS2
            | AgentId::CarIv
            | AgentId::CarVaso => local,
            AgentId::NeuMix | AgentId::CarMix => mix_input_width(local),
            AgentId::OMixNeu => omix_input_width(Organ::Neu, omix),
            AgentId::OMixCar => omix_input_width(Organ::Car, omix),
            AgentId::OMixRen => omix_input_width(Organ::Ren, omix),
        }
    }
}

// ---------------------------------------------------------------------------
// Communication encodings
// ---------------------------------------------------------------------------

/// One-hot width of a single dosed-treatment level (0..=4).
pub const LEVEL_ENC_WIDTH: usize = 5;
/// One-hot width of the dialysis switch.
pub const DIALYSIS_ENC_WIDTH: usize = 2;

/// One-hot level encoding; index 0 is the no-action slot.
pub fn encode_level(level: u8) -> Result<[f64; LEVEL_ENC_WIDTH]> {
    if level as usize >= LEVEL_ENC_WIDTH {
        return Err(Error::Contract(format!("dosage level {level} out of 0..=4")));
    }
    let mut v = [0.0; LEVEL_ENC_WIDTH];
    v[level as usize] = 1.0;
    Ok(v)
}

/// Encoding width of one organ's full dosage recommendation.
pub fn organ_enc_width(organ: Organ) -> usize {
    match organ {
        // Two dosed axes.
        Organ::Neu | Organ::Car => 2 * LEVEL_ENC_WIDTH,
        // Diuretic level plus the dialysis switch.
        Organ::Ren => LEVEL_ENC_WIDTH + DIALYSIS_ENC_WIDTH,
    }
}

/// One-hot encoding of an organ dosage code (the per-organ code spaces from
/// the action module: Neu/Car 0..25 as first*5+second, Ren 0..6).
pub fn encode_organ_code(organ: Organ, code: usize) -> Result<Vec<f64>> {
    match organ {
        Organ::Neu | Organ::Car => {
            if code >= 25 {
                return Err(Error::Contract(format!("{organ:?} code {code} out of 0..25")));
            }
            let mut v = Vec::with_capacity(organ_enc_width(organ));
            v.extend_from_slice(&encode_level((code / 5) as u8)?);
            v.extend_from_slice(&encode_level((code % 5) as u8)?);
            Ok(v)
        }
        Organ::Ren => {
            if code >= 6 {
                return Err(Error::Contract(format!("Ren code {code} out of 0..6")));
            }
            let diuretic = if (1..=4).contains(&code) { code as u8 } else { 0 };
            let dialysis = usize::from(code == 5);
            let mut v = Vec::with_capacity(organ_enc_width(organ));
            v.extend_from_slice(&encode_level(diuretic)?);
            let mut dial = [0.0; DIALYSIS_ENC_WIDTH];
            dial[dialysis] = 1.0;
            v.extend_from_slice(&dial);
            Ok(v)
        }
    }
}

pub fn mix_input_width(base: usize) -> usize {
    base + 2 * LEVEL_ENC_WIDTH
}

pub fn omix_input_width(organ: Organ, base: usize) -> usize {
    let peers: usize = [Organ::Neu, Organ::Car, Organ::Ren]
        .into_iter()
        .filter(|&o| o != organ)
        .map(organ_enc_width)
        .sum();
    base + peers
}

/// A base state with appended peer recommendations.
#[derive(Debug, Clone, PartialEq)]
pub struct CommunicatedState {
    pub data: Vec<f64>,
    pub base_width: usize,
}

/// Intra-organ mixture input: base organ state plus the two sibling
/// single-treatment levels, one-hot. With `no_communication` the peer slots
/// are fixed zero vectors.
pub fn mix_communicated_state(
    base: &[f64],
    sibling_levels: [u8; 2],
    no_communication: bool,
) -> Result<CommunicatedState> {
    let mut data = base.to_vec();
    for level in sibling_levels {
        if no_communication {
            data.extend_from_slice(&[0.0; LEVEL_ENC_WIDTH]);
        } else {
            data.extend_from_slice(&encode_level(level)?);
        }
    }
    Ok(CommunicatedState { data, base_width: base.len() })
}

/// Cross-organ mixture input for one sub-agent: the shared state plus the
/// other two organs' recommended dosage codes (from the single-organ
/// agents), in Neu, Car, Ren order.
pub fn omix_communicated_state(
    organ: Organ,
    s_omix: &[f64],
    peer_codes: [usize; 3],
    no_communication: bool,
) -> Result<CommunicatedState> {
    let mut data = s_omix.to_vec();
    for peer in [Organ::Neu, Organ::Car, Organ::Ren] {
        if peer == organ {
            continue;
        }
        let code = peer_codes[peer as usize];
        if no_communication {
            data.extend(std::iter::repeat(0.0).take(organ_enc_width(peer)));
        } else {
            data.extend_from_slice(&encode_organ_code(peer, code)?);
        }
    }
    Ok(CommunicatedState { data, base_width: s_omix.len() })
}

// ---------------------------------------------------------------------------
// AgentSpec: one option-value network with its target twin
// ---------------------------------------------------------------------------

/// One Q-network in the hierarchy. Every option here is one-step (it
/// terminates after a single 4-hour transition); `option_duration` is kept
/// for extension to multi-step options.
#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub id: AgentId,
    pub input_width: usize,
    pub options: usize,
    pub option_duration: usize,
    pub online: Approximator,
    pub target: Approximator,
}

impl AgentSpec {
    /// Checked constructor: widths follow the hierarchy's state construction
    /// rules for `id`.
    pub fn new(
        id: AgentId,
        k: usize,
        d: usize,
        no_state_repr: bool,
        hidden: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let input_width = id.input_width(k, d, no_state_repr);
        let options = id.option_count();
        let mut dims = vec![input_width];
        dims.extend_from_slice(hidden);
        dims.push(options);
        let online = Approximator::seeded(&dims, Activation::Relu, Activation::Identity, rng)?;
        let target = online.clone();
        Ok(AgentSpec { id, input_width, options, option_duration: 1, online, target })
    }

    /// Wrap an arbitrary network (e.g. a tabular-equivalent linear map).
    pub fn from_network(id: AgentId, online: Approximator) -> Self {
        let target = online.clone();
        AgentSpec {
            id,
            input_width: online.input_dim(),
            options: online.output_dim(),
            option_duration: 1,
            online,
            target,
        }
    }

    /// Per-option Q vector from the online network.
    pub fn q_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        let q = self.online.forward(state)?;
        for v in &q {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("{}: non-finite Q value", self.id.name())));
            }
        }
        Ok(q)
    }

    pub fn q_values_target(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.target.forward(state)
    }

    pub fn sync_target(&mut self) -> Result<()> {
        self.target.copy_from(&self.online)
    }

    /// One squared-TD-error gradient step toward `y = r + γ max_a' Q(s',a';θ⁻)`
    /// (`y = r` on terminal transitions). Returns the TD error `Q(s,a) − y`.
    pub fn td_update(&mut self, t: &Transition, alpha: f64, gamma: f64) -> Result<f64> {
        self.td_update_with_input_grad(t, alpha, gamma).map(|(e, _)| e)
    }

    /// As [`td_update`](Self::td_update), but also returns ∂loss/∂state for
    /// backpropagation into an upstream embedding table.
    pub fn td_update_with_input_grad(
        &mut self,
        t: &Transition,
        alpha: f64,
        gamma: f64,
    ) -> Result<(f64, Vec<f64>)> {
        if !(0.0 < alpha && alpha <= 1.0) {
            return Err(Error::Contract(format!("alpha {alpha} out of (0, 1]")));
        }
        if !(0.0 < gamma && gamma <= 1.0) {
            return Err(Error::Contract(format!("gamma {gamma} out of (0, 1]")));
        }
        if t.a >= self.options {
            return Err(Error::Contract(format!(
                "{}: option {} out of 0..{}",
                self.id.name(),
                t.a,
                self.options
            )));
        }
        let y = if t.terminal {
            t.r
        } else {
            let next_q = self.q_values_target(t.s_next)?;
            t.r + gamma * max_of(&next_q)
        };
        self.td_update_toward(t.s, t.a, y, alpha)
    }

    /// Gradient step of ½(Q(s,a) − y)² toward an externally supplied target
    /// (used by the phase-2 root retraining where `y` comes from the frozen
    /// lower agents rather than a bootstrapped max).
    pub fn td_update_toward(
        &mut self,
        s: &[f64],
        a: usize,
        y: f64,
        alpha: f64,
    ) -> Result<(f64, Vec<f64>)> {
        if !y.is_finite() {
            return Err(Error::Numeric(format!("{}: non-finite TD target", self.id.name())));
        }
        let mut tape = GradientTape::new(&self.online);
        let q = self.online.forward_taped(s, &mut tape)?;
        let err = q[a] - y;
        let mut out_grad = vec![0.0; self.options];
        out_grad[a] = err;
        let input_grad = self.online.backward(&mut tape, &out_grad)?;
        self.online.sgd_step(&tape, alpha)?;
        Ok((err, input_grad))
    }
}

/// One routed training transition, in the consuming agent's own state space.
#[derive(Debug, Clone, Copy)]
pub struct Transition<'a> {
    pub s: &'a [f64],
    pub a: usize,
    pub r: f64,
    pub s_next: &'a [f64],
    pub terminal: bool,
}

fn max_of(q: &[f64]) -> f64 {
    q.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// ε-greedy option selection over the valid subset; greedy ties break to the
/// lowest index.
pub fn select_option(
    qs: &[f64],
    valid: &[bool],
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if qs.len() != valid.len() {
        return Err(Error::Dimension(format!(
            "Q width {} != mask width {}",
            qs.len(),
            valid.len()
        )));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Contract(format!("epsilon {epsilon} out of [0, 1]")));
    }
    let valid_idx: Vec<usize> = (0..qs.len()).filter(|&i| valid[i]).collect();
    if valid_idx.is_empty() {
        return Err(Error::Contract("all options masked".into()));
    }
    if epsilon > 0.0 && rng.gen_bool(epsilon) {
        return Ok(valid_idx[rng.gen_range(0..valid_idx.len())]);
    }
    let mut best = valid_idx[0];
    for &i in &valid_idx[1..] {
        if qs[i] > qs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Greedy argmax with lowest-index tie-break over all options.
pub fn greedy_option(qs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..qs.len() {
        if qs[i] > qs[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Root target (the case table over root options)
// ---------------------------------------------------------------------------

/// Everything the root target needs from below: the maxima of the trained
/// lower-level value functions at the same state, and the step reward.
#[derive(Debug, Clone, Copy, Default)]
pub struct RootTargetInputs {
    pub reward: f64,
    pub neu_max: Option<f64>,
    pub car_max: Option<f64>,
    pub ren_max: Option<f64>,
    pub omix_max: Option<f64>,
}

/// Target value for one root option: the reward itself for no-action, or
/// the maximum lower-level Q for a delegating option.
pub fn root_q_target(option: RootOption, inputs: &RootTargetInputs) -> Result<f64> {
    let need = |v: Option<f64>, who: &str| {
        v.ok_or_else(|| Error::Contract(format!("root target for {who} requires the {who} agent")))
    };
    let y = match option {
        RootOption::NoAction => inputs.reward,
        RootOption::Neu => need(inputs.neu_max, "Neu")?,
        RootOption::Car => need(inputs.car_max, "Car")?,
        RootOption::Ren => need(inputs.ren_max, "Ren")?,
        RootOption::OMix => need(inputs.omix_max, "OMix")?,
    };
    if !y.is_finite() {
        return Err(Error::Numeric("non-finite root target".into()));
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// Mixing network (cross-organ coordination)
// ---------------------------------------------------------------------------

/// Monotone mixer: `Q = w2·elu(W1 q + b1) + b2`, with `W1`, `w2` produced by
/// abs-activated hypernetworks conditioned on the shared state, so all
/// mixing weights are non-negative for every input.
#[derive(Debug, Clone)]
pub struct MixingNetwork {
    pub hyper_w1: Approximator,
    pub hyper_b1: Approximator,
    pub hyper_w2: Approximator,
    pub hyper_b2: Approximator,
    pub hidden: usize,
    /// Number of sub-agent Q scalars mixed (3 for the organ hierarchy; the
    /// flat cooperative baselines widen it).
    pub inputs: usize,
}

const N_SUB: usize = 3;

fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp() - 1.0
    }
}

fn elu_deriv(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

/// Intermediate values from one mixer forward pass, for the backward pass.
#[derive(Debug, Clone)]
pub struct MixerTrace {
    w1: Vec<f64>,
    w2: Vec<f64>,
    pre: Vec<f64>,
    h: Vec<f64>,
}

impl MixingNetwork {
    pub fn seeded(
        state_width: usize,
        hidden: usize,
        hyper_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::seeded_n(N_SUB, state_width, hidden, hyper_hidden, rng)
    }

    /// Same construction with an arbitrary number of mixed inputs.
    pub fn seeded_n(
        inputs: usize,
        state_width: usize,
        hidden: usize,
        hyper_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if inputs == 0 {
            return Err(Error::Contract("mixer needs at least one input".into()));
        }
        let head = |out: usize, act: Activation, rng: &mut ChaCha8Rng| {
            Approximator::seeded(&[state_width, hyper_hidden, out], Activation::Relu, act, rng)
        };
        Ok(MixingNetwork {
            hyper_w1: head(inputs * hidden, Activation::Abs, rng)?,
            hyper_b1: head(hidden, Activation::Identity, rng)?,
            hyper_w2: head(hidden, Activation::Abs, rng)?,
            hyper_b2: head(1, Activation::Identity, rng)?,
            hidden,
            inputs,
        })
    }

    /// Constant mixer with unit weights and zero biases (the sub-values are
    /// summed); used as a reference case.
    pub fn fixed_sum(state_width: usize) -> Result<Self> {
        let const_head = |out: usize, bias: f64| -> Result<Approximator> {
            let mut l = crate::numerics::Layer::zeros(state_width, out, Activation::Abs);
            l.bias.iter_mut().for_each(|b| *b = bias);
            Approximator::from_layers(vec![l])
        };
        Ok(MixingNetwork {
            hyper_w1: const_head(N_SUB, 1.0)?,
            hyper_b1: const_head(1, 0.0)?,
            hyper_w2: const_head(1, 1.0)?,
            hyper_b2: const_head(1, 0.0)?,
            hidden: 1,
            inputs: N_SUB,
        })
    }

    fn generate(&self, state: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        let w1 = self.hyper_w1.forward(state)?;
        let b1 = self.hyper_b1.forward(state)?;
        let w2 = self.hyper_w2.forward(state)?;
        let b2 = self.hyper_b2.forward(state)?[0];
        debug_assert!(w1.iter().chain(w2.iter()).all(|&w| w >= 0.0), "mixing weights < 0");
        Ok((w1, b1, w2, b2))
    }

    /// Monotone combination of the sub-agent Q scalars.
    pub fn forward(&self, sub_qs: &[f64], state: &[f64]) -> Result<f64> {
        self.forward_traced(sub_qs, state).map(|(q, _)| q)
    }

    pub fn forward_traced(&self, sub_qs: &[f64], state: &[f64]) -> Result<(f64, MixerTrace)> {
        if sub_qs.len() != self.inputs {
            return Err(Error::Dimension(format!(
                "mixer expects {} sub-values, got {}",
                self.inputs,
                sub_qs.len()
            )));
        }
        let (w1, b1, w2, b2) = self.generate(state)?;
        let mut pre = vec![0.0; self.hidden];
        let mut h = vec![0.0; self.hidden];
        for j in 0..self.hidden {
            let mut z = b1[j];
            for (i, q) in sub_qs.iter().enumerate() {
                z += w1[j * self.inputs + i] * q;
            }
            pre[j] = z;
            h[j] = elu(z);
        }
        let q_tot = h.iter().zip(w2.iter()).map(|(h, w)| h * w).sum::<f64>() + b2;
        if !q_tot.is_finite() {
            return Err(Error::Numeric("non-finite mixed Q".into()));
        }
        Ok((q_tot, MixerTrace { w1, w2, pre, h }))
    }

    /// Gradient of the mixed value with respect to the sub-agent inputs;
    /// non-negative everywhere by the monotonicity constraint.
    pub fn sub_q_grads(&self, trace: &MixerTrace) -> Vec<f64> {
        let mut g = vec![0.0; self.inputs];
        for j in 0..self.hidden {
            let factor = trace.w2[j] * elu_deriv(trace.pre[j]);
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += factor * trace.w1[j * self.inputs + i];
            }
        }
        g
    }

    pub fn tapes(&self) -> MixerTapes {
        MixerTapes {
            w1: GradientTape::new(&self.hyper_w1),
            b1: GradientTape::new(&self.hyper_b1),
            w2: GradientTape::new(&self.hyper_w2),
            b2: GradientTape::new(&self.hyper_b2),
        }
    }

    /// Accumulate the gradients of `err · Q_tot` (i.e. one ½(Q_tot − y)²
    /// sample with `err = Q_tot − y`) into the hypernetwork tapes. Returns
    /// ∂loss/∂sub_q for the cooperative sub-agent update.
    pub fn accumulate(
        &self,
        sub_qs: &[f64],
        state: &[f64],
        err: f64,
        tapes: &mut MixerTapes,
    ) -> Result<Vec<f64>> {
        let (_, trace) = self.forward_traced(sub_qs, state)?;
        let mut g_w1 = vec![0.0; self.inputs * self.hidden];
        let mut g_b1 = vec![0.0; self.hidden];
        let mut g_w2 = vec![0.0; self.hidden];
        for j in 0..self.hidden {
            let dh = trace.w2[j] * elu_deriv(trace.pre[j]);
            g_b1[j] = err * dh;
            g_w2[j] = err * trace.h[j];
            for i in 0..self.inputs {
                g_w1[j * self.inputs + i] = err * dh * sub_qs[i];
            }
        }
        let g_b2 = vec![err];
        let heads: [(&Approximator, &mut GradientTape, Vec<f64>); 4] = [
            (&self.hyper_w1, &mut tapes.w1, g_w1),
            (&self.hyper_b1, &mut tapes.b1, g_b1),
            (&self.hyper_w2, &mut tapes.w2, g_w2),
            (&self.hyper_b2, &mut tapes.b2, g_b2),
        ];
        for (net, tape, grad) in heads {
            net.forward_taped(state, tape)?;
            net.backward(tape, &grad)?;
        }
        let dq = self.sub_q_grads(&trace);
        Ok(dq.into_iter().map(|g| err * g).collect())
    }

    /// Apply accumulated hypernetwork gradients.
    pub fn apply(&mut self, tapes: &MixerTapes, alpha: f64) -> Result<()> {
        self.hyper_w1.sgd_step(&tapes.w1, alpha)?;
        self.hyper_b1.sgd_step(&tapes.b1, alpha)?;
        self.hyper_w2.sgd_step(&tapes.w2, alpha)?;
        self.hyper_b2.sgd_step(&tapes.b2, alpha)?;
        Ok(())
    }

    /// One SGD step of ½(Q_tot − y)² through the hypernetworks. Returns
    /// the error and ∂loss/∂sub_q.
    pub fn train_step(
        &mut self,
        sub_qs: &[f64],
        state: &[f64],
        y: f64,
        alpha: f64,
    ) -> Result<(f64, Vec<f64>)> {
        if !y.is_finite() {
            return Err(Error::Numeric("non-finite mixer target".into()));
        }
        let err = self.forward(sub_qs, state)? - y;
        let mut tapes = self.tapes();
        let dq = self.accumulate(sub_qs, state, err, &mut tapes)?;
        self.apply(&tapes, alpha)?;
        Ok((err, dq))
    }
}

/// Gradient accumulators for the four mixer hypernetworks.
#[derive(Debug, Clone)]
pub struct MixerTapes {
    pub w1: GradientTape,
    pub b1: GradientTape,
    pub w2: GradientTape,
    pub b2: GradientTape,
}

impl MixerTapes {
    pub fn reset(&mut self) {
        self.w1.reset();
        self.b1.reset();
        self.w2.reset();
        self.b2.reset();
    }

    pub fn scale(&mut self, factor: f64) {
        self.w1.scale(factor);
        self.b1.scale(factor);
        self.w2.scale(factor);
        self.b2.scale(factor);
    }
}

/// Plain per-organ argmaxes (lowest-index tie-break) without the
/// multi-organ mask.
pub fn factored_argmax(q_neu: &[f64], q_car: &[f64], q_ren: &[f64]) -> [usize; 3] {
    [greedy_option(q_neu), greedy_option(q_car), greedy_option(q_ren)]
}

/// Factored argmax of the mixed value, repaired to satisfy the rule that a
/// cross-organ action treats at least two organs. Option 0 of every organ
/// is its no-action code. When the unconstrained tuple is under-active, the
/// inactive organ whose activation costs least in mixed Q is flipped to its
/// best non-zero option (repeatedly, until two organs are active).
pub fn qmix_argmax(
    mixer: &MixingNetwork,
    state: &[f64],
    q_neu: &[f64],
    q_car: &[f64],
    q_ren: &[f64],
) -> Result<[usize; 3]> {
    let qs = [q_neu, q_car, q_ren];
    for q in qs {
        if q.len() < 2 {
            return Err(Error::Contract("each organ needs >= 2 options".into()));
        }
    }
    let mut codes = factored_argmax(q_neu, q_car, q_ren);
    while codes.iter().filter(|&&c| c != 0).count() < 2 {
        let mut best: Option<(usize, usize, f64)> = None;
        for organ in 0..3 {
            if codes[organ] != 0 {
                continue;
            }
            // Best non-zero option of this organ.
            let q = qs[organ];
            let mut alt = 1;
            for i in 2..q.len() {
                if q[i] > q[alt] {
                    alt = i;
                }
            }
            let mut flipped = codes;
            flipped[organ] = alt;
            let sub = [qs[0][flipped[0]], qs[1][flipped[1]], qs[2][flipped[2]]];
            let mixed = mixer.forward(&sub, state)?;
            if best.map(|(_, _, b)| mixed > b).unwrap_or(true) {
                best = Some((organ, alt, mixed));
            }
        }
        let (organ, alt, _) = best.expect("at least one inactive organ to flip");
        codes[organ] = alt;
    }
    Ok(codes)
}

// ---------------------------------------------------------------------------
// AgentSet: the full hierarchy with its embeddings and mixer
// ---------------------------------------------------------------------------

pub const AGENTS_FORMAT: &str = "hmarl-agents-v1";

/// Every trained component of the hierarchy.
#[derive(Debug, Clone)]
pub struct AgentSet {
    pub k: usize,
    pub d: usize,
    pub no_communication: bool,
    pub no_state_repr: bool,
    pub e_rt: EmbeddingTable,
    pub e_neu: EmbeddingTable,
    pub e_car: EmbeddingTable,
    pub e_ren: EmbeddingTable,
    pub agents: BTreeMap<AgentId, AgentSpec>,
    pub mixer: MixingNetwork,
    /// Agents left untrained because their routed subset was empty.
    pub skipped: Vec<AgentId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AgentManifestEntry {
    id: String,
    input_width: usize,
    options: usize,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct HierarchyManifest {
    format: String,
    k: usize,
    d: usize,
    no_communication: bool,
    no_state_repr: bool,
    mixer_hidden: usize,
    agents: Vec<AgentManifestEntry>,
    skipped: Vec<String>,
}

impl AgentSet {
    /// Freshly initialized hierarchy. `hidden` is the Q-network hidden
    /// widths; the mixer gets `mixer_hidden` mixing units and a
    /// `hyper_hidden`-wide hypernetwork.
    pub fn init(
        k: usize,
        d: usize,
        no_communication: bool,
        no_state_repr: bool,
        hidden: &[usize],
        mixer_hidden: usize,
        hyper_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        use crate::state_repr::LevelTag;
        let e_rt = EmbeddingTable::seeded(LevelTag::Rt, d, k, rng);
        let mut agents = BTreeMap::new();
        for id in AgentId::ALL {
            agents.insert(id, AgentSpec::new(id, k, d, no_state_repr, hidden, rng)?);
        }
        let omix_width = if no_state_repr { d } else { 6 * k };
        let mixer = MixingNetwork::seeded(omix_width, mixer_hidden, hyper_hidden, rng)?;
        Ok(AgentSet {
            k,
            d,
            no_communication,
            no_state_repr,
            e_neu: e_rt.retagged(LevelTag::Neu),
            e_car: e_rt.retagged(LevelTag::Car),
            e_ren: e_rt.retagged(LevelTag::Ren),
            e_rt,
            agents,
            mixer,
            skipped: Vec::new(),
        })
    }

    pub fn agent(&self, id: AgentId) -> Result<&AgentSpec> {
        self.agents.get(&id).ok_or_else(|| {
            Error::Contract(format!("agent {} missing from the hierarchy", id.name()))
        })
    }

    pub fn agent_mut(&mut self, id: AgentId) -> Result<&mut AgentSpec> {
        self.agents.get_mut(&id).ok_or_else(|| {
            Error::Contract(format!("agent {} missing from the hierarchy", id.name()))
        })
    }

    /// Persist as a directory: one weights file per agent, four mixer
    /// heads, the embedding tables, and a hierarchy manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (id, a) in &self.agents {
            let mut tags = BTreeMap::new();
            tags.insert("agent".to_string(), id.name().to_string());
            persist::save_weights(dir, id.name(), &a.online, &tags)?;
            entries.push(AgentManifestEntry {
                id: id.name().to_string(),
                input_width: a.input_width,
                options: a.options,
                file: format!("{}.json", id.name()),
            });
        }
        let no_tags = BTreeMap::new();
        persist::save_weights(dir, "mixer_w1", &self.mixer.hyper_w1, &no_tags)?;
        persist::save_weights(dir, "mixer_b1", &self.mixer.hyper_b1, &no_tags)?;
        persist::save_weights(dir, "mixer_w2", &self.mixer.hyper_w2, &no_tags)?;
        persist::save_weights(dir, "mixer_b2", &self.mixer.hyper_b2, &no_tags)?;
        let tables = [&self.e_rt, &self.e_neu, &self.e_car, &self.e_ren];
        fs::write(dir.join("embeddings.json"), serde_json::to_string_pretty(&tables)?)?;
        let manifest = HierarchyManifest {
            format: AGENTS_FORMAT.to_string(),
            k: self.k,
            d: self.d,
            no_communication: self.no_communication,
            no_state_repr: self.no_state_repr,
            mixer_hidden: self.mixer.hidden,
            agents: entries,
            skipped: self.skipped.iter().map(|id| id.name().to_string()).collect(),
        };
        fs::write(dir.join("hierarchy.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: HierarchyManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("hierarchy.json"))?)?;
        if manifest.format != AGENTS_FORMAT {
            return Err(Error::Format(format!(
                "unsupported hierarchy format {:?}, expected {AGENTS_FORMAT}",
                manifest.format
            )));
        }
        let mut agents = BTreeMap::new();
        for e in &manifest.agents {
            let id = AgentId::from_name(&e.id)?;
            let (online, _) = persist::load_weights(dir, id.name())?;
            if online.input_dim() != e.input_width || online.output_dim() != e.options {
                return Err(Error::Format(format!(
                    "agent {}: stored widths {}x{} disagree with manifest {}x{}",
                    e.id,
                    online.input_dim(),
                    online.output_dim(),
                    e.input_width,
                    e.options
                )));
            }
            agents.insert(id, AgentSpec::from_network(id, online));
        }
        let mixer = MixingNetwork {
            hyper_w1: persist::load_weights(dir, "mixer_w1")?.0,
            hyper_b1: persist::load_weights(dir, "mixer_b1")?.0,
            hyper_w2: persist::load_weights(dir, "mixer_w2")?.0,
            hyper_b2: persist::load_weights(dir, "mixer_b2")?.0,
            hidden: manifest.mixer_hidden,
            inputs: N_SUB,
        };
        let tables: [EmbeddingTable; 4] =
            serde_json::from_str(&fs::read_to_string(dir.join("embeddings.json"))?)?;
        let [e_rt, e_neu, e_car, e_ren] = tables;
        let skipped = manifest
            .skipped
            .iter()
            .map(|s| AgentId::from_name(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(AgentSet {
            k: manifest.k,
            d: manifest.d,
            no_communication: manifest.no_communication,
            no_state_repr: manifest.no_state_repr,
            e_rt,
            e_neu,
            e_car,
            e_ren,
            agents,
            mixer,
            skipped,
        })
    }
}

/// Mix-agent option index for a sibling level pair (both in 1..=4).
pub fn mix_option_index(first: u8, second: u8) -> Result<usize> {
    if !(1..=4).contains(&first) || !(1..=4).contains(&second) {
        return Err(Error::Contract(format!(
            "mix levels ({first}, {second}) out of 1..=4"
        )));
    }
    Ok((first as usize - 1) * 4 + (second as usize - 1))
}

/// Inverse of [`mix_option_index`].
pub fn mix_option_levels(idx: usize) -> Result<(u8, u8)> {
    if idx >= 16 {
        return Err(Error::Contract(format!("mix option {idx} out of 0..16")));
    }
    Ok(((idx / 4 + 1) as u8, (idx % 4 + 1) as u8))
}
