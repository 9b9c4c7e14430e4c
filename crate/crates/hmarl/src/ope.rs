//! Off-policy evaluation and qualitative policy analyses.
//!
//! The value estimator is consistent weighted per-decision importance
//! sampling (CWPDIS) over logged trajectories, with either simulator-exact
//! logged behavior probabilities or a fitted factored behavior model.
//! Qualitative surfaces: return-binned mortality calibration, dosage
//! difference curves, and severity-stratified treatment correlations.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actions::{
    decompose, JointAction, RootOption, Treatment, NUM_AXES,
};
use crate::agents::mix_option_index;
use crate::features::Episode;
use crate::numerics::{Activation, Approximator, GradientTape, Layer};
use crate::training::{
    car_master_option, neu_master_option, ren_master_option, StateBundle,
};
use crate::{Error, Result};

/// A deterministic evaluation policy: observation context in, action out.
pub trait Policy {
    fn action(&self, x: &[f64], history: &[Vec<f64>]) -> Result<JointAction>;

    /// Estimated expected return from this state under the policy (its own
    /// greedy value estimate). Policies without a value function report an
    /// analysis error; curve builders then fall back to logged returns.
    fn state_value(&self, _x: &[f64], _history: &[Vec<f64>]) -> Result<f64> {
        Err(Error::Analysis("policy provides no value estimate".into()))
    }
}

impl<F> Policy for F
where
    F: Fn(&[f64], &[Vec<f64>]) -> Result<JointAction>,
{
    fn action(&self, x: &[f64], history: &[Vec<f64>]) -> Result<JointAction> {
        self(x, history)
    }
}

fn frame_bundle(ep: &Episode, t: usize) -> StateBundle {
    let lo = t.saturating_sub(3);
    StateBundle {
        x: ep.frames[t].x.clone(),
        history: (lo..t).map(|i| ep.frames[i].x.clone()).collect(),
    }
}

// ---------------------------------------------------------------------------
// Behavior model
// ---------------------------------------------------------------------------

/// Floor every class probability at `floor`, keeping the vector normalized.
/// Classes pinned to the floor stay there; the rest are rescaled, iterating
/// until no rescaled class dips below the floor.
pub fn floor_renorm(p: &mut [f64], floor: f64) -> Result<()> {
    if floor * p.len() as f64 > 1.0 + 1e-12 {
        return Err(Error::Contract(format!(
            "floor {floor} infeasible for {} classes",
            p.len()
        )));
    }
    let mut pinned = vec![false; p.len()];
    loop {
        let pinned_mass: f64 = pinned.iter().zip(p.iter()).filter(|(f, _)| **f).map(|(_, v)| *v).sum();
        let free_mass: f64 = pinned.iter().zip(p.iter()).filter(|(f, _)| !**f).map(|(_, v)| *v).sum();
        let scale = (1.0 - pinned_mass) / free_mass;
        let mut changed = false;
        for i in 0..p.len() {
            if !pinned[i] {
                let v = p[i] * scale;
                if v < floor {
                    p[i] = floor;
                    pinned[i] = true;
                    changed = true;
                } else {
                    p[i] = v;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(())
}

/// One multinomial softmax component of the factored behavior model.
#[derive(Debug, Clone)]
pub struct SoftmaxHead {
    net: Approximator,
}

impl SoftmaxHead {
    fn new(input: usize, classes: usize) -> Result<Self> {
        Ok(SoftmaxHead {
            net: Approximator::from_layers(vec![Layer::zeros(input, classes, Activation::Identity)])?,
        })
    }

    pub fn probs(&self, x: &[f64], floor: f64) -> Result<Vec<f64>> {
        let logits = self.net.forward(x)?;
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
        floor_renorm(&mut p, floor)?;
        Ok(p)
    }

    /// Cross-entropy SGD over (state, class) pairs.
    fn fit(&mut self, samples: &[(&[f64], usize)], epochs: usize, lr: f64) -> Result<()> {
        if samples.is_empty() {
            return Ok(());
        }
        let mut tape = GradientTape::new(&self.net);
        for _ in 0..epochs {
            tape.reset();
            for (x, class) in samples {
                let logits = self.net.forward_taped(x, &mut tape)?;
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut p: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = p.iter().sum();
                p.iter_mut().for_each(|v| *v /= z);
                p[*class] -= 1.0;
                self.net.backward(&mut tape, &p)?;
            }
            tape.scale(1.0 / samples.len() as f64);
            self.net.sgd_step(&tape, lr)?;
            tape.reset();
        }
        Ok(())
    }
}

/// Supervised behavior policy factored like the agent hierarchy: a root
/// option classifier with conditional organ / dosage / cross-organ heads.
/// The probability floor applies within each factored head (a joint floor
/// over 3750 actions cannot normalize), which still bounds every joint
/// probability away from zero.
#[derive(Debug, Clone)]
pub struct FittedBehavior {
    pub floor: f64,
    root: SoftmaxHead,
    neu: SoftmaxHead,
    car: SoftmaxHead,
    ren: SoftmaxHead,
    neu_s1: SoftmaxHead,
    neu_s2: SoftmaxHead,
    neu_mix: SoftmaxHead,
    car_iv: SoftmaxHead,
    car_vaso: SoftmaxHead,
    car_mix: SoftmaxHead,
    omix_neu: SoftmaxHead,
    omix_car: SoftmaxHead,
    omix_ren: SoftmaxHead,
}

impl FittedBehavior {
    /// Probability mass the factored cross-organ heads put on invalid
    /// (fewer than two active organs) code triples; used to renormalize.
    fn omix_invalid_mass(&self, x: &[f64]) -> Result<f64> {
        let pn0 = self.omix_neu.probs(x, self.floor)?[0];
        let pc0 = self.omix_car.probs(x, self.floor)?[0];
        let pr0 = self.omix_ren.probs(x, self.floor)?[0];
        Ok(pn0 * pc0 * pr0
            + (1.0 - pn0) * pc0 * pr0
            + pn0 * (1.0 - pc0) * pr0
            + pn0 * pc0 * (1.0 - pr0))
    }

    /// π_b(a | x) over the full valid joint space.
    pub fn prob(&self, x: &[f64], action: &JointAction) -> Result<f64> {
        let path = decompose(action)?;
        let f = self.floor;
        let p_root = self.root.probs(x, f)?[path.root.index()];
        let branch = match path.root {
            RootOption::NoAction => 1.0,
            RootOption::Neu => {
                let opt = neu_master_option(&path);
                let p_master = self.neu.probs(x, f)?[opt];
                let p_leaf = match opt {
                    0 => self.neu_s1.probs(x, f)?[(action.levels[0] - 1) as usize],
                    1 => self.neu_s2.probs(x, f)?[(action.levels[1] - 1) as usize],
                    _ => {
                        let idx = mix_option_index(action.levels[0], action.levels[1])?;
                        self.neu_mix.probs(x, f)?[idx]
                    }
                };
                p_master * p_leaf
            }
            RootOption::Car => {
                let opt = car_master_option(&path);
                let p_master = self.car.probs(x, f)?[opt];
                let p_leaf = match opt {
                    0 => self.car_iv.probs(x, f)?[(action.levels[2] - 1) as usize],
                    1 => self.car_vaso.probs(x, f)?[(action.levels[3] - 1) as usize],
                    _ => {
                        let idx = mix_option_index(action.levels[2], action.levels[3])?;
                        self.car_mix.probs(x, f)?[idx]
                    }
                };
                p_master * p_leaf
            }
            RootOption::Ren => self.ren.probs(x, f)?[ren_master_option(&path)],
            RootOption::OMix => {
                let (cn, cc, cr) = action.organ_codes();
                let pn = self.omix_neu.probs(x, f)?[cn];
                let pc = self.omix_car.probs(x, f)?[cc];
                let pr = self.omix_ren.probs(x, f)?[cr];
                pn * pc * pr / (1.0 - self.omix_invalid_mass(x)?)
            }
        };
        Ok(p_root * branch)
    }
}

/// Behavior policy for importance ratios: either the exact probabilities
/// logged alongside each frame, or a fitted model.
pub enum BehaviorModel {
    Logged,
    Fitted(FittedBehavior),
}

impl BehaviorModel {
    /// π_b of the logged action at step `t` of `ep`.
    pub fn logged_action_prob(&self, ep: &Episode, t: usize) -> Result<f64> {
        let frame = &ep.frames[t];
        match self {
            BehaviorModel::Logged => frame.behavior_prob.ok_or_else(|| {
                Error::Data(format!(
                    "episode {} step {t} has no logged behavior probability",
                    ep.patient_id
                ))
            }),
            BehaviorModel::Fitted(m) => m.prob(&frame.x, &frame.action),
        }
    }
}

/// Parameters for [`fit_behavior`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub floor: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { epochs: 200, lr: 0.5, floor: 0.01 }
    }
}

/// Fit the factored multinomial behavior model on logged actions.
pub fn fit_behavior(episodes: &[Episode], cfg: &FitConfig) -> Result<FittedBehavior> {
    let d = episodes
        .first()
        .and_then(|e| e.frames.first())
        .map(|f| f.x.len())
        .ok_or_else(|| Error::Data("no frames to fit a behavior model on".into()))?;
    let mut model = FittedBehavior {
        floor: cfg.floor,
        root: SoftmaxHead::new(d, 5)?,
        neu: SoftmaxHead::new(d, 3)?,
        car: SoftmaxHead::new(d, 3)?,
        ren: SoftmaxHead::new(d, 5)?,
        neu_s1: SoftmaxHead::new(d, 4)?,
        neu_s2: SoftmaxHead::new(d, 4)?,
        neu_mix: SoftmaxHead::new(d, 16)?,
        car_iv: SoftmaxHead::new(d, 4)?,
        car_vaso: SoftmaxHead::new(d, 4)?,
        car_mix: SoftmaxHead::new(d, 16)?,
        omix_neu: SoftmaxHead::new(d, 25)?,
        omix_car: SoftmaxHead::new(d, 25)?,
        omix_ren: SoftmaxHead::new(d, 6)?,
    };
    // Route each frame to the heads its action exercises.
    let mut sets: BTreeMap<&str, Vec<(&[f64], usize)>> = BTreeMap::new();
    for ep in episodes {
        for f in &ep.frames {
            let path = decompose(&f.action)?;
            let x = f.x.as_slice();
            sets.entry("root").or_default().push((x, path.root.index()));
            match path.root {
                RootOption::NoAction => {}
                RootOption::Neu => {
                    let opt = neu_master_option(&path);
                    sets.entry("neu").or_default().push((x, opt));
                    match opt {
                        0 => sets.entry("neu_s1").or_default().push((x, (f.action.levels[0] - 1) as usize)),
                        1 => sets.entry("neu_s2").or_default().push((x, (f.action.levels[1] - 1) as usize)),
                        _ => sets
                            .entry("neu_mix")
                            .or_default()
                            .push((x, mix_option_index(f.action.levels[0], f.action.levels[1])?)),
                    }
                }
                RootOption::Car => {
                    let opt = car_master_option(&path);
                    sets.entry("car").or_default().push((x, opt));
                    match opt {
                        0 => sets.entry("car_iv").or_default().push((x, (f.action.levels[2] - 1) as usize)),
                        1 => sets.entry("car_vaso").or_default().push((x, (f.action.levels[3] - 1) as usize)),
                        _ => sets
                            .entry("car_mix")
                            .or_default()
                            .push((x, mix_option_index(f.action.levels[2], f.action.levels[3])?)),
                    }
                }
                RootOption::Ren => sets.entry("ren").or_default().push((x, ren_master_option(&path))),
                RootOption::OMix => {
                    let (cn, cc, cr) = f.action.organ_codes();
                    sets.entry("omix_neu").or_default().push((x, cn));
                    sets.entry("omix_car").or_default().push((x, cc));
                    sets.entry("omix_ren").or_default().push((x, cr));
                }
            }
        }
    }
    let empty = Vec::new();
    let get = |k: &str| sets.get(k).unwrap_or(&empty);
    model.root.fit(get("root"), cfg.epochs, cfg.lr)?;
    model.neu.fit(get("neu"), cfg.epochs, cfg.lr)?;
    model.car.fit(get("car"), cfg.epochs, cfg.lr)?;
    model.ren.fit(get("ren"), cfg.epochs, cfg.lr)?;
    model.neu_s1.fit(get("neu_s1"), cfg.epochs, cfg.lr)?;
    model.neu_s2.fit(get("neu_s2"), cfg.epochs, cfg.lr)?;
    model.neu_mix.fit(get("neu_mix"), cfg.epochs, cfg.lr)?;
    model.car_iv.fit(get("car_iv"), cfg.epochs, cfg.lr)?;
    model.car_vaso.fit(get("car_vaso"), cfg.epochs, cfg.lr)?;
    model.car_mix.fit(get("car_mix"), cfg.epochs, cfg.lr)?;
    model.omix_neu.fit(get("omix_neu"), cfg.epochs, cfg.lr)?;
    model.omix_car.fit(get("omix_car"), cfg.epochs, cfg.lr)?;
    model.omix_ren.fit(get("omix_ren"), cfg.epochs, cfg.lr)?;
    Ok(model)
}

/// Mean negative log behavior probability of the logged actions; lower is a
/// better fit. Diagnostic only.
pub fn behavior_log_loss(episodes: &[Episode], behavior: &BehaviorModel) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for ep in episodes {
        for t in 0..ep.frames.len() {
            let p = behavior.logged_action_prob(ep, t)?;
            if p <= 0.0 {
                return Err(Error::Contract(format!(
                    "zero behavior probability at {} step {t}",
                    ep.patient_id
                )));
            }
            total -= p.ln();
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

// ---------------------------------------------------------------------------
// CWPDIS
// ---------------------------------------------------------------------------

/// Consistent weighted per-decision importance sampling.
///
/// V = Σ_t γ^t · (Σ_i ρ_{i,1:t} r_{i,t}) / (Σ_i ρ_{i,1:t}), where ρ is the
/// cumulative importance ratio and deterministic evaluation policies use
/// indicator ratios. Finished trajectories behave as absorbing: their final
/// ratio keeps weighting the denominator with zero reward, which makes the
/// estimator reduce to the empirical mean on-policy. Timesteps with a zero
/// denominator contribute zero.
pub fn cwpdis(
    episodes: &[Episode],
    policy: &dyn Policy,
    behavior: &BehaviorModel,
    gamma: f64,
) -> Result<f64> {
    let horizon = episodes.iter().map(|e| e.frames.len()).max().unwrap_or(0);
    let mut num = vec![0.0; horizon];
    let mut den = vec![0.0; horizon];
    for ep in episodes {
        let mut rho = 1.0;
        for t in 0..ep.frames.len() {
            let frame = &ep.frames[t];
            let b = frame_bundle(ep, t);
            let chosen = policy.action(&b.x, &b.history)?;
            let pb = behavior.logged_action_prob(ep, t)?;
            if pb <= 0.0 {
                return Err(Error::Contract(format!(
                    "zero behavior probability at {} step {t}",
                    ep.patient_id
                )));
            }
            let indicator = if chosen == frame.action { 1.0 } else { 0.0 };
            rho *= indicator / pb;
            num[t] += rho * frame.reward;
            den[t] += rho;
            if rho == 0.0 {
                break; // the trajectory contributes nothing from here on
            }
        }
        if rho != 0.0 {
            for t in ep.frames.len()..horizon {
                den[t] += rho; // absorbing continuation, reward 0
            }
        }
    }
    let mut v = 0.0;
    for t in 0..horizon {
        if den[t] != 0.0 {
            v += gamma.powi(t as i32) * num[t] / den[t];
        }
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Mortality estimation from return bins
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MortalityEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// Evaluation returns outside the calibration range, clamped to an edge
    /// bin.
    pub clamped: usize,
}

/// Equal-count return→mortality calibration from clinician trajectories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnCalibration {
    /// `bins + 1` edges over clinician returns (ascending).
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mortality: Vec<f64>,
}

impl ReturnCalibration {
    pub fn fit(clinician: &[(f64, bool)], bins: usize) -> Result<Self> {
        if clinician.len() < bins {
            return Err(Error::Analysis(format!(
                "{} trajectories cannot fill {bins} calibration bins",
                clinician.len()
            )));
        }
        let mut sorted: Vec<(f64, bool)> = clinician.to_vec();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = sorted.len();
        let mut edges = Vec::with_capacity(bins + 1);
        let mut counts = Vec::with_capacity(bins);
        let mut mortality = Vec::with_capacity(bins);
        edges.push(sorted[0].0);
        let mut start = 0usize;
        for b in 0..bins {
            let end = (n * (b + 1)) / bins;
            let slice = &sorted[start..end];
            counts.push(slice.len());
            let dead = slice.iter().filter(|(_, d)| *d).count();
            mortality.push(dead as f64 / slice.len().max(1) as f64);
            // Midpoint between adjacent bins so members map back exactly.
            let edge = if end < n {
                (sorted[end - 1].0 + sorted[end].0) / 2.0
            } else {
                sorted[n - 1].0
            };
            edges.push(edge.max(*edges.last().unwrap()));
            start = end;
        }
        Ok(ReturnCalibration { edges, counts, mortality })
    }

    /// Piecewise-constant lookup; out-of-range values clamp to edge bins.
    pub fn lookup(&self, value: f64) -> (f64, bool) {
        let bins = self.mortality.len();
        if value < self.edges[0] {
            return (self.mortality[0], true);
        }
        if value > self.edges[bins] {
            return (self.mortality[bins - 1], true);
        }
        let mut b = 0;
        while b + 1 < bins && value > self.edges[b + 1] {
            b += 1;
        }
        (self.mortality[b], false)
    }
}

/// Estimate a policy's mortality by mapping its per-trajectory return
/// estimates through the clinician return→mortality calibration; the
/// standard error is a 1000-resample bootstrap over evaluation returns.
pub fn mortality_from_returns(
    clinician: &[(f64, bool)],
    eval_returns: &[f64],
    bins: usize,
    seed: u64,
) -> Result<MortalityEstimate> {
    if eval_returns.is_empty() {
        return Err(Error::Analysis("no evaluation returns".into()));
    }
    let cal = ReturnCalibration::fit(clinician, bins)?;
    let mut clamped = 0usize;
    let rates: Vec<f64> = eval_returns
        .iter()
        .map(|v| {
            let (r, c) = cal.lookup(*v);
            if c {
                clamped += 1;
            }
            r
        })
        .collect();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let resamples = 1000;
    let mut boot = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let s: f64 = (0..rates.len())
            .map(|_| rates[rng.gen_range(0..rates.len())])
            .sum();
        boot.push(s / rates.len() as f64);
    }
    let bm = boot.iter().sum::<f64>() / resamples as f64;
    let var = boot.iter().map(|v| (v - bm) * (v - bm)).sum::<f64>() / (resamples - 1) as f64;
    Ok(MortalityEstimate { mean, stderr: var.sqrt(), clamped })
}

// ---------------------------------------------------------------------------
// Binned curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinnedCurve {
    /// `len(counts) + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mortality: Vec<f64>,
    /// Binomial standard error per bin.
    pub stderr: Vec<f64>,
}

impl BinnedCurve {
    pub fn total_count(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_lo", "bin_hi", "n", "mortality", "stderr"])?;
        for i in 0..self.counts.len() {
            w.write_record([
                format!("{}", self.edges[i]),
                format!("{}", self.edges[i + 1]),
                format!("{}", self.counts[i]),
                format!("{}", self.mortality[i]),
                format!("{}", self.stderr[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut edges: Vec<f64> = Vec::new();
        let mut counts = Vec::new();
        let mut mortality = Vec::new();
        let mut stderr = Vec::new();
        for rec in r.deserialize() {
            let (lo, hi, n, m, s): (f64, f64, usize, f64, f64) = rec?;
            if edges.is_empty() {
                edges.push(lo);
            }
            edges.push(hi);
            counts.push(n);
            mortality.push(m);
            stderr.push(s);
        }
        Ok(BinnedCurve { edges, counts, mortality, stderr })
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Analysis("spearman needs two equal-length series of n >= 2".into()));
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Analysis("constant series has no correlation".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Mortality binned over per-trajectory expected returns, with the Spearman
/// correlation between bin centers and bin mortality.
pub fn mortality_vs_return_curve(
    returns: &[(f64, bool)],
    bins: usize,
) -> Result<(BinnedCurve, f64)> {
    let cal = ReturnCalibration::fit(returns, bins)?;
    let nonempty = cal.counts.iter().filter(|c| **c > 0).count();
    if nonempty < 2 {
        return Err(Error::Analysis(format!("{nonempty} nonempty bins; need at least 2")));
    }
    let stderr: Vec<f64> = cal
        .counts
        .iter()
        .zip(cal.mortality.iter())
        .map(|(n, p)| if *n > 0 { (p * (1.0 - p) / *n as f64).sqrt() } else { 0.0 })
        .collect();
    let centers: Vec<f64> = (0..bins)
        .map(|b| (cal.edges[b] + cal.edges[b + 1]) / 2.0)
        .collect();
    let rho = spearman(&centers, &cal.mortality).unwrap_or(0.0);
    Ok((
        BinnedCurve { edges: cal.edges, counts: cal.counts, mortality: cal.mortality, stderr },
        rho,
    ))
}

// ---------------------------------------------------------------------------
// Dosage difference curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DosageCurve {
    pub treatment: String,
    /// Signed clinician − policy level offsets, ascending.
    pub offsets: Vec<i32>,
    pub counts: Vec<usize>,
    pub mortality: Vec<f64>,
    /// mortality(extreme |offset|) − mortality(offset 0); positive means
    /// agreeing with the policy is associated with survival.
    pub v_score: Option<f64>,
}

impl DosageCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["offset", "n", "mortality"])?;
        for i in 0..self.offsets.len() {
            w.write_record([
                format!("{}", self.offsets[i]),
                format!("{}", self.counts[i]),
                format!("{}", self.mortality[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-treatment mortality over (clinician level − policy level) offsets.
/// Each timestep inherits its patient's outcome.
pub fn dosage_difference_curves(
    episodes: &[Episode],
    policy: &dyn Policy,
) -> Result<Vec<DosageCurve>> {
    let mut per_axis: Vec<Vec<(usize, usize)>> = Treatment::ALL
        .iter()
        .map(|t| {
            let span = if *t == Treatment::Dialysis { 3 } else { 9 };
            vec![(0usize, 0usize); span]
        })
        .collect();
    for ep in episodes {
        let dead = ep.deceased();
        for t in 0..ep.frames.len() {
            let b = frame_bundle(ep, t);
            let rec = policy.action(&b.x, &b.history)?;
            for (axis, treatment) in Treatment::ALL.iter().enumerate() {
                let max = if *treatment == Treatment::Dialysis { 1i32 } else { 4 };
                let diff = ep.frames[t].action.levels[axis] as i32 - rec.levels[axis] as i32;
                let bin = (diff + max) as usize;
                let (n, d) = &mut per_axis[axis][bin];
                *n += 1;
                if dead {
                    *d += 1;
                }
            }
        }
    }
    let mut out = Vec::with_capacity(NUM_AXES);
    for (axis, treatment) in Treatment::ALL.iter().enumerate() {
        let max = if *treatment == Treatment::Dialysis { 1i32 } else { 4 };
        let offsets: Vec<i32> = (-max..=max).collect();
        let counts: Vec<usize> = per_axis[axis].iter().map(|(n, _)| *n).collect();
        let mortality: Vec<f64> = per_axis[axis]
            .iter()
            .map(|(n, d)| if *n > 0 { *d as f64 / *n as f64 } else { 0.0 })
            .collect();
        let zero_bin = max as usize;
        let extremes: Vec<f64> = [0usize, offsets.len() - 1]
            .iter()
            .filter(|&&i| counts[i] > 0)
            .map(|&i| mortality[i])
            .collect();
        let v_score = if counts[zero_bin] > 0 && !extremes.is_empty() {
            Some(extremes.iter().sum::<f64>() / extremes.len() as f64 - mortality[zero_bin])
        } else {
            None
        };
        out.push(DosageCurve {
            treatment: treatment.name().to_string(),
            offsets,
            counts,
            mortality,
            v_score,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Treatment correlations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumCorrelations {
    pub severity: Severity,
    pub deceased: bool,
    pub n: usize,
    /// Pearson correlations of per-timestep dosage levels; constant columns
    /// are flagged and set to zero off-diagonal.
    pub clinician: Vec<Vec<f64>>,
    pub policy: Vec<Vec<f64>>,
    pub constant_flags: Vec<String>,
}

fn correlation_matrix(rows: &[[f64; NUM_AXES]], flags: &mut Vec<String>, side: &str) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; NUM_AXES]; NUM_AXES];
    for i in 0..NUM_AXES {
        m[i][i] = 1.0;
        for j in (i + 1)..NUM_AXES {
            let xs: Vec<f64> = rows.iter().map(|r| r[i]).collect();
            let ys: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let c = match pearson(&xs, &ys) {
                Ok(c) => c,
                Err(_) => {
                    flags.push(format!(
                        "{side}: constant column in pair ({}, {})",
                        Treatment::ALL[i].name(),
                        Treatment::ALL[j].name()
                    ));
                    0.0
                }
            };
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    m
}

/// 6x6 treatment-level correlation matrices, stratified by SOFA severity
/// tertile and outcome, for the clinician and the policy side by side.
pub fn treatment_correlations(
    episodes: &[Episode],
    policy: &dyn Policy,
) -> Result<Vec<StratumCorrelations>> {
    let mut sofas: Vec<u32> = episodes
        .iter()
        .flat_map(|e| e.frames.iter().map(|f| f.sofa_raw))
        .collect();
    if sofas.is_empty() {
        return Err(Error::Analysis("no frames to stratify".into()));
    }
    sofas.sort_unstable();
    let t1 = sofas[sofas.len() / 3];
    let t2 = sofas[(2 * sofas.len()) / 3];
    let severity_of = |s: u32| {
        if s < t1 {
            Severity::Low
        } else if s < t2 {
            Severity::Medium
        } else {
            Severity::High
        }
    };
    let mut buckets: BTreeMap<(u8, bool), (Vec<[f64; NUM_AXES]>, Vec<[f64; NUM_AXES]>)> =
        BTreeMap::new();
    for ep in episodes {
        let dead = ep.deceased();
        for t in 0..ep.frames.len() {
            let b = frame_bundle(ep, t);
            let rec = policy.action(&b.x, &b.history)?;
            let sev = severity_of(ep.frames[t].sofa_raw);
            let key = (sev as u8, dead);
            let clin: [f64; NUM_AXES] =
                core::array::from_fn(|i| ep.frames[t].action.levels[i] as f64);
            let pol: [f64; NUM_AXES] = core::array::from_fn(|i| rec.levels[i] as f64);
            let e = buckets.entry(key).or_default();
            e.0.push(clin);
            e.1.push(pol);
        }
    }
    let mut out = Vec::new();
    for ((sev, dead), (clin, pol)) in buckets {
        let severity = match sev {
            0 => Severity::Low,
            1 => Severity::Medium,
            _ => Severity::High,
        };
        let mut flags = Vec::new();
        let clinician = correlation_matrix(&clin, &mut flags, "clinician");
        let policy_m = correlation_matrix(&pol, &mut flags, "policy");
        out.push(StratumCorrelations {
            severity,
            deceased: dead,
            n: clin.len(),
            clinician,
            policy: policy_m,
            constant_flags: flags,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub v_cwpdis: f64,
    /// Mean discounted return of the logged cohort (on-policy reference).
    pub behavior_mean_return: f64,
    pub behavior_mortality: f64,
    pub estimated_mortality: MortalityEstimate,
    pub return_curve_spearman: f64,
    pub dosage_v_scores: BTreeMap<String, Option<f64>>,
}

/// Run every estimator and analysis over a test cohort, writing
/// `report.json` plus per-curve CSVs under `curves/`.
pub fn evaluate_policy(
    episodes: &[Episode],
    policy: &dyn Policy,
    behavior: &BehaviorModel,
    gamma: f64,
    bins: usize,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<EvaluationReport> {
    let v = cwpdis(episodes, policy, behavior, gamma)?;
    let clinician: Vec<(f64, bool)> = episodes
        .iter()
        .map(|e| (e.discounted_return(gamma), e.deceased()))
        .collect();
    let behavior_mean_return =
        clinician.iter().map(|(r, _)| r).sum::<f64>() / clinician.len().max(1) as f64;
    let behavior_mortality = clinician.iter().filter(|(_, d)| *d).count() as f64
        / clinician.len().max(1) as f64;
    // Per-trajectory expected returns under the policy: its own value
    // estimate at each initial state. Policies without a value function
    // fall back to the cohort-level CWPDIS scalar (for calibration) and
    // logged returns (for the curve).
    let values: Option<Vec<f64>> = episodes
        .iter()
        .map(|e| e.frames.first().and_then(|f| policy.state_value(&f.x, &[]).ok()))
        .collect();
    let eval_returns = values.clone().unwrap_or_else(|| vec![v; episodes.len()]);
    let estimated_mortality = mortality_from_returns(&clinician, &eval_returns, bins, seed)?;
    let curve_points: Vec<(f64, bool)> = match &values {
        Some(vs) => vs.iter().zip(&clinician).map(|(&v, &(_, d))| (v, d)).collect(),
        None => clinician.clone(),
    };
    let (curve, rho) = mortality_vs_return_curve(&curve_points, bins)?;
    let dosage = dosage_difference_curves(episodes, policy)?;
    let correlations = treatment_correlations(episodes, policy)?;
    let report = EvaluationReport {
        v_cwpdis: v,
        behavior_mean_return,
        behavior_mortality,
        estimated_mortality: estimated_mortality.clone(),
        return_curve_spearman: rho,
        dosage_v_scores: dosage
            .iter()
            .map(|c| (c.treatment.clone(), c.v_score))
            .collect(),
    };
    if let Some(dir) = out_dir {
        let curves = dir.join("curves");
        fs::create_dir_all(&curves)?;
        curve.write_csv(&curves.join("mortality_vs_return.csv"))?;
        for c in &dosage {
            c.write_csv(&curves.join(format!("dosage_diff_{}.csv", c.treatment)))?;
        }
        fs::write(
            curves.join("correlations.json"),
            serde_json::to_string_pretty(&correlations)?,
        )?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}
