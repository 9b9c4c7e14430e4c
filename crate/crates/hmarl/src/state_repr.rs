//! Dual-layer hierarchical state representations.
//!
//! A raw feature vector `x` (length d) is transformed by a level-specific
//! embedding table `E` (d x k) into per-feature latents `F`, expanded with a
//! pairwise elementwise-product interaction layer `G`, sum-pooled into an
//! observation vector `o` (length k), and concatenated with an
//! exponential-decay temporal context `c` over the previous three
//! observations: `s = (o | c)` of length 2k.
//!
//! Organ-targeted states are built identically with fine-tuned copies of the
//! root table, each decaying its own observation history. The cross-organ
//! state `s_omix` concatenates the three targeted states (length 6k).
//!
//! Gradients of a downstream loss with respect to `E` are available in
//! closed form so embeddings are learned end-to-end.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default latent width.
pub const DEFAULT_K: usize = 8;

/// Decay weight for an observation `delta` steps in the past.
pub fn decay_weight(delta: usize) -> f64 {
    (-(delta as f64)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LevelTag {
    Rt,
    Neu,
    Car,
    Ren,
}

impl LevelTag {
    pub fn name(self) -> &'static str {
        match self {
            LevelTag::Rt => "Rt",
            LevelTag::Neu => "Neu",
            LevelTag::Car => "Car",
            LevelTag::Ren => "Ren",
        }
    }
}

/// A d x k embedding table; row i is feature i's latent vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub level: LevelTag,
    pub d: usize,
    pub k: usize,
    /// Row-major d x k.
    pub rows: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(level: LevelTag, d: usize, k: usize) -> Self {
        EmbeddingTable { level, d, k, rows: vec![0.0; d * k] }
    }

    pub fn seeded<R: rand::Rng>(level: LevelTag, d: usize, k: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let rows = (0..d * k).map(|_| rng.gen_range(-bound..bound)).collect();
        EmbeddingTable { level, d, k, rows }
    }

    /// Copy with a new level tag (organ tables start as copies of the root).
    pub fn retagged(&self, level: LevelTag) -> Self {
        EmbeddingTable { level, d: self.d, k: self.k, rows: self.rows.clone() }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.k..(i + 1) * self.k]
    }

    /// Observation vector `o` for one raw feature vector: embed ->
    /// interactions -> sum pooling.
    pub fn observation(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = embed(x, self)?;
        let g = interactions(&f, self.d, self.k);
        Ok(observe(&f, &g, self.d, self.k))
    }

    /// Full state `s = (o | c)` of length 2k. `history` holds the raw
    /// feature vectors of up to the previous three steps, oldest first.
    pub fn state(&self, x: &[f64], history: &[&[f64]]) -> Result<Vec<f64>> {
        if history.len() > 3 {
            return Err(Error::Contract("temporal context uses at most 3 history entries".into()));
        }
        let o = self.observation(x)?;
        let obs: Vec<Vec<f64>> =
            history.iter().map(|h| self.observation(h)).collect::<Result<_>>()?;
        let c = temporal_context(&obs, self.k);
        let mut s = o;
        s.extend_from_slice(&c);
        Ok(s)
    }

    /// Gradient of a downstream loss with respect to the table entries,
    /// given `ds = ∂loss/∂s` (length 2k) for the state built from
    /// `(x, history)`. Returns a flat d x k gradient.
    pub fn state_grad(&self, x: &[f64], history: &[&[f64]], ds: &[f64]) -> Result<Vec<f64>> {
        if ds.len() != 2 * self.k {
            return Err(Error::Dimension(format!(
                "state grad width {} != 2k = {}",
                ds.len(),
                2 * self.k
            )));
        }
        let (go, gc) = ds.split_at(self.k);
        let mut grad = vec![0.0; self.d * self.k];
        self.accumulate_obs_grad(x, go, 1.0, &mut grad)?;
        let m = history.len();
        for (idx, h) in history.iter().enumerate() {
            let delta = m - idx;
            self.accumulate_obs_grad(h, gc, decay_weight(delta), &mut grad)?;
        }
        Ok(grad)
    }

    /// grad += scale * (∂o(x)/∂E)^T · go, using the closed form
    /// ∂o_m/∂e_{i,m} = x_i + x_i·lin_m + x_i²·e_{i,m} with
    /// lin_m = Σ_j x_j e_{j,m}.
    fn accumulate_obs_grad(
        &self,
        x: &[f64],
        go: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::Dimension(format!("x width {} != d = {}", x.len(), self.d)));
        }
        let mut lin = vec![0.0; self.k];
        for i in 0..self.d {
            let e = self.row(i);
            for m in 0..self.k {
                lin[m] += x[i] * e[m];
            }
        }
        for i in 0..self.d {
            let xi = x[i];
            for m in 0..self.k {
                let e_im = self.rows[i * self.k + m];
                let d_om = xi + xi * lin[m] + xi * xi * e_im;
                grad[i * self.k + m] += scale * go[m] * d_om;
            }
        }
        Ok(())
    }

    /// θ ← θ − lr·grad for a flat d x k gradient.
    pub fn apply_grad(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.rows.len() {
            return Err(Error::Dimension("embedding grad shape mismatch".into()));
        }
        for (r, g) in self.rows.iter_mut().zip(grad.iter()) {
            if !g.is_finite() {
                return Err(Error::Numeric("non-finite embedding gradient".into()));
            }
            *r -= lr * g;
        }
        Ok(())
    }
}

/// Per-feature embedding: row i of F is `x_i * e_i`. Flat row-major d x k.
pub fn embed(x: &[f64], table: &EmbeddingTable) -> Result<Vec<f64>> {
    if x.len() != table.d {
        return Err(Error::Dimension(format!("x width {} != d = {}", x.len(), table.d)));
    }
    let mut f = vec![0.0; table.d * table.k];
    for i in 0..table.d {
        let e = table.row(i);
        for m in 0..table.k {
            f[i * table.k + m] = x[i] * e[m];
        }
    }
    Ok(f)
}

/// Number of unordered feature pairs including self-pairs.
pub fn pair_count(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Number of sum-pooled H columns: d first-order + d(d+1)/2 second-order.
pub fn pooled_term_count(d: usize) -> usize {
    d * (d + 3) / 2
}

/// Pairwise interaction matrix G: columns enumerate unordered pairs (i, j),
/// i <= j, in lexicographic order; column (i,j) = f_i ⊙ f_j. Stored
/// column-major: column p occupies `[p*k, (p+1)*k)`.
pub fn interactions(f: &[f64], d: usize, k: usize) -> Vec<f64> {
    let mut g = vec![0.0; pair_count(d) * k];
    let mut p = 0;
    for i in 0..d {
        for j in i..d {
            let fi = &f[i * k..(i + 1) * k];
            let fj = &f[j * k..(j + 1) * k];
            let col = &mut g[p * k..(p + 1) * k];
            for m in 0..k {
                col[m] = fi[m] * fj[m];
            }
            p += 1;
        }
    }
    g
}

/// Sum pooling over all d(d+3)/2 columns of H = (F | G).
pub fn observe(f: &[f64], g: &[f64], d: usize, k: usize) -> Vec<f64> {
    let mut o = vec![0.0; k];
    for i in 0..d {
        for m in 0..k {
            o[m] += f[i * k + m];
        }
    }
    for p in 0..pair_count(d) {
        for m in 0..k {
            o[m] += g[p * k + m];
        }
    }
    o
}

/// Exponential-decay context over up to three previous observation vectors
/// (oldest first; the last entry is one step in the past). Missing entries
/// contribute zero.
pub fn temporal_context(history: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut c = vec![0.0; k];
    let m = history.len();
    for (idx, o) in history.iter().enumerate() {
        let w = decay_weight(m - idx);
        for j in 0..k {
            c[j] += w * o[j];
        }
    }
    c
}

/// The three organ-targeted states and their concatenation `s_omix`.
#[derive(Debug, Clone)]
pub struct TargetedStates {
    pub neu: Vec<f64>,
    pub car: Vec<f64>,
    pub ren: Vec<f64>,
    pub omix: Vec<f64>,
}

/// Build all targeted states. Each organ keeps its own observation history
/// (the raw-feature history is shared; observations differ per table).
pub fn targeted_states(
    x: &[f64],
    history: &[&[f64]],
    e_neu: &EmbeddingTable,
    e_car: &EmbeddingTable,
    e_ren: &EmbeddingTable,
) -> Result<TargetedStates> {
    let neu = e_neu.state(x, history)?;
    let car = e_car.state(x, history)?;
    let ren = e_ren.state(x, history)?;
    let mut omix = Vec::with_capacity(neu.len() * 3);
    omix.extend_from_slice(&neu);
    omix.extend_from_slice(&car);
    omix.extend_from_slice(&ren);
    Ok(TargetedStates { neu, car, ren, omix })
}
