//! Synthetic data generation and point-process residual diagnostics.
//!
//! Threads are simulated by Ogata thinning with a conservative piecewise
//! upper bound recomputed after every candidate. Labels of accepted events
//! are drawn proportionally to the per-label intensity, and embeddings come
//! from optional per-label Gaussian clusters (zero vectors otherwise), which
//! gives the text-based classifiers a recoverable signal.
//!
//! The time-rescaling check transforms inter-event compensator increments,
//! which are iid Exp(1) under the generating model, and reports a
//! Kolmogorov-Smirnov p-value.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::intensity::{compensator, LabelSource};
use crate::kernels::exp_kernel;
use crate::types::{Corpus, Event, ModelParams, Thread, Variant};

/// Seed sub-stream offset for per-thread simulation RNGs.
const STREAM_SIM_BASE: u64 = 2_000_000;

/// Per-label Gaussian embedding clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpec {
    /// One mean vector per label, all of the same dimension.
    pub means: Vec<Array1<f64>>,
    /// Isotropic standard deviation around the label's mean.
    pub stddev: f64,
}

/// Ground-truth generator settings for the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    /// Per-label base rates; non-negative with a positive sum.
    pub mu: Array1<f64>,
    /// Influence matrix; spectral radius must stay below 1.
    pub alpha: Array2<f64>,
    pub omega: f64,
    /// Observation window `[0, T]` per thread.
    pub horizon: f64,
    pub num_threads: usize,
    /// Per-label embedding clusters; zero vectors when absent.
    pub embedding: Option<EmbeddingSpec>,
    pub seed: u64,
}

impl SimSpec {
    pub fn num_labels(&self) -> usize {
        self.mu.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding
            .as_ref()
            .map(|e| e.means.first().map(|m| m.len()).unwrap_or(1))
            .unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_labels();
        if k < 2 {
            return Err(Error::InvalidParams("need at least 2 labels".into()));
        }
        if self.mu.iter().any(|&m| m < 0.0) || self.mu.sum() <= 0.0 {
            return Err(Error::InvalidParams(
                "mu entries must be non-negative with a positive sum".into(),
            ));
        }
        if self.alpha.nrows() != k || self.alpha.ncols() != k {
            return Err(Error::Dimension(format!(
                "alpha is {}x{}, expected {k}x{k}",
                self.alpha.nrows(),
                self.alpha.ncols()
            )));
        }
        if self.alpha.iter().any(|&a| a < 0.0) {
            return Err(Error::InvalidParams("alpha entries must be non-negative".into()));
        }
        if self.omega.is_nan()
            || self.omega <= 0.0
            || self.horizon.is_nan()
            || self.horizon <= 0.0
            || self.num_threads == 0
        {
            return Err(Error::InvalidParams(
                "omega and horizon must be positive and num_threads at least 1".into(),
            ));
        }
        if let Some(spec) = &self.embedding {
            if spec.means.len() != k {
                return Err(Error::Dimension(format!(
                    "embedding spec has {} means for {k} labels",
                    spec.means.len()
                )));
            }
            let dim = spec.means[0].len();
            if spec.means.iter().any(|m| m.len() != dim) {
                return Err(Error::Dimension("cluster means differ in dimension".into()));
            }
            if spec.stddev < 0.0 {
                return Err(Error::InvalidParams("cluster stddev must be non-negative".into()));
            }
        }
        // The branching matrix has entries alpha[i,j] (the kernel integrates
        // to 1); the process is stable only below spectral radius 1.
        let radius = spectral_radius(&self.alpha);
        if radius >= 1.0 {
            return Err(Error::Unstable(radius));
        }
        Ok(())
    }

    /// The generating parameters as a plain-model parameter set, usable as
    /// ground truth for likelihood and rescaling checks.
    pub fn true_params(&self) -> ModelParams {
        ModelParams {
            variant: Variant::PlainMhp,
            weights: Array2::zeros((self.num_labels(), self.embedding_dim())),
            alpha: self.alpha.clone(),
            omega: self.omega,
            sigma: 1.0,
            reg_c: 0.0,
            mu_const: self.mu.clone(),
            nn: None,
        }
    }
}

/// Largest-magnitude eigenvalue of a non-negative matrix by power iteration.
pub fn spectral_radius(m: &Array2<f64>) -> f64 {
    let k = m.nrows();
    if m.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let mut v = Array1::from_elem(k, 1.0 / k as f64);
    let mut radius = 0.0;
    for _ in 0..2_000 {
        let next = m.dot(&v);
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let scaled = next.mapv(|x| x / norm);
        let new_radius = norm;
        let moved = (&scaled - &v).iter().map(|d| d.abs()).fold(0.0, f64::max);
        v = scaled;
        radius = new_radius;
        if moved < 1e-14 {
            break;
        }
    }
    radius
}

fn plain_intensities(
    mu: &Array1<f64>,
    alpha: &Array2<f64>,
    omega: f64,
    events: &[(f64, usize)],
    t: f64,
) -> Array1<f64> {
    let mut lam = mu.clone();
    for &(t_l, y_l) in events {
        if t_l <= t {
            lam.scaled_add(exp_kernel(t - t_l, omega), &alpha.row(y_l));
        }
    }
    lam
}

fn simulate_thread(spec: &SimSpec, mark: usize, seed: u64) -> Thread {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let k = spec.num_labels();
    // Conservative padding on top of the left-endpoint intensity: the sum of
    // column maxima bounds any jump the next accepted event could add.
    let padding: f64 = (0..k)
        .map(|j| (0..k).map(|i| spec.alpha[[i, j]]).fold(0.0, f64::max))
        .sum();

    let mut events: Vec<(f64, usize)> = Vec::new();
    let mut t = 0.0;
    loop {
        let bound = plain_intensities(&spec.mu, &spec.alpha, spec.omega, &events, t).sum() + padding;
        let wait = -((1.0 - rng.random::<f64>()).ln()) / bound;
        let cand = t + wait;
        if cand > spec.horizon {
            break;
        }
        if cand <= t {
            // A zero-length wait cannot produce a strictly increasing time.
            continue;
        }
        let lam = plain_intensities(&spec.mu, &spec.alpha, spec.omega, &events, cand);
        let total = lam.sum();
        if rng.random::<f64>() * bound <= total {
            // Accepted: assign the label proportionally to per-label intensity.
            let mut pick = rng.random::<f64>() * total;
            let mut label = k - 1;
            for (y, &l) in lam.iter().enumerate() {
                if pick < l {
                    label = y;
                    break;
                }
                pick -= l;
            }
            events.push((cand, label));
        }
        t = cand;
    }

    let dim = spec.embedding_dim();
    let events = events
        .into_iter()
        .map(|(time, label)| {
            let embedding = match &spec.embedding {
                Some(e) => {
                    let mean = &e.means[label];
                    Array1::from_shape_fn(dim, |i| {
                        mean[i] + e.stddev * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    })
                }
                None => Array1::zeros(dim),
            };
            Event {
                time,
                label,
                mark,
                embedding,
            }
        })
        .collect();
    Thread {
        id: format!("sim{mark}"),
        mark,
        events,
        horizon: spec.horizon,
    }
}

/// Simulate a corpus by Ogata thinning; deterministic given the seed, with
/// threads generated independently on derived per-thread streams.
pub fn simulate(spec: &SimSpec) -> Result<Corpus> {
    spec.validate()?;
    let threads: Vec<Thread> = (0..spec.num_threads)
        .into_par_iter()
        .map(|i| simulate_thread(spec, i, derive_seed(spec.seed, STREAM_SIM_BASE + i as u64)))
        .collect();
    Ok(Corpus {
        threads,
        num_labels: spec.num_labels(),
        embedding_dim: spec.embedding_dim(),
        label_names: (0..spec.num_labels()).map(|i| i.to_string()).collect(),
    })
}

/// Outcome of the time-rescaling diagnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RescalingOutcome {
    PValue(f64),
    /// Too few inter-event increments to test.
    InsufficientData,
}

impl RescalingOutcome {
    pub fn p_value(self) -> Option<f64> {
        match self {
            RescalingOutcome::PValue(p) => Some(p),
            RescalingOutcome::InsufficientData => None,
        }
    }
}

const MIN_RESCALING_SAMPLES: usize = 5;

/// Transform inter-event compensator increments under `params` and test them
/// against Exp(1) with a Kolmogorov-Smirnov test (pooled across threads).
///
/// Under the generating model the increments are iid unit exponentials, so a
/// small p-value is evidence against `params`. Needs a variant with an exact
/// compensator.
pub fn time_rescaling_check(corpus: &Corpus, params: &ModelParams) -> Result<RescalingOutcome> {
    let mut increments = Vec::new();
    for thread in &corpus.threads {
        let mut prev = 0.0;
        for i in 0..thread.events.len() {
            let truncated = Thread {
                id: thread.id.clone(),
                mark: thread.mark,
                events: thread.events[..i].to_vec(),
                horizon: thread.events[i].time,
            };
            let cum = compensator(params, &truncated, LabelSource::True)?;
            increments.push(cum - prev);
            prev = cum;
        }
    }
    if increments.len() < MIN_RESCALING_SAMPLES {
        return Ok(RescalingOutcome::InsufficientData);
    }
    let p = ks_pvalue(&mut increments, |x| 1.0 - (-x).exp());
    Ok(RescalingOutcome::PValue(p))
}

/// One-sample Kolmogorov-Smirnov p-value of `samples` against the continuous
/// CDF `cdf`. Sorts the slice in place.
pub fn ks_pvalue(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    assert!(!samples.is_empty(), "ks_pvalue needs samples");
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let en = n.sqrt();
    kolmogorov_q((en + 0.12 + 0.11 / en) * d)
}

/// Asymptotic Kolmogorov survival function
/// `Q(x) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 x^2)`.
fn kolmogorov_q(x: f64) -> f64 {
    let a2 = -2.0 * x * x;
    let mut fac = 2.0;
    let mut sum = 0.0;
    let mut prev_term = 0.0;
    for j in 1..=100 {
        let term = fac * (a2 * (j * j) as f64).exp();
        sum += term;
        if term.abs() <= 0.001 * prev_term || term.abs() <= 1e-8 * sum.abs() {
            return sum.clamp(0.0, 1.0);
        }
        fac = -fac;
        prev_term = term.abs();
    }
    1.0 // No convergence: x is tiny and the statistic is insignificant.
}
