//! Training loops and model persistence.
//!
//! The variants with exact compensators are fit by projected L-BFGS: a
//! standard two-loop recursion proposes a direction, a backtracking line
//! search accepts only improving steps, and the constrained blocks (alpha,
//! and mu for the plain model) are clamped onto the non-negative orthant
//! with a small floor after every accepted step. The neural-kernel variant
//! is fit by per-parameter adaptive gradient scaling (accumulated squared
//! gradients) combined with heavy-ball momentum, with the Monte Carlo
//! compensator samples frozen within each epoch so objective and gradient
//! stay consistent.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::kernels::NeuralKernelNet;
use crate::likelihood::{gradients, log_likelihood, GradientBundle, LLBreakdown, McConfig};
use crate::types::{Corpus, ModelParams, Variant};

/// Non-negativity floor applied to constrained parameters after each step.
pub const PROJECTION_FLOOR: f64 = 1e-10;

/// L-BFGS memory (pairs of correction vectors kept).
const LBFGS_MEMORY: usize = 10;

/// Named sub-streams of the master seed.
const STREAM_INIT: u64 = 1;
const STREAM_MC_BASE: u64 = 1_000;
const STREAM_MC_FINAL: u64 = 999;

/// Settings for the neural-kernel training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub mc_samples: usize,
}

impl Default for NnConfig {
    fn default() -> Self {
        NnConfig {
            learning_rate: 0.005,
            momentum: 0.9,
            hidden: vec![20, 20],
            epochs: 200,
            mc_samples: 50,
        }
    }
}

/// Hyperparameters and loop controls for [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub omega: f64,
    pub sigma: f64,
    pub reg_c: f64,
    pub max_iterations: usize,
    /// Convergence when the relative LL change stays below this for 3
    /// consecutive iterations.
    pub convergence_tol: f64,
    pub seed: u64,
    pub nn: NnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::TextualHp,
            omega: 0.05,
            sigma: 0.05,
            reg_c: 0.05,
            max_iterations: 500,
            convergence_tol: 1e-7,
            seed: 42,
            nn: NnConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.omega.is_nan() || self.omega <= 0.0 || self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(Error::InvalidParams("omega and sigma must be positive".into()));
        }
        if self.reg_c < 0.0 {
            return Err(Error::InvalidParams("reg_c must be non-negative".into()));
        }
        if self.convergence_tol.is_nan() || self.convergence_tol <= 0.0 {
            return Err(Error::InvalidParams("convergence_tol must be positive".into()));
        }
        if self.nn.learning_rate.is_nan()
            || self.nn.learning_rate <= 0.0
            || !(0.0..1.0).contains(&self.nn.momentum)
        {
            return Err(Error::InvalidParams(
                "nn learning rate must be positive and momentum in [0, 1)".into(),
            ));
        }
        if self.nn.mc_samples == 0 {
            return Err(Error::InvalidParams("nn.mc_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub final_ll: LLBreakdown,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after initialization and after each iteration.
    pub ll_trace: Vec<f64>,
}

/// Deterministic starting point: zero weights, uniform alpha of 0.1, a
/// crude event-rate estimate split over the labels for mu, and seeded
/// uniform neural weights.
pub fn init_params(corpus: &Corpus, config: &TrainConfig) -> ModelParams {
    let k = corpus.num_labels;
    let v = corpus.embedding_dim;
    let events = corpus.num_events() as f64;
    let threads = corpus.threads.len().max(1) as f64;
    let mean_horizon =
        corpus.threads.iter().map(|t| t.horizon).sum::<f64>() / threads;
    let rate = if mean_horizon > 0.0 {
        (events / (threads * mean_horizon)).max(1e-6)
    } else {
        1e-6
    };
    let nn = (config.variant == Variant::NeuralKernelHp).then(|| {
        NeuralKernelNet::new(2 * v + 1, &config.nn.hidden, derive_seed(config.seed, STREAM_INIT))
    });
    ModelParams {
        variant: config.variant,
        weights: Array2::zeros((k, v)),
        alpha: Array2::from_elem((k, k), 0.1),
        omega: config.omega,
        sigma: config.sigma,
        reg_c: config.reg_c,
        mu_const: Array1::from_elem(k, rate / k as f64),
        nn,
    }
}

/// How the optimizer's flat vector maps onto the parameter blocks:
/// `[alpha, mu | W, nn]`, with alpha (and mu) clamped onto `[floor, inf)`.
struct Packing {
    k: usize,
    v: usize,
    plain: bool,
    nn_len: usize,
}

impl Packing {
    fn of(params: &ModelParams) -> Self {
        Packing {
            k: params.num_labels(),
            v: params.embedding_dim(),
            plain: params.variant == Variant::PlainMhp,
            nn_len: params.nn.as_ref().map(|n| n.num_params()).unwrap_or(0),
        }
    }

    fn len(&self) -> usize {
        self.k * self.k + if self.plain { self.k } else { self.k * self.v } + self.nn_len
    }

    fn pack(&self, params: &ModelParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(params.alpha.iter().copied());
        if self.plain {
            out.extend(params.mu_const.iter().copied());
        } else {
            out.extend(params.weights.iter().copied());
        }
        if let Some(net) = &params.nn {
            out.extend(net.to_flat());
        }
        out
    }

    fn unpack(&self, template: &ModelParams, theta: &[f64]) -> ModelParams {
        let mut params = template.clone();
        let kk = self.k * self.k;
        params.alpha =
            Array2::from_shape_vec((self.k, self.k), theta[..kk].to_vec()).expect("alpha shape");
        let mut off = kk;
        if self.plain {
            params.mu_const = Array1::from_vec(theta[off..off + self.k].to_vec());
            off += self.k;
        } else {
            params.weights =
                Array2::from_shape_vec((self.k, self.v), theta[off..off + self.k * self.v].to_vec())
                    .expect("weight shape");
            off += self.k * self.v;
        }
        if self.nn_len > 0 {
            let net = template.nn.as_ref().expect("neural template");
            params.nn = Some(
                NeuralKernelNet::from_flat(net.layer_sizes().to_vec(), &theta[off..off + self.nn_len])
                    .expect("same layout"),
            );
        }
        params
    }

    fn pack_gradient(&self, g: &GradientBundle) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(g.d_alpha.iter().copied());
        if self.plain {
            out.extend(g.d_mu.iter().copied());
        } else {
            out.extend(g.d_w.iter().copied());
        }
        out.extend(g.d_nn.iter().copied());
        out
    }

    fn project(&self, theta: &mut [f64]) {
        let kk = self.k * self.k;
        let constrained = if self.plain { kk + self.k } else { kk };
        for t in &mut theta[..constrained] {
            if *t < PROJECTION_FLOOR {
                *t = PROJECTION_FLOOR;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// L-BFGS two-loop recursion; returns the quasi-Newton descent direction for
/// the minimization objective whose gradient is `g`.
fn lbfgs_direction(g: &[f64], mem: &VecDeque<(Vec<f64>, Vec<f64>)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y) in mem.iter().rev() {
        let rho = 1.0 / dot(y, s);
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push((rho, a));
    }
    if let Some((s, y)) = mem.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y), (rho, a)) in mem.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    for qi in &mut q {
        *qi = -*qi;
    }
    q
}

/// Evaluate `(-LL, -grad)` at `theta`; `Ok(None)` flags a non-finite
/// objective so the line search can reject the trial point.
fn eval_objective(
    packing: &Packing,
    template: &ModelParams,
    corpus: &Corpus,
    mc: &McConfig,
    theta: &[f64],
) -> Result<Option<(f64, Vec<f64>)>> {
    let params = packing.unpack(template, theta);
    let ll = match log_likelihood(&params, corpus, mc) {
        Ok(ll) => ll,
        Err(Error::NonFinite { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    if !ll.total.is_finite() {
        return Ok(None);
    }
    let grad = match gradients(&params, corpus, mc) {
        Ok(g) => g,
        Err(Error::NonFinite { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut g = packing.pack_gradient(&grad);
    for gi in &mut g {
        *gi = -*gi;
    }
    Ok(Some((-ll.total, g)))
}

struct LineSearchResult {
    theta: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

/// Backtracking line search over projected trial points. Accepts the first
/// step with an Armijo-sufficient decrease along the actual (projected)
/// displacement; returns `None` when no trial improves the objective.
#[allow(clippy::too_many_arguments)]
fn line_search(
    packing: &Packing,
    template: &ModelParams,
    corpus: &Corpus,
    mc: &McConfig,
    theta: &[f64],
    f: f64,
    g: &[f64],
    direction: &[f64],
    initial_step: f64,
) -> Result<Option<LineSearchResult>> {
    const C1: f64 = 1e-4;
    let mut step = initial_step;
    for _ in 0..40 {
        let mut cand: Vec<f64> = theta
            .iter()
            .zip(direction)
            .map(|(t, d)| t + step * d)
            .collect();
        packing.project(&mut cand);
        let disp: Vec<f64> = cand.iter().zip(theta).map(|(c, t)| c - t).collect();
        let predicted = dot(g, &disp);
        if norm(&disp) == 0.0 {
            step *= 0.5;
            continue;
        }
        if let Some((fc, gc)) = eval_objective(packing, template, corpus, mc, &cand)? {
            let armijo = predicted < 0.0 && fc <= f + C1 * predicted;
            let plain_decrease = fc < f - 1e-15 * f.abs().max(1.0);
            if armijo || plain_decrease {
                return Ok(Some(LineSearchResult {
                    theta: cand,
                    f: fc,
                    g: gc,
                }));
            }
        }
        step *= 0.5;
    }
    Ok(None)
}

fn fit_lbfgs(corpus: &Corpus, config: &TrainConfig, init: ModelParams) -> Result<FitResult> {
    let packing = Packing::of(&init);
    let mc = McConfig::default(); // unused by the exact variants
    let mut theta = packing.pack(&init);
    packing.project(&mut theta);

    let (mut f, mut g) = eval_objective(&packing, &init, corpus, &mc, &theta)?
        .ok_or_else(|| Error::InvalidParams("objective is non-finite at initialization".into()))?;
    let mut trace = vec![-f];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::new();
    let mut streak = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;

    for iter in 0..config.max_iterations {
        iterations = iter + 1;
        let mut direction = lbfgs_direction(&g, &memory);
        if dot(&g, &direction) >= 0.0 {
            // Not a descent direction; fall back to steepest descent.
            memory.clear();
            direction = g.iter().map(|x| -x).collect();
        }
        let initial_step = if memory.is_empty() {
            (1.0 / norm(&direction).max(1.0)).min(1.0)
        } else {
            1.0
        };
        let mut found = line_search(
            &packing, &init, corpus, &mc, &theta, f, &g, &direction, initial_step,
        )?;
        if found.is_none() && !memory.is_empty() {
            memory.clear();
            let steepest: Vec<f64> = g.iter().map(|x| -x).collect();
            found = line_search(
                &packing,
                &init,
                corpus,
                &mc,
                &theta,
                f,
                &g,
                &steepest,
                (1.0 / norm(&steepest).max(1.0)).min(1.0),
            )?;
        }

        let f_old = f;
        if let Some(res) = found {
            let s: Vec<f64> = res.theta.iter().zip(&theta).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = res.g.iter().zip(&g).map(|(a, b)| a - b).collect();
            if dot(&s, &y) > 1e-12 * norm(&s) * norm(&y) {
                memory.push_back((s, y));
                if memory.len() > LBFGS_MEMORY {
                    memory.pop_front();
                }
            }
            theta = res.theta;
            f = res.f;
            g = res.g;
        }
        trace.push(-f);
        let rel = (f_old - f).abs() / f_old.abs().max(1.0);
        streak = if rel < config.convergence_tol { streak + 1 } else { 0 };
        if streak >= 3 {
            converged = true;
            break;
        }
    }

    let params = packing.unpack(&init, &theta);
    let final_ll = log_likelihood(&params, corpus, &mc)?;
    Ok(FitResult {
        params,
        final_ll,
        iterations,
        converged,
        ll_trace: trace,
    })
}

fn fit_adaptive(corpus: &Corpus, config: &TrainConfig, init: ModelParams) -> Result<FitResult> {
    const EPS: f64 = 1e-8;
    let packing = Packing::of(&init);
    let mut theta = packing.pack(&init);
    packing.project(&mut theta);

    let mc_for = |epoch: u64| McConfig {
        samples: config.nn.mc_samples,
        seed: derive_seed(config.seed, STREAM_MC_BASE + epoch),
    };

    let mut accum = vec![0.0; theta.len()];
    let mut velocity = vec![0.0; theta.len()];
    let mut trace = Vec::with_capacity(config.nn.epochs + 1);
    let mut streak = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;

    let init_ll = log_likelihood(&packing.unpack(&init, &theta), corpus, &mc_for(0))?;
    if !init_ll.total.is_finite() {
        return Err(Error::InvalidParams(
            "objective is non-finite at initialization".into(),
        ));
    }
    trace.push(init_ll.total);
    let mut prev_ll = init_ll.total;

    for epoch in 0..config.nn.epochs {
        iterations = epoch + 1;
        // Common random numbers within the epoch: one frozen sample set for
        // both the gradient and the recorded objective.
        let mc = mc_for(epoch as u64);
        let params = packing.unpack(&init, &theta);
        let bundle = gradients(&params, corpus, &mc)?;
        let grad = packing.pack_gradient(&bundle);
        for i in 0..theta.len() {
            accum[i] += grad[i] * grad[i];
            let scaled = config.nn.learning_rate * grad[i] / (accum[i] + EPS).sqrt();
            velocity[i] = config.nn.momentum * velocity[i] + scaled;
            theta[i] += velocity[i];
        }
        packing.project(&mut theta);

        let params = packing.unpack(&init, &theta);
        let ll = log_likelihood(&params, corpus, &mc)?;
        if !ll.total.is_finite() {
            return Err(Error::NonFinite {
                thread: "<corpus>".into(),
                event: 0,
                what: format!("objective became {} at epoch {epoch}", ll.total),
            });
        }
        trace.push(ll.total);
        let rel = (ll.total - prev_ll).abs() / prev_ll.abs().max(1.0);
        prev_ll = ll.total;
        streak = if rel < config.convergence_tol { streak + 1 } else { 0 };
        if streak >= 3 {
            converged = true;
            break;
        }
    }

    let params = packing.unpack(&init, &theta);
    let final_ll = log_likelihood(
        &params,
        corpus,
        &McConfig {
            samples: config.nn.mc_samples,
            seed: derive_seed(config.seed, STREAM_MC_FINAL),
        },
    )?;
    Ok(FitResult {
        params,
        final_ll,
        iterations,
        converged,
        ll_trace: trace,
    })
}

/// Maximize the corpus log-likelihood from the standard initialization.
/// Deterministic given the seed; alpha (and mu) stay on the non-negative
/// orthant throughout.
pub fn fit(corpus: &Corpus, config: &TrainConfig) -> Result<FitResult> {
    config.validate()?;
    if corpus.threads.is_empty() {
        return Err(Error::InvalidCorpus("corpus has no threads".into()));
    }
    let init = init_params(corpus, config);
    init.validate()?;
    if config.max_iterations == 0 {
        let mc = McConfig {
            samples: config.nn.mc_samples,
            seed: derive_seed(config.seed, STREAM_MC_FINAL),
        };
        let final_ll = log_likelihood(&init, corpus, &mc)?;
        return Ok(FitResult {
            params: init,
            final_ll,
            iterations: 0,
            converged: false,
            ll_trace: vec![final_ll.total],
        });
    }
    match config.variant {
        Variant::NeuralKernelHp => {
            let mut config = config.clone();
            config.nn.epochs = config.nn.epochs.min(config.max_iterations);
            fit_adaptive(corpus, &config, init)
        }
        _ => fit_lbfgs(corpus, config, init),
    }
}

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFileJson {
    format_version: u32,
    variant: Variant,
    num_labels: usize,
    embedding_dim: usize,
    label_names: Vec<String>,
    omega: f64,
    sigma: f64,
    reg_c: f64,
    mu_const: Vec<f64>,
    weights: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nn_layer_sizes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nn_params: Option<Vec<f64>>,
}

/// A model together with the label vocabulary it was trained with.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub params: ModelParams,
    pub label_names: Vec<String>,
}

impl ModelFile {
    /// Error unless the model's label count and embedding dimension match
    /// the corpus.
    pub fn check_compatible(&self, corpus: &Corpus) -> Result<()> {
        if self.params.num_labels() != corpus.num_labels {
            return Err(Error::Dimension(format!(
                "model has {} labels, corpus has {}",
                self.params.num_labels(),
                corpus.num_labels
            )));
        }
        if self.params.embedding_dim() != corpus.embedding_dim {
            return Err(Error::Dimension(format!(
                "model expects embedding dimension {}, corpus has {}",
                self.params.embedding_dim(),
                corpus.embedding_dim
            )));
        }
        if self.label_names != corpus.label_names {
            log::warn!(
                "model label names {:?} differ from corpus label names {:?}",
                self.label_names,
                corpus.label_names
            );
        }
        Ok(())
    }
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Serialize a model (with its label vocabulary) as versioned JSON.
pub fn save_model(params: &ModelParams, label_names: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = ModelFileJson {
        format_version: MODEL_FORMAT_VERSION,
        variant: params.variant,
        num_labels: params.num_labels(),
        embedding_dim: params.embedding_dim(),
        label_names: label_names.to_vec(),
        omega: params.omega,
        sigma: params.sigma,
        reg_c: params.reg_c,
        mu_const: params.mu_const.to_vec(),
        weights: rows(&params.weights),
        alpha: rows(&params.alpha),
        nn_layer_sizes: params.nn.as_ref().map(|n| n.layer_sizes().to_vec()),
        nn_params: params.nn.as_ref().map(|n| n.to_flat()),
    };
    let mut text = serde_json::to_string_pretty(&json).expect("model is serializable");
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Load a model saved by [`save_model`]; exact round trip at full precision.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let parse_err = |e: serde_json::Error| Error::ModelParse {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    // Check the version before strict parsing so old/new files fail clearly.
    let probe: serde_json::Value = serde_json::from_str(&text).map_err(parse_err)?;
    let found = probe
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::ModelParse {
            path: path.display().to_string(),
            message: "missing format_version".into(),
        })? as u32;
    if found != MODEL_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let json: ModelFileJson = serde_json::from_str(&text).map_err(parse_err)?;

    let flat_w: Vec<f64> = json.weights.iter().flatten().copied().collect();
    let weights = Array2::from_shape_vec((json.num_labels, json.embedding_dim), flat_w)
        .map_err(|e| Error::Dimension(format!("weights: {e}")))?;
    let flat_a: Vec<f64> = json.alpha.iter().flatten().copied().collect();
    let alpha = Array2::from_shape_vec((json.num_labels, json.num_labels), flat_a)
        .map_err(|e| Error::Dimension(format!("alpha: {e}")))?;
    let nn = match (json.nn_layer_sizes, json.nn_params) {
        (Some(sizes), Some(flat)) => Some(NeuralKernelNet::from_flat(sizes, &flat)?),
        (None, None) => None,
        _ => {
            return Err(Error::ModelParse {
                path: path.display().to_string(),
                message: "nn_layer_sizes and nn_params must appear together".into(),
            })
        }
    };
    let params = ModelParams {
        variant: json.variant,
        weights,
        alpha,
        omega: json.omega,
        sigma: json.sigma,
        reg_c: json.reg_c,
        mu_const: Array1::from_vec(json.mu_const),
        nn,
    };
    params.validate()?;
    Ok(ModelFile {
        params,
        label_names: json.label_names,
    })
}
