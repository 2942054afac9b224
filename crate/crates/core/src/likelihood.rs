//! Full-data log-likelihood, analytic gradients, and the gradient checker.
//!
//! The objective for one corpus is
//! `sum_n log lambda_{y_n}(t_n) - sum_m int_0^T sum_y lambda_y(s) ds - C ||W||^2`.
//! The compensator integral is exact for the plain, textual, and fully
//! textual variants; the neural kernel has no closed form and uses a seeded
//! Monte Carlo estimate (average total intensity at uniform times, scaled by
//! the window length). Objective and gradient share the same frozen sample
//! points so finite differences of one match the other.
//!
//! Per-thread terms are computed in parallel and reduced in thread order, so
//! results do not depend on the worker count.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::intensity::{
    base_vector, carry_forward_index, compensator, compensator_kernel_mass, HistoryView,
    LabelSource,
};
use crate::kernels::{exp_kernel, gaussian_text_kernel};
use crate::types::{Corpus, ModelParams, Thread, Variant};

/// Smallest intensity admitted into a logarithm; anything below is clamped
/// and counted instead of poisoning the objective with `-inf`.
const LOG_FLOOR: f64 = 1e-300;

/// Monte Carlo settings for the neural-kernel compensator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McConfig {
    /// Uniform sample points per thread per evaluation.
    pub samples: usize,
    /// Master seed; per-thread streams are derived from it.
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            samples: 50,
            seed: 0,
        }
    }
}

/// Log-likelihood split into its three parts; `total` is always
/// `event_term - compensator_term - regularizer_term`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LLBreakdown {
    pub event_term: f64,
    pub compensator_term: f64,
    pub regularizer_term: f64,
    pub total: f64,
    /// Events whose intensity underflowed the log floor.
    pub clamped_events: usize,
}

impl LLBreakdown {
    fn new(event_term: f64, compensator_term: f64, regularizer_term: f64, clamped: usize) -> Self {
        LLBreakdown {
            event_term,
            compensator_term,
            regularizer_term,
            total: event_term - compensator_term - regularizer_term,
            clamped_events: clamped,
        }
    }
}

/// Analytic gradient of the log-likelihood for every parameter block.
///
/// Blocks a variant does not use stay zero (`d_mu` for the text variants,
/// `d_nn` for everything but the neural kernel).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_alpha: Array2<f64>,
    pub d_w: Array2<f64>,
    pub d_mu: Array1<f64>,
    pub d_nn: Vec<f64>,
}

impl GradientBundle {
    fn zeros(params: &ModelParams) -> Self {
        let k = params.num_labels();
        let v = params.embedding_dim();
        let nn_len = params.nn.as_ref().map(|n| n.num_params()).unwrap_or(0);
        GradientBundle {
            d_alpha: Array2::zeros((k, k)),
            d_w: Array2::zeros((k, v)),
            d_mu: Array1::zeros(k),
            d_nn: vec![0.0; nn_len],
        }
    }

    fn add(&mut self, other: &GradientBundle) {
        self.d_alpha += &other.d_alpha;
        self.d_w += &other.d_w;
        self.d_mu += &other.d_mu;
        for (a, b) in self.d_nn.iter_mut().zip(&other.d_nn) {
            *a += b;
        }
    }
}

/// The uniform sample times shared by the Monte Carlo compensator and its
/// gradient. One seeded stream per thread.
fn mc_sample_times(thread: &Thread, samples: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| rng.random::<f64>() * thread.horizon)
        .collect()
}

/// Monte Carlo estimate of the total-intensity integral over `[0, T]` for one
/// thread: average `sum_y lambda_y(u)` at uniform times, scaled by `T`.
/// Deterministic given the seed. Returns 0 when the horizon is 0.
pub fn mc_compensator(
    params: &ModelParams,
    thread: &Thread,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    assert!(samples >= 1, "mc_compensator needs at least one sample");
    if thread.horizon <= 0.0 {
        return Ok(0.0);
    }
    let zero = Array1::zeros(params.embedding_dim());
    let mut acc = 0.0;
    for u in mc_sample_times(thread, samples, seed) {
        let cutoff = thread.events.partition_point(|e| e.time < u);
        let hist = HistoryView::new(thread, cutoff, LabelSource::True);
        let x = match carry_forward_index(thread, u) {
            Some(i) => thread.events[i].embedding.view(),
            None => zero.view(),
        };
        acc += crate::intensity::intensity_vector(params, &hist, u, Some(x))?.sum();
    }
    Ok(acc / samples as f64 * thread.horizon)
}

fn thread_compensator(params: &ModelParams, thread: &Thread, mc: &McConfig) -> Result<f64> {
    match params.variant {
        Variant::NeuralKernelHp => mc_compensator(
            params,
            thread,
            mc.samples,
            derive_seed(mc.seed, thread.mark as u64),
        ),
        _ => compensator(params, thread, LabelSource::True),
    }
}

struct ThreadLL {
    event_term: f64,
    compensator: f64,
    clamped: usize,
}

fn thread_log_likelihood(params: &ModelParams, thread: &Thread, mc: &McConfig) -> Result<ThreadLL> {
    let mut event_term = 0.0;
    let mut clamped = 0usize;
    for n in 0..thread.events.len() {
        let ev = &thread.events[n];
        let hist = HistoryView::new(thread, n, LabelSource::True);
        let lam = crate::intensity::intensity_at(
            params,
            &hist,
            ev.time,
            Some(ev.embedding.view()),
            ev.label,
        )?;
        if !lam.is_finite() {
            return Err(Error::NonFinite {
                thread: thread.id.clone(),
                event: n,
                what: format!("intensity {lam}"),
            });
        }
        let lam = if lam < LOG_FLOOR {
            clamped += 1;
            LOG_FLOOR
        } else {
            lam
        };
        event_term += lam.ln();
    }
    let comp = thread_compensator(params, thread, mc)?;
    if !comp.is_finite() {
        return Err(Error::NonFinite {
            thread: thread.id.clone(),
            event: thread.events.len(),
            what: format!("compensator {comp}"),
        });
    }
    Ok(ThreadLL {
        event_term,
        compensator: comp,
        clamped,
    })
}

/// Full-corpus log-likelihood with its breakdown. Threads contribute
/// independently; the regularizer `C ||W||^2` is added once.
pub fn log_likelihood(params: &ModelParams, corpus: &Corpus, mc: &McConfig) -> Result<LLBreakdown> {
    params.validate()?;
    let per_thread: Result<Vec<ThreadLL>> = corpus
        .threads
        .par_iter()
        .map(|t| thread_log_likelihood(params, t, mc))
        .collect();
    let per_thread = per_thread?;
    let mut event_term = 0.0;
    let mut comp_term = 0.0;
    let mut clamped = 0usize;
    for t in &per_thread {
        event_term += t.event_term;
        comp_term += t.compensator;
        clamped += t.clamped;
    }
    let reg = params.reg_c * params.weights.iter().map(|w| w * w).sum::<f64>();
    if clamped > 0 {
        log::warn!("log-likelihood clamped {clamped} event intensities at the log floor");
    }
    Ok(LLBreakdown::new(event_term, comp_term, reg, clamped))
}

/// Variant kernel factor plus, for the neural kernel, the forward trace
/// needed to backpropagate through it.
enum Factor {
    Plain(f64),
    Traced(crate::kernels::ForwardTrace),
}

impl Factor {
    fn value(&self) -> f64 {
        match self {
            Factor::Plain(v) => *v,
            Factor::Traced(t) => t.value,
        }
    }
}

fn factor_at(
    params: &ModelParams,
    x_past: ndarray::ArrayView1<f64>,
    t_past: f64,
    x_now: ndarray::ArrayView1<f64>,
    t_now: f64,
) -> Result<Factor> {
    match params.variant {
        Variant::PlainMhp | Variant::TextualHp => {
            Ok(Factor::Plain(exp_kernel(t_now - t_past, params.omega)))
        }
        Variant::FullyTextualHp => Ok(Factor::Plain(
            exp_kernel(t_now - t_past, params.omega)
                * gaussian_text_kernel(x_now, x_past, params.sigma)?,
        )),
        Variant::NeuralKernelHp => {
            let net = params.nn.as_ref().expect("validated");
            Ok(Factor::Traced(net.forward_traced(
                x_past, t_past, x_now, t_now,
            )?))
        }
    }
}

fn thread_gradients(params: &ModelParams, thread: &Thread, mc: &McConfig) -> Result<GradientBundle> {
    let mut g = GradientBundle::zeros(params);
    let k = params.num_labels();
    let net = params.nn.as_ref();

    // Event side: d log lambda_{y_n}(t_n) / d theta.
    for n in 0..thread.events.len() {
        let ev = &thread.events[n];
        let base = base_vector(params, Some(ev.embedding.view()))?;
        let mut per_source = Array1::<f64>::zeros(k);
        let mut traced = Vec::new();
        for l in 0..n {
            let past = &thread.events[l];
            let factor = factor_at(
                params,
                past.embedding.view(),
                past.time,
                ev.embedding.view(),
                ev.time,
            )?;
            per_source[past.label] += factor.value();
            if let Factor::Traced(trace) = factor {
                traced.push((past.label, trace));
            }
        }
        let lam = base[ev.label] + params.alpha.column(ev.label).dot(&per_source);
        if !lam.is_finite() {
            return Err(Error::NonFinite {
                thread: thread.id.clone(),
                event: n,
                what: format!("intensity {lam}"),
            });
        }
        if lam < LOG_FLOOR {
            // The objective is clamped flat here; the event contributes no gradient.
            continue;
        }
        let inv = 1.0 / lam;
        for a in 0..k {
            g.d_alpha[[a, ev.label]] += per_source[a] * inv;
        }
        if params.variant.uses_text_base() {
            let coef = base[ev.label] * inv;
            for a in 0..k {
                let indicator = if a == ev.label { 1.0 } else { 0.0 };
                g.d_w
                    .row_mut(a)
                    .scaled_add(coef * (indicator - base[a]), &ev.embedding);
            }
        } else {
            g.d_mu[ev.label] += inv;
        }
        if let Some(net) = net {
            for (source, trace) in &traced {
                net.backward(trace, params.alpha[[*source, ev.label]] * inv, &mut g.d_nn);
            }
        }
    }

    // Compensator side, subtracted from the log-likelihood.
    match params.variant {
        Variant::NeuralKernelHp => {
            let net = net.expect("validated");
            let row_sums: Vec<f64> = (0..k).map(|a| params.alpha.row(a).sum()).collect();
            let seed = derive_seed(mc.seed, thread.mark as u64);
            let scale = thread.horizon / mc.samples as f64;
            let zero = Array1::zeros(params.embedding_dim());
            let mut comp_alpha = vec![0.0; k];
            for u in mc_sample_times(thread, mc.samples, seed) {
                let cutoff = thread.events.partition_point(|e| e.time < u);
                let x_u = match carry_forward_index(thread, u) {
                    Some(i) => thread.events[i].embedding.view(),
                    None => zero.view(),
                };
                for l in 0..cutoff {
                    let past = &thread.events[l];
                    let trace = net.forward_traced(past.embedding.view(), past.time, x_u, u)?;
                    comp_alpha[past.label] += scale * trace.value;
                    net.backward(&trace, -scale * row_sums[past.label], &mut g.d_nn);
                }
                // The base term integrates to exactly T: its softmax rows sum
                // to one, so it contributes nothing to d_w.
            }
            for (mut row, mass) in g.d_alpha.rows_mut().into_iter().zip(&comp_alpha) {
                row -= *mass;
            }
        }
        Variant::PlainMhp => {
            let masses = compensator_kernel_mass(params, thread)?;
            let mut comp_alpha = vec![0.0; k];
            for (l, mass) in masses.iter().enumerate() {
                comp_alpha[thread.events[l].label] += mass;
            }
            for (mut row, mass) in g.d_alpha.rows_mut().into_iter().zip(&comp_alpha) {
                row -= *mass;
            }
            g.d_mu -= thread.horizon;
        }
        Variant::TextualHp | Variant::FullyTextualHp => {
            let masses = compensator_kernel_mass(params, thread)?;
            let mut comp_alpha = vec![0.0; k];
            for (l, mass) in masses.iter().enumerate() {
                comp_alpha[thread.events[l].label] += mass;
            }
            for (mut row, mass) in g.d_alpha.rows_mut().into_iter().zip(&comp_alpha) {
                row -= *mass;
            }
        }
    }
    Ok(g)
}

/// Analytic gradient of [`log_likelihood`] over all parameter blocks.
///
/// For the neural kernel the same frozen sample points as the paired
/// [`log_likelihood`] call are used, so the two stay mutually consistent.
pub fn gradients(params: &ModelParams, corpus: &Corpus, mc: &McConfig) -> Result<GradientBundle> {
    params.validate()?;
    let per_thread: Result<Vec<GradientBundle>> = corpus
        .threads
        .par_iter()
        .map(|t| thread_gradients(params, t, mc))
        .collect();
    let mut total = GradientBundle::zeros(params);
    for g in per_thread? {
        total.add(&g);
    }
    // d/dW of -C ||W||^2.
    total.d_w.scaled_add(-2.0 * params.reg_c, &params.weights);
    Ok(total)
}

/// One parameter block's finite-difference comparison.
#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    /// Entries checked one-sided because they sit at the non-negativity bound.
    pub one_sided: usize,
    pub pass: bool,
}

/// Result of comparing analytic gradients against central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub tolerance: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "gradient check vs central finite differences (tolerance {:.2e})",
            self.tolerance
        )?;
        for b in &self.blocks {
            writeln!(
                f,
                "  {:<6} max rel err {:.3e} at entry {}{} ... {}",
                b.name,
                b.max_rel_err,
                b.worst_index,
                if b.one_sided > 0 {
                    format!(" ({} boundary entries one-sided)", b.one_sided)
                } else {
                    String::new()
                },
                if b.pass { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "overall: {}", if self.pass { "PASS" } else { "FAIL" })
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Block {
    Alpha,
    Weights,
    Mu,
    Nn,
}

impl Block {
    fn name(self) -> &'static str {
        match self {
            Block::Alpha => "alpha",
            Block::Weights => "W",
            Block::Mu => "mu",
            Block::Nn => "nn",
        }
    }

    fn for_variant(variant: Variant) -> Vec<Block> {
        match variant {
            Variant::PlainMhp => vec![Block::Alpha, Block::Mu],
            Variant::TextualHp | Variant::FullyTextualHp => vec![Block::Alpha, Block::Weights],
            Variant::NeuralKernelHp => vec![Block::Alpha, Block::Weights, Block::Nn],
        }
    }

    fn len(self, params: &ModelParams) -> usize {
        match self {
            Block::Alpha => params.alpha.len(),
            Block::Weights => params.weights.len(),
            Block::Mu => params.mu_const.len(),
            Block::Nn => params.nn.as_ref().map(|n| n.num_params()).unwrap_or(0),
        }
    }

    fn get(self, params: &ModelParams, idx: usize) -> f64 {
        match self {
            Block::Alpha => params.alpha.as_slice().unwrap()[idx],
            Block::Weights => params.weights.as_slice().unwrap()[idx],
            Block::Mu => params.mu_const[idx],
            Block::Nn => params.nn.as_ref().unwrap().to_flat()[idx],
        }
    }

    fn perturbed(self, params: &ModelParams, idx: usize, delta: f64) -> ModelParams {
        let mut p = params.clone();
        match self {
            Block::Alpha => p.alpha.as_slice_mut().unwrap()[idx] += delta,
            Block::Weights => p.weights.as_slice_mut().unwrap()[idx] += delta,
            Block::Mu => p.mu_const[idx] += delta,
            Block::Nn => {
                let net = params.nn.as_ref().unwrap();
                let mut flat = net.to_flat();
                flat[idx] += delta;
                p.nn = Some(
                    crate::kernels::NeuralKernelNet::from_flat(net.layer_sizes().to_vec(), &flat)
                        .expect("same layout"),
                );
            }
        }
        p
    }

    /// Entries of this block live on the non-negative orthant.
    fn bounded_below(self) -> bool {
        matches!(self, Block::Alpha | Block::Mu)
    }

    fn analytic(self, bundle: &GradientBundle, idx: usize) -> f64 {
        match self {
            Block::Alpha => bundle.d_alpha.as_slice().unwrap()[idx],
            Block::Weights => bundle.d_w.as_slice().unwrap()[idx],
            Block::Mu => bundle.d_mu[idx],
            Block::Nn => bundle.d_nn[idx],
        }
    }
}

fn fd_gradient(
    params: &ModelParams,
    corpus: &Corpus,
    mc: &McConfig,
    block: Block,
    idx: usize,
    step: f64,
) -> Result<(f64, bool)> {
    let objective = |p: &ModelParams| -> Result<f64> { Ok(log_likelihood(p, corpus, mc)?.total) };
    let value = block.get(params, idx);
    if block.bounded_below() && value - step < 0.0 {
        // Second-order one-sided difference keeps the evaluation inside the bound.
        let f0 = objective(params)?;
        let f1 = objective(&block.perturbed(params, idx, step))?;
        let f2 = objective(&block.perturbed(params, idx, 2.0 * step))?;
        Ok(((-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * step), true))
    } else {
        let fp = objective(&block.perturbed(params, idx, step))?;
        let fm = objective(&block.perturbed(params, idx, -step))?;
        Ok(((fp - fm) / (2.0 * step), false))
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare a candidate gradient bundle against finite differences of the
/// objective. Exposed so tests can inject corrupted gradients; normal callers
/// want [`grad_check`].
pub fn grad_check_bundle(
    params: &ModelParams,
    corpus: &Corpus,
    mc: &McConfig,
    tolerance: f64,
    analytic: &GradientBundle,
) -> Result<GradCheckReport> {
    let mut blocks = Vec::new();
    for block in Block::for_variant(params.variant) {
        let mut max_err = 0.0;
        let mut worst = 0;
        let mut one_sided = 0;
        for idx in 0..block.len(params) {
            let a = block.analytic(analytic, idx);
            // Step 1e-5 first, falling back to 1e-6 when it disagrees.
            let (fd, side) = fd_gradient(params, corpus, mc, block, idx, 1e-5)?;
            let mut err = rel_err(a, fd);
            if err > tolerance {
                let (fd2, _) = fd_gradient(params, corpus, mc, block, idx, 1e-6)?;
                err = err.min(rel_err(a, fd2));
            }
            if side {
                one_sided += 1;
            }
            if err > max_err {
                max_err = err;
                worst = idx;
            }
        }
        blocks.push(BlockCheck {
            name: block.name(),
            max_rel_err: max_err,
            worst_index: worst,
            one_sided,
            pass: max_err <= tolerance,
        });
    }
    let pass = blocks.iter().all(|b| b.pass);
    Ok(GradCheckReport {
        blocks,
        tolerance,
        pass,
    })
}

/// Check the analytic gradients of [`gradients`] against central finite
/// differences of [`log_likelihood`], block by block. For the neural kernel
/// the Monte Carlo sample points are frozen across all perturbed evaluations.
pub fn grad_check(
    params: &ModelParams,
    corpus: &Corpus,
    mc: &McConfig,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let analytic = gradients(params, corpus, mc)?;
    grad_check_bundle(params, corpus, mc, tolerance, &analytic)
}
