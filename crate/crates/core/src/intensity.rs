//! Conditional intensity functions and their integrals over the observation
//! window.
//!
//! For a thread with history `H` the per-label intensity is
//! `lambda_y(t) = base_y(t) + sum_{t_l < t} alpha[y_l, y] * factor(l, t)`
//! where the base term is either a constant vector (plain model) or a softmax
//! over the current post's embedding, and the factor is the variant's
//! triggering kernel. Threads are independent: history sums never cross
//! thread boundaries.
//!
//! Between events the text trajectory carries forward the embedding of the
//! most recent event (zero vector before the first one), which gives the
//! text-kernel compensator a closed form as a sum over inter-event intervals.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::kernels::{exp_kernel, exp_kernel_integral, gaussian_text_kernel};
use crate::types::{ModelParams, Thread, Variant};

/// Where history labels come from when evaluating intensities.
#[derive(Debug, Clone, Copy)]
pub enum LabelSource<'a> {
    /// Use each event's true label.
    True,
    /// Use externally supplied labels (e.g. the model's own predictions).
    Predicted(&'a [usize]),
}

impl LabelSource<'_> {
    fn label(&self, thread: &Thread, idx: usize) -> usize {
        match self {
            LabelSource::True => thread.events[idx].label,
            LabelSource::Predicted(labels) => labels[idx],
        }
    }
}

/// A prefix of one thread's events, seen as the history of an evaluation time.
#[derive(Debug, Clone, Copy)]
pub struct HistoryView<'a> {
    pub thread: &'a Thread,
    /// Number of events strictly before the evaluation time.
    pub cutoff: usize,
    pub labels: LabelSource<'a>,
}

impl<'a> HistoryView<'a> {
    pub fn new(thread: &'a Thread, cutoff: usize, labels: LabelSource<'a>) -> Self {
        assert!(
            cutoff <= thread.events.len(),
            "cutoff {cutoff} exceeds event count {}",
            thread.events.len()
        );
        if let LabelSource::Predicted(l) = labels {
            assert!(
                l.len() >= cutoff,
                "predicted labels cover {} events, cutoff is {cutoff}",
                l.len()
            );
        }
        HistoryView {
            thread,
            cutoff,
            labels,
        }
    }

    /// Full-thread history with true labels.
    pub fn full(thread: &'a Thread) -> Self {
        HistoryView::new(thread, thread.events.len(), LabelSource::True)
    }

    fn label(&self, idx: usize) -> usize {
        self.labels.label(self.thread, idx)
    }
}

/// Softmax base intensity over one post's embedding: normalized across labels,
/// computed with max subtraction.
pub fn base_intensity(weights: &ndarray::Array2<f64>, x: ArrayView1<f64>) -> Array1<f64> {
    let logits = weights.dot(&x);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|z| (z - max).exp());
    let sum: f64 = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// Variant-specific kernel factor for a past event seen at time `t`.
fn excitation_factor(
    params: &ModelParams,
    x_past: ArrayView1<f64>,
    t_past: f64,
    x_now: Option<ArrayView1<f64>>,
    t: f64,
) -> Result<f64> {
    match params.variant {
        Variant::PlainMhp | Variant::TextualHp => Ok(exp_kernel(t - t_past, params.omega)),
        Variant::FullyTextualHp => {
            let x_now = x_now.ok_or_else(|| {
                Error::InvalidParams("FullyTextualHp needs the current embedding".into())
            })?;
            Ok(exp_kernel(t - t_past, params.omega)
                * gaussian_text_kernel(x_now, x_past, params.sigma)?)
        }
        Variant::NeuralKernelHp => {
            let x_now = x_now.ok_or_else(|| {
                Error::InvalidParams("NeuralKernelHp needs the current embedding".into())
            })?;
            let net = params
                .nn
                .as_ref()
                .ok_or_else(|| Error::InvalidParams("NeuralKernelHp has no kernel network".into()))?;
            net.forward(x_past, t_past, x_now, t)
        }
    }
}

/// Base intensity vector at a point, for all labels.
pub(crate) fn base_vector(params: &ModelParams, x_now: Option<ArrayView1<f64>>) -> Result<Array1<f64>> {
    if params.variant.uses_text_base() {
        let x = x_now.ok_or_else(|| {
            Error::InvalidParams(format!(
                "{} needs an embedding for the base intensity",
                params.variant
            ))
        })?;
        Ok(base_intensity(&params.weights, x))
    } else {
        Ok(params.mu_const.clone())
    }
}

/// Intensity of one label at time `t`, given the history prefix.
///
/// `t` must be at or after every history event time; `x_now` is the embedding
/// of the post being scored (required for every variant except the plain one).
pub fn intensity_at(
    params: &ModelParams,
    hist: &HistoryView<'_>,
    t: f64,
    x_now: Option<ArrayView1<f64>>,
    label: usize,
) -> Result<f64> {
    Ok(intensity_vector(params, hist, t, x_now)?[label])
}

/// Intensities of all labels at time `t`. One pass over the history serves
/// every label, so the kernel factor is evaluated once per past event.
pub fn intensity_vector(
    params: &ModelParams,
    hist: &HistoryView<'_>,
    t: f64,
    x_now: Option<ArrayView1<f64>>,
) -> Result<Array1<f64>> {
    let mut out = base_vector(params, x_now)?;
    for idx in 0..hist.cutoff {
        let ev = &hist.thread.events[idx];
        debug_assert!(ev.time <= t, "history event at {} is after t = {t}", ev.time);
        let factor = excitation_factor(params, ev.embedding.view(), ev.time, x_now, t)?;
        let source = hist.label(idx);
        out.scaled_add(factor, &params.alpha.row(source));
    }
    Ok(out)
}

/// Index of the most recent event at or before `s`, if any. The carry-forward
/// text trajectory takes this event's embedding (zero vector when `None`).
pub fn carry_forward_index(thread: &Thread, s: f64) -> Option<usize> {
    let n = thread.events.partition_point(|e| e.time <= s);
    n.checked_sub(1)
}

/// Integral of the base intensity over `[0, T]` for one thread.
///
/// Softmax normalization makes this exactly `T` for the text variants, no
/// matter what the weights or the text trajectory are.
pub(crate) fn base_compensator(params: &ModelParams, thread: &Thread) -> f64 {
    if params.variant.uses_text_base() {
        thread.horizon
    } else {
        thread.horizon * params.mu_const.sum()
    }
}

/// Per-event integrated kernel mass `G_l = int_{t_l}^{T} factor(l, s) ds`
/// under the carry-forward text convention. The excitation part of the
/// compensator is `sum_l rowsum(alpha)[y_l] * G_l`, and `G_l` itself is
/// independent of alpha and of the labels.
pub(crate) fn compensator_kernel_mass(params: &ModelParams, thread: &Thread) -> Result<Vec<f64>> {
    let n = thread.events.len();
    let horizon = thread.horizon;
    let mut out = Vec::with_capacity(n);
    match params.variant {
        Variant::PlainMhp | Variant::TextualHp => {
            for ev in &thread.events {
                out.push(exp_kernel_integral(horizon - ev.time, params.omega));
            }
        }
        Variant::FullyTextualHp => {
            for (l, ev) in thread.events.iter().enumerate() {
                let mut mass = 0.0;
                for i in l..n {
                    let seg_start = thread.events[i].time;
                    let seg_end = if i + 1 < n {
                        thread.events[i + 1].time
                    } else {
                        horizon
                    };
                    let text = gaussian_text_kernel(
                        thread.events[i].embedding.view(),
                        ev.embedding.view(),
                        params.sigma,
                    )?;
                    mass += text
                        * (exp_kernel_integral(seg_end - ev.time, params.omega)
                            - exp_kernel_integral(seg_start - ev.time, params.omega));
                }
                out.push(mass);
            }
        }
        Variant::NeuralKernelHp => return Err(Error::McRequired),
    }
    Ok(out)
}

/// Integral of the total intensity `sum_y lambda_y(s)` over `[0, T]` for one
/// thread, in closed form. The neural variant has no closed form and must go
/// through the Monte Carlo estimator instead.
pub fn compensator(params: &ModelParams, thread: &Thread, labels: LabelSource<'_>) -> Result<f64> {
    let masses = compensator_kernel_mass(params, thread)?;
    let mut total = base_compensator(params, thread);
    for (idx, mass) in masses.iter().enumerate() {
        let source = labels.label(thread, idx);
        total += params.alpha.row(source).sum() * mass;
    }
    Ok(total)
}
