#![allow(dead_code)] // each test binary uses its own subset

//! Shared test oracles: independent re-derivations of intensities,
//! quadrature, metrics, and rank correlation. Nothing here calls the code
//! paths it is used to check.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use texthawkes::{Corpus, Event, ModelParams, Thread, Variant};

/// Adaptive Simpson quadrature to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(a: f64, fa: f64, b: f64, fb: f64, fm: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(a, fa, m, fm, flm);
        let right = simpson(m, fm, b, fb, frm);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, fa, m, fm, flm, left, tol * 0.5, depth - 1)
                + recurse(f, m, fm, b, fb, frm, right, tol * 0.5, depth - 1)
        }
    }
    if b <= a {
        return 0.0;
    }
    let (fa, fb) = (f(a), f(b));
    let fm = f(0.5 * (a + b));
    let whole = simpson(a, fa, b, fb, fm);
    recurse(f, a, fa, b, fb, fm, whole, tol, 40)
}

fn brute_softmax(weights: &Array2<f64>, x: ArrayView1<f64>) -> Vec<f64> {
    let k = weights.nrows();
    let mut exps = Vec::with_capacity(k);
    for a in 0..k {
        let mut dot = 0.0;
        for (w, xi) in weights.row(a).iter().zip(x.iter()) {
            dot += w * xi;
        }
        exps.push(dot.exp());
    }
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-label intensity re-derived from the written-out formulas (no calls
/// into the intensity module). The neural variant is out of scope here.
pub fn brute_intensity(
    params: &ModelParams,
    thread: &Thread,
    cutoff: usize,
    s: f64,
    x_now: ArrayView1<f64>,
    label: usize,
) -> f64 {
    let mut acc = match params.variant {
        Variant::PlainMhp => params.mu_const[label],
        _ => brute_softmax(&params.weights, x_now)[label],
    };
    for ev in &thread.events[..cutoff] {
        let dt = s - ev.time;
        let temporal = params.omega * (-params.omega * dt).exp();
        let factor = match params.variant {
            Variant::PlainMhp | Variant::TextualHp => temporal,
            Variant::FullyTextualHp => {
                let mut sq = 0.0;
                for (a, b) in x_now.iter().zip(ev.embedding.iter()) {
                    sq += (a - b) * (a - b);
                }
                temporal * (-sq / (2.0 * params.sigma * params.sigma)).exp()
            }
            Variant::NeuralKernelHp => panic!("brute oracle covers the exact variants only"),
        };
        acc += params.alpha[[ev.label, label]] * factor;
    }
    acc
}

/// Total intensity at `s` with the carry-forward text convention, re-derived
/// independently.
pub fn brute_total_intensity(params: &ModelParams, thread: &Thread, s: f64) -> f64 {
    let cutoff = thread.events.iter().filter(|e| e.time < s).count();
    let zero = Array1::zeros(params.embedding_dim());
    let x_now = thread
        .events
        .iter()
        .rev()
        .find(|e| e.time <= s)
        .map(|e| e.embedding.view())
        .unwrap_or_else(|| zero.view());
    (0..params.num_labels())
        .map(|y| brute_intensity(params, thread, cutoff, s, x_now, y))
        .sum()
}

/// Quadrature of the total intensity over `[0, T]`, split at event times so
/// each piece is smooth, staying strictly inside each open interval.
pub fn quadrature_compensator(params: &ModelParams, thread: &Thread, tol: f64) -> f64 {
    let mut cuts = vec![0.0];
    cuts.extend(thread.events.iter().map(|e| e.time));
    cuts.push(thread.horizon);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let tiny = (b - a) * 1e-12;
        let f = |s: f64| brute_total_intensity(params, thread, s.clamp(a + tiny, b - tiny));
        total += adaptive_simpson(&f, a, b, tol);
    }
    total
}

/// Full log-likelihood re-derived from scratch: inline intensities for the
/// event term and quadrature for the compensator.
pub fn brute_force_ll(params: &ModelParams, corpus: &Corpus, tol: f64) -> f64 {
    let mut total = 0.0;
    for thread in &corpus.threads {
        for (n, ev) in thread.events.iter().enumerate() {
            let lam = brute_intensity(params, thread, n, ev.time, ev.embedding.view(), ev.label);
            total += lam.ln();
        }
        total -= quadrature_compensator(params, thread, tol);
    }
    let norm_sq: f64 = params.weights.iter().map(|w| w * w).sum();
    total - params.reg_c * norm_sq
}

/// Independent micro-accuracy and macro-F1 over a confusion matrix with rows
/// as true labels, via explicit per-class TP/FP/FN counting.
pub fn metrics_oracle(confusion: &Array2<u64>) -> (f64, f64) {
    let k = confusion.nrows();
    let total: u64 = confusion.iter().sum();
    let mut correct = 0u64;
    let mut precision = vec![0.0; k];
    let mut recall = vec![0.0; k];
    for c in 0..k {
        let tp = confusion[[c, c]];
        correct += tp;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for other in 0..k {
            if other != c {
                fp += confusion[[other, c]];
                fn_ += confusion[[c, other]];
            }
        }
        if tp + fp > 0 {
            precision[c] = tp as f64 / (tp + fp) as f64;
        }
        if tp + fn_ > 0 {
            recall[c] = tp as f64 / (tp + fn_) as f64;
        }
    }
    let p = precision.iter().sum::<f64>() / k as f64;
    let r = recall.iter().sum::<f64>() / k as f64;
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (correct as f64 / total as f64, f1)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mean) * (b - mean);
        var_x += (a - mean) * (a - mean);
        var_y += (b - mean) * (b - mean);
    }
    cov / (var_x.sqrt() * var_y.sqrt())
}

/// Random corpus of short threads for oracle and gradient tests.
pub fn random_corpus(
    seed: u64,
    threads: usize,
    max_events_per_thread: usize,
    num_labels: usize,
    dim: usize,
) -> Corpus {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for mark in 0..threads {
        let n = rng.random_range(1..=max_events_per_thread);
        let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..5.5)).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let events: Vec<Event> = times
            .iter()
            .map(|&t| Event {
                time: t,
                label: rng.random_range(0..num_labels),
                mark,
                embedding: Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0)),
            })
            .collect();
        out.push(Thread {
            id: format!("t{mark}"),
            mark,
            events,
            horizon: 6.0,
        });
    }
    Corpus {
        threads: out,
        num_labels,
        embedding_dim: dim,
        label_names: (0..num_labels).map(|i| i.to_string()).collect(),
    }
}

/// Random interior parameters (alpha away from the bound) for a variant.
pub fn random_params(variant: Variant, seed: u64, num_labels: usize, dim: usize) -> ModelParams {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    ModelParams {
        variant,
        weights: Array2::from_shape_fn((num_labels, dim), |_| rng.random_range(-0.6..0.6)),
        alpha: Array2::from_shape_fn((num_labels, num_labels), |_| rng.random_range(0.05..0.45)),
        omega: rng.random_range(0.3..1.5),
        sigma: rng.random_range(0.4..1.2),
        reg_c: 0.05,
        mu_const: Array1::from_shape_fn(num_labels, |_| rng.random_range(0.1..0.5)),
        nn: (variant == Variant::NeuralKernelHp)
            .then(|| texthawkes::kernels::NeuralKernelNet::new(2 * dim + 1, &[8], seed)),
    }
}
