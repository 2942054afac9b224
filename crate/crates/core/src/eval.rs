//! Sequential prediction, classification metrics, leave-one-out protocols,
//! and model inspection dumps.
//!
//! Prediction walks a thread in time order and labels each post with the
//! class whose intensity is highest at the post's time, with history labels
//! taken either from the model's own predictions (online, the deployment
//! setting) or from the true labels (oracle, for ablations). Reports carry
//! micro-averaged accuracy and macro-averaged F1: per-class precision and
//! recall averaged over all classes (0/0 counts as 0), then combined by a
//! harmonic mean.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimation::{fit, TrainConfig};
use crate::intensity::{intensity_vector, HistoryView, LabelSource};
use crate::types::{Corpus, ModelParams, Thread, Variant};

/// Where test-time history labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// History labels are the model's own earlier predictions.
    Online,
    /// History labels are the true ones.
    Oracle,
}

/// Predict every event of a thread in time order; ties break to the lowest
/// label index.
pub fn predict_thread(
    params: &ModelParams,
    thread: &Thread,
    mode: PredictMode,
) -> Result<Vec<usize>> {
    let mut preds: Vec<usize> = Vec::with_capacity(thread.events.len());
    for n in 0..thread.events.len() {
        let labels = match mode {
            PredictMode::Online => LabelSource::Predicted(&preds),
            PredictMode::Oracle => LabelSource::True,
        };
        let hist = HistoryView::new(thread, n, labels);
        let ev = &thread.events[n];
        let lam = intensity_vector(params, &hist, ev.time, Some(ev.embedding.view()))?;
        let mut best = 0usize;
        for y in 1..lam.len() {
            if lam[y] > lam[best] {
                best = y;
            }
        }
        preds.push(best);
    }
    Ok(preds)
}

/// Add a thread's (true, predicted) pairs into a confusion matrix with rows
/// indexed by the true label and columns by the prediction.
pub fn accumulate_confusion(confusion: &mut Array2<u64>, truth: &[usize], preds: &[usize]) {
    for (&t, &p) in truth.iter().zip(preds) {
        confusion[[t, p]] += 1;
    }
}

/// Fraction of correctly labeled events: trace over total.
pub fn micro_accuracy(confusion: &Array2<u64>) -> Result<f64> {
    let total: u64 = confusion.iter().sum();
    if total == 0 {
        return Err(Error::Eval("empty confusion matrix".into()));
    }
    let trace: u64 = (0..confusion.nrows()).map(|i| confusion[[i, i]]).sum();
    Ok(trace as f64 / total as f64)
}

/// Macro-averaged F1: per-class precision and recall averaged over all `K`
/// classes (0/0 treated as 0), combined as `2PR/(P+R)`.
pub fn macro_f1(confusion: &Array2<u64>) -> Result<f64> {
    let total: u64 = confusion.iter().sum();
    if total == 0 {
        return Err(Error::Eval("empty confusion matrix".into()));
    }
    let k = confusion.nrows();
    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    for i in 0..k {
        let tp = confusion[[i, i]] as f64;
        let predicted: u64 = (0..k).map(|r| confusion[[r, i]]).sum();
        let actual: u64 = (0..k).map(|c| confusion[[i, c]]).sum();
        if predicted > 0 {
            precision_sum += tp / predicted as f64;
        }
        if actual > 0 {
            recall_sum += tp / actual as f64;
        }
    }
    let p = precision_sum / k as f64;
    let r = recall_sum / k as f64;
    Ok(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
}

/// Metrics of one evaluation fold.
#[derive(Debug, Clone)]
pub struct FoldReport {
    pub fold: String,
    pub micro_accuracy: f64,
    pub macro_f1: f64,
    pub confusion: Array2<u64>,
    pub test_events: usize,
}

/// Per-fold and pooled metrics of a leave-one-out run.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_fold: Vec<FoldReport>,
    /// Micro-accuracy over all test events pooled across folds.
    pub micro_accuracy: f64,
    /// Macro-F1 of the pooled confusion matrix.
    pub macro_f1: f64,
    pub pooled_confusion: Array2<u64>,
    pub label_names: Vec<String>,
}

impl EvalReport {
    fn assemble(per_fold: Vec<FoldReport>, label_names: Vec<String>) -> Result<Self> {
        let k = label_names.len();
        let mut pooled = Array2::zeros((k, k));
        for f in &per_fold {
            pooled += &f.confusion;
        }
        let micro = micro_accuracy(&pooled)?;
        let f1 = macro_f1(&pooled)?;
        Ok(EvalReport {
            per_fold,
            micro_accuracy: micro,
            macro_f1: f1,
            pooled_confusion: pooled,
            label_names,
        })
    }

    /// Rows of `fold,test_events,micro_accuracy,macro_f1` plus the aggregate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,test_events,micro_accuracy,macro_f1\n");
        for f in &self.per_fold {
            out.push_str(&format!(
                "{},{},{},{}\n",
                f.fold, f.test_events, f.micro_accuracy, f.macro_f1
            ));
        }
        out.push_str(&format!(
            "aggregate,{},{},{}\n",
            self.per_fold.iter().map(|f| f.test_events).sum::<usize>(),
            self.micro_accuracy,
            self.macro_f1
        ));
        out
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<20} {:>8} {:>10} {:>10}", "fold", "events", "accuracy", "macro-F1")?;
        for fold in &self.per_fold {
            writeln!(
                f,
                "{:<20} {:>8} {:>10.4} {:>10.4}",
                fold.fold, fold.test_events, fold.micro_accuracy, fold.macro_f1
            )?;
        }
        write!(
            f,
            "{:<20} {:>8} {:>10.4} {:>10.4}",
            "aggregate",
            self.per_fold.iter().map(|x| x.test_events).sum::<usize>(),
            self.micro_accuracy,
            self.macro_f1
        )
    }
}

fn fold_report(
    fold: String,
    num_labels: usize,
    tests: &[&Thread],
    params: &ModelParams,
    mode: PredictMode,
) -> Result<FoldReport> {
    let mut confusion = Array2::zeros((num_labels, num_labels));
    let mut test_events = 0usize;
    for thread in tests {
        let preds = predict_thread(params, thread, mode)?;
        let truth: Vec<usize> = thread.events.iter().map(|e| e.label).collect();
        accumulate_confusion(&mut confusion, &truth, &preds);
        test_events += preds.len();
    }
    let (micro, f1) = if test_events > 0 {
        (micro_accuracy(&confusion)?, macro_f1(&confusion)?)
    } else {
        (0.0, 0.0)
    };
    Ok(FoldReport {
        fold,
        micro_accuracy: micro,
        macro_f1: f1,
        confusion,
        test_events,
    })
}

/// Clone the selected threads into a standalone corpus, renumbering marks.
fn subset_corpus(corpus: &Corpus, keep: impl Fn(usize) -> bool) -> Corpus {
    let mut threads = Vec::new();
    for (i, t) in corpus.threads.iter().enumerate() {
        if keep(i) {
            let mark = threads.len();
            let mut t = t.clone();
            t.mark = mark;
            for e in &mut t.events {
                e.mark = mark;
            }
            threads.push(t);
        }
    }
    Corpus {
        threads,
        num_labels: corpus.num_labels,
        embedding_dim: corpus.embedding_dim,
        label_names: corpus.label_names.clone(),
    }
}

/// Leave-one-thread-out: one fold per thread, trained on the rest and tested
/// online on the held-out thread. Folds run in parallel and are merged in
/// thread order.
pub fn leave_one_thread_out(corpus: &Corpus, config: &TrainConfig) -> Result<EvalReport> {
    leave_one_thread_out_mode(corpus, config, PredictMode::Online)
}

/// [`leave_one_thread_out`] with an explicit test-time history mode.
pub fn leave_one_thread_out_mode(
    corpus: &Corpus,
    config: &TrainConfig,
    mode: PredictMode,
) -> Result<EvalReport> {
    if corpus.threads.len() < 2 {
        return Err(Error::Eval(format!(
            "leave-one-thread-out needs at least 2 threads, got {}",
            corpus.threads.len()
        )));
    }
    let folds: Result<Vec<FoldReport>> = (0..corpus.threads.len())
        .into_par_iter()
        .map(|held_out| {
            let train = subset_corpus(corpus, |i| i != held_out);
            let fitted = fit(&train, config)?;
            fold_report(
                corpus.threads[held_out].id.clone(),
                corpus.num_labels,
                &[&corpus.threads[held_out]],
                &fitted.params,
                mode,
            )
        })
        .collect();
    EvalReport::assemble(folds?, corpus.label_names.clone())
}

/// Leave-one-event-out over named corpora (one per news event): each fold
/// trains on the pooled threads of the other corpora and tests online on the
/// held-out one.
pub fn leave_one_event_out(
    corpora: &[(String, Corpus)],
    config: &TrainConfig,
) -> Result<EvalReport> {
    leave_one_event_out_mode(corpora, config, PredictMode::Online)
}

/// [`leave_one_event_out`] with an explicit test-time history mode.
pub fn leave_one_event_out_mode(
    corpora: &[(String, Corpus)],
    config: &TrainConfig,
    mode: PredictMode,
) -> Result<EvalReport> {
    if corpora.len() < 2 {
        return Err(Error::Eval(format!(
            "leave-one-event-out needs at least 2 corpora, got {}",
            corpora.len()
        )));
    }
    let (_, first) = &corpora[0];
    for (name, c) in corpora {
        if c.num_labels != first.num_labels
            || c.embedding_dim != first.embedding_dim
            || c.label_names != first.label_names
        {
            return Err(Error::Eval(format!(
                "corpus `{name}` disagrees with the others on labels or embedding dimension"
            )));
        }
    }
    let folds: Result<Vec<FoldReport>> = (0..corpora.len())
        .into_par_iter()
        .map(|held_out| {
            let mut threads = Vec::new();
            for (i, (_, c)) in corpora.iter().enumerate() {
                if i != held_out {
                    threads.extend(c.threads.iter().cloned());
                }
            }
            for (mark, t) in threads.iter_mut().enumerate() {
                t.mark = mark;
                for e in &mut t.events {
                    e.mark = mark;
                }
            }
            let train = Corpus {
                threads,
                num_labels: first.num_labels,
                embedding_dim: first.embedding_dim,
                label_names: first.label_names.clone(),
            };
            let fitted = fit(&train, config)?;
            let tests: Vec<&Thread> = corpora[held_out].1.threads.iter().collect();
            fold_report(
                corpora[held_out].0.clone(),
                first.num_labels,
                &tests,
                &fitted.params,
                mode,
            )
        })
        .collect();
    EvalReport::assemble(folds?, first.label_names.clone())
}

/// Format the influence matrix with label names, marking each row's maximum
/// with `*value*` and its runner-up with `_value_` (ties break to the lowest
/// column index).
pub fn influence_report(params: &ModelParams, label_names: &[String]) -> String {
    let k = params.num_labels();
    let names: Vec<String> = if label_names.len() == k {
        label_names.to_vec()
    } else {
        (0..k).map(|i| i.to_string()).collect()
    };
    let width = names.iter().map(|n| n.len()).max().unwrap_or(4).max(10) + 2;
    let mut out = String::new();
    out.push_str(&" ".repeat(width));
    for n in &names {
        out.push_str(&format!("{n:>width$}"));
    }
    out.push('\n');
    for (a, name) in names.iter().enumerate() {
        let row = params.alpha.row(a);
        let mut max_idx = 0;
        for b in 1..k {
            if row[b] > row[max_idx] {
                max_idx = b;
            }
        }
        let mut second: Option<usize> = None;
        for b in 0..k {
            if b == max_idx {
                continue;
            }
            if second.is_none_or(|s| row[b] > row[s]) {
                second = Some(b);
            }
        }
        out.push_str(&format!("{name:>width$}"));
        for b in 0..k {
            let cell = if b == max_idx {
                format!("*{:.4}*", row[b])
            } else if Some(b) == second {
                format!("_{:.4}_", row[b])
            } else {
                format!("{:.4}", row[b])
            };
            out.push_str(&format!("{cell:>width$}"));
        }
        out.push('\n');
    }
    out
}

/// Neural-kernel value over a `dt` grid with both embeddings held fixed
/// (zero vectors by default). Pairs with the `dt,value` CSV dump.
pub fn kernel_time_profile(
    params: &ModelParams,
    max_dt: f64,
    points: usize,
    x: Option<ArrayView1<f64>>,
) -> Result<Vec<(f64, f64)>> {
    if params.variant != Variant::NeuralKernelHp {
        return Err(Error::Eval(format!(
            "kernel profile needs a neural-kernel model, got {}",
            params.variant
        )));
    }
    let net = params
        .nn
        .as_ref()
        .ok_or_else(|| Error::InvalidParams("model has no kernel network".into()))?;
    assert!(points >= 2, "need at least two grid points");
    let zero = ndarray::Array1::zeros(params.embedding_dim());
    let x = x.unwrap_or_else(|| zero.view());
    let mut out = Vec::with_capacity(points);
    for i in 0..points {
        let dt = max_dt * i as f64 / (points - 1) as f64;
        out.push((dt, net.forward(x, 0.0, x, dt)?));
    }
    Ok(out)
}

fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Neural-kernel value against the cosine similarity of same-thread event
/// pairs whose time difference is at most `max_dt` hours.
pub fn kernel_text_profile(
    params: &ModelParams,
    corpus: &Corpus,
    max_dt: f64,
) -> Result<Vec<(f64, f64)>> {
    if params.variant != Variant::NeuralKernelHp {
        return Err(Error::Eval(format!(
            "kernel profile needs a neural-kernel model, got {}",
            params.variant
        )));
    }
    let net = params.nn.as_ref().expect("validated");
    let mut out = Vec::new();
    for thread in &corpus.threads {
        for n in 0..thread.events.len() {
            for l in 0..n {
                let (past, now) = (&thread.events[l], &thread.events[n]);
                if now.time - past.time > max_dt {
                    continue;
                }
                let cos = cosine_similarity(past.embedding.view(), now.embedding.view());
                let value =
                    net.forward(past.embedding.view(), past.time, now.embedding.view(), now.time)?;
                out.push((cos, value));
            }
        }
    }
    Ok(out)
}

/// Two-column CSV for the profile dumps.
pub fn profile_csv(x_name: &str, y_name: &str, rows: &[(f64, f64)]) -> String {
    let mut out = format!("{x_name},{y_name}\n");
    for (x, y) in rows {
        out.push_str(&format!("{x},{y}\n"));
    }
    out
}

/// Per-event intensities of every label at the event's time, with true-label
/// history, as CSV rows `thread_id,t,label,intensity` for plotting.
pub fn intensity_dump(params: &ModelParams, corpus: &Corpus) -> Result<String> {
    let mut out = String::from("thread_id,t,label,intensity\n");
    for thread in &corpus.threads {
        for n in 0..thread.events.len() {
            let ev = &thread.events[n];
            let hist = HistoryView::new(thread, n, LabelSource::True);
            let lam = intensity_vector(params, &hist, ev.time, Some(ev.embedding.view()))?;
            for (y, &v) in lam.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    thread.id, ev.time, corpus.label_names[y], v
                ));
            }
        }
    }
    Ok(out)
}
