//! Domain types: events, threads, the corpus container, and model parameters.
//!
//! A corpus is a set of independent threads. Each thread is a time-ordered
//! sequence of labeled, text-embedded events observed on `[0, horizon]`.
//! Times are decimal hours relative to the thread's source post, so the
//! first event of a real thread conventionally sits at `t = 0`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::NeuralKernelNet;

/// Spacing inserted between simultaneous timestamps (hours).
pub const TIE_EPSILON: f64 = 1e-9;

/// One post: time, stance label, owning thread, and its text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    /// Hours since the thread's source post. Non-negative.
    pub time: f64,
    /// Class index in `[0, num_labels)`.
    pub label: usize,
    /// Index of the owning thread within the corpus.
    pub mark: usize,
    /// Text embedding of dimension `embedding_dim`.
    pub embedding: Array1<f64>,
}

/// An ordered event sequence with its observation horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Thread {
    /// External thread identifier from the input file.
    pub id: String,
    /// Index of this thread within the corpus; every event carries it as mark.
    pub mark: usize,
    /// Events sorted strictly ascending by time.
    pub events: Vec<Event>,
    /// Observation horizon `T >=` last event time.
    pub horizon: f64,
}

impl Thread {
    /// Build a thread from unsorted events: stable-sorts by time, spreads
    /// exact ties by `TIE_EPSILON` per tie rank (preserving input order),
    /// and defaults the horizon to the last event time.
    ///
    /// Returns the thread and the number of timestamps that were adjusted.
    pub fn from_events(
        id: String,
        mark: usize,
        mut events: Vec<Event>,
        horizon: Option<f64>,
    ) -> Result<(Self, usize)> {
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut adjusted = 0usize;
        let mut prev = f64::NEG_INFINITY;
        for ev in &mut events {
            ev.mark = mark;
            if ev.time <= prev {
                ev.time = prev + TIE_EPSILON;
                adjusted += 1;
            }
            prev = ev.time;
        }
        let last = events.last().map(|e| e.time).unwrap_or(0.0);
        let horizon = match horizon {
            Some(t) => {
                // Allow a horizon that tie-spreading pushed the last event past.
                if t < last {
                    if last - t <= events.len() as f64 * TIE_EPSILON {
                        last
                    } else {
                        return Err(Error::InvalidCorpus(format!(
                            "thread {id}: horizon T={t} is before the last event at {last}"
                        )));
                    }
                } else {
                    t
                }
            }
            None => last,
        };
        Ok((
            Thread {
                id,
                mark,
                events,
                horizon,
            },
            adjusted,
        ))
    }
}

/// A validated collection of threads with shared label/embedding metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub threads: Vec<Thread>,
    pub num_labels: usize,
    pub embedding_dim: usize,
    pub label_names: Vec<String>,
}

/// A single invariant violation found by [`Corpus::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub thread: String,
    pub event: Option<usize>,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.event {
            Some(i) => write!(f, "thread {} event {}: {}", self.thread, i, self.rule),
            None => write!(f, "thread {}: {}", self.thread, self.rule),
        }
    }
}

impl Corpus {
    /// Total number of events across all threads.
    pub fn num_events(&self) -> usize {
        self.threads.iter().map(|t| t.events.len()).sum()
    }

    /// Check every type invariant; an empty list means the corpus is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.num_labels < 2 {
            out.push(Violation {
                thread: "<corpus>".into(),
                event: None,
                rule: format!("num_labels must be >= 2, got {}", self.num_labels),
            });
        }
        if self.label_names.len() != self.num_labels {
            out.push(Violation {
                thread: "<corpus>".into(),
                event: None,
                rule: format!(
                    "label_names has {} entries but num_labels is {}",
                    self.label_names.len(),
                    self.num_labels
                ),
            });
        }
        for (ti, thread) in self.threads.iter().enumerate() {
            if thread.mark != ti {
                out.push(Violation {
                    thread: thread.id.clone(),
                    event: None,
                    rule: format!("mark {} does not match thread index {}", thread.mark, ti),
                });
            }
            let mut prev = f64::NEG_INFINITY;
            let mut sorted = true;
            for (ei, ev) in thread.events.iter().enumerate() {
                if ev.time <= prev {
                    sorted = false;
                }
                prev = ev.time;
                if !ev.time.is_finite() || ev.time < 0.0 {
                    out.push(Violation {
                        thread: thread.id.clone(),
                        event: Some(ei),
                        rule: format!("time {} is negative or non-finite", ev.time),
                    });
                }
                if ev.label >= self.num_labels {
                    out.push(Violation {
                        thread: thread.id.clone(),
                        event: Some(ei),
                        rule: "label out of range".into(),
                    });
                }
                if ev.embedding.len() != self.embedding_dim {
                    out.push(Violation {
                        thread: thread.id.clone(),
                        event: Some(ei),
                        rule: format!(
                            "embedding has dimension {} but corpus declares {}",
                            ev.embedding.len(),
                            self.embedding_dim
                        ),
                    });
                }
                if ev.embedding.iter().any(|v| !v.is_finite()) {
                    out.push(Violation {
                        thread: thread.id.clone(),
                        event: Some(ei),
                        rule: "embedding contains a non-finite value".into(),
                    });
                }
                if ev.mark != thread.mark {
                    out.push(Violation {
                        thread: thread.id.clone(),
                        event: Some(ei),
                        rule: format!("event mark {} differs from thread mark {}", ev.mark, thread.mark),
                    });
                }
            }
            if !sorted {
                out.push(Violation {
                    thread: thread.id.clone(),
                    event: None,
                    rule: "events not sorted".into(),
                });
            }
            if let Some(last) = thread.events.last() {
                if thread.horizon < last.time {
                    out.push(Violation {
                        thread: thread.id.clone(),
                        event: None,
                        rule: format!(
                            "horizon {} is before the last event at {}",
                            thread.horizon, last.time
                        ),
                    });
                }
            }
            if !thread.horizon.is_finite() || thread.horizon < 0.0 {
                out.push(Violation {
                    thread: thread.id.clone(),
                    event: None,
                    rule: format!("horizon {} is negative or non-finite", thread.horizon),
                });
            }
        }
        out
    }
}

/// Which intensity parameterization a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Constant per-label base intensity, exponential temporal kernel.
    PlainMhp,
    /// Softmax text base intensity, exponential temporal kernel.
    TextualHp,
    /// Softmax text base intensity, exponential kernel times a Gaussian text kernel.
    FullyTextualHp,
    /// Softmax text base intensity, neural-network triggering kernel.
    NeuralKernelHp,
}

impl Variant {
    /// True for the variants whose base intensity is the text softmax.
    pub fn uses_text_base(self) -> bool {
        !matches!(self, Variant::PlainMhp)
    }

    pub const ALL: [Variant; 4] = [
        Variant::PlainMhp,
        Variant::TextualHp,
        Variant::FullyTextualHp,
        Variant::NeuralKernelHp,
    ];
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::PlainMhp => "plain_mhp",
            Variant::TextualHp => "textual_hp",
            Variant::FullyTextualHp => "fully_textual_hp",
            Variant::NeuralKernelHp => "neural_kernel_hp",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "plain" | "plain_mhp" | "mhp" => Ok(Variant::PlainMhp),
            "textual" | "textual_hp" => Ok(Variant::TextualHp),
            "fully_textual" | "fully_textual_hp" => Ok(Variant::FullyTextualHp),
            "neural" | "neural_kernel" | "neural_kernel_hp" => Ok(Variant::NeuralKernelHp),
            other => Err(Error::InvalidParams(format!("unknown variant `{other}`"))),
        }
    }
}

/// All learnable parameters and fixed hyperparameters of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub variant: Variant,
    /// Base-intensity weights, `num_labels x embedding_dim`.
    pub weights: Array2<f64>,
    /// Influence matrix, `num_labels x num_labels`, non-negative.
    /// `alpha[a, b]` is the influence of a past label-`a` event on label `b`.
    pub alpha: Array2<f64>,
    /// Temporal decay of the exponential kernel. Positive.
    pub omega: f64,
    /// Gaussian text-kernel bandwidth (FullyTextualHp only). Positive.
    pub sigma: f64,
    /// L2 regularization constant on `weights`. Non-negative.
    pub reg_c: f64,
    /// Constant per-label base intensity (PlainMhp only). Non-negative.
    pub mu_const: Array1<f64>,
    /// Neural triggering kernel (NeuralKernelHp only).
    pub nn: Option<NeuralKernelNet>,
}

impl ModelParams {
    pub fn num_labels(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Check shape and positivity invariants for this parameter set.
    pub fn validate(&self) -> Result<()> {
        let k = self.num_labels();
        if self.alpha.ncols() != k {
            return Err(Error::Dimension(format!(
                "alpha is {}x{}, expected square",
                self.alpha.nrows(),
                self.alpha.ncols()
            )));
        }
        if self.weights.nrows() != k {
            return Err(Error::Dimension(format!(
                "weights has {} rows but alpha declares {} labels",
                self.weights.nrows(),
                k
            )));
        }
        if self.mu_const.len() != k {
            return Err(Error::Dimension(format!(
                "mu_const has {} entries, expected {}",
                self.mu_const.len(),
                k
            )));
        }
        if self.alpha.iter().any(|&a| !a.is_finite() || a < 0.0) {
            return Err(Error::InvalidParams(
                "alpha entries must be finite and non-negative".into(),
            ));
        }
        if self.omega.is_nan() || self.omega <= 0.0 {
            return Err(Error::InvalidParams(format!(
                "omega must be positive, got {}",
                self.omega
            )));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(Error::InvalidParams(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.reg_c < 0.0 {
            return Err(Error::InvalidParams(format!(
                "reg_c must be non-negative, got {}",
                self.reg_c
            )));
        }
        if self.mu_const.iter().any(|&m| !m.is_finite() || m < 0.0) {
            return Err(Error::InvalidParams(
                "mu_const entries must be finite and non-negative".into(),
            ));
        }
        if self.variant == Variant::PlainMhp && !self.mu_const.iter().any(|&m| m > 0.0) {
            return Err(Error::InvalidParams(
                "PlainMhp requires at least one positive mu_const entry".into(),
            ));
        }
        if self.variant == Variant::NeuralKernelHp {
            match &self.nn {
                None => {
                    return Err(Error::InvalidParams(
                        "NeuralKernelHp requires a neural kernel".into(),
                    ))
                }
                Some(net) => {
                    let want = 2 * self.embedding_dim() + 1;
                    if net.input_dim() != want {
                        return Err(Error::Dimension(format!(
                            "neural kernel expects input dimension {}, got {}",
                            want,
                            net.input_dim()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn ev(time: f64, label: usize, dim: usize) -> Event {
        Event {
            time,
            label,
            mark: 0,
            embedding: Array1::zeros(dim),
        }
    }

    fn tiny_corpus() -> Corpus {
        let (t0, _) = Thread::from_events(
            "a".into(),
            0,
            vec![ev(0.0, 0, 3), ev(1.5, 1, 3)],
            None,
        )
        .unwrap();
        Corpus {
            threads: vec![t0],
            num_labels: 2,
            embedding_dim: 3,
            label_names: vec!["support".into(), "deny".into()],
        }
    }

    #[test]
    fn well_formed_corpus_has_no_violations() {
        assert!(tiny_corpus().validate().is_empty());
    }

    #[test]
    fn unsorted_events_flagged() {
        let mut c = tiny_corpus();
        c.threads[0].events.swap(0, 1);
        let v = c.validate();
        assert!(v.iter().any(|v| v.rule == "events not sorted"), "{v:?}");
    }

    #[test]
    fn label_out_of_range_flagged() {
        let mut c = tiny_corpus();
        c.threads[0].events[1].label = 2;
        let v = c.validate();
        let hit = v.iter().find(|v| v.rule == "label out of range").unwrap();
        assert_eq!(hit.event, Some(1));
        assert_eq!(hit.to_string(), "thread a event 1: label out of range");
    }

    #[test]
    fn ties_are_spread_preserving_input_order() {
        let mut events = vec![ev(1.0, 0, 1), ev(1.0, 1, 1), ev(1.0, 0, 1)];
        events[1].embedding = arr1(&[7.0]);
        let (t, adjusted) = Thread::from_events("t".into(), 0, events, None).unwrap();
        assert_eq!(adjusted, 2);
        assert_eq!(t.events[0].time, 1.0);
        assert_eq!(t.events[1].time, 1.0 + TIE_EPSILON);
        assert!((t.events[2].time - (1.0 + 2.0 * TIE_EPSILON)).abs() < 1e-15);
        // Stable order: the label-1 event stays second.
        assert_eq!(t.events[1].label, 1);
        assert_eq!(t.events[1].embedding[0], 7.0);
        assert!(t.horizon >= t.events[2].time);
    }

    #[test]
    fn near_tie_is_repaired_monotonically() {
        let events = vec![ev(0.0, 0, 1), ev(0.0, 0, 1), ev(1e-10, 0, 1)];
        let (t, adjusted) = Thread::from_events("t".into(), 0, events, None).unwrap();
        assert!(adjusted >= 2);
        for w in t.events.windows(2) {
            assert!(w[0].time < w[1].time);
        }
    }

    #[test]
    fn horizon_before_last_event_rejected() {
        let events = vec![ev(0.0, 0, 1), ev(5.0, 0, 1)];
        let err = Thread::from_events("t".into(), 0, events, Some(4.0)).unwrap_err();
        assert!(err.to_string().contains("horizon"));
    }

    #[test]
    fn horizon_defaults_to_last_event_time() {
        let events = vec![ev(0.0, 0, 1), ev(2.5, 0, 1)];
        let (t, _) = Thread::from_events("t".into(), 0, events, None).unwrap();
        assert_eq!(t.horizon, 2.5);
    }

    #[test]
    fn variant_parsing_roundtrip() {
        for v in Variant::ALL {
            let parsed: Variant = v.to_string().parse().unwrap();
            assert_eq!(parsed, v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}
