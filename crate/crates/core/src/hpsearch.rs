//! Validation search over the blend weights, sharpening strengths and `θ`.
//!
//! The search always starts from four seeded candidates (the three
//! single-logit corners and the all-equal blend), then spends the remaining
//! budget according to the strategy. Candidates are generated in a fixed
//! order from the seed; batches are scored in parallel but recorded in
//! generation order, so the trace and result do not depend on thread count.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{BlendConfig, ClassifierState, QuerySimilarities};
use crate::task::LabeledEmbeddings;

const AXES: usize = 7;
const POINTS_PER_AXIS: usize = 5;
const AXIS_NAMES: [&str; AXES] = ["lambda1", "lambda2", "lambda3", "alpha", "beta", "gamma", "theta"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Coordinate,
    Random,
    Hybrid,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coordinate" => Ok(Self::Coordinate),
            "random" => Ok(Self::Random),
            "hybrid" => Ok(Self::Hybrid),
            other => Err(Error::InvalidSearchSpec(format!("unknown strategy '{other}'"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Coordinate => "coordinate",
            Self::Random => "random",
            Self::Hybrid => "hybrid",
        })
    }
}

/// Closed interval searched for one parameter family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpec {
    pub lambda: Range,
    pub sharpen: Range,
    pub theta: Range,
    pub budget: usize,
    pub seed: u64,
    pub strategy: Strategy,
}

impl Default for SearchSpec {
    fn default() -> Self {
        Self {
            lambda: Range::new(0.0, 10.0),
            sharpen: Range::new(0.0, 30.0),
            theta: Range::new(-10.0, 0.0),
            budget: 600,
            seed: 0,
            strategy: Strategy::Hybrid,
        }
    }
}

impl SearchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::InvalidSearchSpec("budget must be at least 1".into()));
        }
        for (name, r) in [("lambda", self.lambda), ("sharpen", self.sharpen), ("theta", self.theta)] {
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo < r.hi) {
                return Err(Error::InvalidSearchSpec(format!(
                    "{name} bounds [{}, {}] are degenerate",
                    r.lo, r.hi
                )));
            }
        }
        if self.lambda.lo < 0.0 || self.sharpen.lo < 0.0 {
            return Err(Error::InvalidSearchSpec(
                "lambda and sharpening bounds must be non-negative".into(),
            ));
        }
        if self.lambda.hi <= 0.0 {
            return Err(Error::InvalidSearchSpec("lambda upper bound must be positive".into()));
        }
        Ok(())
    }

    fn ranges(&self) -> [Range; AXES] {
        [
            self.lambda,
            self.lambda,
            self.lambda,
            self.sharpen,
            self.sharpen,
            self.sharpen,
            self.theta,
        ]
    }
}

/// One evaluated candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub idx: usize,
    pub blend: BlendConfig,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: BlendConfig,
    pub best_val_acc: f64,
    pub trace: Vec<Trial>,
}

fn to_point(b: &BlendConfig) -> [f64; AXES] {
    [b.lambda1, b.lambda2, b.lambda3, b.alpha, b.beta, b.gamma, b.theta]
}

fn from_point(p: &[f64; AXES], base: &BlendConfig) -> BlendConfig {
    BlendConfig {
        lambda1: p[0],
        lambda2: p[1],
        lambda3: p[2],
        alpha: p[3],
        beta: p[4],
        gamma: p[5],
        theta: p[6],
        ..*base
    }
}

/// The four candidates every search evaluates first.
pub fn seeded_candidates(spec: &SearchSpec, base: &BlendConfig) -> Vec<BlendConfig> {
    let one = spec.lambda.clamp(1.0);
    let s = spec.sharpen.clamp(1.0);
    let theta = spec.theta.clamp(0.0);
    [[one, 0.0, 0.0], [0.0, one, 0.0], [0.0, 0.0, one], [one, one, one]]
        .iter()
        .map(|l| BlendConfig {
            lambda1: spec.lambda.clamp(l[0]),
            lambda2: spec.lambda.clamp(l[1]),
            lambda3: spec.lambda.clamp(l[2]),
            alpha: s,
            beta: s,
            gamma: s,
            theta,
            ..*base
        })
        .collect()
}

struct Scorer<'a> {
    state: &'a ClassifierState,
    sims: QuerySimilarities,
    labels: &'a [usize],
}

impl Scorer<'_> {
    fn accuracy(&self, blend: &BlendConfig) -> f64 {
        let weights = self.state.label_weights(blend.theta);
        let correct = (0..self.sims.len())
            .filter(|&q| self.sims.prediction(q, blend, &weights).class() == self.labels[q])
            .count();
        correct as f64 / self.labels.len() as f64
    }
}

struct Search<'a> {
    scorer: Scorer<'a>,
    budget: usize,
    trace: Vec<Trial>,
    best: usize,
}

impl Search<'_> {
    fn remaining(&self) -> usize {
        self.budget - self.trace.len()
    }

    /// Scores a batch in parallel and appends it in order. Returns whether the
    /// incumbent changed.
    fn run_batch(&mut self, mut batch: Vec<BlendConfig>) -> bool {
        batch.retain(|b| b.validate().is_ok());
        batch.truncate(self.remaining());
        let scores: Vec<f64> = batch.par_iter().map(|b| self.scorer.accuracy(b)).collect();
        let mut improved = false;
        for (blend, val_acc) in batch.into_iter().zip(scores) {
            let idx = self.trace.len();
            self.trace.push(Trial { idx, blend, val_acc });
            if self.trace.len() == 1 || val_acc > self.trace[self.best].val_acc {
                self.best = idx;
                improved = true;
            }
        }
        improved
    }

    fn incumbent(&self) -> BlendConfig {
        self.trace[self.best].blend
    }

    fn random_phase(&mut self, rng: &mut ChaCha8Rng, ranges: &[Range; AXES], base: &BlendConfig, count: usize) {
        let batch = (0..count)
            .map(|_| {
                let mut p = [0.0; AXES];
                for (v, r) in p.iter_mut().zip(ranges) {
                    *v = rng.random_range(r.lo..=r.hi);
                }
                from_point(&p, base)
            })
            .collect();
        self.run_batch(batch);
    }

    fn coordinate_phase(&mut self, ranges: &[Range; AXES], base: &BlendConfig) {
        let mut widths: Vec<f64> = ranges.iter().map(|r| r.hi - r.lo).collect();
        while self.remaining() > 0 {
            let before = self.trace.len();
            for axis in 0..AXES {
                if self.remaining() == 0 {
                    break;
                }
                let center = to_point(&self.incumbent());
                let r = ranges[axis];
                let lo = (center[axis] - widths[axis] / 2.0).max(r.lo);
                let hi = (center[axis] + widths[axis] / 2.0).min(r.hi);
                let batch = (0..POINTS_PER_AXIS)
                    .map(|i| lo + (hi - lo) * i as f64 / (POINTS_PER_AXIS - 1) as f64)
                    .filter(|v| *v != center[axis])
                    .map(|v| {
                        let mut p = center;
                        p[axis] = v;
                        from_point(&p, base)
                    })
                    .collect();
                self.run_batch(batch);
            }
            widths.iter_mut().for_each(|w| *w /= 2.0);
            // windows narrowed below float resolution or every candidate was invalid
            if self.trace.len() == before {
                break;
            }
        }
    }
}

/// Searches blends for `state` on the validation split.
pub fn search(state: &ClassifierState, validation: &LabeledEmbeddings, spec: &SearchSpec) -> Result<SearchOutcome> {
    spec.validate()?;
    if validation.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let scorer = Scorer {
        state,
        sims: state.similarities(&validation.embeddings)?,
        labels: &validation.labels,
    };
    let base = state.blend;
    let ranges = spec.ranges();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut s = Search {
        scorer,
        budget: spec.budget,
        trace: Vec::with_capacity(spec.budget),
        best: 0,
    };
    s.run_batch(seeded_candidates(spec, &base));
    match spec.strategy {
        Strategy::Random => {
            let n = s.remaining();
            s.random_phase(&mut rng, &ranges, &base, n);
        }
        Strategy::Coordinate => s.coordinate_phase(&ranges, &base),
        Strategy::Hybrid => {
            let n = (spec.budget / 3).saturating_sub(s.trace.len());
            s.random_phase(&mut rng, &ranges, &base, n);
            s.coordinate_phase(&ranges, &base);
        }
    }
    let best = s.trace[s.best].clone();
    Ok(SearchOutcome {
        best: best.blend,
        best_val_acc: best.val_acc,
        trace: s.trace,
    })
}

pub fn write_trace_csv(trace: &[Trial], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "idx,{},val_acc", AXIS_NAMES.join(","))?;
    for t in trace {
        let p = to_point(&t.blend);
        let values: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{},{},{}", t.idx, values.join(","), t.val_acc)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::BridgeModel;
    use crate::synth::{generate, SynthSpec};

    fn state() -> (crate::task::FewShotTask, ClassifierState) {
        let task = generate(&SynthSpec {
            queries_per_class: 10,
            validation_per_class: 20,
            ..SynthSpec::default()
        })
        .unwrap()
        .task;
        let model = BridgeModel::training_free(&task.projection, task.eos_norm.clone(), task.classes());
        let state = ClassifierState::for_task(&task, &model, BlendConfig::default()).unwrap();
        (task, state)
    }

    #[test]
    fn budget_one_returns_first_seed() {
        let (task, state) = state();
        let spec = SearchSpec {
            budget: 1,
            ..SearchSpec::default()
        };
        let out = search(&state, &task.validation, &spec).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.best, seeded_candidates(&spec, &state.blend)[0]);
    }

    #[test]
    fn dominates_seeds_and_respects_bounds() {
        let (task, state) = state();
        for strategy in [Strategy::Coordinate, Strategy::Random, Strategy::Hybrid] {
            let spec = SearchSpec {
                budget: 120,
                strategy,
                ..SearchSpec::default()
            };
            let out = search(&state, &task.validation, &spec).unwrap();
            assert_eq!(out.trace.len(), 120, "{strategy}");
            let seeds = &out.trace[..4];
            assert!(seeds.iter().all(|t| t.val_acc <= out.best_val_acc));
            for t in &out.trace {
                let p = to_point(&t.blend);
                for (v, r) in p.iter().zip(spec.ranges()) {
                    assert!(*v >= r.lo && *v <= r.hi);
                }
            }
            let first_best = out.trace.iter().position(|t| t.val_acc == out.best_val_acc).unwrap();
            assert_eq!(out.trace[first_best].blend, out.best);
        }
    }

    #[test]
    fn deterministic() {
        let (task, state) = state();
        let spec = SearchSpec {
            budget: 60,
            seed: 9,
            ..SearchSpec::default()
        };
        let a = search(&state, &task.validation, &spec).unwrap();
        let b = search(&state, &task.validation, &spec).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn errors() {
        let (task, state) = state();
        let empty = LabeledEmbeddings::empty(task.embed_dim());
        assert!(matches!(
            search(&state, &empty, &SearchSpec::default()),
            Err(Error::EmptyValidation)
        ));
        let bad = SearchSpec {
            theta: Range::new(0.0, 0.0),
            ..SearchSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidSearchSpec(_))));
        assert!("greedy".parse::<Strategy>().is_err());
        assert_eq!("Hybrid".parse::<Strategy>().unwrap(), Strategy::Hybrid);
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        write_trace_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "idx,lambda1,lambda2,lambda3,alpha,beta,gamma,theta,val_acc\n"
        );
    }
}
