//! The expert-in-the-loop refinement loop.
//!
//! A [`Session`] pairs a dataset with a knowledge base and the
//! recommendations computed against the labeling the knowledge base
//! currently induces. [`Session::iterate`] applies a round of decisions:
//! accepted splits first, then accepted merges whose labels no accepted
//! split or earlier merge touched this round. The labeling is then
//! recomputed from the knowledge base and fresh recommendations are derived.
//! An iteration without any accepted recommendation marks the session
//! converged.
//!
//! Sessions are values: every operation returns a new session. Replaying a
//! decision log against the initial session reproduces the final knowledge
//! base exactly, since every step is deterministic given the parameters.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, LabeledDataset};
use crate::explain::{explain_merge, explain_split, ExplainError, ExplanationRule, InduceConfig};
use crate::metrics::{agreement, AgreementScores, MetricsError};
use crate::recommend::{analyze, render, render_compact, LabelNames, Recommendation, RecommendError, RecommendParams};
use crate::rulebase::{KbRule, KnowledgeBase, Provenance, RulebaseError};
use crate::scalar::Scalar;

/// Iterations [`Session::auto_expert`] runs before giving up.
pub const DEFAULT_ITERATION_CAP: usize = 20;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("dataset has no cluster labels and no clusterer was configured")]
    Unclustered,
    #[error("recommendation {0:?} is not pending")]
    UnknownRecommendation(String),
    #[error("more than one decision for recommendation {0:?}")]
    DuplicateDecision(String),
    #[error("accept threshold {0} outside [0, 1.01]")]
    BadThreshold(f64),
    #[error(transparent)]
    Recommend(#[from] RecommendError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Rulebase(#[from] RulebaseError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T, E = SessionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub recommendation: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Decision {
    pub fn accept(id: impl Into<String>) -> Self {
        Self { recommendation: id.into(), verdict: Verdict::Accept, note: None }
    }

    pub fn reject(id: impl Into<String>) -> Self {
        Self { recommendation: id.into(), verdict: Verdict::Reject, note: None }
    }
}

/// A decision as entered in the log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub iteration: u64,
    #[serde(flatten)]
    pub decision: Decision,
    pub timestamp: DateTime<Utc>,
    pub actor: String,
}

/// A recommendation awaiting a verdict, with everything needed to judge it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Pending<T> {
    pub id: String,
    pub recommendation: Recommendation<T>,
    /// Names of the expert labels the recommendation refers to.
    pub labels: Vec<String>,
    pub text: String,
    pub compact: String,
    pub explanations: Vec<ExplanationRule<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub iteration: u64,
    pub kb_version: u64,
    pub n_labels: usize,
    /// Expert labeling scored against the automated clustering.
    pub vs_clusters: AgreementScores,
    /// Expert labeling scored against ground truth, when known.
    pub vs_truth: Option<AgreementScores>,
}

/// Persistent part of a session; the dataset is stored alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SessionState<T> {
    pub id: String,
    pub params: RecommendParams,
    pub explain: InduceConfig,
    /// Knowledge base the session started from.
    pub initial_kb: KnowledgeBase<T>,
    pub kb: KnowledgeBase<T>,
    pub pending: Vec<Pending<T>>,
    /// Decisions recorded for the current iteration but not yet applied.
    pub staged: Vec<Decision>,
    pub decisions: Vec<DecisionRecord>,
    pub metrics_history: Vec<MetricsEntry>,
    pub iteration: u64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session<T> {
    pub state: SessionState<T>,
    /// The dataset with expert labels as induced by `state.kb`.
    pub dataset: LabeledDataset<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Applied {
    Split { recommendation: String, parent: String, labels: Vec<String> },
    Merge { recommendation: String, pair: (String, String), into: String },
}

/// What one iteration did, including every knowledge base version it made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct IterationReport<T> {
    pub applied: Vec<Applied>,
    /// Accepted merges skipped because a label they name changed this round.
    pub stale: Vec<String>,
    pub kb_versions: Vec<KnowledgeBase<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoOutcome {
    pub iterations: usize,
    pub converged: bool,
}

fn unique_name(kb_has: impl Fn(&str) -> bool, taken: &BTreeSet<String>, base: String) -> String {
    if !kb_has(&base) && !taken.contains(&base) {
        return base;
    }
    (2..)
        .map(|i| format!("{base}~{i}"))
        .find(|n| !kb_has(n) && !taken.contains(n))
        .expect("unbounded suffixes")
}

impl<T: Scalar> Session<T> {
    /// Starts from raw expert labels, wrapped into a label-constant knowledge base.
    pub fn start(id: impl Into<String>, ds: LabeledDataset<T>, params: RecommendParams, explain: InduceConfig) -> Result<Self> {
        let kb = KnowledgeBase::from_labels(ds.feature_names().to_vec(), ds.expert());
        Self::start_with_kb(id, ds, kb, params, explain)
    }

    pub fn start_with_kb(
        id: impl Into<String>,
        ds: LabeledDataset<T>,
        kb: KnowledgeBase<T>,
        params: RecommendParams,
        explain: InduceConfig,
    ) -> Result<Self> {
        if ds.clusters().is_none() {
            return Err(SessionError::Unclustered);
        }
        params.validate()?;
        let labels = kb.label_dataset(&ds)?;
        let dataset = ds.with_expert(labels)?;
        let mut session = Self {
            state: SessionState {
                id: id.into(),
                params,
                explain,
                initial_kb: kb.clone(),
                kb,
                pending: Vec::new(),
                staged: Vec::new(),
                decisions: Vec::new(),
                metrics_history: Vec::new(),
                iteration: 0,
                converged: false,
            },
            dataset,
        };
        session.refresh()?;
        Ok(session)
    }

    /// Rebuilds a session from persisted state and the base dataset.
    pub fn restore(state: SessionState<T>, base: LabeledDataset<T>) -> Result<Self> {
        let labels = state.kb.label_dataset(&base)?;
        Ok(Self { dataset: base.with_expert(labels)?, state })
    }

    pub fn pending(&self, id: &str) -> Option<&Pending<T>> {
        self.state.pending.iter().find(|p| p.id == id)
    }

    fn refresh(&mut self) -> Result<()> {
        let ds = &self.dataset;
        let analysis = analyze(ds, &self.state.params)?;
        let names = LabelNames::of(ds);
        let iteration = self.state.iteration;
        let mut pending = Vec::new();
        for (n, split) in analysis.splits.iter().enumerate() {
            let explanations = explain_split(ds, split, &self.state.explain)?;
            let rec = Recommendation::Split(split.clone());
            pending.push(Pending {
                id: format!("r{iteration}-s{n}"),
                labels: vec![ds.expert().names[split.expert_label].clone()],
                text: render(&rec, names),
                compact: render_compact(&rec, names),
                recommendation: rec,
                explanations,
            });
        }
        for (n, merge) in analysis.merges.iter().enumerate() {
            let (a, b) = explain_merge(ds, merge, &self.state.explain)?;
            let rec = Recommendation::Merge(merge.clone());
            pending.push(Pending {
                id: format!("r{iteration}-m{n}"),
                labels: vec![ds.expert().names[merge.pair.0].clone(), ds.expert().names[merge.pair.1].clone()],
                text: render(&rec, names),
                compact: render_compact(&rec, names),
                recommendation: rec,
                explanations: vec![a, b],
            });
        }
        self.state.pending = pending;
        let expert = ds.expert_labels();
        self.state.metrics_history.push(MetricsEntry {
            iteration,
            kb_version: self.state.kb.version,
            n_labels: ds.expert().n_labels(),
            vs_clusters: agreement(ds.cluster_labels().ok_or(SessionError::Unclustered)?, expert)?,
            vs_truth: ds.ground_truth().map(|t| agreement(t, expert)).transpose()?,
        });
        Ok(())
    }

    fn check(&self, decisions: &[Decision]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for d in decisions {
            if self.pending(&d.recommendation).is_none() {
                return Err(SessionError::UnknownRecommendation(d.recommendation.clone()));
            }
            if !seen.insert(d.recommendation.as_str()) {
                return Err(SessionError::DuplicateDecision(d.recommendation.clone()));
            }
        }
        Ok(())
    }

    /// Records decisions for the current iteration; a later decision on the
    /// same recommendation replaces the earlier one.
    pub fn stage(&self, decisions: &[Decision]) -> Result<Self> {
        self.check(decisions)?;
        let mut next = self.clone();
        for d in decisions {
            next.state.staged.retain(|s| s.recommendation != d.recommendation);
            next.state.staged.push(d.clone());
        }
        Ok(next)
    }

    /// Applies the staged decisions.
    pub fn iterate_staged(&self, actor: &str, now: DateTime<Utc>) -> Result<(Self, IterationReport<T>)> {
        let staged = self.state.staged.clone();
        self.iterate(&staged, actor, now)
    }

    pub fn iterate(&self, decisions: &[Decision], actor: &str, now: DateTime<Utc>) -> Result<(Self, IterationReport<T>)> {
        self.check(decisions)?;
        let verdicts: BTreeMap<&str, Verdict> = decisions.iter().map(|d| (d.recommendation.as_str(), d.verdict)).collect();
        let accepted = |p: &&Pending<T>| verdicts.get(p.id.as_str()) == Some(&Verdict::Accept);

        let mut kb = self.state.kb.clone();
        let mut report = IterationReport { applied: Vec::new(), stale: Vec::new(), kb_versions: Vec::new() };
        let mut touched: BTreeSet<String> = BTreeSet::new();
        let mut created: BTreeSet<String> = BTreeSet::new();

        for p in self.state.pending.iter().filter(accepted) {
            let Recommendation::Split(split) = &p.recommendation else { continue };
            let parent = p.labels[0].clone();
            let mut rules = Vec::new();
            for (n, explanation) in split.candidates.iter().zip(&p.explanations).map(|(_, e)| e).enumerate() {
                let label = unique_name(|l| kb.has_label(l), &created, format!("{parent}.{}", n + 1));
                created.insert(label.clone());
                let provenance = Provenance::Split { parent: parent.clone(), recommendation: p.id.clone() };
                rules.push((label.clone(), KbRule::from_explanation(explanation, label, provenance)));
            }
            let labels: Vec<String> = rules.iter().map(|(l, _)| l.clone()).collect();
            kb = kb.apply_split(&parent, rules)?;
            report.kb_versions.push(kb.clone());
            report.applied.push(Applied::Split { recommendation: p.id.clone(), parent: parent.clone(), labels });
            touched.insert(parent);
        }

        for p in self.state.pending.iter().filter(accepted) {
            if !matches!(p.recommendation, Recommendation::Merge(_)) {
                continue;
            }
            let (a, b) = (p.labels[0].clone(), p.labels[1].clone());
            if touched.contains(&a) || touched.contains(&b) {
                report.stale.push(p.id.clone());
                continue;
            }
            let into = unique_name(|l| kb.has_label(l), &created, format!("{a}+{b}"));
            created.insert(into.clone());
            kb = kb.apply_merge((&a, &b), &into)?;
            report.kb_versions.push(kb.clone());
            report.applied.push(Applied::Merge { recommendation: p.id.clone(), pair: (a.clone(), b.clone()), into });
            touched.insert(a);
            touched.insert(b);
        }

        let mut next = self.clone();
        let labels = kb.label_dataset(&self.dataset)?;
        next.dataset = self.dataset.clone().with_expert(labels)?;
        next.state.kb = kb;
        next.state.decisions.extend(decisions.iter().map(|d| DecisionRecord {
            iteration: self.state.iteration,
            decision: d.clone(),
            timestamp: now,
            actor: actor.to_owned(),
        }));
        next.state.staged.clear();
        next.state.converged = !decisions.iter().any(|d| d.verdict == Verdict::Accept);
        next.state.iteration += 1;
        next.refresh()?;
        Ok((next, report))
    }

    /// One scripted-expert iteration: accepts every recommendation with
    /// confidence at least `threshold` and rejects the rest.
    pub fn auto_step(&self, threshold: f64, now: DateTime<Utc>) -> Result<(Self, IterationReport<T>)> {
        if !(0.0..=1.01).contains(&threshold) {
            return Err(SessionError::BadThreshold(threshold));
        }
        let decisions: Vec<Decision> = self
            .state
            .pending
            .iter()
            .map(|p| {
                if p.recommendation.confidence().as_f64() >= threshold {
                    Decision::accept(&p.id)
                } else {
                    Decision::reject(&p.id)
                }
            })
            .collect();
        self.iterate(&decisions, "auto-expert", now)
    }

    /// Repeats [`Self::auto_step`] until convergence or `cap` iterations.
    pub fn auto_expert(&self, threshold: f64, cap: usize, now: DateTime<Utc>) -> Result<(Self, AutoOutcome)> {
        if !(0.0..=1.01).contains(&threshold) {
            return Err(SessionError::BadThreshold(threshold));
        }
        let mut session = self.clone();
        let mut iterations = 0;
        while iterations < cap && !(iterations > 0 && session.state.converged) {
            session = session.auto_step(threshold, now)?.0;
            iterations += 1;
        }
        let converged = session.state.converged;
        Ok((session, AutoOutcome { iterations, converged }))
    }

    /// Replays the decision log of `self` from its initial knowledge base
    /// and returns the reconstructed session.
    pub fn replay(&self, base: LabeledDataset<T>) -> Result<Self> {
        let s = &self.state;
        let mut session =
            Self::start_with_kb(s.id.clone(), base, s.initial_kb.clone(), s.params.clone(), s.explain.clone())?;
        for iteration in 0..s.iteration {
            let records: Vec<&DecisionRecord> = s.decisions.iter().filter(|r| r.iteration == iteration).collect();
            let decisions: Vec<Decision> = records.iter().map(|r| r.decision.clone()).collect();
            let (actor, now) = records.first().map_or(("replay", Utc::now()), |r| (r.actor.as_str(), r.timestamp));
            session = session.iterate(&decisions, actor, now)?.0;
        }
        session.state.staged = s.staged.clone();
        Ok(session)
    }
}
