//! Versioned knowledge base of executable conjunctive rules.
//!
//! Labels are referenced by name. Every mutation returns a new value with
//! `version + 1` and appends one history entry; the receiver is untouched.
//!
//! Inference for one instance runs in two stages:
//!
//! 1. The base label: the most confident enabled unscoped rule that fires
//!    (ties go to the earliest rule), else the row's base assignment when one
//!    is known, else `default_label`, else unlabeled.
//! 2. Refinement: while some enabled rule scoped to the current label fires,
//!    move to the conclusion of the most confident one. When none fires the
//!    current label is retained, which is how split parents keep the points
//!    no split rule describes.
//!
//! Labels retired by a merge are resolved through recorded aliases, so base
//! assignments and the default label keep working after merges.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{LabeledDataset, Labeling};
use crate::explain::{Condition, ExplanationRule, Predicate};
use crate::scalar::Scalar;

/// Name carried by rows no rule, assignment or default labels.
pub const UNLABELED: &str = "<unlabeled>";

#[derive(Debug, Error, PartialEq)]
pub enum RulebaseError {
    #[error("instance has {found} features, schema has {expected}")]
    SchemaMismatch { expected: usize, found: usize },
    #[error("dataset features {found:?} do not match schema {expected:?}")]
    DatasetSchema { expected: Vec<String>, found: Vec<String> },
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("label {0:?} already exists")]
    LabelExists(String),
    #[error("duplicate new label {0:?}")]
    DuplicateLabel(String),
    #[error("a split needs at least 2 new labels, got {0}")]
    TooFewLabels(usize),
    #[error("cannot merge label {0:?} with itself")]
    SelfMerge(String),
    #[error("unknown rule {0:?}")]
    UnknownRule(String),
    #[error("confidence {0} outside [0, 1]")]
    BadConfidence(f64),
    #[error("base assignment covers {found} rows, dataset has {expected}")]
    BaseLength { expected: usize, found: usize },
}

pub type Result<T, E = RulebaseError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Expert,
    Split { parent: String, recommendation: String },
    Merge { pair: (String, String), recommendation: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct KbRule<T> {
    pub id: String,
    pub conditions: Vec<Condition<T>>,
    pub conclusion: String,
    /// Label this rule refines; `None` for top-level rules.
    pub scope: Option<String>,
    pub confidence: f64,
    pub provenance: Provenance,
    pub enabled: bool,
}

impl<T: Scalar> KbRule<T> {
    /// Rule with the confidence `precision * coverage`; the id is assigned
    /// when the rule enters a knowledge base.
    pub fn from_explanation(rule: &ExplanationRule<T>, conclusion: impl Into<String>, provenance: Provenance) -> Self {
        Self {
            id: String::new(),
            conditions: rule.conditions.clone(),
            conclusion: conclusion.into(),
            scope: None,
            confidence: rule.precision * rule.coverage,
            provenance,
            enabled: true,
        }
    }

    fn holds(&self, compiled: &[(usize, Predicate<T>)], instance: &[T]) -> bool {
        self.enabled && crate::explain::conjunction_holds(compiled, instance)
    }
}

impl<T: Scalar> fmt::Display for KbRule<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let body = if self.conditions.is_empty() {
            "TRUE".to_string()
        } else {
            self.conditions.iter().map(ToString::to_string).collect::<Vec<_>>().join(" AND ")
        };
        write!(f, "{}: {} => {} (Confidence: {:.2})", self.id, body, self.conclusion, self.confidence)?;
        if let Some(scope) = &self.scope {
            write!(f, " [within {scope}]")?;
        }
        if !self.enabled {
            write!(f, " [disabled]")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub name: String,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum KbAction {
    Create,
    Import { rule: String },
    Split { parent: String, labels: Vec<String>, rules: Vec<String> },
    Merge { pair: (String, String), into: String },
    SetConfidence { rule: String, confidence: f64 },
    SetEnabled { rule: String, enabled: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub version: u64,
    #[serde(flatten)]
    pub action: KbAction,
}

/// Outcome of inference on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub label: Option<String>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct KnowledgeBase<T> {
    pub schema: Vec<String>,
    pub labels: Vec<LabelEntry>,
    pub rules: Vec<KbRule<T>>,
    pub version: u64,
    pub default_label: Option<String>,
    /// Per-row label indices into `labels`, for expert labelings given as
    /// raw label files rather than rules.
    pub base: Option<Vec<usize>>,
    /// Retired label -> label it was merged into.
    pub aliases: BTreeMap<String, String>,
    pub history: Vec<HistoryEntry>,
    next_rule: u64,
}

struct Compiled<'a, T> {
    rule: &'a KbRule<T>,
    conditions: Vec<(usize, Predicate<T>)>,
}

impl<T: Scalar> KnowledgeBase<T> {
    pub fn new(schema: Vec<String>) -> Self {
        Self {
            schema,
            labels: Vec::new(),
            rules: Vec::new(),
            version: 1,
            default_label: None,
            base: None,
            aliases: BTreeMap::new(),
            history: vec![HistoryEntry { version: 1, action: KbAction::Create }],
            next_rule: 0,
        }
    }

    /// Wraps a raw expert labeling: every label is registered and each row
    /// keeps its label through the base assignment.
    pub fn from_labels(schema: Vec<String>, labeling: &Labeling) -> Self {
        let mut kb = Self::new(schema);
        kb.labels = labeling.names.iter().map(|n| LabelEntry { name: n.clone(), active: true }).collect();
        kb.base = Some(labeling.ids.clone());
        kb
    }

    pub fn with_default_label(mut self, label: impl Into<String>) -> Self {
        let label = label.into();
        self.register(&label);
        self.default_label = Some(label);
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.register(&label.into());
        self
    }

    pub fn active_labels(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().filter(|l| l.active).map(|l| l.name.as_str())
    }

    pub fn has_label(&self, name: &str) -> bool {
        self.labels.iter().any(|l| l.active && l.name == name)
    }

    pub fn rule(&self, id: &str) -> Option<&KbRule<T>> {
        self.rules.iter().find(|r| r.id == id)
    }

    fn register(&mut self, name: &str) {
        match self.labels.iter_mut().find(|l| l.name == name) {
            Some(entry) => entry.active = true,
            None => self.labels.push(LabelEntry { name: name.to_owned(), active: true }),
        }
        self.aliases.remove(name);
    }

    fn check_features(&self, conditions: &[Condition<T>]) -> Result<()> {
        match conditions.iter().find(|c| !self.schema.contains(&c.feature)) {
            Some(c) => Err(RulebaseError::UnknownFeature(c.feature.clone())),
            None => Ok(()),
        }
    }

    fn bump(&self, action: KbAction) -> Self {
        let mut next = self.clone();
        next.version += 1;
        next.history.push(HistoryEntry { version: next.version, action });
        next
    }

    fn push_rule(&mut self, mut rule: KbRule<T>) -> String {
        rule.id = format!("R{}", self.next_rule);
        self.next_rule += 1;
        let id = rule.id.clone();
        self.rules.push(rule);
        id
    }

    /// Appends a rule built from an explanation with confidence
    /// `precision * coverage`, optionally scoped to refine another label.
    pub fn import_explanation(
        &self,
        rule: &ExplanationRule<T>,
        as_label: &str,
        scope: Option<&str>,
        provenance: Provenance,
    ) -> Result<Self> {
        let mut kb_rule = KbRule::from_explanation(rule, as_label, provenance);
        kb_rule.scope = scope.map(str::to_owned);
        self.add_rule(kb_rule)
    }

    /// Appends a rule as given, registering its conclusion as a label.
    pub fn add_rule(&self, rule: KbRule<T>) -> Result<Self> {
        self.check_features(&rule.conditions)?;
        if !(0.0..=1.0).contains(&rule.confidence) {
            return Err(RulebaseError::BadConfidence(rule.confidence));
        }
        if let Some(scope) = &rule.scope {
            if !self.has_label(scope) {
                return Err(RulebaseError::UnknownLabel(scope.clone()));
            }
        }
        let mut next = self.bump(KbAction::Import { rule: String::new() });
        next.register(&rule.conclusion);
        let id = next.push_rule(rule);
        next.history.last_mut().expect("bump pushes history").action = KbAction::Import { rule: id };
        Ok(next)
    }

    /// Refines `parent` into the given labels; each rule is scoped to the
    /// parent and concludes its label.
    pub fn apply_split(&self, parent: &str, rules: Vec<(String, KbRule<T>)>) -> Result<Self> {
        if !self.has_label(parent) {
            return Err(RulebaseError::UnknownLabel(parent.to_owned()));
        }
        if rules.len() < 2 {
            return Err(RulebaseError::TooFewLabels(rules.len()));
        }
        let mut seen = BTreeSet::new();
        for (label, rule) in &rules {
            if !seen.insert(label.as_str()) {
                return Err(RulebaseError::DuplicateLabel(label.clone()));
            }
            if self.has_label(label) {
                return Err(RulebaseError::LabelExists(label.clone()));
            }
            self.check_features(&rule.conditions)?;
            if !(0.0..=1.0).contains(&rule.confidence) {
                return Err(RulebaseError::BadConfidence(rule.confidence));
            }
        }
        let labels: Vec<String> = rules.iter().map(|(l, _)| l.clone()).collect();
        let mut next = self.bump(KbAction::Create);
        let mut ids = Vec::new();
        for (label, mut rule) in rules {
            next.register(&label);
            rule.conclusion = label;
            rule.scope = Some(parent.to_owned());
            ids.push(next.push_rule(rule));
        }
        next.history.last_mut().expect("bump pushes history").action =
            KbAction::Split { parent: parent.to_owned(), labels, rules: ids };
        Ok(next)
    }

    /// Unifies two labels under `new_label`, rewriting every conclusion and
    /// scope that names either of them. `new_label` may be an existing label,
    /// such as the parent the pair was split from.
    pub fn apply_merge(&self, pair: (&str, &str), new_label: &str) -> Result<Self> {
        let (j, k) = pair;
        for l in [j, k] {
            if !self.has_label(l) {
                return Err(RulebaseError::UnknownLabel(l.to_owned()));
            }
        }
        if j == k {
            return Err(RulebaseError::SelfMerge(j.to_owned()));
        }
        let mut next = self.bump(KbAction::Merge { pair: (j.to_owned(), k.to_owned()), into: new_label.to_owned() });
        let rename = |s: &mut String| {
            if s == j || s == k {
                *s = new_label.to_owned();
            }
        };
        for rule in &mut next.rules {
            rename(&mut rule.conclusion);
            if let Some(scope) = rule.scope.as_mut() {
                rename(scope);
            }
        }
        if let Some(d) = next.default_label.as_mut() {
            rename(d);
        }
        for entry in &mut next.labels {
            if entry.name == j || entry.name == k {
                entry.active = false;
            }
        }
        next.register(new_label);
        for old in [j, k].into_iter().filter(|&o| o != new_label) {
            next.aliases.insert(old.to_owned(), new_label.to_owned());
        }
        for target in next.aliases.values_mut() {
            rename(target);
        }
        Ok(next)
    }

    pub fn set_confidence(&self, rule: &str, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(RulebaseError::BadConfidence(confidence));
        }
        let pos = self.rules.iter().position(|r| r.id == rule).ok_or_else(|| RulebaseError::UnknownRule(rule.to_owned()))?;
        let mut next = self.bump(KbAction::SetConfidence { rule: rule.to_owned(), confidence });
        next.rules[pos].confidence = confidence;
        Ok(next)
    }

    pub fn set_enabled(&self, rule: &str, enabled: bool) -> Result<Self> {
        let pos = self.rules.iter().position(|r| r.id == rule).ok_or_else(|| RulebaseError::UnknownRule(rule.to_owned()))?;
        let mut next = self.bump(KbAction::SetEnabled { rule: rule.to_owned(), enabled });
        next.rules[pos].enabled = enabled;
        Ok(next)
    }

    fn resolve<'a>(&'a self, mut name: &'a str) -> &'a str {
        // Alias chains are acyclic: a name is only aliased once it is retired.
        while let Some(next) = self.aliases.get(name) {
            name = next;
        }
        name
    }

    fn compile(&self) -> Vec<Compiled<'_, T>> {
        self.rules
            .iter()
            .map(|rule| Compiled {
                rule,
                conditions: rule
                    .conditions
                    .iter()
                    .map(|c| (self.schema.iter().position(|f| *f == c.feature).expect("features checked on insert"), c.predicate))
                    .collect(),
            })
            .collect()
    }

    fn best<'a>(compiled: &'a [Compiled<'a, T>], scope: Option<&str>, instance: &[T]) -> Option<&'a KbRule<T>> {
        let mut best: Option<&KbRule<T>> = None;
        for c in compiled.iter().filter(|c| c.rule.scope.as_deref() == scope) {
            if c.rule.holds(&c.conditions, instance) && best.is_none_or(|b| c.rule.confidence > b.confidence) {
                best = Some(c.rule);
            }
        }
        best
    }

    fn infer_compiled(&self, compiled: &[Compiled<'_, T>], instance: &[T], base: Option<&str>) -> Inference {
        let (mut label, mut confidence) = match Self::best(compiled, None, instance) {
            Some(rule) => (Some(rule.conclusion.as_str()), rule.confidence),
            None => match base.or(self.default_label.as_deref()) {
                Some(l) => (Some(l), if base.is_some() { 1.0 } else { 0.0 }),
                None => (None, 0.0),
            },
        };
        if let Some(start) = label {
            let mut current = self.resolve(start);
            let mut visited = BTreeSet::from([current]);
            while let Some(rule) = Self::best(compiled, Some(current), instance) {
                let next = self.resolve(&rule.conclusion);
                confidence = rule.confidence;
                if !visited.insert(next) {
                    break;
                }
                current = next;
            }
            label = Some(current);
        }
        Inference { label: label.map(str::to_owned), confidence }
    }

    pub fn infer(&self, instance: &[T]) -> Result<Inference> {
        if instance.len() != self.schema.len() {
            return Err(RulebaseError::SchemaMismatch { expected: self.schema.len(), found: instance.len() });
        }
        Ok(self.infer_compiled(&self.compile(), instance, None))
    }

    /// Row-wise inference. Unlabeled rows get [`UNLABELED`]; label ids follow
    /// registration order of the labels present.
    pub fn label_dataset(&self, ds: &LabeledDataset<T>) -> Result<Labeling> {
        if ds.feature_names() != self.schema.as_slice() {
            return Err(RulebaseError::DatasetSchema {
                expected: self.schema.clone(),
                found: ds.feature_names().to_vec(),
            });
        }
        if let Some(base) = &self.base {
            if base.len() != ds.n_rows() {
                return Err(RulebaseError::BaseLength { expected: ds.n_rows(), found: base.len() });
            }
        }
        let compiled = self.compile();
        let mut names: Vec<String> = self.labels.iter().map(|l| l.name.clone()).collect();
        let index: BTreeMap<String, usize> = names.iter().cloned().zip(0..).collect();
        let unlabeled = names.len();
        names.push(UNLABELED.to_owned());
        let ids: Vec<usize> = (0..ds.n_rows())
            .map(|r| {
                let base = self.base.as_ref().map(|b| self.labels[b[r]].name.as_str());
                match self.infer_compiled(&compiled, ds.features().row(r), base).label {
                    Some(l) => index[&l],
                    None => unlabeled,
                }
            })
            .collect();
        Ok(Labeling::compact(&ids, &names))
    }

    /// Plain-text rule listing, one rule per line.
    pub fn render_text(&self) -> String {
        self.rules.iter().map(|r| format!("{r}\n")).collect()
    }

    /// Decision-table rendering: one column per condition attribute, then
    /// conclusion and confidence.
    pub fn render_table(&self) -> String {
        let used: Vec<&String> =
            self.schema.iter().filter(|f| self.rules.iter().any(|r| r.conditions.iter().any(|c| &c.feature == *f))).collect();
        let mut header = vec!["rule".to_string(), "scope".to_string()];
        header.extend(used.iter().map(|f| f.to_string()));
        header.extend(["conclusion".to_string(), "confidence".to_string()]);
        let mut rows = vec![header];
        for r in &self.rules {
            let mut row = vec![r.id.clone(), r.scope.clone().unwrap_or_else(|| "-".into())];
            for f in &used {
                let cells: Vec<String> = r
                    .conditions
                    .iter()
                    .filter(|c| &c.feature == *f)
                    .map(|c| c.to_string()[f.len() + 1..].to_string())
                    .collect();
                row.push(if cells.is_empty() { "-".into() } else { cells.join(" AND ") });
            }
            row.push(r.conclusion.clone());
            row.push(format!("{:.2}", r.confidence));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "| {} |", cells.join(" | "));
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
            }
        }
        out
    }
}
