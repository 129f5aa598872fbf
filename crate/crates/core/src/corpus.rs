//! Peer-review corpus ingestion: parsing the canonical directory layout,
//! repairing mislabeled meta-reviews, deduplication, and task-specific
//! labeled example derivation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::logistic;

/// Exact title under which the conference chair's decision is filed as a
/// regular review in the raw data.
pub const META_REVIEW_TITLE: &str = "ICLR Committee Final Decision";

/// Recommendation scores strictly above this threshold count as an accept.
pub const ACCEPT_SCORE_THRESHOLD: i64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "dev",
            Split::Test => "test",
        }
    }

    pub fn all() -> [Split; 3] {
        [Split::Train, Split::Validation, Split::Test]
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    FinalDecision,
    MetaReview,
    IndividualReview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub id: String,
    pub text: String,
    pub title: String,
    /// Reviewer recommendation in 1..=10; absent on some meta-reviews.
    pub score: Option<i64>,
    pub is_meta: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub id: String,
    pub title: String,
    pub abstract_text: String,
    pub reviews: Vec<Review>,
    pub accepted: bool,
    pub split: Split,
    /// Repair findings; recomputed (not appended) on every cleaning pass.
    pub warnings: Vec<String>,
}

impl Submission {
    /// Non-meta reviews carrying a recommendation score.
    pub fn scored_reviews(&self) -> impl Iterator<Item = &Review> {
        self.reviews.iter().filter(|r| !r.is_meta && r.score.is_some())
    }

    pub fn meta_review(&self) -> Option<&Review> {
        self.reviews.iter().find(|r| r.is_meta)
    }

    pub fn mean_score(&self) -> Option<f64> {
        let scores: Vec<i64> = self.scored_reviews().map(|r| r.score.unwrap()).collect();
        if scores.is_empty() {
            None
        } else {
            Some(scores.iter().sum::<i64>() as f64 / scores.len() as f64)
        }
    }
}

/// One training unit: treatment text, confounder text, binary label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub example_id: String,
    pub submission_id: String,
    pub task: Task,
    pub treatment_text: String,
    /// Fusion inputs: one entry per peer review for the final-decision task,
    /// a single entry elsewhere.
    pub treatment_parts_list: Vec<String>,
    pub confounder_text: String,
    pub label: u8,
}

impl LabeledExample {
    pub fn new(
        submission_id: &str,
        task: Task,
        treatment: &str,
        confounder: &str,
        label: u8,
    ) -> Self {
        LabeledExample {
            example_id: format!("{submission_id}:{task}:0"),
            submission_id: submission_id.to_string(),
            task,
            treatment_text: treatment.to_string(),
            treatment_parts_list: vec![treatment.to_string()],
            confounder_text: confounder.to_string(),
            label,
        }
    }

    pub fn treatment_parts(&self) -> &[String] {
        &self.treatment_parts_list
    }
}

// --- canonical on-disk records -------------------------------------------

/// JSON record for one submission file in the canonical layout.
#[derive(Debug, Serialize, Deserialize)]
pub struct SubmissionRecord {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub accepted: bool,
    pub reviews: Vec<ReviewRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReviewRecord {
    #[serde(default)]
    pub title: String,
    pub comments: String,
    #[serde(rename = "RECOMMENDATION")]
    pub recommendation: Option<i64>,
    #[serde(rename = "IS_META_REVIEW", default)]
    pub is_meta_review: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SkippedRecord {
    pub path: PathBuf,
    pub reason: String,
}

/// Everything `parse_dataset` found, including per-record failures; skips are
/// reported, never silent.
#[derive(Debug)]
pub struct ParseOutcome {
    pub submissions: Vec<Submission>,
    pub skipped: Vec<SkippedRecord>,
    pub split_counts: BTreeMap<Split, usize>,
}

fn parse_record(path: &Path, split: Split) -> Result<Submission> {
    let raw = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let record: SubmissionRecord = serde_json::from_str(&raw).map_err(|e| {
        CoreError::MalformedRecord {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })?;
    if record.abstract_text.trim().is_empty() {
        return Err(CoreError::MalformedRecord {
            path: path.to_path_buf(),
            reason: "empty abstract".to_string(),
        });
    }
    let file_stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("record")
        .to_string();
    let mut reviews = Vec::with_capacity(record.reviews.len());
    for (i, r) in record.reviews.into_iter().enumerate() {
        if let Some(score) = r.recommendation {
            if !(1..=10).contains(&score) {
                return Err(CoreError::MalformedRecord {
                    path: path.to_path_buf(),
                    reason: format!("recommendation {score} outside 1..=10"),
                });
            }
        }
        reviews.push(Review {
            id: format!("{file_stem}#r{i}"),
            text: r.comments,
            title: r.title,
            score: r.recommendation,
            is_meta: r.is_meta_review,
        });
    }
    Ok(Submission {
        id: record.id,
        title: record.title,
        abstract_text: record.abstract_text,
        reviews,
        accepted: record.accepted,
        split,
        warnings: Vec::new(),
    })
}

/// Parse the canonical layout `<root>/{train,dev,test}/reviews/*.json`.
/// Malformed records are skipped and reported with their file path.
pub fn parse_dataset(root: &Path) -> Result<ParseOutcome> {
    let mut submissions = Vec::new();
    let mut skipped = Vec::new();
    let mut split_counts = BTreeMap::new();
    for split in Split::all() {
        let dir = root.join(split.dir_name()).join("reviews");
        let entries = fs::read_dir(&dir).map_err(|e| CoreError::io(&dir, e))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
            .collect();
        paths.sort();
        let mut count = 0usize;
        for path in paths {
            match parse_record(&path, split) {
                Ok(sub) => {
                    submissions.push(sub);
                    count += 1;
                }
                Err(e) => skipped.push(SkippedRecord {
                    path: path.clone(),
                    reason: e.to_string(),
                }),
            }
        }
        split_counts.insert(split, count);
    }
    submissions.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(ParseOutcome {
        submissions,
        skipped,
        split_counts,
    })
}

/// Cleaning report mirroring the emitted JSON interface.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct CleaningReport {
    pub removed_empty: usize,
    pub removed_duplicates: usize,
    pub repaired_meta: usize,
    pub demoted_extra_meta: usize,
    /// Reviews whose title resembles but does not exactly match the
    /// meta-review title; surfaced for manual inspection.
    pub partial_title_matches: Vec<String>,
}

fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Remove empty and duplicate reviews, flag meta-reviews by exact title
/// match, and demote any extras beyond the first. Idempotent field-for-field.
pub fn repair_and_clean(subs: Vec<Submission>) -> (Vec<Submission>, CleaningReport) {
    let mut report = CleaningReport::default();
    let mut out = Vec::with_capacity(subs.len());
    for mut sub in subs {
        sub.warnings.clear();
        let mut seen: Vec<String> = Vec::new();
        let mut kept: Vec<Review> = Vec::new();
        for mut review in std::mem::take(&mut sub.reviews) {
            if review.text.trim().is_empty() {
                report.removed_empty += 1;
                continue;
            }
            let key = normalize_ws(&review.text);
            if seen.contains(&key) {
                report.removed_duplicates += 1;
                continue;
            }
            seen.push(key);
            let title = review.title.trim();
            if title == META_REVIEW_TITLE {
                if !review.is_meta {
                    review.is_meta = true;
                    report.repaired_meta += 1;
                }
            } else if !title.is_empty()
                && title.to_lowercase().contains("final decision")
            {
                report
                    .partial_title_matches
                    .push(format!("{}:{}", sub.id, review.id));
            }
            kept.push(review);
        }
        // Keep the first meta-review, demote the rest.
        let mut meta_seen = false;
        for review in kept.iter_mut() {
            if review.is_meta {
                if meta_seen {
                    review.is_meta = false;
                    report.demoted_extra_meta += 1;
                    sub.warnings
                        .push(format!("demoted extra meta-review {}", review.id));
                } else {
                    meta_seen = true;
                }
            }
        }
        sub.reviews = kept;
        out.push(sub);
    }
    (out, report)
}

/// Per-task derivation counters.
#[derive(Debug, Default, Clone, Serialize)]
pub struct DeriveReport {
    pub skipped_missing_score: usize,
    pub skipped_no_meta: usize,
    pub skipped_no_reviews: usize,
}

/// Turn submissions into task-specific labeled examples. The confounder text
/// is the abstract for every task.
pub fn derive_examples(subs: &[Submission], task: Task) -> (Vec<LabeledExample>, DeriveReport) {
    let mut examples = Vec::new();
    let mut report = DeriveReport::default();
    for sub in subs {
        match task {
            Task::FinalDecision => {
                let parts: Vec<String> = sub
                    .reviews
                    .iter()
                    .filter(|r| !r.is_meta)
                    .map(|r| r.text.clone())
                    .collect();
                if parts.is_empty() {
                    report.skipped_no_reviews += 1;
                    continue;
                }
                examples.push(LabeledExample {
                    example_id: format!("{}:{}:0", sub.id, task),
                    submission_id: sub.id.clone(),
                    task,
                    treatment_text: parts.join("\n\n"),
                    treatment_parts_list: parts,
                    confounder_text: sub.abstract_text.clone(),
                    label: sub.accepted as u8,
                });
            }
            Task::MetaReview => {
                let Some(meta) = sub.meta_review() else {
                    report.skipped_no_meta += 1;
                    continue;
                };
                examples.push(LabeledExample {
                    example_id: format!("{}:{}:0", sub.id, task),
                    submission_id: sub.id.clone(),
                    task,
                    treatment_text: meta.text.clone(),
                    treatment_parts_list: vec![meta.text.clone()],
                    confounder_text: sub.abstract_text.clone(),
                    label: sub.accepted as u8,
                });
            }
            Task::IndividualReview => {
                let mut idx = 0usize;
                for review in sub.reviews.iter().filter(|r| !r.is_meta) {
                    let Some(score) = review.score else {
                        report.skipped_missing_score += 1;
                        continue;
                    };
                    examples.push(LabeledExample {
                        example_id: format!("{}:{}:{}", sub.id, task, idx),
                        submission_id: sub.id.clone(),
                        task,
                        treatment_text: review.text.clone(),
                        treatment_parts_list: vec![review.text.clone()],
                        confounder_text: sub.abstract_text.clone(),
                        label: (score > ACCEPT_SCORE_THRESHOLD) as u8,
                    });
                    idx += 1;
                }
            }
        }
    }
    (examples, report)
}

/// Majority vote over per-review accept recommendations; an exact tie counts
/// as a reject.
pub fn majority_vote_baseline(sub: &Submission) -> Result<u8> {
    let votes: Vec<bool> = sub
        .scored_reviews()
        .map(|r| r.score.unwrap() > ACCEPT_SCORE_THRESHOLD)
        .collect();
    if votes.is_empty() {
        return Err(CoreError::NoVotes(sub.id.clone()));
    }
    let ones = votes.iter().filter(|v| **v).count();
    Ok((2 * ones > votes.len()) as u8)
}

/// One-feature logistic regression: mean recommendation score -> accepted.
/// Fit on `train_subs`, returns accuracy on `eval_subs`.
pub fn score_regression_baseline(train_subs: &[Submission], eval_subs: &[Submission]) -> Result<f64> {
    let featurize = |subs: &[Submission]| -> Result<(Vec<Vec<f64>>, Vec<u8>)> {
        let mut xs = Vec::with_capacity(subs.len());
        let mut ys = Vec::with_capacity(subs.len());
        for sub in subs {
            let mean = sub
                .mean_score()
                .ok_or_else(|| CoreError::NoVotes(sub.id.clone()))?;
            xs.push(vec![mean]);
            ys.push(sub.accepted as u8);
        }
        Ok((xs, ys))
    };
    let (x_train, y_train) = featurize(train_subs)?;
    let (x_eval, y_eval) = featurize(eval_subs)?;
    let fit = logistic::fit(&x_train, &y_train, 1e-3, 200, 1e-9)?;
    let correct = x_eval
        .iter()
        .zip(y_eval.iter())
        .filter(|(x, &y)| (logistic::predict_proba(&fit, x) > 0.5) as u8 == y)
        .count();
    Ok(correct as f64 / y_eval.len() as f64)
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Task::FinalDecision => "final_decision",
            Task::MetaReview => "meta_review",
            Task::IndividualReview => "individual_review",
        };
        f.write_str(name)
    }
}
