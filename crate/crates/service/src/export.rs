//! Review export: feedback grouped by (image class, kind, prototype), a
//! majority-vote label patch, and a ranking of prototypes by complaints.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::store::{FeedbackKind, FeedbackRecord};

/// Sample image ids kept per group.
pub const SAMPLES_PER_GROUP: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewGroup {
    pub class_id: usize,
    pub class_name: String,
    pub kind: FeedbackKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prototype_id: Option<usize>,
    pub count: usize,
    pub sample_images: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPatch {
    pub image_id: String,
    pub suggested_label: usize,
    pub votes: usize,
    pub total_votes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnresolvedLabel {
    pub image_id: String,
    /// Labels sharing the top vote count.
    pub tied_labels: Vec<usize>,
    pub votes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrototypeComplaint {
    pub prototype_id: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewExport {
    pub model_version: String,
    pub total: usize,
    /// True when no feedback exists for the version.
    pub empty: bool,
    pub groups: Vec<ReviewGroup>,
    pub label_patch: Vec<LabelPatch>,
    pub unresolved: Vec<UnresolvedLabel>,
    pub prototype_complaints: Vec<PrototypeComplaint>,
}

pub fn build_review(model_version: &str, records: &[FeedbackRecord], class_names: &[String]) -> ReviewExport {
    let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
    let mut groups: BTreeMap<(usize, FeedbackKind, Option<usize>), Vec<&str>> = BTreeMap::new();
    let mut votes: BTreeMap<&str, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut complaints: BTreeMap<usize, usize> = BTreeMap::new();
    for r in records.iter().filter(|r| r.model_version == model_version) {
        let target = match r.kind {
            FeedbackKind::WrongLabel => None,
            FeedbackKind::WrongEvidence => r.prototype_id,
        };
        groups.entry((r.image_class, r.kind, target)).or_default().push(&r.image_id);
        match r.kind {
            FeedbackKind::WrongLabel => {
                if let Some(l) = r.suggested_label {
                    *votes.entry(&r.image_id).or_default().entry(l).or_default() += 1;
                }
            }
            FeedbackKind::WrongEvidence => {
                if let Some(p) = r.prototype_id {
                    *complaints.entry(p).or_default() += 1;
                }
            }
        }
    }
    let total = groups.values().map(Vec::len).sum();
    let groups = groups
        .into_iter()
        .map(|((class_id, kind, prototype_id), images)| {
            let mut samples: Vec<String> = Vec::new();
            for id in &images {
                if samples.len() < SAMPLES_PER_GROUP && !samples.iter().any(|s| s == id) {
                    samples.push(id.to_string());
                }
            }
            ReviewGroup {
                class_id,
                class_name: name(class_id),
                kind,
                prototype_id,
                count: images.len(),
                sample_images: samples,
            }
        })
        .collect();
    let mut label_patch = Vec::new();
    let mut unresolved = Vec::new();
    for (image_id, tally) in votes {
        let top = *tally.values().max().expect("non-empty tally");
        let leaders: Vec<usize> = tally.iter().filter(|(_, &n)| n == top).map(|(&l, _)| l).collect();
        if leaders.len() == 1 {
            label_patch.push(LabelPatch {
                image_id: image_id.to_string(),
                suggested_label: leaders[0],
                votes: top,
                total_votes: tally.values().sum(),
            });
        } else {
            unresolved.push(UnresolvedLabel {
                image_id: image_id.to_string(),
                tied_labels: leaders,
                votes: top,
            });
        }
    }
    let mut prototype_complaints: Vec<PrototypeComplaint> = complaints
        .into_iter()
        .map(|(prototype_id, count)| PrototypeComplaint { prototype_id, count })
        .collect();
    prototype_complaints.sort_by(|a, b| b.count.cmp(&a.count).then(a.prototype_id.cmp(&b.prototype_id)));
    ReviewExport {
        model_version: model_version.to_string(),
        total,
        empty: total == 0,
        groups,
        label_patch,
        unresolved,
        prototype_complaints,
    }
}

impl ReviewExport {
    /// `image_id,suggested_label,votes,total_votes` lines with a header.
    pub fn label_patch_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("image_id,suggested_label,suggested_class,votes,total_votes\n");
        for p in &self.label_patch {
            let name = class_names.get(p.suggested_label).map(String::as_str).unwrap_or("");
            let _ = writeln!(out, "{},{},{},{},{}", p.image_id, p.suggested_label, name, p.votes, p.total_votes);
        }
        out
    }

    pub fn complaints_csv(&self) -> String {
        let mut out = String::from("rank,prototype_id,count\n");
        for (i, c) in self.prototype_complaints.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", i + 1, c.prototype_id, c.count);
        }
        out
    }

    /// Aligned review table.
    pub fn render(&self) -> String {
        if self.empty {
            return format!("no feedback recorded for model {}\n", self.model_version);
        }
        let mut out = format!("feedback for model {} ({} records)\n", self.model_version, self.total);
        let _ = writeln!(out, "{:<20} {:<15} {:>9} {:>6}  samples", "class", "kind", "prototype", "count");
        for g in &self.groups {
            let proto = g.prototype_id.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<20} {:<15} {:>9} {:>6}  {}",
                g.class_name,
                g.kind.as_str(),
                proto,
                g.count,
                g.sample_images.join(" ")
            );
        }
        for u in &self.unresolved {
            let _ = writeln!(out, "unresolved: {} tied between {:?} ({} votes each)", u.image_id, u.tied_labels, u.votes);
        }
        out
    }
}
