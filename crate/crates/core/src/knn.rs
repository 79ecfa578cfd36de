//! Weighted nearest-neighbor classification over a labeled memory bank,
//! top-k metrics and confusion matrices.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ufl_autodiff::{Real, Tensor};

use crate::bank::{check_unit, MemoryBank};
use crate::error::{Error, Result};
use crate::ClassId;

/// Neighbourhood size used throughout.
pub const DEFAULT_K: usize = 50;

/// A bank row and its cosine similarity to a query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub similarity: f64,
}

/// Highest similarity first, then smaller index.
fn by_similarity(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then(a.index.cmp(&b.index))
}

/// The `k` rows most similar to `v`, best first; ties go to the smaller index.
pub fn top_k(bank: &MemoryBank, v: &[Real], k: usize) -> Result<Vec<Neighbor>> {
    if k > bank.len() {
        return Err(Error::KTooLarge { k, n: bank.len() });
    }
    if v.len() != bank.dim() {
        return Err(Error::Invalid(format!(
            "query of length {} for a bank of dimension {}",
            v.len(),
            bank.dim()
        )));
    }
    check_unit(v)?;
    let mut all: Vec<Neighbor> = bank
        .similarities(v)
        .into_iter()
        .enumerate()
        .map(|(index, similarity)| Neighbor { index, similarity })
        .collect();
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, by_similarity);
        all.truncate(k);
    }
    all.sort_by(by_similarity);
    Ok(all)
}

/// Accumulated vote weight per class, strongest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteTally {
    pub votes: Vec<(ClassId, f64)>,
}

impl VoteTally {
    pub fn ranking(&self) -> Vec<ClassId> {
        self.votes.iter().map(|&(c, _)| c).collect()
    }

    pub fn weight(&self, class: ClassId) -> Option<f64> {
        self.votes
            .iter()
            .find(|(c, _)| *c == class)
            .map(|&(_, w)| w)
    }
}

/// Each of the `k` nearest rows votes `exp(sim/τ)` for its class. Classes
/// are ranked by total vote, ties going to the smaller class id.
pub fn knn_classify(bank: &MemoryBank, v: &[Real], k: usize, tau: f64) -> Result<VoteTally> {
    let labels = bank.labels().ok_or(Error::UnlabeledBank)?;
    let neighbors = top_k(bank, v, k)?;
    let mut votes: Vec<(ClassId, f64)> = Vec::new();
    for nb in neighbors {
        let w = (nb.similarity / tau).exp();
        let c = labels[nb.index];
        match votes.iter_mut().find(|(vc, _)| *vc == c) {
            Some(slot) => slot.1 += w,
            None => votes.push((c, w)),
        }
    }
    votes.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(VoteTally { votes })
}

/// Which ranked predictions a confusion matrix counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfusionMode {
    Top1,
    Top5,
}

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// CSV with a header row and first column of class names.
    pub fn write_csv(&self, path: &Path, names: &[String]) -> Result<()> {
        if names.len() != self.num_classes() {
            return Err(Error::Invalid(format!(
                "{} names for {} classes",
                names.len(),
                self.num_classes()
            )));
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![String::new()];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in names.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads the CSV layout of [`write_csv`](Self::write_csv); returns the
    /// matrix and the class names. Counts may be any nonnegative reals and
    /// are rounded.
    pub fn read_csv(path: &Path) -> Result<(Self, Vec<String>)> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)?;
        let names: Vec<String> = r.headers()?.iter().skip(1).map(str::to_owned).collect();
        let mut counts = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .skip(1)
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| *v >= 0.0 && v.is_finite())
                        .map(|v| v.round() as u64)
                        .ok_or_else(|| Error::Invalid(format!("row {}: bad count {s:?}", i + 1)))
                })
                .collect::<Result<Vec<u64>>>()?;
            if row.len() != names.len() {
                return Err(Error::Invalid(format!(
                    "row {} has {} counts for {} classes",
                    i + 1,
                    row.len(),
                    names.len()
                )));
            }
            counts.push(row);
        }
        if counts.len() != names.len() {
            return Err(Error::Invalid(format!(
                "{} rows for {} classes",
                counts.len(),
                names.len()
            )));
        }
        Ok((Self { counts }, names))
    }
}

/// Counts predictions against truths. In top-1 mode each instance adds one
/// count at its first-ranked class; in top-5 mode it adds one at each of
/// its first five.
pub fn confusion_matrix(
    rankings: &[Vec<ClassId>],
    truths: &[ClassId],
    mode: ConfusionMode,
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if rankings.len() != truths.len() {
        return Err(Error::Invalid(format!(
            "{} rankings for {} truths",
            rankings.len(),
            truths.len()
        )));
    }
    let take = match mode {
        ConfusionMode::Top1 => 1,
        ConfusionMode::Top5 => 5,
    };
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (ranking, &t) in rankings.iter().zip(truths) {
        if t >= num_classes {
            return Err(Error::IndexOutOfRange {
                index: t,
                len: num_classes,
            });
        }
        for &p in ranking.iter().take(take) {
            if p >= num_classes {
                return Err(Error::IndexOutOfRange {
                    index: p,
                    len: num_classes,
                });
            }
            counts[t][p] += 1;
        }
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: ClassId,
    pub test_count: usize,
    pub top1: f64,
    pub top5: f64,
}

/// Accuracies in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1_instance: f64,
    pub top5_instance: f64,
    pub top1_class: f64,
    pub top5_class: f64,
    /// Classes with at least one test instance.
    pub per_class: Vec<ClassScore>,
    pub confusion_top1: ConfusionMatrix,
    pub confusion_top5: ConfusionMatrix,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Per-class table: class, train population, test population, top-1, top-5.
    pub fn write_per_class_csv(
        &self,
        path: &Path,
        names: &[String],
        train_counts: &[usize],
    ) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["class", "train_count", "test_count", "top1", "top5"])?;
        for s in &self.per_class {
            let name = names
                .get(s.class)
                .cloned()
                .unwrap_or_else(|| s.class.to_string());
            let train = train_counts.get(s.class).copied().unwrap_or(0);
            w.write_record([
                name,
                train.to_string(),
                s.test_count.to_string(),
                format!("{:.2}", s.top1),
                format!("{:.2}", s.top5),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Metrics from precomputed class rankings.
///
/// Instance-averaged accuracy is hits over all instances; class-averaged is
/// the mean of per-class hit rates over classes present in `truths`.
pub fn score_rankings(
    rankings: &[Vec<ClassId>],
    truths: &[ClassId],
    num_classes: usize,
) -> Result<EvalReport> {
    let confusion_top1 = confusion_matrix(rankings, truths, ConfusionMode::Top1, num_classes)?;
    let confusion_top5 = confusion_matrix(rankings, truths, ConfusionMode::Top5, num_classes)?;
    let mut hits = vec![[0usize; 2]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (ranking, &t) in rankings.iter().zip(truths) {
        counts[t] += 1;
        if ranking.first() == Some(&t) {
            hits[t][0] += 1;
        }
        if ranking.iter().take(5).any(|&c| c == t) {
            hits[t][1] += 1;
        }
    }
    let total = truths.len().max(1) as f64;
    let per_class: Vec<ClassScore> = (0..num_classes)
        .filter(|&c| counts[c] > 0)
        .map(|c| ClassScore {
            class: c,
            test_count: counts[c],
            top1: 100.0 * hits[c][0] as f64 / counts[c] as f64,
            top5: 100.0 * hits[c][1] as f64 / counts[c] as f64,
        })
        .collect();
    let present = per_class.len().max(1) as f64;
    Ok(EvalReport {
        top1_instance: 100.0 * hits.iter().map(|h| h[0]).sum::<usize>() as f64 / total,
        top5_instance: 100.0 * hits.iter().map(|h| h[1]).sum::<usize>() as f64 / total,
        top1_class: per_class.iter().map(|s| s.top1).sum::<f64>() / present,
        top5_class: per_class.iter().map(|s| s.top5).sum::<f64>() / present,
        per_class,
        confusion_top1,
        confusion_top5,
        warnings: Vec::new(),
    })
}

/// Classifies every test embedding (rows of `test: [m, d]`) against the
/// bank and scores the rankings.
pub fn evaluate(
    bank: &MemoryBank,
    test: &Tensor,
    test_labels: &[ClassId],
    k: usize,
    tau: f64,
) -> Result<EvalReport> {
    let bank_labels = bank.labels().ok_or(Error::UnlabeledBank)?;
    if test.rank() != 2 || test.shape()[0] != test_labels.len() {
        return Err(Error::Invalid(format!(
            "test embeddings {:?} for {} labels",
            test.shape(),
            test_labels.len()
        )));
    }
    let num_classes = bank_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(0, |&c| c + 1);
    let rankings = (0..test_labels.len())
        .into_par_iter()
        .map(|i| Ok(knn_classify(bank, test.row(i), k, tau)?.ranking()))
        .collect::<Result<Vec<_>>>()?;
    let mut report = score_rankings(&rankings, test_labels, num_classes)?;
    let mut in_bank = vec![false; num_classes];
    for &c in bank_labels {
        in_bank[c] = true;
    }
    for s in &report.per_class {
        if !in_bank[s.class] {
            let msg = format!("class {} has test instances but no bank rows", s.class);
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
    }
    Ok(report)
}
