//! Predicate-classification metrics: Recall@K, per-class and mean Recall@K,
//! and oracle recall over several stochastic inference runs.
//!
//! Subject and object identities are given, so a relation is hit when its
//! annotated predicate appears in the top K of that relation's ranking.
//! Every metric averages within an image first and then across images;
//! images without relations are skipped.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classes of one relation ordered by descending confidence, ties broken
/// toward the lower class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    ranking: Vec<(usize, f64)>,
}

impl RankedPrediction {
    /// Ranks class probabilities; `top` truncates to a prefix.
    pub fn from_scores(scores: &[f64], top: Option<usize>) -> Self {
        let mut ranking: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if let Some(t) = top {
            ranking.truncate(t);
        }
        Self { ranking }
    }

    pub fn ranking(&self) -> &[(usize, f64)] {
        &self.ranking
    }

    pub fn top1(&self) -> Option<usize> {
        self.ranking.first().map(|r| r.0)
    }

    pub fn hits(&self, label: usize, k: usize) -> bool {
        self.ranking.iter().take(k).any(|&(c, _)| c == label)
    }
}

/// The `m`-th inference pass over a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRun {
    pub run_index: usize,
    /// `images[i][r]` ranks relation `r` of image `i`.
    pub images: Vec<Vec<RankedPrediction>>,
}

/// Ground-truth predicate per relation, grouped by image.
pub type GroundTruth = [Vec<usize>];

fn check_run(run: &PredictionRun, gts: &GroundTruth) -> Result<()> {
    if run.images.len() != gts.len() {
        return Err(Error::Contract(format!(
            "run {} covers {} images, ground truth has {}",
            run.run_index,
            run.images.len(),
            gts.len()
        )));
    }
    for (i, (p, g)) in run.images.iter().zip(gts).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Contract(format!(
                "run {} has {} relations in image {i}, ground truth has {}",
                run.run_index,
                p.len(),
                g.len()
            )));
        }
    }
    Ok(())
}

/// Whether each relation is hit by at least one run.
fn union_hits(runs: &[PredictionRun], gts: &GroundTruth, k: usize) -> Result<Vec<Vec<bool>>> {
    if k == 0 {
        return Err(Error::Contract("K must be at least 1".into()));
    }
    if runs.is_empty() {
        return Err(Error::Contract("need at least one prediction run".into()));
    }
    for run in runs {
        check_run(run, gts)?;
    }
    Ok(gts
        .iter()
        .enumerate()
        .map(|(i, labels)| {
            labels
                .iter()
                .enumerate()
                .map(|(r, &y)| runs.iter().any(|run| run.images[i][r].hits(y, k)))
                .collect()
        })
        .collect())
}

fn image_average(hits: &[Vec<bool>]) -> Option<f64> {
    let per_image: Vec<f64> = hits
        .iter()
        .filter(|h| !h.is_empty())
        .map(|h| h.iter().filter(|&&b| b).count() as f64 / h.len() as f64)
        .collect();
    if per_image.is_empty() {
        None
    } else {
        Some(per_image.iter().sum::<f64>() / per_image.len() as f64)
    }
}

/// Oracle recall: a relation counts when any of the runs hits it in the
/// top `k`. `None` when there is no ground truth at all.
pub fn oracle_recall(runs: &[PredictionRun], gts: &GroundTruth, k: usize) -> Result<Option<f64>> {
    Ok(image_average(&union_hits(runs, gts, k)?))
}

/// Recall@K. Shares the oracle code path, so one run gives identical bits.
pub fn recall_at_k(run: &PredictionRun, gts: &GroundTruth, k: usize) -> Result<Option<f64>> {
    oracle_recall(std::slice::from_ref(run), gts, k)
}

/// Per-class recall at `k` and their mean over classes present in `gts`.
///
/// A class's recall is averaged over the images that contain it.
pub fn mean_recall_at_k(
    run: &PredictionRun,
    gts: &GroundTruth,
    k: usize,
) -> Result<(BTreeMap<usize, f64>, Option<f64>)> {
    let hits = union_hits(std::slice::from_ref(run), gts, k)?;
    let mut per_class_images: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (labels, h) in gts.iter().zip(&hits) {
        let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (&y, &hit) in labels.iter().zip(h) {
            let e = counts.entry(y).or_default();
            e.0 += hit as usize;
            e.1 += 1;
        }
        for (c, (hit, total)) in counts {
            per_class_images.entry(c).or_default().push(hit as f64 / total as f64);
        }
    }
    let per_class: BTreeMap<usize, f64> = per_class_images
        .into_iter()
        .map(|(c, v)| (c, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let mean = if per_class.is_empty() {
        None
    } else {
        Some(per_class.values().sum::<f64>() / per_class.len() as f64)
    };
    Ok((per_class, mean))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall_at: BTreeMap<usize, f64>,
    /// K → class → recall.
    pub per_class_recall: BTreeMap<usize, BTreeMap<usize, f64>>,
    pub mean_recall_at: BTreeMap<usize, f64>,
    /// M → oracle recall using the first M runs.
    pub oracle_recall: BTreeMap<usize, f64>,
    /// K used for oracle matching.
    pub oracle_k: usize,
    pub class_counts: BTreeMap<usize, usize>,
}

impl MetricsReport {
    /// R@K and mR@K come from the first run; oR(M) for every prefix of
    /// `runs`. Metrics without ground truth are left out.
    pub fn build(runs: &[PredictionRun], gts: &GroundTruth, ks: &[usize], oracle_k: usize) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::Contract("need at least one prediction run".into()))?;
        let mut report = MetricsReport {
            oracle_k,
            ..Default::default()
        };
        for &y in gts.iter().flatten() {
            *report.class_counts.entry(y).or_default() += 1;
        }
        for &k in ks {
            if let Some(r) = recall_at_k(first, gts, k)? {
                report.recall_at.insert(k, r);
            }
            let (per_class, mean) = mean_recall_at_k(first, gts, k)?;
            if let Some(m) = mean {
                report.mean_recall_at.insert(k, m);
                report.per_class_recall.insert(k, per_class);
            }
        }
        for m in 1..=runs.len() {
            if let Some(o) = oracle_recall(&runs[..m], gts, oracle_k)? {
                report.oracle_recall.insert(m, o);
            }
        }
        Ok(report)
    }

    /// Tidy CSV with columns `metric,K_or_M,class_or_all,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,K_or_M,class_or_all,value\n");
        for (k, v) in &self.recall_at {
            let _ = writeln!(out, "R,{k},all,{v}");
        }
        for (k, v) in &self.mean_recall_at {
            let _ = writeln!(out, "mR,{k},all,{v}");
        }
        for (k, classes) in &self.per_class_recall {
            for (c, v) in classes {
                let _ = writeln!(out, "recall,{k},{c},{v}");
            }
        }
        for (m, v) in &self.oracle_recall {
            let _ = writeln!(out, "oR,{m},all,{v}");
        }
        for (c, n) in &self.class_counts {
            let _ = writeln!(out, "count,0,{c},{n}");
        }
        out
    }
}
