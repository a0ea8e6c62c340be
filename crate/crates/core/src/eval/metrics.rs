use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::numerics::substream;

/// Relevance of one ranked list at class and instance level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedJudgment {
    pub query: usize,
    pub ranked: Vec<usize>,
    pub class_relevant: Vec<bool>,
    pub instance_relevant: Vec<bool>,
    /// Relevant items in the whole gallery, not only the ranked prefix.
    pub class_total: usize,
    pub instance_total: usize,
}

impl RankedJudgment {
    /// Judges a full ranking of `gallery_classes` against the query's class
    /// and (optionally) the gallery index of its own counterpart.
    pub fn judge(
        query: usize,
        ranked: Vec<usize>,
        query_class: &str,
        gallery_classes: &[String],
        counterpart: Option<usize>,
    ) -> Self {
        let class_relevant: Vec<bool> = ranked.iter().map(|&g| gallery_classes[g] == query_class).collect();
        let instance_relevant: Vec<bool> = ranked.iter().map(|&g| Some(g) == counterpart).collect();
        Self {
            query,
            class_total: gallery_classes.iter().filter(|c| *c == query_class).count(),
            instance_total: counterpart.is_some() as usize,
            ranked,
            class_relevant,
            instance_relevant,
        }
    }

    /// 1-based rank of the first instance-relevant item.
    pub fn instance_rank(&self) -> Option<usize> {
        self.instance_relevant.iter().position(|&r| r).map(|p| p + 1)
    }
}

/// Average precision over all `total_relevant` items. `None` when there is
/// nothing to retrieve.
pub fn average_precision(relevant: &[bool], total_relevant: usize) -> Option<f64> {
    if total_relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total_relevant as f64)
}

/// Fraction of the top `k` that is relevant.
pub fn precision_at_k(relevant: &[bool], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    relevant.iter().take(k).filter(|&&r| r).count() as f64 / k as f64
}

/// Mean of the defined APs; queries with no relevant items are skipped.
pub fn mean_ap(aps: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Gallery indices by ascending squared distance to `query`; ties keep
/// index order.
pub fn rank_by_distance(query: &[f64], gallery: &[Vec<f64>]) -> Vec<usize> {
    let d: Vec<f64> = gallery
        .iter()
        .map(|g| g.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    order
}

/// Mean AP of randomly shuffled rankings, averaged over `trials`.
pub fn empirical_chance(judgments: &[RankedJudgment], instance: bool, trials: usize, seed: u64) -> f64 {
    let mut rng = substream(seed, "chance");
    let mut total = 0.0;
    for _ in 0..trials {
        let aps: Vec<Option<f64>> = judgments
            .iter()
            .map(|j| {
                let mut rel = if instance {
                    j.instance_relevant.clone()
                } else {
                    j.class_relevant.clone()
                };
                rel.shuffle(&mut rng);
                average_precision(&rel, if instance { j.instance_total } else { j.class_total })
            })
            .collect();
        total += mean_ap(&aps).unwrap_or(0.0);
    }
    total / trials.max(1) as f64
}
