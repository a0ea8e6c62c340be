//! Groups search results into candidate intents in the semantic space and
//! picks a representative image and a target sketch for each.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ann::PqIndex;
use crate::error::{Error, Result};
use crate::numerics::{substream, Scalar};

/// Floor on the cross-distance sum inside the diversity log.
pub const DIVERSITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntentConfig {
    /// Clusters to select.
    pub clusters: usize,
    pub damping: f64,
    pub max_iterations: usize,
    /// Affinity propagation stops once the exemplar set has been stable
    /// this long.
    pub convergence_iterations: usize,
    /// Scale of the diversity penalty.
    pub diversity_weight: f64,
    pub seed: u64,
}

impl Default for IntentConfig {
    fn default() -> Self {
        Self {
            clusters: 3,
            damping: 0.5,
            max_iterations: 200,
            convergence_iterations: 15,
            diversity_weight: 1.0,
            seed: 0,
        }
    }
}

/// One search result with its semantic and search embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultItem {
    pub id: u64,
    pub z: Vec<f64>,
    pub s: Vec<f64>,
}

/// Euclidean distances between all pairs of rows.
pub fn pairwise_distances(rows: &[&[f64]]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut d = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let v = rows[a]
                .iter()
                .zip(rows[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            d[a][b] = v;
            d[b][a] = v;
        }
    }
    d
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Exemplar clustering by responsibility/availability message passing on
/// similarities `−d²`, with every preference set to the median similarity.
/// Returns clusters as ascending index lists ordered by exemplar.
pub fn affinity_propagation(dist: &[Vec<f64>], config: &IntentConfig) -> Vec<Vec<usize>> {
    let n = dist.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![vec![0]];
    }
    let mut s: Vec<Vec<f64>> = dist.iter().map(|r| r.iter().map(|d| -d * d).collect()).collect();
    let off_diagonal: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&k| k != i).map(move |k| (i, k)))
        .map(|(i, k)| s[i][k])
        .collect();
    let preference = median(off_diagonal);
    // tiny seeded jitter breaks the symmetric ties that make messages oscillate
    let mut rng = substream(config.seed, "affinity-jitter");
    for (i, row) in s.iter_mut().enumerate() {
        row[i] = preference;
        for x in row.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *x += (f64::EPSILON * *x + 1e-300) * g;
        }
    }

    let lambda = config.damping.clamp(0.5, 0.99);
    let mut r = vec![vec![0.0; n]; n];
    let mut a = vec![vec![0.0; n]; n];
    let mut exemplars: Vec<usize> = Vec::new();
    let mut stable = 0usize;
    for _ in 0..config.max_iterations {
        for i in 0..n {
            let (mut first, mut second, mut arg) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
            for k in 0..n {
                let v = a[i][k] + s[i][k];
                if v > first {
                    second = first;
                    first = v;
                    arg = k;
                } else if v > second {
                    second = v;
                }
            }
            for k in 0..n {
                let competitor = if k == arg { second } else { first };
                r[i][k] = lambda * r[i][k] + (1.0 - lambda) * (s[i][k] - competitor);
            }
        }
        for k in 0..n {
            let positive: f64 = (0..n).filter(|&i| i != k).map(|i| r[i][k].max(0.0)).sum();
            for i in 0..n {
                let new = if i == k {
                    positive
                } else {
                    (r[k][k] + positive - r[i][k].max(0.0)).min(0.0)
                };
                a[i][k] = lambda * a[i][k] + (1.0 - lambda) * new;
            }
        }
        let current: Vec<usize> = (0..n).filter(|&k| a[k][k] + r[k][k] > 0.0).collect();
        if current == exemplars && !current.is_empty() {
            stable += 1;
            if stable >= config.convergence_iterations {
                break;
            }
        } else {
            stable = 0;
            exemplars = current;
        }
    }
    if exemplars.is_empty() {
        return vec![(0..n).collect()];
    }
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); exemplars.len()];
    for i in 0..n {
        let c = match exemplars.iter().position(|&e| e == i) {
            Some(c) => c,
            None => {
                let mut best = 0;
                for (c, &e) in exemplars.iter().enumerate() {
                    if s[i][e] > s[i][exemplars[best]] {
                        best = c;
                    }
                }
                best
            }
        };
        clusters[c].push(i);
    }
    clusters.retain(|c| !c.is_empty());
    clusters
}

/// Sum of `d(a, b)` over ordered member pairs.
pub fn intra_distance(cluster: &[usize], dist: &[Vec<f64>]) -> f64 {
    cluster.iter().map(|&a| cluster.iter().map(|&b| dist[a][b]).sum::<f64>()).sum()
}

/// `−λ log Σ d(a, b)` over members `a` of `cluster` and already selected
/// items `b`; zero while nothing is selected.
pub fn diversity_penalty(cluster: &[usize], selected: &[usize], dist: &[Vec<f64>], weight: f64) -> f64 {
    if selected.is_empty() {
        return 0.0;
    }
    let cross: f64 = cluster.iter().map(|&a| selected.iter().map(|&b| dist[a][b]).sum::<f64>()).sum();
    -weight * cross.max(DIVERSITY_FLOOR).ln()
}

pub fn rho(cluster: &[usize], selected: &[usize], dist: &[Vec<f64>], weight: f64) -> f64 {
    intra_distance(cluster, dist) + diversity_penalty(cluster, selected, dist, weight)
}

/// Total of ρ over clusters taken in order, each penalised against the
/// ones before it.
pub fn objective(clusters: &[Vec<usize>], dist: &[Vec<f64>], weight: f64) -> f64 {
    let mut selected = Vec::new();
    let mut total = 0.0;
    for c in clusters {
        total += rho(c, &selected, dist, weight);
        selected.extend_from_slice(c);
    }
    total
}

/// Candidate indices taken greedily, lowest ρ first, up to `m` of them;
/// ties go to the earlier candidate. Candidates left over are not returned.
pub fn select_greedy(candidates: &[Vec<usize>], dist: &[Vec<f64>], m: usize, weight: f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..candidates.len()).collect();
    let mut chosen: Vec<usize> = Vec::new();
    let mut selected: Vec<usize> = Vec::new();
    while chosen.len() < m && !remaining.is_empty() {
        let mut best = (f64::INFINITY, 0usize);
        for (slot, &c) in remaining.iter().enumerate() {
            let v = rho(&candidates[c], &selected, dist, weight);
            if v < best.0 {
                best = (v, slot);
            }
        }
        let c = remaining.remove(best.1);
        selected.extend_from_slice(&candidates[c]);
        chosen.push(c);
    }
    chosen
}

/// Clusters results in Z, returning index lists into `items` in
/// selection order. Results outside the selected clusters are left out.
pub fn cluster_results(items: &[ResultItem], config: &IntentConfig) -> Result<Vec<Vec<usize>>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let width = items[0].z.len();
    if items.iter().any(|i| i.z.len() != width) {
        return Err(Error::invalid("results carry semantic vectors of different widths"));
    }
    let rows: Vec<&[f64]> = items.iter().map(|i| i.z.as_slice()).collect();
    let dist = pairwise_distances(&rows);
    let candidates = affinity_propagation(&dist, config);
    Ok(select_greedy(&candidates, &dist, config.clusters, config.diversity_weight)
        .into_iter()
        .map(|c| candidates[c].clone())
        .collect())
}

/// Member whose search embedding is nearest the query's; ties go to the
/// smaller id.
pub fn representative(members: &[&ResultItem], s_query: &[f64]) -> Result<u64> {
    let mut best: Option<(f64, u64)> = None;
    for m in members {
        if m.s.len() != s_query.len() {
            return Err(Error::dim("representative", &[m.s.len()], &[s_query.len()]));
        }
        let d: f64 = m.s.iter().zip(s_query).map(|(a, b)| (a - b) * (a - b)).sum();
        let better = match best {
            None => true,
            Some((bd, bid)) => d < bd || (d == bd && m.id < bid),
        };
        if better {
            best = Some((d, m.id));
        }
    }
    best.map(|b| b.1).ok_or_else(|| Error::invalid("empty cluster has no representative"))
}

/// Id of the sketch in `sketches` nearest `s_image` in S.
pub fn nearest_sketch_target<T: Scalar>(sketches: &PqIndex<T>, s_image: &[f64]) -> Result<u64> {
    if sketches.is_empty() {
        return Err(Error::invalid("target sketch collection is empty"));
    }
    let q: Vec<T> = s_image.iter().map(|&x| T::of(x)).collect();
    sketches
        .knn(&q, 1)?
        .first()
        .map(|n| n.id)
        .ok_or_else(|| Error::invalid("target sketch collection is empty"))
}

/// A selected intent and the sketch that stands for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentCluster {
    pub members: Vec<u64>,
    pub representative: u64,
    pub target: u64,
}

/// Clusters, representatives and targets for one result list.
pub fn identify_intents<T: Scalar>(
    items: &[ResultItem],
    s_query: &[f64],
    sketches: &PqIndex<T>,
    config: &IntentConfig,
) -> Result<Vec<IntentCluster>> {
    cluster_results(items, config)?
        .into_iter()
        .map(|c| {
            let members: Vec<&ResultItem> = c.iter().map(|&i| &items[i]).collect();
            let rep = representative(&members, s_query)?;
            let rep_item = members.iter().find(|m| m.id == rep).expect("representative is a member");
            Ok(IntentCluster {
                members: members.iter().map(|m| m.id).collect(),
                representative: rep,
                target: nearest_sketch_target(sketches, &rep_item.s)?,
            })
        })
        .collect()
}
