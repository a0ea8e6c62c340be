//! Exhaustive oracles for intent clustering.

use livesketch::intent::*;
use livesketch::numerics::substream;
use rand::Rng;

/// Every partition of `0..n` into exactly `blocks` non-empty blocks, as
/// block labels in restricted-growth form.
pub fn partitions(n: usize, blocks: usize) -> Vec<Vec<usize>> {
    fn go(i: usize, n: usize, blocks: usize, used: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == n {
            if used == blocks {
                out.push(cur.clone());
            }
            return;
        }
        if blocks - used > n - i {
            return;
        }
        for b in 0..(used + 1).min(blocks) {
            cur.push(b);
            go(i + 1, n, blocks, used.max(b + 1), cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, blocks, 0, &mut Vec::new(), &mut out);
    out
}

pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Objective recomputed from the formula: ordered-pair intra sums plus
/// −λ log of the cross sum against everything chosen earlier.
pub fn oracle_objective(ordered: &[Vec<usize>], pts: &[[f64; 2]], weight: f64) -> f64 {
    let d = |a: usize, b: usize| ((pts[a][0] - pts[b][0]).powi(2) + (pts[a][1] - pts[b][1]).powi(2)).sqrt();
    let mut total = 0.0;
    let mut before: Vec<usize> = Vec::new();
    for c in ordered {
        for &a in c {
            for &b in c {
                total += d(a, b);
            }
        }
        if !before.is_empty() {
            let cross: f64 = c.iter().flat_map(|&a| before.iter().map(move |&b| (a, b))).map(|(a, b)| d(a, b)).sum();
            total -= weight * cross.max(1e-6).ln();
        }
        before.extend(c);
    }
    total
}

pub fn exhaustive_optimum(pts: &[[f64; 2]], blocks: usize, weight: f64) -> f64 {
    let mut best = f64::INFINITY;
    for labels in partitions(pts.len(), blocks) {
        let groups: Vec<Vec<usize>> = (0..blocks)
            .map(|b| (0..pts.len()).filter(|&i| labels[i] == b).collect())
            .collect();
        for order in permutations(blocks) {
            let ordered: Vec<Vec<usize>> = order.iter().map(|&o| groups[o].clone()).collect();
            best = best.min(oracle_objective(&ordered, pts, weight));
        }
    }
    best
}

pub fn items(pts: &[[f64; 2]]) -> Vec<ResultItem> {
    pts.iter()
        .enumerate()
        .map(|(i, p)| ResultItem {
            id: i as u64,
            z: p.to_vec(),
            s: p.to_vec(),
        })
        .collect()
}

pub fn blob_points(sizes: &[usize], seed: u64) -> Vec<[f64; 2]> {
    let mut rng = substream(seed, "blobs");
    let mut pts = Vec::new();
    for (b, &n) in sizes.iter().enumerate() {
        let angle = b as f64 * 2.0 * std::f64::consts::PI / sizes.len() as f64 + rng.random_range(-0.3..0.3);
        let centre = [30.0 * angle.cos(), 30.0 * angle.sin()];
        for _ in 0..n {
            pts.push([centre[0] + rng.random_range(-0.1..0.1), centre[1] + rng.random_range(-0.1..0.1)]);
        }
    }
    pts
}

/// Best objective over every ordered choice of `m` distinct candidates.
pub fn exhaustive_selection(candidates: &[Vec<usize>], m: usize, pts: &[[f64; 2]], weight: f64) -> f64 {
    fn go(
        candidates: &[Vec<usize>],
        m: usize,
        pts: &[[f64; 2]],
        weight: f64,
        cur: &mut Vec<Vec<usize>>,
        used: &mut Vec<bool>,
        best: &mut f64,
    ) {
        if cur.len() == m {
            *best = best.min(oracle_objective(cur, pts, weight));
            return;
        }
        for c in 0..candidates.len() {
            if !used[c] {
                used[c] = true;
                cur.push(candidates[c].clone());
                go(candidates, m, pts, weight, cur, used, best);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    let m = m.min(candidates.len());
    go(candidates, m, pts, weight, &mut Vec::new(), &mut vec![false; candidates.len()], &mut best);
    best
}


/// Outcome of the greedy-versus-exhaustive sweep over blob layouts.
pub struct Sweep {
    pub runs: usize,
    pub at_optimum: usize,
    /// Largest (greedy − optimum) / |optimum| seen.
    pub worst_gap: f64,
    pub disjoint: bool,
    /// Layouts where the cluster count equals the blob count were also
    /// compared with the full-partition optimum.
    pub partition_runs: usize,
    pub worst_partition_gap: f64,
}

pub const BLOB_SHAPES: [&[usize]; 7] = [&[2, 2], &[3, 4], &[5, 5], &[6, 6], &[2, 3, 4], &[4, 4, 4], &[3, 3, 3]];

/// Greedy selection against exhaustive search on separated blobs of at
/// most 12 points, for 1 to 3 clusters.
pub fn greedy_sweep(seeds: u64) -> Sweep {
    let mut out = Sweep {
        runs: 0,
        at_optimum: 0,
        worst_gap: 0.0,
        disjoint: true,
        partition_runs: 0,
        worst_partition_gap: 0.0,
    };
    let gap = |g: f64, b: f64| (g - b) / b.abs().max(1e-12);
    for (s, sizes) in BLOB_SHAPES.iter().enumerate() {
        for seed in 0..seeds {
            let pts = blob_points(sizes, 100 * s as u64 + seed);
            let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
            let d = pairwise_distances(&refs);
            for m in 1..=3 {
                let config = IntentConfig {
                    clusters: m,
                    ..IntentConfig::default()
                };
                let candidates = affinity_propagation(&d, &config);
                let clusters = cluster_results(&items(&pts), &config).unwrap();
                let mut seen: Vec<usize> = clusters.iter().flatten().copied().collect();
                let count = seen.len();
                seen.sort();
                seen.dedup();
                out.disjoint &= seen.len() == count;
                let greedy = oracle_objective(&clusters, &pts, 1.0);
                let best = exhaustive_selection(&candidates, m, &pts, 1.0);
                out.runs += 1;
                out.at_optimum += ((greedy - best).abs() < 1e-9) as usize;
                out.worst_gap = out.worst_gap.max(gap(greedy, best));
                if m == sizes.len() {
                    let best = exhaustive_optimum(&pts, m, 1.0);
                    out.partition_runs += 1;
                    out.worst_partition_gap = out.worst_partition_gap.max(gap(greedy, best));
                }
            }
        }
    }
    out
}
