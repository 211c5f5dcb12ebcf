//! Weighted Louvain community detection over the similarity graph, reduction
//! to exactly `K` clusters, and leader selection.
//!
//! Graphs here are small (tens of clients) and complete, so everything works
//! on dense symmetric weight matrices. Sums run over ordered pairs: for a
//! matrix `w`, `2m = sum_ij w[i][j]` and a node's strength is its row sum.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::similarity::SimilarityGraph;

/// Cluster assignment of every client plus one leader per cluster.
///
/// Cluster ids are canonical: cluster `k` is the one whose smallest member
/// is the `k`-th smallest among all clusters' smallest members.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    assignment: Vec<usize>,
    leaders: Vec<usize>,
}

#[derive(Serialize)]
struct ClusteringRecord<'a> {
    clusters: Vec<Vec<usize>>,
    leaders: &'a [usize],
}

impl Clustering {
    /// Canonicalizes cluster ids; leaders are left empty.
    pub fn from_assignment(assignment: &[usize]) -> Self {
        Self {
            assignment: canonical(assignment),
            leaders: Vec::new(),
        }
    }

    /// Makes the lowest-indexed member of every cluster its leader.
    pub fn with_first_leaders(mut self) -> Self {
        self.leaders = self.clusters().iter().map(|m| m[0]).collect();
        self
    }

    /// `n` clients in `k` contiguous index ranges whose sizes differ by at
    /// most one, larger ranges first.
    pub fn contiguous(n: usize, k: usize) -> Self {
        let base = n / k;
        let extra = n % k;
        let mut assignment = Vec::with_capacity(n);
        for c in 0..k {
            let size = base + usize::from(c < extra);
            assignment.extend(std::iter::repeat(c).take(size));
        }
        Self::from_assignment(&assignment)
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn leaders(&self) -> &[usize] {
        &self.leaders
    }

    pub fn k(&self) -> usize {
        self.assignment.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Members of each cluster in ascending client order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    pub fn is_leader(&self, client: usize) -> bool {
        self.leaders.contains(&client)
    }

    /// `{"clusters": [[ids...]], "leaders": [ids]}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&ClusteringRecord {
            clusters: self.clusters(),
            leaders: &self.leaders,
        })
        .expect("clustering serializes")
    }
}

fn canonical(assignment: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    assignment
        .iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect()
}

fn check_assignment(g: &SimilarityGraph, assignment: &[usize]) -> Result<()> {
    if assignment.len() != g.len() {
        return Err(Error::input(format!(
            "assignment covers {} clients, graph has {}",
            assignment.len(),
            g.len()
        )));
    }
    Ok(())
}

/// Modularity of a partition of a weighted graph given as a dense matrix.
fn matrix_modularity(w: &[Vec<f64>], assignment: &[usize]) -> Result<f64> {
    let strength: Vec<f64> = w.iter().map(|row| row.iter().sum()).collect();
    let two_m: f64 = strength.iter().sum();
    if !(two_m > 0.0) {
        return Err(Error::input("graph has no edge weight"));
    }
    let k = assignment.iter().max().map_or(0, |&m| m + 1);
    let mut internal = vec![0.0; k];
    let mut total = vec![0.0; k];
    for (i, row) in w.iter().enumerate() {
        total[assignment[i]] += strength[i];
        for (j, &wij) in row.iter().enumerate() {
            if assignment[i] == assignment[j] {
                internal[assignment[i]] += wij;
            }
        }
    }
    Ok(internal
        .iter()
        .zip(&total)
        .map(|(&inside, &tot)| inside / two_m - (tot / two_m).powi(2))
        .sum())
}

/// Weighted modularity `Q = (1/2m) sum_ij [S_ij - s_i s_j / 2m] [c_i == c_j]`.
pub fn modularity(g: &SimilarityGraph, assignment: &[usize]) -> Result<f64> {
    check_assignment(g, assignment)?;
    matrix_modularity(&g.s, assignment)
}

/// One accepted local move of the Louvain optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMove {
    pub level: usize,
    /// Node index within the level's (possibly aggregated) graph.
    pub node: usize,
    pub from: usize,
    pub to: usize,
    /// Modularity change of the move, always positive.
    pub gain: f64,
}

#[derive(Debug, Clone)]
pub struct LouvainOutcome {
    pub clustering: Clustering,
    pub modularity: f64,
    /// Modularity after each aggregation level, starting with the singleton
    /// partition.
    pub level_modularity: Vec<f64>,
    pub moves: Vec<LocalMove>,
    /// Every edge has the same weight; no community structure was searched.
    pub degenerate: bool,
}

const MIN_GAIN: f64 = 1e-12;

/// Greedy local moves over one level's graph until a full pass moves nothing.
/// Returns the community of every node of that graph.
fn local_moves(
    w: &[Vec<f64>],
    two_m: f64,
    level: usize,
    rng: &mut ChaCha8Rng,
    moves: &mut Vec<LocalMove>,
) -> Vec<usize> {
    let n = w.len();
    let strength: Vec<f64> = w.iter().map(|row| row.iter().sum()).collect();
    let mut community: Vec<usize> = (0..n).collect();
    let mut total = strength.clone();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);

    let mut links = vec![0.0; n];
    loop {
        let mut moved = false;
        for &i in &order {
            let own = community[i];
            total[own] -= strength[i];
            links.iter_mut().for_each(|v| *v = 0.0);
            for (j, &wij) in w[i].iter().enumerate() {
                if j != i {
                    links[community[j]] += wij;
                }
            }
            // Gain of joining `c` relative to standing alone, times m.
            let gain = |c: usize| links[c] - strength[i] * total[c] / two_m;
            let stay = gain(own);
            let mut best = (own, stay);
            for c in (0..n).filter(|&c| c != own && links[c] > 0.0) {
                let g = gain(c);
                if g > best.1 + MIN_GAIN {
                    best = (c, g);
                }
            }
            total[best.0] += strength[i];
            if best.0 != own {
                moves.push(LocalMove {
                    level,
                    node: i,
                    from: own,
                    to: best.0,
                    gain: 2.0 * (best.1 - stay) / two_m,
                });
                community[i] = best.0;
                moved = true;
            }
        }
        if !moved {
            return community;
        }
    }
}

/// Unconstrained two-phase Louvain: local moves until no positive gain, then
/// aggregation of communities into nodes, repeated until a level makes no
/// move. Visit order within a level is a seeded shuffle.
///
/// A degenerate graph (all distances equal) is not searched: the outcome is
/// flagged and holds every client in one community.
pub fn louvain(g: &SimilarityGraph, seed: u64) -> Result<LouvainOutcome> {
    let n = g.len();
    if n < 2 {
        return Err(Error::input("louvain needs at least two clients"));
    }
    if g.is_degenerate() {
        warn!("all pairwise distances are equal; skipping community search");
        let assignment = vec![0; n];
        let q = matrix_modularity(&g.s, &assignment).unwrap_or(0.0);
        return Ok(LouvainOutcome {
            clustering: Clustering::from_assignment(&assignment),
            modularity: q,
            level_modularity: vec![q],
            moves: Vec::new(),
            degenerate: true,
        });
    }
    let two_m: f64 = g.s.iter().flatten().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut node_of: Vec<usize> = (0..n).collect();
    let mut w = g.s.clone();
    let mut moves = Vec::new();
    let singletons: Vec<usize> = (0..n).collect();
    let mut level_modularity = vec![matrix_modularity(&g.s, &singletons)?];

    for level in 0.. {
        let before = moves.len();
        let community = canonical(&local_moves(&w, two_m, level, &mut rng, &mut moves));
        if moves.len() == before {
            break;
        }
        let k = community.iter().max().map_or(0, |&m| m + 1);
        let mut agg = vec![vec![0.0; k]; k];
        for (i, row) in w.iter().enumerate() {
            for (j, &wij) in row.iter().enumerate() {
                agg[community[i]][community[j]] += wij;
            }
        }
        for node in node_of.iter_mut() {
            *node = community[*node];
        }
        w = agg;
        level_modularity.push(matrix_modularity(&g.s, &node_of)?);
        if k == 1 {
            break;
        }
    }
    let clustering = Clustering::from_assignment(&node_of);
    let q = modularity(g, clustering.assignment())?;
    Ok(LouvainOutcome {
        clustering,
        modularity: q,
        level_modularity,
        moves,
        degenerate: false,
    })
}

/// Adjusts a partition to exactly `k` clusters.
///
/// Too many clusters: repeatedly merge the pair whose merge loses the least
/// modularity. Too few: repeatedly take the largest cluster and detach its
/// member with the lowest similarity sum to the rest of the cluster.
/// Ties go to the lowest cluster or client index. A degenerate graph yields
/// contiguous balanced clusters.
pub fn coarsen_to_k(g: &SimilarityGraph, clustering: &Clustering, k: usize) -> Result<Clustering> {
    let n = g.len();
    check_assignment(g, clustering.assignment())?;
    if k == 0 || k > n {
        return Err(Error::input(format!(
            "cannot form {k} clusters from {n} clients"
        )));
    }
    if g.is_degenerate() {
        return Ok(Clustering::contiguous(n, k));
    }
    let two_m: f64 = g.s.iter().flatten().sum();
    let strength: Vec<f64> = g.s.iter().map(|row| row.iter().sum()).collect();
    let mut clusters = clustering.clusters();

    while clusters.len() > k {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let between: f64 = clusters[a]
                    .iter()
                    .flat_map(|&i| clusters[b].iter().map(move |&j| g.s[i][j]))
                    .sum();
                let tot_a: f64 = clusters[a].iter().map(|&i| strength[i]).sum();
                let tot_b: f64 = clusters[b].iter().map(|&i| strength[i]).sum();
                let delta = 2.0 * (between / two_m - tot_a * tot_b / (two_m * two_m));
                if best.map_or(true, |(d, _, _)| delta > d) {
                    best = Some((delta, a, b));
                }
            }
        }
        let (_, a, b) = best.expect("at least two clusters");
        let moved = clusters.remove(b);
        clusters[a].extend(moved);
        clusters[a].sort_unstable();
    }

    while clusters.len() < k {
        let largest = (0..clusters.len())
            .max_by(|&a, &b| clusters[a].len().cmp(&clusters[b].len()).then(b.cmp(&a)))
            .expect("nonempty");
        let members = &clusters[largest];
        let weakest = *members
            .iter()
            .min_by(|&&a, &&b| {
                let sa: f64 = members.iter().map(|&j| g.s[a][j]).sum();
                let sb: f64 = members.iter().map(|&j| g.s[b][j]).sum();
                sa.total_cmp(&sb).then(a.cmp(&b))
            })
            .expect("nonempty");
        clusters[largest].retain(|&i| i != weakest);
        clusters.push(vec![weakest]);
    }

    let mut assignment = vec![0; n];
    for (c, members) in clusters.iter().enumerate() {
        for &i in members {
            assignment[i] = c;
        }
    }
    Ok(Clustering::from_assignment(&assignment))
}

/// Improves a partition by single-client moves without changing its number of
/// clusters. See [`refine`].
pub fn refine_partition(g: &SimilarityGraph, clustering: &Clustering) -> Result<Clustering> {
    check_assignment(g, clustering.assignment())?;
    if g.is_degenerate() {
        return Ok(Clustering::from_assignment(clustering.assignment()));
    }
    let mut assignment = clustering.assignment().to_vec();
    refine(g, &mut assignment, clustering.k());
    Ok(Clustering::from_assignment(&assignment))
}

/// Vertex-mover refinement that keeps exactly `k` nonempty clusters.
///
/// Each pass moves every client once, always applying the best available
/// move even when its gain is negative, then rolls back to the best partition
/// seen during the pass. Passes repeat while they raise modularity.
fn refine(g: &SimilarityGraph, assignment: &mut [usize], k: usize) {
    let n = g.len();
    if k < 2 {
        return;
    }
    let strength: Vec<f64> = g.s.iter().map(|row| row.iter().sum()).collect();
    let two_m: f64 = strength.iter().sum();
    loop {
        let mut total = vec![0.0; k];
        let mut size = vec![0usize; k];
        // links[i][c]: similarity from client i into cluster c, excluding i.
        let mut links = vec![vec![0.0; k]; n];
        for i in 0..n {
            total[assignment[i]] += strength[i];
            size[assignment[i]] += 1;
            for j in (0..n).filter(|&j| j != i) {
                links[i][assignment[j]] += g.s[i][j];
            }
        }
        let mut current = assignment.to_vec();
        let mut locked = vec![false; n];
        let mut running = 0.0;
        let mut best_gain = 0.0;
        let mut best_state: Option<Vec<usize>> = None;
        for _ in 0..n {
            let mut step: Option<(f64, usize, usize)> = None;
            for i in (0..n).filter(|&i| !locked[i]) {
                let own = current[i];
                if size[own] == 1 {
                    continue;
                }
                let stay = links[i][own] - strength[i] * (total[own] - strength[i]) / two_m;
                for c in (0..k).filter(|&c| c != own) {
                    let delta =
                        2.0 * ((links[i][c] - strength[i] * total[c] / two_m) - stay) / two_m;
                    if step.map_or(true, |(d, _, _)| delta > d + MIN_GAIN) {
                        step = Some((delta, i, c));
                    }
                }
            }
            let Some((delta, i, to)) = step else { break };
            let from = current[i];
            current[i] = to;
            locked[i] = true;
            total[from] -= strength[i];
            total[to] += strength[i];
            size[from] -= 1;
            size[to] += 1;
            for j in (0..n).filter(|&j| j != i) {
                links[j][from] -= g.s[i][j];
                links[j][to] += g.s[i][j];
            }
            running += delta;
            if running > best_gain + MIN_GAIN {
                best_gain = running;
                best_state = Some(current.clone());
            }
        }
        match best_state {
            Some(state) => assignment.copy_from_slice(&state),
            None => return,
        }
    }
}

/// Picks, in every cluster, the member with the largest similarity sum to the
/// other members. Ties go to the lowest client index.
pub fn select_leaders(g: &SimilarityGraph, clustering: &Clustering) -> Result<Clustering> {
    check_assignment(g, clustering.assignment())?;
    let leaders = clustering
        .clusters()
        .iter()
        .map(|members| {
            let mut best = (members[0], f64::NEG_INFINITY);
            for &i in members {
                let sum: f64 = members
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| g.s[i][j])
                    .sum();
                if sum > best.1 {
                    best = (i, sum);
                }
            }
            best.0
        })
        .collect();
    Ok(Clustering {
        assignment: clustering.assignment.clone(),
        leaders,
    })
}

/// Summary of the full clustering pipeline.
#[derive(Debug, Clone)]
pub struct ClusterReport {
    pub louvain_communities: usize,
    pub louvain_modularity: f64,
    pub final_modularity: f64,
    pub degenerate: bool,
}

/// Independent Louvain starts tried by [`cluster_clients`].
pub const LOUVAIN_RESTARTS: u64 = 8;
/// Random partitions additionally refined by [`cluster_clients`].
pub const RANDOM_STARTS: usize = 16;

/// Two-way split by the sign of the leading eigenvector of the modularity
/// matrix `B = S - s s^T / 2m`, found by shifted power iteration.
fn spectral_bisection(g: &SimilarityGraph) -> Vec<usize> {
    let n = g.len();
    let strength: Vec<f64> = g.s.iter().map(|row| row.iter().sum()).collect();
    let two_m: f64 = strength.iter().sum();
    let b: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| g.s[i][j] - strength[i] * strength[j] / two_m)
                .collect()
        })
        .collect();
    // Gershgorin bound makes B + shift*I positive semidefinite.
    let shift = b
        .iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 / n as f64).collect();
    for _ in 0..1000 {
        let mut next: Vec<f64> = (0..n)
            .map(|i| b[i].iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() + shift * v[i])
            .collect();
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let diff: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        if diff < 1e-12 {
            break;
        }
    }
    v.iter().map(|&x| usize::from(x < 0.0)).collect()
}

/// Louvain, reduction to `k` clusters, refinement, then leader selection.
///
/// Candidate partitions come from [`LOUVAIN_RESTARTS`] Louvain runs with
/// visit orders derived from `seed`, one spectral bisection and
/// [`RANDOM_STARTS`] seeded random partitions. Each is reduced to `k`
/// clusters with [`coarsen_to_k`] and improved with [`refine_partition`]; the
/// one with the highest modularity wins (earliest candidate on ties).
pub fn cluster_clients(
    g: &SimilarityGraph,
    k: usize,
    seed: u64,
) -> Result<(Clustering, ClusterReport)> {
    let first = louvain(g, crate::model::derive_seed(seed, 0))?;
    let report = |final_modularity| ClusterReport {
        louvain_communities: first.clustering.k(),
        louvain_modularity: first.modularity,
        final_modularity,
        degenerate: first.degenerate,
    };
    if first.degenerate {
        let c = select_leaders(g, &coarsen_to_k(g, &first.clustering, k)?)?;
        let q = modularity(g, c.assignment()).unwrap_or(0.0);
        return Ok((c, report(q)));
    }
    let mut starts = vec![first.clustering.clone()];
    for restart in 1..LOUVAIN_RESTARTS {
        starts.push(louvain(g, crate::model::derive_seed(seed, restart))?.clustering);
    }
    starts.push(Clustering::from_assignment(&spectral_bisection(g)));
    let mut rng = ChaCha8Rng::seed_from_u64(crate::model::derive_seed(seed, 0x5EED));
    for _ in 0..RANDOM_STARTS {
        let assignment: Vec<usize> = (0..g.len()).map(|_| rng.gen_range(0..k)).collect();
        starts.push(Clustering::from_assignment(&assignment));
    }

    let mut best: Option<(Clustering, f64)> = None;
    for start in &starts {
        let coarse = refine_partition(g, &coarsen_to_k(g, start, k)?)?;
        let q = modularity(g, coarse.assignment())?;
        if best.as_ref().map_or(true, |(_, bq)| q > *bq + MIN_GAIN) {
            best = Some((coarse, q));
        }
    }
    let (coarse, q) = best.expect("at least one start");
    Ok((select_leaders(g, &coarse)?, report(q)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn graph(d: Vec<Vec<f64>>) -> SimilarityGraph {
        SimilarityGraph::from_distances(d).unwrap()
    }

    /// Graph whose similarity matrix is exactly `s` (zero diagonal).
    fn graph_with_similarity(s: Vec<Vec<f64>>) -> SimilarityGraph {
        let n = s.len();
        let mut g = graph(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        g.d = vec![vec![0.0; n]; n];
        g.s = s;
        g.d_min = 0.0;
        g.d_max = 1.0;
        g
    }

    fn random_graph(n: usize, seed: u64) -> SimilarityGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let v = rng.gen_range(0.0..10.0);
                d[i][j] = v;
                d[j][i] = v;
            }
        }
        graph(d)
    }

    /// Direct double sum over ordered pairs, independent of `matrix_modularity`.
    fn naive_q(s: &[Vec<f64>], a: &[usize]) -> f64 {
        let n = s.len();
        let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| s[i][j]).sum()).collect();
        let two_m: f64 = deg.iter().sum();
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                if a[i] == a[j] {
                    q += s[i][j] - deg[i] * deg[j] / two_m;
                }
            }
        }
        q / two_m
    }

    fn best_two_partition(s: &[Vec<f64>]) -> f64 {
        let n = s.len();
        (1..(1u32 << (n - 1)))
            .map(|mask| {
                let a: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
                naive_q(s, &a)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn one_cluster_has_zero_modularity() {
        for seed in 0..5 {
            let g = random_graph(6, seed);
            assert!(modularity(&g, &[0; 6]).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn two_disconnected_cliques() {
        let s = vec![
            vec![0.0, 1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ];
        let g = graph_with_similarity(s);
        assert!((modularity(&g, &[0, 0, 1, 1]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_graph_is_rejected() {
        let g = graph_with_similarity(vec![vec![0.0; 3]; 3]);
        assert!(modularity(&g, &[0, 1, 2]).is_err());
    }

    #[test]
    fn modularity_matches_naive_sum_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..50 {
            let n = rng.gen_range(2..10);
            let g = random_graph(n, seed);
            let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let q = modularity(&g, &a).unwrap();
            assert!((q - naive_q(&g.s, &a)).abs() < 1e-12);
            assert!((-0.5..=1.0).contains(&q));
        }
    }

    /// Two blocks of four: intra-block distance ~1, inter-block ~10.
    fn two_blocks(seed: u64) -> SimilarityGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = vec![vec![0.0; 8]; 8];
        for i in 0..8 {
            for j in i + 1..8 {
                let base = if (i < 4) == (j < 4) { 1.0 } else { 10.0 };
                let v = base + rng.gen_range(0.0..0.5);
                d[i][j] = v;
                d[j][i] = v;
            }
        }
        graph(d)
    }

    #[test]
    fn louvain_recovers_two_blocks() {
        for seed in 0..5 {
            let g = two_blocks(seed);
            let out = louvain(&g, seed).unwrap();
            let expected = vec![0, 0, 0, 0, 1, 1, 1, 1];
            assert_eq!(out.clustering.assignment(), &expected[..]);
            // The brute-force optimum over 2-partitions is the block split.
            assert!((best_two_partition(&g.s) - naive_q(&g.s, &expected)).abs() < 1e-12);
        }
    }

    #[test]
    fn every_local_move_increases_modularity() {
        for seed in 0..20 {
            let g = random_graph(12, seed);
            let out = louvain(&g, seed).unwrap();
            assert!(out.moves.iter().all(|m| m.gain > 0.0));
            assert!(out
                .level_modularity
                .windows(2)
                .all(|w| w[1] >= w[0] - 1e-12));
            assert!(out.modularity >= out.level_modularity[0] - 1e-12);
        }
    }

    #[test]
    fn first_level_move_gains_match_recomputed_modularity() {
        let g = random_graph(9, 3);
        let out = louvain(&g, 3).unwrap();
        let mut assignment: Vec<usize> = (0..9).collect();
        let mut q = modularity(&g, &assignment).unwrap();
        for m in out.moves.iter().filter(|m| m.level == 0) {
            assignment[m.node] = m.to;
            let next = naive_q(&g.s, &assignment);
            assert!((next - q - m.gain).abs() < 1e-9);
            q = next;
        }
    }

    #[test]
    fn constant_similarity_uses_fallback() {
        let mut d = vec![vec![2.0; 7]; 7];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        let g = graph(d);
        let out = louvain(&g, 0).unwrap();
        assert!(out.degenerate);
        let c = coarsen_to_k(&g, &out.clustering, 3).unwrap();
        assert_eq!(c.assignment(), &[0, 0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn coarsen_is_a_no_op_at_k() {
        let g = two_blocks(1);
        let c = Clustering::from_assignment(&[0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(coarsen_to_k(&g, &c, 2).unwrap(), c);
    }

    #[test]
    fn coarsen_merges_the_least_costly_pair() {
        let g = random_graph(9, 8);
        let start = Clustering::from_assignment(&[0, 0, 0, 1, 1, 1, 2, 2, 2]);
        let merged = coarsen_to_k(&g, &start, 2).unwrap();
        // Oracle: evaluate every candidate merge with the modularity sum.
        let candidates = [
            vec![0, 0, 0, 0, 0, 0, 1, 1, 1],
            vec![0, 0, 0, 1, 1, 1, 0, 0, 0],
            vec![0, 0, 0, 1, 1, 1, 1, 1, 1],
        ];
        let best = candidates
            .iter()
            .max_by(|a, b| naive_q(&g.s, a).total_cmp(&naive_q(&g.s, b)))
            .unwrap();
        assert_eq!(merged.assignment(), &best[..]);
    }

    #[test]
    fn coarsen_to_n_gives_singletons() {
        let g = random_graph(5, 2);
        let c = coarsen_to_k(&g, &Clustering::from_assignment(&[0; 5]), 5).unwrap();
        assert_eq!(c.k(), 5);
        assert!(c.clusters().iter().all(|m| m.len() == 1));
    }

    #[test]
    fn coarsen_rejects_k_above_n() {
        let g = random_graph(4, 2);
        assert!(coarsen_to_k(&g, &Clustering::from_assignment(&[0; 4]), 5).is_err());
        assert!(coarsen_to_k(&g, &Clustering::from_assignment(&[0; 4]), 0).is_err());
    }

    #[test]
    fn leader_by_similarity_sum() {
        // d = {AB:1, AC:3, BC:5} gives S = {AB:5, AC:3, BC:1}.
        let g = graph(vec![
            vec![0.0, 1.0, 3.0],
            vec![1.0, 0.0, 5.0],
            vec![3.0, 5.0, 0.0],
        ]);
        let c = select_leaders(&g, &Clustering::from_assignment(&[0, 0, 0])).unwrap();
        assert_eq!(c.leaders(), &[0]);
        let split = select_leaders(&g, &Clustering::from_assignment(&[0, 0, 1])).unwrap();
        // {A, B} tie on S_AB; C alone.
        assert_eq!(split.leaders(), &[0, 2]);
    }

    #[test]
    fn clustering_json_shape() {
        let g = random_graph(4, 0);
        let c = select_leaders(&g, &Clustering::from_assignment(&[1, 1, 0, 0])).unwrap();
        let v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(v["clusters"], serde_json::json!([[0, 1], [2, 3]]));
        assert_eq!(v["leaders"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn pipeline_yields_valid_partition() {
        for seed in 0..10 {
            let g = random_graph(15, seed);
            for k in [1, 2, 5, 15] {
                let (c, _) = cluster_clients(&g, k, seed).unwrap();
                assert_eq!(c.k(), k);
                assert_eq!(c.leaders().len(), k);
                for (cluster, members) in c.clusters().iter().enumerate() {
                    assert!(!members.is_empty());
                    assert_eq!(c.assignment()[c.leaders()[cluster]], cluster);
                }
            }
        }
    }

    /// Distances between random points, the same kind of metric the
    /// per-layer weight distances produce.
    fn point_graph(n: usize, seed: u64) -> SimilarityGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = rng.gen_range(2..6);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let d = pts
            .iter()
            .map(|p| {
                pts.iter()
                    .map(|q| {
                        p.iter()
                            .zip(q)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect()
            })
            .collect();
        graph(d)
    }

    #[test]
    fn k2_matches_brute_force_on_small_graphs() {
        for seed in 0..300 {
            for g in [
                random_graph(8, 1000 + seed),
                point_graph(8, seed),
                point_graph(10, seed),
            ] {
                let (c, _) = cluster_clients(&g, 2, seed).unwrap();
                let gap = best_two_partition(&g.s) - modularity(&g, c.assignment()).unwrap();
                assert!(gap < 1e-9, "seed {seed}: gap {gap}");
            }
        }
    }

    #[test]
    fn refinement_keeps_k_and_never_lowers_modularity() {
        for seed in 0..50 {
            let g = point_graph(12, seed);
            let start = Clustering::contiguous(12, 3);
            let refined = refine_partition(&g, &start).unwrap();
            assert_eq!(refined.k(), 3);
            assert!(
                modularity(&g, refined.assignment()).unwrap()
                    >= modularity(&g, start.assignment()).unwrap() - 1e-12
            );
        }
    }
}
