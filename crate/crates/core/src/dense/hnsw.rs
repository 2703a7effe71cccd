//! Hierarchical navigable small world graph for approximate
//! inner-product search.
//!
//! Construction inserts nodes sequentially: each node draws a level
//! from a geometric distribution (`floor(-ln(u) / ln M)`), descends
//! greedily through the upper layers, then connects to the closest M
//! candidates found by a beam of width `ef_construction` on each of
//! its layers (the simple selection heuristic). Neighbor lists are
//! capped at M per layer and 2M on layer 0.
//!
//! Search descends greedily to layer 0, runs a beam of width
//! `ef_search` there, and returns the best k. All ties break toward
//! the lower node index, so builds and searches are deterministic.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};

use super::{score_row, DenseError, VectorMatrix};
use crate::sparse::RetrievalResult;

pub const DEFAULT_M: usize = 16;
pub const DEFAULT_EF_CONSTRUCTION: usize = 200;
pub const DEFAULT_EF_SEARCH: usize = 128;

/// Levels are capped so a pathological RNG draw cannot build an
/// absurdly tall graph.
const MAX_LEVEL_CAP: usize = 30;

/// A candidate during graph traversal. Ordering: higher score wins,
/// ties go to the lower index, so `BinaryHeap::pop` yields the best.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Scored {
    pub score: f64,
    pub idx: u32,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scored {}
impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    pub m: usize,
    pub ef_construction: usize,
    pub entry: u32,
    pub max_level: usize,
    /// levels[i] = highest layer node i appears on.
    pub levels: Vec<u32>,
    /// neighbors[i][l] = adjacency of node i on layer l, l <= levels[i].
    pub neighbors: Vec<Vec<Vec<u32>>>,
}

impl HnswIndex {
    fn cap(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }

    /// Graph structural invariants: degree bounds, edge validity, entry
    /// point on the top layer.
    pub fn check_invariants(&self) {
        let n = self.levels.len();
        assert_eq!(self.neighbors.len(), n);
        assert!((self.entry as usize) < n);
        assert_eq!(self.levels[self.entry as usize] as usize, self.max_level);
        for i in 0..n {
            let li = self.levels[i] as usize;
            assert_eq!(self.neighbors[i].len(), li + 1);
            for (l, adj) in self.neighbors[i].iter().enumerate() {
                assert!(adj.len() <= self.cap(l), "node {i} layer {l} over cap");
                for &nb in adj {
                    assert!((nb as usize) < n, "edge to missing node");
                    assert!(nb as usize != i, "self edge at node {i}");
                    assert!(
                        self.levels[nb as usize] as usize >= l,
                        "edge to node below the layer"
                    );
                }
            }
        }
    }
}

fn draw_level(rng: &mut impl Rng, m: usize) -> usize {
    // u in (0, 1]; -ln(u) tops out at level cap.
    let u: f64 = 1.0 - rng.random::<f64>();
    let level = (-u.ln() / (m as f64).ln()).floor();
    (level as usize).min(MAX_LEVEL_CAP)
}

/// Beam search on one layer from the given entry points; returns up to
/// `ef` best nodes, best first.
fn search_layer(
    matrix: &VectorMatrix,
    graph: &HnswIndex,
    q: &[f64],
    entries: &[Scored],
    ef: usize,
    layer: usize,
    visited: &mut [u64],
) -> Vec<Scored> {
    debug_assert!(ef >= 1);
    // Bitset reset only over the words we touched last time would
    // complicate the code; clearing is cheap at desk scale.
    visited.iter_mut().for_each(|w| *w = 0);
    let mut mark = |i: u32| {
        let (w, b) = ((i / 64) as usize, i % 64);
        let seen = visited[w] >> b & 1 == 1;
        visited[w] |= 1 << b;
        seen
    };

    let mut candidates: BinaryHeap<Scored> = BinaryHeap::new();
    let mut results: BinaryHeap<std::cmp::Reverse<Scored>> = BinaryHeap::new();
    for &e in entries {
        if !mark(e.idx) {
            candidates.push(e);
            results.push(std::cmp::Reverse(e));
        }
    }
    while results.len() > ef {
        results.pop();
    }

    while let Some(c) = candidates.pop() {
        let worst = results.peek().expect("results non-empty").0;
        if results.len() >= ef && c < worst {
            break;
        }
        for &nb in &graph.neighbors[c.idx as usize][layer] {
            if mark(nb) {
                continue;
            }
            let s = Scored {
                score: score_row(q, matrix.row(nb as usize)),
                idx: nb,
            };
            let worst = results.peek().expect("results non-empty").0;
            if results.len() < ef || s > worst {
                candidates.push(s);
                results.push(std::cmp::Reverse(s));
                if results.len() > ef {
                    results.pop();
                }
            }
        }
    }
    let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
    out.sort_by(|a, b| b.cmp(a));
    out
}

/// Greedy single-path descent on one layer: follow the best neighbor
/// until no neighbor improves on the current node.
fn greedy_step(
    matrix: &VectorMatrix,
    graph: &HnswIndex,
    q: &[f64],
    mut cur: Scored,
    layer: usize,
) -> Scored {
    loop {
        let mut best = cur;
        for &nb in &graph.neighbors[cur.idx as usize][layer] {
            let s = Scored {
                score: score_row(q, matrix.row(nb as usize)),
                idx: nb,
            };
            if s > best {
                best = s;
            }
        }
        if best.idx == cur.idx {
            return cur;
        }
        cur = best;
    }
}

/// Build the graph over `matrix` with sequential, seeded insertion.
pub fn build_hnsw(
    matrix: &VectorMatrix,
    m: usize,
    ef_construction: usize,
    seed: u64,
) -> Result<HnswIndex, DenseError> {
    assert!(m >= 2, "M must be >= 2");
    assert!(ef_construction >= m, "ef_construction must be >= M");
    if matrix.n() == 0 {
        return Err(DenseError::EmptyMatrix);
    }
    matrix.validate()?;
    let n = matrix.n();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut graph = HnswIndex {
        m,
        ef_construction,
        entry: 0,
        max_level: 0,
        levels: Vec::with_capacity(n),
        neighbors: Vec::with_capacity(n),
    };
    let mut visited = vec![0u64; n.div_ceil(64)];

    for i in 0..n {
        let level = if i == 0 { 0 } else { draw_level(&mut rng, m) };
        graph.levels.push(level as u32);
        graph.neighbors.push(vec![Vec::new(); level + 1]);
        if i == 0 {
            continue;
        }

        let q: Vec<f64> = matrix.row(i).iter().map(|&x| x as f64).collect();
        let mut ep = Scored {
            score: score_row(&q, matrix.row(graph.entry as usize)),
            idx: graph.entry,
        };
        for layer in (level + 1..=graph.max_level).rev() {
            ep = greedy_step(matrix, &graph, &q, ep, layer);
        }

        let mut entries = vec![ep];
        for layer in (0..=level.min(graph.max_level)).rev() {
            let found = search_layer(matrix, &graph, &q, &entries, ef_construction, layer, &mut visited);
            // Simple heuristic: connect to the closest M found.
            for s in found.iter().take(m) {
                connect(&mut graph, matrix, i as u32, s.idx, layer);
            }
            entries = found;
        }

        if level > graph.max_level {
            graph.max_level = level;
            graph.entry = i as u32;
        }
    }
    Ok(graph)
}

/// Add the bidirectional edge (a, b) on `layer`, trimming either side
/// back to its cap by keeping the closest neighbors.
fn connect(graph: &mut HnswIndex, matrix: &VectorMatrix, a: u32, b: u32, layer: usize) {
    debug_assert_ne!(a, b);
    for (from, to) in [(a, b), (b, a)] {
        let cap = graph.cap(layer);
        let adj = &mut graph.neighbors[from as usize][layer];
        if adj.contains(&to) {
            continue;
        }
        adj.push(to);
        if adj.len() > cap {
            let base: Vec<f64> = matrix.row(from as usize).iter().map(|&x| x as f64).collect();
            let mut scored: Vec<Scored> = graph.neighbors[from as usize][layer]
                .iter()
                .map(|&nb| Scored {
                    score: score_row(&base, matrix.row(nb as usize)),
                    idx: nb,
                })
                .collect();
            scored.sort_by(|x, y| y.cmp(x));
            scored.truncate(cap);
            graph.neighbors[from as usize][layer] = scored.into_iter().map(|s| s.idx).collect();
        }
    }
}

/// Top-k by inner product via greedy descent plus a layer-0 beam of
/// width `ef_search`. Scores equal `exact_search` scores for the same
/// ids exactly.
pub fn hnsw_search(
    graph: &HnswIndex,
    matrix: &VectorMatrix,
    q: &[f64],
    k: usize,
    ef_search: usize,
) -> Result<Vec<RetrievalResult>, DenseError> {
    if k < 1 {
        return Err(DenseError::ZeroK);
    }
    assert!(ef_search >= k, "ef_search must be >= k");
    if q.len() != matrix.d {
        return Err(DenseError::DimMismatch {
            expected: matrix.d,
            got: q.len(),
        });
    }
    let mut ep = Scored {
        score: score_row(q, matrix.row(graph.entry as usize)),
        idx: graph.entry,
    };
    for layer in (1..=graph.max_level).rev() {
        ep = greedy_step(matrix, graph, q, ep, layer);
    }
    let mut visited = vec![0u64; matrix.n().div_ceil(64)];
    let found = search_layer(matrix, graph, q, &[ep], ef_search, 0, &mut visited);
    Ok(found
        .into_iter()
        .take(k)
        .map(|s| RetrievalResult {
            passage_id: matrix.ids[s.idx as usize].clone(),
            score: s.score,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{exact_search, random_unit_matrix};

    fn recall_at(k: usize, got: &[RetrievalResult], want: &[RetrievalResult]) -> f64 {
        let want_ids: std::collections::HashSet<&str> =
            want.iter().take(k).map(|r| r.passage_id.as_str()).collect();
        let hit = got
            .iter()
            .take(k)
            .filter(|r| want_ids.contains(r.passage_id.as_str()))
            .count();
        hit as f64 / k.min(want.len()) as f64
    }

    #[test]
    fn single_node_graph() {
        let m = random_unit_matrix(1, 4, 1);
        let g = build_hnsw(&m, 2, 4, 0).unwrap();
        g.check_invariants();
        let hits = hnsw_search(&g, &m, &[1.0, 0.0, 0.0, 0.0], 1, 1).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].passage_id, "p00000");
    }

    #[test]
    fn empty_matrix_rejected() {
        assert!(matches!(
            build_hnsw(&crate::dense::VectorMatrix::new(4), 2, 4, 0),
            Err(DenseError::EmptyMatrix)
        ));
    }

    #[test]
    fn saturated_ef_equals_exact_search() {
        let m = random_unit_matrix(100, 8, 7);
        let g = build_hnsw(&m, 8, 32, 42).unwrap();
        g.check_invariants();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let want = exact_search(&m, &q, 10).unwrap();
            let got = hnsw_search(&g, &m, &q, 10, m.n()).unwrap();
            assert_eq!(recall_at(10, &got, &want), 1.0);
            // Oracle dominance: identical ids AND identical scores.
            for (g_hit, w_hit) in got.iter().zip(&want) {
                assert_eq!(g_hit.passage_id, w_hit.passage_id);
                assert_eq!(g_hit.score, w_hit.score);
            }
        }
    }

    #[test]
    fn self_match_ranks_first() {
        let m = random_unit_matrix(60, 6, 15);
        let g = build_hnsw(&m, 6, 24, 3).unwrap();
        let q: Vec<f64> = m.row(17).iter().map(|&x| x as f64).collect();
        let hits = hnsw_search(&g, &m, &q, 1, 60).unwrap();
        assert_eq!(hits[0].passage_id, "p00017");
    }

    #[test]
    fn builds_are_deterministic_per_seed() {
        let m = random_unit_matrix(80, 5, 2);
        let a = build_hnsw(&m, 4, 16, 5).unwrap();
        let b = build_hnsw(&m, 4, 16, 5).unwrap();
        assert_eq!(a, b);
        let c = build_hnsw(&m, 4, 16, 6).unwrap();
        assert_ne!(a.levels, c.levels);
    }

    #[test]
    fn invariants_hold_across_sizes_and_seeds() {
        for (n, seed) in [(2usize, 0u64), (10, 1), (57, 2), (200, 3)] {
            let m = random_unit_matrix(n, 4, seed);
            let g = build_hnsw(&m, 4, 16, seed).unwrap();
            g.check_invariants();
        }
    }

    #[test]
    fn moderate_ef_recall_is_high() {
        let m = random_unit_matrix(500, 16, 30);
        let g = build_hnsw(&m, 8, 64, 12).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let mut total = 0.0;
        let trials = 20;
        for _ in 0..trials {
            let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let want = exact_search(&m, &q, 10).unwrap();
            let got = hnsw_search(&g, &m, &q, 10, 64).unwrap();
            total += recall_at(10, &got, &want);
        }
        let recall = total / trials as f64;
        assert!(recall >= 0.9, "recall@10 {recall} too low");
    }

    #[test]
    fn level_draw_is_geometricish() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            let l = draw_level(&mut rng, 16);
            if l < 3 {
                counts[l] += 1;
            }
        }
        // P(level 0) = 1 - 1/16 = 0.9375.
        assert!(counts[0] > 9000 && counts[0] < 9700, "{counts:?}");
        assert!(counts[1] > 350 && counts[1] < 800, "{counts:?}");
    }

    #[test]
    fn zero_k_is_an_error() {
        let m = random_unit_matrix(5, 4, 1);
        let g = build_hnsw(&m, 2, 4, 0).unwrap();
        assert!(matches!(
            hnsw_search(&g, &m, &[0.0; 4], 0, 1),
            Err(DenseError::ZeroK)
        ));
    }
}
