//! Word Mover's Distance as an exact transportation problem.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use crate::rerank::EmbeddingStore;

use super::MetricError;

/// Normalized bag of in-vocabulary words: `(word, count)` in sorted order,
/// plus the total count.
fn nbow<'a, S: AsRef<str>>(tokens: &'a [S], store: &EmbeddingStore) -> (Vec<(&'a str, u64)>, u64) {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for t in tokens {
        if store.contains(t.as_ref()) {
            *counts.entry(t.as_ref()).or_insert(0) += 1;
        }
    }
    let total = counts.values().sum();
    (counts.into_iter().collect(), total)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

struct Prepared {
    supply: Vec<u64>,
    demand: Vec<u64>,
    cost: Vec<Vec<f64>>,
    scale: f64,
}

fn prepare<S: AsRef<str>>(candidate: &[S], reference: &[S], store: &EmbeddingStore) -> Result<Prepared, MetricError> {
    let (a, ta) = nbow(candidate, store);
    let (b, tb) = nbow(reference, store);
    if ta == 0 || tb == 0 {
        return Err(MetricError::UndefinedDistance);
    }
    let cost = a
        .iter()
        .map(|(wa, _)| {
            let va = store.get(wa).expect("in vocabulary");
            b.iter().map(|(wb, _)| euclid(va, store.get(wb).expect("in vocabulary"))).collect()
        })
        .collect();
    // p_i = a_i / ta and q_j = b_j / tb; scaling both by ta*tb gives integer
    // masses with equal totals.
    Ok(Prepared {
        supply: a.iter().map(|(_, c)| c * tb).collect(),
        demand: b.iter().map(|(_, c)| c * ta).collect(),
        cost,
        scale: (ta * tb) as f64,
    })
}

/// Exact WMD: minimum cost of moving the candidate's normalized word
/// distribution onto the reference's, with Euclidean ground cost between
/// word vectors. Out-of-vocabulary tokens are ignored.
pub fn wmd<S: AsRef<str>>(candidate: &[S], reference: &[S], store: &EmbeddingStore) -> Result<f64, MetricError> {
    let p = prepare(candidate, reference, store)?;
    let (cost, _) = transport(&p.supply, &p.demand, &p.cost);
    Ok(cost / p.scale)
}

/// Relaxed lower bound: the larger of the two one-sided nearest-word costs.
pub fn relaxed_wmd<S: AsRef<str>>(candidate: &[S], reference: &[S], store: &EmbeddingStore) -> Result<f64, MetricError> {
    let p = prepare(candidate, reference, store)?;
    let rows: f64 = p
        .supply
        .iter()
        .zip(&p.cost)
        .map(|(s, row)| *s as f64 * row.iter().copied().fold(f64::INFINITY, f64::min))
        .sum();
    let cols: f64 = p
        .demand
        .iter()
        .enumerate()
        .map(|(j, d)| *d as f64 * p.cost.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(rows.max(cols) / p.scale)
}

#[derive(Clone, Copy)]
struct Edge {
    to: usize,
    rev: usize,
    cap: u64,
    cost: f64,
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Solves the balanced transportation problem by successive shortest paths
/// with Johnson potentials. Returns the total cost and the flow matrix.
/// `supply` and `demand` must have equal sums.
#[allow(clippy::needless_range_loop)]
pub fn transport(supply: &[u64], demand: &[u64], cost: &[Vec<f64>]) -> (f64, Vec<Vec<u64>>) {
    let m = supply.len();
    let n = demand.len();
    let source = m + n;
    let sink = source + 1;
    let nodes = sink + 1;
    let mut g: Vec<Vec<Edge>> = vec![Vec::new(); nodes];

    let add = |g: &mut Vec<Vec<Edge>>, u: usize, v: usize, cap: u64, cost: f64| {
        let ru = g[v].len();
        let rv = g[u].len();
        g[u].push(Edge { to: v, rev: ru, cap, cost });
        g[v].push(Edge { to: u, rev: rv, cap: 0, cost: -cost });
    };
    for (i, &s) in supply.iter().enumerate() {
        add(&mut g, source, i, s, 0.0);
    }
    let total: u64 = supply.iter().sum();
    for i in 0..m {
        for j in 0..n {
            add(&mut g, i, m + j, total, cost[i][j]);
        }
    }
    for (j, &d) in demand.iter().enumerate() {
        add(&mut g, m + j, sink, d, 0.0);
    }

    let mut potential = vec![0.0f64; nodes];
    let mut remaining = total;
    while remaining > 0 {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; nodes];
        dist[source] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(HeapItem(0.0, source));
        while let Some(HeapItem(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for (ei, e) in g[u].iter().enumerate() {
                if e.cap == 0 {
                    continue;
                }
                // reduced costs are non-negative up to rounding
                let rc = (e.cost + potential[u] - potential[e.to]).max(0.0);
                let nd = d + rc;
                if nd < dist[e.to] {
                    dist[e.to] = nd;
                    prev[e.to] = Some((u, ei));
                    heap.push(HeapItem(nd, e.to));
                }
            }
        }
        if !dist[sink].is_finite() {
            break;
        }
        for v in 0..nodes {
            if dist[v].is_finite() {
                potential[v] += dist[v];
            }
        }
        let mut push = remaining;
        let mut v = sink;
        while let Some((u, ei)) = prev[v] {
            push = push.min(g[u][ei].cap);
            v = u;
        }
        let mut v = sink;
        while let Some((u, ei)) = prev[v] {
            let rev = g[u][ei].rev;
            g[u][ei].cap -= push;
            g[v][rev].cap += push;
            v = u;
        }
        remaining -= push;
    }

    let mut flow = vec![vec![0u64; n]; m];
    for (i, row) in flow.iter_mut().enumerate() {
        for e in &g[i] {
            if e.to >= m && e.to < m + n {
                // reverse edge capacity on the demand side holds the flow
                row[e.to - m] = g[e.to][e.rev].cap;
            }
        }
    }
    let total_cost: f64 = flow
        .iter()
        .zip(cost)
        .flat_map(|(fr, cr)| fr.iter().zip(cr).map(|(f, c)| *f as f64 * c))
        .sum();
    (total_cost, flow)
}
