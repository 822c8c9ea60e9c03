//! Helpers shared by the integration and acceptance tests. The oracles here
//! recompute everything from raw tables and do not call library code that
//! they are used to check.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samegibbs::{CptSet, Network};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random DAG: variables are added in a shuffled order and each may take
/// up to `max_parents` parents among the variables already placed.
pub fn random_dag<R: Rng>(rng: &mut R, n: usize, cards: (usize, usize), max_parents: usize) -> Network {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut edges = Vec::new();
    for (i, &child) in order.iter().enumerate() {
        let k = rng.random_range(0..=max_parents.min(i));
        let mut pool: Vec<usize> = order[..i].to_vec();
        for _ in 0..k {
            let p = pool.swap_remove(rng.random_range(0..pool.len()));
            edges.push((p, child));
        }
    }
    let cards: Vec<usize> = (0..n).map(|_| rng.random_range(cards.0..=cards.1)).collect();
    Network::build(&cards, &edges).expect("random DAG is valid")
}

/// Rows with every entry drawn from `[floor, 1]` and then normalized.
pub fn random_cpts<R: Rng>(rng: &mut R, net: &Network, floor: f64) -> CptSet {
    let tables = (0..net.num_vars())
        .map(|v| {
            let k = net.cardinality(v);
            let mut t = Vec::new();
            for _ in 0..num_rows(net, v) {
                let row: Vec<f64> = (0..k).map(|_| rng.random_range(floor..=1.0)).collect();
                let s: f64 = row.iter().sum();
                t.extend(row.iter().map(|x| x / s));
            }
            t
        })
        .collect();
    CptSet::from_tables(net, tables).expect("valid tables")
}

pub fn num_rows(net: &Network, v: usize) -> usize {
    net.parents(v).iter().map(|&p| net.cardinality(p)).product()
}

/// Parent configuration index, first (smallest) parent most significant.
pub fn row_of(net: &Network, v: usize, a: &[u16]) -> usize {
    let mut ps = net.parents(v).to_vec();
    ps.sort_unstable();
    ps.iter().fold(0, |acc, &p| acc * net.cardinality(p) + usize::from(a[p]))
}

/// Joint probability of a complete assignment as a product of CPT entries.
pub fn joint(net: &Network, cpts: &CptSet, a: &[u16]) -> f64 {
    (0..net.num_vars())
        .map(|v| {
            let k = net.cardinality(v);
            cpts.table(v)[row_of(net, v, a) * k + usize::from(a[v])]
        })
        .product()
}

/// Every complete assignment, last variable fastest.
pub fn assignments(cards: &[usize]) -> Vec<Vec<u16>> {
    let mut out = vec![Vec::new()];
    for &k in cards {
        out = out
            .into_iter()
            .flat_map(|a| {
                (0..k as u16).map(move |s| {
                    let mut b = a.clone();
                    b.push(s);
                    b
                })
            })
            .collect();
    }
    out
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}
