//! CPT parameters, count tables and the conjugate Dirichlet update.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::rng::StreamKey;

/// Dense per-variable tables shaped `rows x card`, row-major.
#[derive(Clone, Debug, PartialEq)]
struct Tables {
    shapes: Vec<(usize, usize)>,
    data: Vec<Vec<f64>>,
}

impl Tables {
    fn filled(net: &Network, value: f64) -> Self {
        let shapes: Vec<(usize, usize)> = (0..net.num_vars()).map(|v| (net.num_rows(v), net.cardinality(v))).collect();
        let data = shapes.iter().map(|&(r, k)| vec![value; r * k]).collect();
        Tables { shapes, data }
    }

    fn congruent(&self, other: &Tables) -> Result<()> {
        if self.shapes != other.shapes {
            return Err(Error::ShapeMismatch(format!("table shapes {:?} vs {:?}", self.shapes, other.shapes)));
        }
        Ok(())
    }

    fn matches(&self, net: &Network) -> bool {
        self.shapes.len() == net.num_vars()
            && self.shapes.iter().enumerate().all(|(v, &s)| s == (net.num_rows(v), net.cardinality(v)))
    }

    fn bytes(&self) -> usize {
        self.data.iter().map(|t| t.len() * std::mem::size_of::<f64>()).sum()
    }
}

/// The learned parameters: one probability table per variable.
#[derive(Clone, Debug, PartialEq)]
pub struct CptSet(Tables);

/// Non-negative (real-valued) state counts, shaped like a [`CptSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct CountSet(Tables);

impl CptSet {
    /// Uniform rows for every variable.
    pub fn uniform(net: &Network) -> Self {
        let mut t = Tables::filled(net, 0.0);
        for (v, table) in t.data.iter_mut().enumerate() {
            let k = net.cardinality(v);
            table.iter_mut().for_each(|p| *p = 1.0 / k as f64);
        }
        CptSet(t)
    }

    /// Builds a set from row-major tables, validating shape and normalization.
    pub fn from_tables(net: &Network, tables: Vec<Vec<f64>>) -> Result<Self> {
        if tables.len() != net.num_vars() {
            return Err(Error::ShapeMismatch(format!("{} tables for {} variables", tables.len(), net.num_vars())));
        }
        let mut t = Tables::filled(net, 0.0);
        for (v, table) in tables.into_iter().enumerate() {
            let (rows, k) = t.shapes[v];
            if table.len() != rows * k {
                return Err(Error::ShapeMismatch(format!(
                    "variable {v}: expected {rows}x{k} = {} entries, got {}",
                    rows * k,
                    table.len()
                )));
            }
            for (r, row) in table.chunks(k).enumerate() {
                if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::InvalidConfig(format!("variable {v} row {r} has an entry outside [0, 1]")));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidConfig(format!("variable {v} row {r} sums to {s}")));
                }
            }
            t.data[v] = table;
        }
        // Rows already normalized within rounding are kept bit-for-bit so
        // that saved CPTs load back unchanged.
        for (v, table) in t.data.iter_mut().enumerate() {
            for row in table.chunks_mut(t.shapes[v].1) {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    row.iter_mut().for_each(|p| *p /= s);
                }
            }
        }
        Ok(CptSet(t))
    }

    pub fn num_vars(&self) -> usize {
        self.0.shapes.len()
    }

    /// `(rows, cardinality)` of variable `v`'s table.
    pub fn shape(&self, v: usize) -> (usize, usize) {
        self.0.shapes[v]
    }

    pub fn table(&self, v: usize) -> &[f64] {
        &self.0.data[v]
    }

    pub fn row(&self, v: usize, row: usize) -> &[f64] {
        let k = self.0.shapes[v].1;
        &self.0.data[v][row * k..(row + 1) * k]
    }

    /// All rows of all variables in variable-then-row order.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.0.data.iter().zip(&self.0.shapes).flat_map(|(t, &(_, k))| t.chunks(k))
    }

    pub fn congruent(&self, other: &CptSet) -> Result<()> {
        self.0.congruent(&other.0)
    }

    pub fn matches(&self, net: &Network) -> bool {
        self.0.matches(net)
    }

    pub fn bytes(&self) -> usize {
        self.0.bytes()
    }

    /// Order-sensitive hash of every entry's bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325_u64;
        for x in self.0.data.iter().flatten() {
            h ^= x.to_bits();
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

impl CountSet {
    pub fn zeros(net: &Network) -> Self {
        CountSet(Tables::filled(net, 0.0))
    }

    pub fn num_vars(&self) -> usize {
        self.0.shapes.len()
    }

    pub fn shape(&self, v: usize) -> (usize, usize) {
        self.0.shapes[v]
    }

    pub fn table(&self, v: usize) -> &[f64] {
        &self.0.data[v]
    }

    pub fn table_mut(&mut self, v: usize) -> &mut [f64] {
        &mut self.0.data[v]
    }

    pub fn row(&self, v: usize, row: usize) -> &[f64] {
        let k = self.0.shapes[v].1;
        &self.0.data[v][row * k..(row + 1) * k]
    }

    /// Total mass in variable `v`'s table.
    pub fn total(&self, v: usize) -> f64 {
        self.0.data[v].iter().sum()
    }

    pub fn bytes(&self) -> usize {
        self.0.bytes()
    }

    pub fn clear(&mut self) {
        self.0.data.iter_mut().flatten().for_each(|c| *c = 0.0);
    }

    pub fn add(&mut self, other: &CountSet) {
        debug_assert_eq!(self.0.shapes, other.0.shapes);
        for (a, b) in self.0.data.iter_mut().flatten().zip(other.0.data.iter().flatten()) {
            *a += b;
        }
    }

    /// Subtracts `other`, clamping tiny negative round-off at zero.
    pub fn sub(&mut self, other: &CountSet) {
        debug_assert_eq!(self.0.shapes, other.0.shapes);
        for (a, b) in self.0.data.iter_mut().flatten().zip(other.0.data.iter().flatten()) {
            *a = (*a - b).max(0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.data.iter_mut().flatten().for_each(|c| *c *= factor);
    }

    pub fn entries(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.data.iter().flatten().copied()
    }
}

/// Symmetric Dirichlet prior, with optional per-variable concentration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletPrior {
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_var: BTreeMap<usize, f64>,
}

impl Default for DirichletPrior {
    fn default() -> Self {
        DirichletPrior::symmetric(1.0)
    }
}

impl DirichletPrior {
    pub fn symmetric(alpha: f64) -> Self {
        DirichletPrior { alpha, per_var: BTreeMap::new() }
    }

    pub fn alpha_for(&self, v: usize) -> f64 {
        self.per_var.get(&v).copied().unwrap_or(self.alpha)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64| a > 0.0 && a.is_finite();
        if !ok(self.alpha) || !self.per_var.values().all(|&a| ok(a)) {
            return Err(Error::InvalidConfig("Dirichlet concentration must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Random initial parameters: every row uniform on the simplex.
pub fn init_cpts(net: &Network, seed: StreamKey) -> CptSet {
    let mut t = Tables::filled(net, 0.0);
    for (v, table) in t.data.iter_mut().enumerate() {
        let k = t.shapes[v].1;
        for (r, row) in table.chunks_mut(k).enumerate() {
            let mut rng = seed.child(v as u64).child(r as u64).rng();
            // Normalized unit exponentials are Dirichlet(1, ..., 1).
            for p in row.iter_mut() {
                *p = -(1.0 - rng.random::<f64>()).ln();
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
        }
    }
    CptSet(t)
}

/// Draws `out ~ Dirichlet(shapes)`.
///
/// Works with log-gamma variates so that very small shapes (where a plain
/// gamma draw underflows to zero) still give a normalized row.
pub fn sample_dirichlet_row<R: Rng + ?Sized>(shapes: &[f64], rng: &mut R, out: &mut [f64]) {
    debug_assert_eq!(shapes.len(), out.len());
    for (o, &a) in out.iter_mut().zip(shapes) {
        *o = if a >= 1.0 {
            Gamma::new(a, 1.0).expect("shape is positive").sample(rng).ln()
        } else {
            // G(a) = G(a + 1) * U^(1/a)
            let g = Gamma::new(a + 1.0, 1.0).expect("shape is positive").sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>();
            g.ln() + u.ln() / a
        };
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.iter_mut().for_each(|x| *x = (*x - max).exp());
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
}

/// Samples every row from `Dirichlet(counts_row + alpha)`.
pub fn sample_cpts(counts: &CountSet, prior: &DirichletPrior, seed: StreamKey) -> CptSet {
    let mut t = counts.0.clone();
    let mut shapes: SmallVec<[f64; 8]> = SmallVec::new();
    for (v, table) in t.data.iter_mut().enumerate() {
        let k = t.shapes[v].1;
        let alpha = prior.alpha_for(v);
        for (r, row) in table.chunks_mut(k).enumerate() {
            shapes.clear();
            shapes.extend(row.iter().map(|c| c + alpha));
            let mut rng = seed.child(v as u64).child(r as u64).rng();
            sample_dirichlet_row(&shapes, &mut rng, row);
        }
    }
    CptSet(t)
}

/// Posterior mean of every row, `(c + alpha) / (sum c + k alpha)`.
pub fn posterior_mean(counts: &CountSet, prior: &DirichletPrior) -> CptSet {
    let mut t = counts.0.clone();
    for (v, table) in t.data.iter_mut().enumerate() {
        let k = t.shapes[v].1;
        let alpha = prior.alpha_for(v);
        for row in table.chunks_mut(k) {
            let total: f64 = row.iter().sum::<f64>() + alpha * k as f64;
            row.iter_mut().for_each(|c| *c = (*c + alpha) / total);
        }
    }
    CptSet(t)
}

/// Adds `weight` to the cell `(parent configuration, own state)` of every variable.
pub fn accumulate_counts(net: &Network, assignment: &[u16], out: &mut CountSet, weight: f64) {
    for v in 0..net.num_vars() {
        let k = net.cardinality(v);
        let cell = net.row_index(v, assignment) * k + usize::from(assignment[v]);
        out.0.data[v][cell] += weight;
    }
}

/// Distribution of `v` given its Markov blanket in `assignment` (the value
/// at `v` itself is ignored).
pub fn full_conditional(net: &Network, cpts: &CptSet, v: usize, assignment: &[u16]) -> Result<Vec<f64>> {
    let k = net.cardinality(v);
    let mut probs = Vec::with_capacity(k);
    let mut scratch = assignment.to_vec();
    for s in 0..k {
        scratch[v] = s as u16;
        let mut w = cpts.row(v, net.row_index(v, &scratch))[s];
        for &c in net.children_of(v)? {
            w *= cpts.row(c, net.row_index(c, &scratch))[usize::from(scratch[c])];
        }
        probs.push(w);
    }
    let total: f64 = probs.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::ZeroSupport { var: v });
    }
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

/// Precomputed Markov-blanket offsets for fast repeated full conditionals.
#[derive(Clone, Debug)]
pub struct BlanketIndex {
    vars: Vec<VarBlanket>,
}

#[derive(Clone, Debug)]
struct VarBlanket {
    card: usize,
    parents: Vec<(usize, usize)>,
    /// `(child, stride of this variable in the child's row index)`
    children: Vec<(usize, usize)>,
}

impl BlanketIndex {
    pub fn new(net: &Network) -> Self {
        let strides: Vec<Vec<usize>> = (0..net.num_vars()).map(|v| net.parent_strides(v)).collect();
        let vars = (0..net.num_vars())
            .map(|v| VarBlanket {
                card: net.cardinality(v),
                parents: net.parents(v).iter().copied().zip(strides[v].iter().copied()).collect(),
                children: net
                    .children_of(v)
                    .expect("in range")
                    .iter()
                    .map(|&c| {
                        let j = net.parents(c).iter().position(|&p| p == v).expect("v is a parent of c");
                        (c, strides[c][j])
                    })
                    .collect(),
            })
            .collect();
        BlanketIndex { vars }
    }

    #[inline]
    fn row(&self, v: usize, assignment: &[u16]) -> usize {
        self.vars[v].parents.iter().map(|&(p, s)| usize::from(assignment[p]) * s).sum()
    }

    /// Unnormalized full-conditional weights of `v` written to `out`;
    /// returns their sum.
    #[inline]
    pub fn weights(&self, cpts: &CptSet, v: usize, assignment: &[u16], out: &mut SmallVec<[f64; 8]>) -> f64 {
        let vb = &self.vars[v];
        let k = vb.card;
        out.clear();
        out.extend_from_slice(cpts.row(v, self.row(v, assignment)));
        for &(c, stride) in &vb.children {
            let kc = self.vars[c].card;
            let base = self.row(c, assignment) - usize::from(assignment[v]) * stride;
            let ac = usize::from(assignment[c]);
            let table = cpts.table(c);
            for (s, w) in out.iter_mut().enumerate().take(k) {
                *w *= table[(base + s * stride) * kc + ac];
            }
        }
        out.iter().sum()
    }

    /// Draws from `v`'s CPT row given the (already set) parents in `assignment`.
    #[inline]
    pub fn prior_row<'a>(&self, cpts: &'a CptSet, v: usize, assignment: &[u16]) -> &'a [f64] {
        cpts.row(v, self.row(v, assignment))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::tests::{arb_dag, koller};
    use proptest::prelude::*;

    fn assert_normalized(c: &CptSet) {
        for row in c.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn init_is_normalized_and_deterministic() {
        let net = koller();
        let a = init_cpts(&net, 5.into());
        assert_normalized(&a);
        assert_eq!(a, init_cpts(&net, 5.into()));
        assert_ne!(a, init_cpts(&net, 6.into()));
        assert!(a.matches(&net));
    }

    #[test]
    fn init_root_row_mean_is_half() {
        let net = Network::build(&[2], &[]).unwrap();
        let n = 10_000;
        let mean: f64 = (0..n).map(|s| init_cpts(&net, StreamKey::new(s)).row(0, 0)[0]).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    fn counts_with(net: &Network, v: usize, row: usize, values: &[f64]) -> CountSet {
        let mut c = CountSet::zeros(net);
        let k = net.cardinality(v);
        c.table_mut(v)[row * k..(row + 1) * k].copy_from_slice(values);
        c
    }

    #[test]
    fn sample_cpts_zero_counts_has_prior_mean() {
        let net = Network::build(&[3], &[]).unwrap();
        let counts = CountSet::zeros(&net);
        let prior = DirichletPrior::default();
        let n = 20_000;
        let mut mean = [0.0; 3];
        for s in 0..n {
            let c = sample_cpts(&counts, &prior, StreamKey::new(s));
            for (m, p) in mean.iter_mut().zip(c.row(0, 0)) {
                *m += p / n as f64;
            }
        }
        for m in mean {
            assert!((m - 1.0 / 3.0).abs() < 0.01, "{mean:?}");
        }
    }

    #[test]
    fn sample_cpts_concentrates_on_counts() {
        let net = Network::build(&[2], &[]).unwrap();
        let prior = DirichletPrior::default();
        let big = counts_with(&net, 0, 0, &[1e6, 1e6]);
        let c = sample_cpts(&big, &prior, 1.into());
        assert!((c.row(0, 0)[0] - 0.5).abs() < 0.01);

        let skew = counts_with(&net, 0, 0, &[900.0, 100.0]);
        let n = 2_000;
        let mean: f64 =
            (0..n).map(|s| sample_cpts(&skew, &prior, StreamKey::new(s)).row(0, 0)[0]).sum::<f64>() / n as f64;
        // (900 + 1) / (1000 + 2)
        assert!((mean - 901.0 / 1002.0).abs() < 0.03);
        assert!((mean - 0.9).abs() < 0.03);
    }

    #[test]
    fn sample_cpts_tiny_alpha_stays_finite() {
        let net = Network::build(&[4], &[]).unwrap();
        let prior = DirichletPrior::symmetric(1e-12);
        for s in 0..100 {
            let c = sample_cpts(&CountSet::zeros(&net), &prior, StreamKey::new(s));
            assert_normalized(&c);
        }
    }

    #[test]
    fn variance_shrinks_as_counts_grow() {
        let net = Network::build(&[2], &[]).unwrap();
        let prior = DirichletPrior::default();
        let var_at = |t: f64| {
            let counts = counts_with(&net, 0, 0, &[30.0 * t, 70.0 * t]);
            let xs: Vec<f64> =
                (0..2000).map(|s| sample_cpts(&counts, &prior, StreamKey::new(s)).row(0, 0)[0]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
        };
        let v = [var_at(1.0), var_at(4.0), var_at(16.0)];
        assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
    }

    #[test]
    fn posterior_mean_matches_formula() {
        let net = Network::build(&[2], &[]).unwrap();
        let c = posterior_mean(&counts_with(&net, 0, 0, &[900.0, 100.0]), &DirichletPrior::default());
        assert!((c.row(0, 0)[0] - 901.0 / 1002.0).abs() < 1e-15);
    }

    #[test]
    fn accumulate_examples() {
        let net = koller();
        let mut counts = CountSet::zeros(&net);
        let case = [1u16, 0, 1, 2, 0];
        accumulate_counts(&net, &case, &mut counts, 1.0);
        assert_eq!(counts.entries().filter(|&c| c > 0.0).count(), 5);
        accumulate_counts(&net, &case, &mut counts, 1.0);
        assert_eq!(counts.entries().filter(|&c| c > 0.0).count(), 5);
        assert!(counts.entries().all(|c| c == 0.0 || c == 2.0));
        assert_eq!(counts.row(3, 2), &[0.0, 0.0, 2.0]);
        for v in 0..5 {
            assert_eq!(counts.total(v), 2.0);
        }
    }

    #[test]
    fn moving_algebra_on_counts() {
        let net = koller();
        let mut a = CountSet::zeros(&net);
        accumulate_counts(&net, &[0, 0, 0, 0, 0], &mut a, 3.0);
        let mut total = a.clone();
        total.add(&a);
        total.sub(&a);
        assert_eq!(total, a);
        total.scale(0.5);
        assert_eq!(total.total(0), 1.5);
    }

    #[test]
    fn full_conditional_examples() {
        let iso = Network::build(&[2], &[]).unwrap();
        let cpts = CptSet::from_tables(&iso, vec![vec![0.3, 0.7]]).unwrap();
        let p = full_conditional(&iso, &cpts, 0, &[0]).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-15 && (p[1] - 0.7).abs() < 1e-15);

        let net = koller();
        let uni = CptSet::uniform(&net);
        for v in 0..5 {
            let p = full_conditional(&net, &uni, v, &[1, 1, 0, 2, 1]).unwrap();
            assert!(p.iter().all(|x| (x - 1.0 / p.len() as f64).abs() < 1e-12));
        }

        // 0 -> 1 with X1 = 1 observed: posterior over X0 from the 2x2 joint.
        let pair = Network::build(&[2, 2], &[(0, 1)]).unwrap();
        let cpts = CptSet::from_tables(&pair, vec![vec![0.3, 0.7], vec![0.9, 0.1, 0.4, 0.6]]).unwrap();
        let joint = [[0.3 * 0.9, 0.3 * 0.1], [0.7 * 0.4, 0.7 * 0.6]];
        let z = joint[0][1] + joint[1][1];
        let p = full_conditional(&pair, &cpts, 0, &[0, 1]).unwrap();
        assert!((p[0] - joint[0][1] / z).abs() < 1e-12);
        assert!((p[1] - joint[1][1] / z).abs() < 1e-12);
    }

    #[test]
    fn zero_support_is_an_error() {
        let pair = Network::build(&[2, 2], &[(0, 1)]).unwrap();
        let cpts = CptSet::from_tables(&pair, vec![vec![0.5, 0.5], vec![1.0, 0.0, 1.0, 0.0]]).unwrap();
        assert!(matches!(full_conditional(&pair, &cpts, 0, &[0, 1]), Err(Error::ZeroSupport { var: 0 })));
    }

    #[test]
    fn from_tables_validates() {
        let iso = Network::build(&[2], &[]).unwrap();
        assert!(CptSet::from_tables(&iso, vec![vec![0.3, 0.6]]).is_err());
        assert!(CptSet::from_tables(&iso, vec![vec![0.3, 0.7, 0.0]]).is_err());
        assert!(CptSet::from_tables(&iso, vec![]).is_err());
    }

    proptest! {
        #[test]
        fn blanket_index_matches_full_conditional(net in arb_dag(6), seed in any::<u64>()) {
            let cpts = init_cpts(&net, StreamKey::new(seed));
            let index = BlanketIndex::new(&net);
            let key = StreamKey::new(seed ^ 1);
            let assignment: Vec<u16> = (0..net.num_vars())
                .map(|v| (key.child(v as u64).bits() % net.cardinality(v) as u64) as u16)
                .collect();
            let mut buf = SmallVec::new();
            for v in 0..net.num_vars() {
                let exact = full_conditional(&net, &cpts, v, &assignment).unwrap();
                let total = index.weights(&cpts, v, &assignment, &mut buf);
                for (a, b) in exact.iter().zip(&buf) {
                    prop_assert!((a - b / total).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn sampled_rows_are_normalized(net in arb_dag(6), seed in any::<u64>(), alpha in 0.01f64..5.0) {
            let init = init_cpts(&net, StreamKey::new(seed));
            let mut counts = CountSet::zeros(&net);
            let a: Vec<u16> = vec![0; net.num_vars()];
            accumulate_counts(&net, &a, &mut counts, 7.0);
            let c = sample_cpts(&counts, &DirichletPrior::symmetric(alpha), StreamKey::new(seed));
            for row in init.rows().chain(c.rows()) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            for v in 0..net.num_vars() {
                prop_assert!((counts.total(v) - 7.0).abs() < 1e-12);
            }
        }
    }
}
