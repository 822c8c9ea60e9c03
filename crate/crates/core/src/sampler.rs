//! The SAME Gibbs engine.
//!
//! For every minibatch the engine forms `m` replicas of the cases (observed
//! cells shared, latent cells independent), resamples every latent cell from
//! its full conditional with a chromatic sweep, tallies the resulting
//! complete assignments into counts, folds those into a running total and
//! redraws the CPTs from `Dirichlet(total + alpha)`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::data::{Minibatch, MinibatchSource, MISSING};
use crate::error::{Error, Result};
use crate::metrics::kl_avg;
use crate::model::{init_cpts, posterior_mean, sample_cpts, BlanketIndex, CountSet, CptSet, DirichletPrior};
use crate::network::{color_graph, moralize, Coloring, Network};
use crate::rng::{pick, StreamKey};

/// Units (replica-cases) per count-reduction chunk. Fixed so that the
/// reduction order never depends on the worker count.
const REDUCE_CHUNK: usize = 256;

/// Piecewise-constant SAME replication schedule: `(m, passes)` segments, the
/// last one extending indefinitely.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MSchedule(Vec<(usize, usize)>);

impl MSchedule {
    pub fn constant(m: usize) -> Self {
        MSchedule(vec![(m, 1)])
    }

    pub fn piecewise(segments: Vec<(usize, usize)>) -> Result<Self> {
        let s = MSchedule(segments);
        s.validate()?;
        Ok(s)
    }

    pub fn segments(&self) -> &[(usize, usize)] {
        &self.0
    }

    fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidConfig("SAME schedule is empty".into()));
        }
        if self.0.iter().any(|&(m, passes)| m == 0 || passes == 0) {
            return Err(Error::InvalidConfig("SAME schedule needs m >= 1 and passes >= 1 per segment".into()));
        }
        Ok(())
    }

    pub fn max_m(&self) -> usize {
        self.0.iter().map(|s| s.0).max().unwrap_or(1)
    }
}

impl std::str::FromStr for MSchedule {
    type Err = Error;

    /// Parses `"5"` or `"1x50,5x150"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("cannot parse SAME schedule `{s}`"));
        let segments = s
            .split(',')
            .map(|part| {
                let part = part.trim();
                match part.split_once(['x', '*']) {
                    Some((m, p)) => Ok((m.trim().parse().map_err(|_| bad())?, p.trim().parse().map_err(|_| bad())?)),
                    None => Ok((part.parse().map_err(|_| bad())?, 1)),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::piecewise(segments)
    }
}

/// Replication factor for a 0-based pass.
pub fn anneal_m(schedule: &MSchedule, pass: usize) -> usize {
    let mut start = 0;
    for &(m, passes) in &schedule.0 {
        if pass < start + passes {
            return m;
        }
        start += passes;
    }
    schedule.0.last().map_or(1, |s| s.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumulatorMode {
    /// Exact sum over the last visit of every minibatch; keeps per-minibatch
    /// counts and latent state.
    MovingSum,
    /// `total <- decay * total + new`; memory independent of data size.
    Exponential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub same_m: MSchedule,
    pub minibatch_size: usize,
    pub num_passes: usize,
    pub prior: DirichletPrior,
    pub accumulator: AccumulatorMode,
    /// Decay for exponential mode. Defaults to `M / (M + 1)` for `M`
    /// minibatches, which keeps the total near one pass worth of counts.
    pub exp_decay: Option<f64>,
    pub sweeps_per_minibatch: usize,
    /// Use posterior means instead of Dirichlet draws for the CPT update.
    pub map_estimate: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            same_m: MSchedule::constant(1),
            minibatch_size: 12_500,
            num_passes: 200,
            prior: DirichletPrior::default(),
            accumulator: AccumulatorMode::MovingSum,
            exp_decay: None,
            sweeps_per_minibatch: 1,
            map_estimate: false,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.same_m.validate()?;
        self.prior.validate()?;
        if self.minibatch_size == 0 {
            return Err(Error::InvalidConfig("minibatch size must be at least 1".into()));
        }
        if self.sweeps_per_minibatch == 0 {
            return Err(Error::InvalidConfig("sweeps per minibatch must be at least 1".into()));
        }
        if let Some(rho) = self.exp_decay {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::InvalidConfig(format!("exponential decay {rho} not in (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 1-based pass number.
    pub pass: usize,
    /// Wall time since the start of the run.
    pub seconds: f64,
    pub pass_seconds: f64,
    pub kl_avg: Option<f64>,
    /// Cell visits this pass: variables x cases x m x sweeps.
    pub vars_sampled: u64,
}

impl TraceRecord {
    pub fn vars_per_sec(&self) -> Option<f64> {
        (self.pass_seconds > 0.0).then(|| self.vars_sampled as f64 / self.pass_seconds)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub const CSV_HEADER: &'static str = "pass,seconds,kl_avg,vars_per_sec";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            let kl = r.kl_avg.map(|k| format!("{k:e}")).unwrap_or_default();
            let vps = r.vars_per_sec().map(|v| format!("{v:.1}")).unwrap_or_default();
            writeln!(w, "{},{:.6},{},{}", r.pass, r.seconds, kl, vps)?;
        }
        w.flush()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

/// `m` copies of a minibatch. `states` holds complete assignments laid out
/// replica-major: unit `r * size + case`, `num_vars` cells per unit.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicatedMinibatch {
    pub id: usize,
    pub first_case: usize,
    pub num_vars: usize,
    pub size: usize,
    pub real_cases: usize,
    pub m: usize,
    observed: Vec<u16>,
    pub states: Vec<u16>,
}

impl ReplicatedMinibatch {
    pub fn unit(&self, replica: usize, case: usize) -> &[u16] {
        let u = replica * self.size + case;
        &self.states[u * self.num_vars..(u + 1) * self.num_vars]
    }

    pub fn is_observed(&self, case: usize, v: usize) -> bool {
        self.observed[case * self.num_vars + v] != MISSING
    }

    pub fn observed(&self) -> &[u16] {
        &self.observed
    }

    pub fn weight(&self, case: usize) -> f64 {
        if case < self.real_cases {
            1.0
        } else {
            0.0
        }
    }

    pub fn num_units(&self) -> usize {
        self.m * self.size
    }

    pub fn bytes(&self) -> usize {
        (self.states.len() + self.observed.len()) * std::mem::size_of::<u16>()
    }

    /// Fills every latent cell uniformly at random.
    pub fn init_uniform(&mut self, net: &Network, key: StreamKey) {
        let (n, size, first) = (self.num_vars, self.size, self.first_case);
        for (u, unit) in self.states.chunks_mut(n).enumerate() {
            let (r, c) = (u / size, u % size);
            let k = key.child(r as u64).child((first + c) as u64);
            for (v, cell) in unit.iter_mut().enumerate() {
                if self.observed[c * n + v] == MISSING {
                    *cell = (k.child(v as u64).uniform() * net.cardinality(v) as f64) as u16;
                }
            }
        }
    }

    /// Fills latent cells by ancestral sampling from `cpts`, conditioning on
    /// whatever parents are observed or already drawn.
    pub fn init_ancestral(&mut self, net: &Network, blanket: &BlanketIndex, cpts: &CptSet, key: StreamKey) {
        let (n, size, first) = (self.num_vars, self.size, self.first_case);
        let observed = &self.observed;
        self.states.par_chunks_mut(n).enumerate().for_each(|(u, unit)| {
            let (r, c) = (u / size, u % size);
            let k = key.child(r as u64).child((first + c) as u64);
            for &v in net.topo_order() {
                if observed[c * n + v] == MISSING {
                    let row = blanket.prior_row(cpts, v, unit);
                    unit[v] = pick(row, 1.0, k.child(v as u64).uniform()) as u16;
                }
            }
        });
    }
}

/// Forms `m` case-copies of `mb`. Observed cells are shared; latent cells
/// are left as [`MISSING`] until initialized.
pub fn replicate_minibatch(mb: &Minibatch, m: usize) -> ReplicatedMinibatch {
    assert!(m >= 1, "replication factor must be at least 1");
    let mut states = Vec::with_capacity(mb.cells.len() * m);
    for _ in 0..m {
        states.extend_from_slice(&mb.cells);
    }
    ReplicatedMinibatch {
        id: mb.id,
        first_case: mb.first_case,
        num_vars: mb.num_vars,
        size: mb.size(),
        real_cases: mb.real_cases,
        m,
        observed: mb.cells.clone(),
        states,
    }
}

/// Resamples every latent cell of every replica once, color group by color
/// group, and returns the counts of the resulting complete assignments
/// (observed and latent cells, every replica, weighted by case weight).
pub fn sweep(
    net: &Network,
    blanket: &BlanketIndex,
    coloring: &Coloring,
    cpts: &CptSet,
    rep: &mut ReplicatedMinibatch,
    key: StreamKey,
) -> Result<CountSet> {
    let (n, size, first) = (rep.num_vars, rep.size, rep.first_case);
    {
        let observed = &rep.observed;
        let mut units: Vec<&mut [u16]> = rep.states.chunks_mut(n).collect();
        coloring.visit(&mut units, |u, unit, v| {
            let c = u % size;
            if observed[c * n + v] != MISSING {
                return Ok(());
            }
            let mut weights: SmallVec<[f64; 8]> = SmallVec::new();
            let total = blanket.weights(cpts, v, unit, &mut weights);
            if total.is_nan() || total <= 0.0 {
                return Err(Error::ZeroSupport { var: v });
            }
            let cell = key.child((u / size) as u64).child((first + c) as u64).child(v as u64);
            unit[v] = pick(&weights, total, cell.uniform()) as u16;
            Ok(())
        })?;
    }
    Ok(tally(net, rep))
}

/// Deterministic chunked count reduction over all units of `rep`.
fn tally(net: &Network, rep: &ReplicatedMinibatch) -> CountSet {
    let n = rep.num_vars;
    let partials: Vec<CountSet> = rep
        .states
        .par_chunks(n * REDUCE_CHUNK)
        .enumerate()
        .map(|(chunk, units)| {
            let mut counts = CountSet::zeros(net);
            for (i, unit) in units.chunks(n).enumerate() {
                let w = rep.weight((chunk * REDUCE_CHUNK + i) % rep.size);
                if w > 0.0 {
                    crate::model::accumulate_counts(net, unit, &mut counts, w);
                }
            }
            counts
        })
        .collect();
    let mut total = CountSet::zeros(net);
    for p in &partials {
        total.add(p);
    }
    total
}

#[derive(Clone, Debug)]
struct LatentSlot {
    m: usize,
    states: Vec<u16>,
}

/// Mutable engine state between minibatches.
#[derive(Clone, Debug)]
pub struct SamplerState {
    pub mode: AccumulatorMode,
    pub total_counts: CountSet,
    per_minibatch_counts: Vec<Option<CountSet>>,
    latent: Vec<Option<LatentSlot>>,
    pub current_cpts: CptSet,
    /// 0-based pass being processed.
    pub pass: usize,
    /// Minibatches processed so far in the current pass.
    pub minibatch: usize,
    peak_minibatch_bytes: usize,
}

/// Bytes held by the engine, by category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    /// Current CPTs plus the running count total.
    pub model_bytes: usize,
    /// Stored per-minibatch counts (moving-sum mode only).
    pub accumulator_bytes: usize,
    /// Peak size of one replicated minibatch buffer.
    pub minibatch_bytes: usize,
    /// Persisted latent assignments (moving-sum mode only).
    pub latent_bytes: usize,
}

impl SamplerState {
    pub fn new(net: &Network, cpts: CptSet, mode: AccumulatorMode) -> Self {
        SamplerState {
            mode,
            total_counts: CountSet::zeros(net),
            per_minibatch_counts: Vec::new(),
            latent: Vec::new(),
            current_cpts: cpts,
            pass: 0,
            minibatch: 0,
            peak_minibatch_bytes: 0,
        }
    }

    pub fn per_minibatch_counts(&self, id: usize) -> Option<&CountSet> {
        self.per_minibatch_counts.get(id).and_then(Option::as_ref)
    }

    /// Largest relative gap between the total and the sum of stored
    /// per-minibatch counts.
    pub fn moving_sum_residual(&self) -> f64 {
        let mut sum: Option<CountSet> = None;
        for c in self.per_minibatch_counts.iter().flatten() {
            match sum.as_mut() {
                Some(s) => s.add(c),
                None => sum = Some(c.clone()),
            }
        }
        let Some(sum) = sum else { return 0.0 };
        let scale = sum.entries().fold(1.0, f64::max);
        sum.entries().zip(self.total_counts.entries()).map(|(a, b)| (a - b).abs() / scale).fold(0.0, f64::max)
    }

    pub fn memory(&self) -> MemoryReport {
        MemoryReport {
            model_bytes: self.current_cpts.bytes() + self.total_counts.bytes(),
            accumulator_bytes: self.per_minibatch_counts.iter().flatten().map(CountSet::bytes).sum(),
            minibatch_bytes: self.peak_minibatch_bytes,
            latent_bytes: self.latent.iter().flatten().map(|s| s.states.len() * 2).sum(),
        }
    }
}

/// Replaces minibatch `id`'s previous contribution to the total with `new_counts`.
pub fn update_moving_sum(state: &mut SamplerState, id: usize, new_counts: CountSet) {
    if state.per_minibatch_counts.len() <= id {
        state.per_minibatch_counts.resize(id + 1, None);
    }
    if let Some(old) = &state.per_minibatch_counts[id] {
        state.total_counts.sub(old);
    }
    state.total_counts.add(&new_counts);
    state.per_minibatch_counts[id] = Some(new_counts);
}

/// `total <- decay * total + new_counts`.
pub fn update_exponential(state: &mut SamplerState, new_counts: &CountSet, decay: f64) {
    state.total_counts.scale(decay);
    state.total_counts.add(new_counts);
}

pub struct RunOutput {
    pub cpts: CptSet,
    pub trace: Trace,
    pub memory: MemoryReport,
}

/// A configured engine for one network.
pub struct Sampler {
    net: Network,
    blanket: BlanketIndex,
    coloring: Coloring,
    cfg: SamplerConfig,
}

impl Sampler {
    pub fn new(net: Network, cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let coloring = color_graph(&moralize(&net));
        let blanket = BlanketIndex::new(&net);
        Ok(Sampler { net, blanket, coloring, cfg })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn coloring(&self) -> &Coloring {
        &self.coloring
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn initial_cpts(&self) -> CptSet {
        init_cpts(&self.net, StreamKey::named(self.cfg.seed, "init-cpts"))
    }

    pub fn run<S: MinibatchSource + ?Sized>(&self, source: &mut S, truth: Option<&CptSet>) -> Result<RunOutput> {
        self.run_with(source, truth, |_, _| {})
    }

    /// Runs all passes, calling `observer` at the end of every pass.
    pub fn run_with<S, F>(&self, source: &mut S, truth: Option<&CptSet>, mut observer: F) -> Result<RunOutput>
    where
        S: MinibatchSource + ?Sized,
        F: FnMut(&SamplerState, &TraceRecord),
    {
        let net = &self.net;
        let cfg = &self.cfg;
        if source.num_vars() != net.num_vars() {
            return Err(Error::DimensionMismatch(format!(
                "data has {} variables, network has {}",
                source.num_vars(),
                net.num_vars()
            )));
        }
        if source.num_cases() == 0 {
            return Err(Error::EmptyData);
        }
        if let Some(t) = truth {
            if !t.matches(net) {
                return Err(Error::ShapeMismatch("reference CPTs do not match the network".into()));
            }
        }
        let num_mb = source.num_minibatches(cfg.minibatch_size);
        let decay = cfg.exp_decay.unwrap_or(num_mb as f64 / (num_mb as f64 + 1.0));

        let mut state = SamplerState::new(net, self.initial_cpts(), cfg.accumulator);
        let mut trace = Trace::default();
        let started = Instant::now();
        let sweep_root = StreamKey::named(cfg.seed, "sweep");
        let init_root = StreamKey::named(cfg.seed, "latent-init");
        let cpt_root = StreamKey::named(cfg.seed, "cpts");

        for pass in 0..cfg.num_passes {
            let pass_started = Instant::now();
            let m = anneal_m(&cfg.same_m, pass);
            state.pass = pass;
            state.minibatch = 0;
            let mut vars_sampled = 0u64;
            source.rewind()?;
            while let Some(mb) = source.next_minibatch(cfg.minibatch_size)? {
                check_minibatch(net, &mb)?;
                let mut rep = replicate_minibatch(&mb, m);
                drop(mb);
                match cfg.accumulator {
                    AccumulatorMode::MovingSum => self.restore_latent(&mut state, &mut rep, init_root),
                    AccumulatorMode::Exponential => rep.init_ancestral(
                        net,
                        &self.blanket,
                        &state.current_cpts,
                        init_root.child(pass as u64).child(rep.id as u64),
                    ),
                }
                state.peak_minibatch_bytes = state.peak_minibatch_bytes.max(rep.bytes());

                let mut counts = None;
                for s in 0..cfg.sweeps_per_minibatch {
                    let key = sweep_root.child(pass as u64).child(rep.id as u64).child(s as u64);
                    counts = Some(sweep(net, &self.blanket, &self.coloring, &state.current_cpts, &mut rep, key)?);
                }
                let counts = counts.expect("at least one sweep");
                vars_sampled += (net.num_vars() * rep.real_cases * m * cfg.sweeps_per_minibatch) as u64;

                match cfg.accumulator {
                    AccumulatorMode::MovingSum => {
                        let id = rep.id;
                        store_latent(&mut state, rep);
                        update_moving_sum(&mut state, id, counts);
                    }
                    AccumulatorMode::Exponential => update_exponential(&mut state, &counts, decay),
                }
                state.current_cpts = if cfg.map_estimate {
                    posterior_mean(&state.total_counts, &cfg.prior)
                } else {
                    sample_cpts(
                        &state.total_counts,
                        &cfg.prior,
                        cpt_root.child(pass as u64).child(state.minibatch as u64),
                    )
                };
                state.minibatch += 1;
            }
            let record = TraceRecord {
                pass: pass + 1,
                seconds: started.elapsed().as_secs_f64(),
                pass_seconds: pass_started.elapsed().as_secs_f64(),
                kl_avg: truth.map(|t| kl_avg(t, &state.current_cpts)).transpose()?,
                vars_sampled,
            };
            observer(&state, &record);
            trace.records.push(record);
        }
        Ok(RunOutput { memory: state.memory(), cpts: state.current_cpts, trace })
    }

    /// Loads minibatch `rep.id`'s persisted latent state, adapting to a
    /// changed replication factor, or initializes it on first visit.
    fn restore_latent(&self, state: &mut SamplerState, rep: &mut ReplicatedMinibatch, init_root: StreamKey) {
        let slot = state.latent.get_mut(rep.id).and_then(Option::take);
        match slot {
            Some(slot) if slot.states.len() == slot.m * rep.size * rep.num_vars => {
                let per_replica = rep.size * rep.num_vars;
                for r in 0..rep.m {
                    // new replicas start from an existing chain
                    let src = r % slot.m;
                    rep.states[r * per_replica..(r + 1) * per_replica]
                        .copy_from_slice(&slot.states[src * per_replica..(src + 1) * per_replica]);
                }
            }
            _ => rep.init_uniform(&self.net, init_root.child(rep.id as u64)),
        }
    }
}

fn store_latent(state: &mut SamplerState, rep: ReplicatedMinibatch) {
    if state.latent.len() <= rep.id {
        state.latent.resize(rep.id + 1, None);
    }
    state.latent[rep.id] = Some(LatentSlot { m: rep.m, states: rep.states });
}

fn check_minibatch(net: &Network, mb: &Minibatch) -> Result<()> {
    let n = net.num_vars();
    for (i, &s) in mb.cells.iter().enumerate() {
        let v = i % n;
        if s != MISSING && usize::from(s) >= net.cardinality(v) {
            return Err(Error::DimensionMismatch(format!(
                "case {}: state {s} of variable {v} exceeds cardinality {}",
                mb.first_case + i / n,
                net.cardinality(v)
            )));
        }
    }
    Ok(())
}
