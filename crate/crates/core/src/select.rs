//! Greedy, budget-limited selection of the Fourier coefficients to store.
//!
//! Work happens on mesh vertices: a vertex stands for its lowest-index pixel,
//! and storing a vertex at frequency `k` stores that pixel's coefficient.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::condgp::{
    conditional_expectation_with, conditional_loglik_with, marginal_loglik, maximize_log_kappa, CoherenceParams,
    FrequencyPartition,
};
use crate::gridio::{chordal_distance, Grid};
use crate::spde::{PrecisionOperator, SphereMesh};
use crate::spectral::{is_real_frequency, SpectralField};
use crate::specmodel::FittedSpectra;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Sequential,
    Distributed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    pub ratio: f64,
    pub batch_size: usize,
    pub reestimations: usize,
    pub d_min: f64,
    pub seed_strides: (usize, usize),
    pub variant: Variant,
    /// Also keep new picks `d_min` away from coefficients stored earlier.
    pub d_min_across_batches: bool,
}

impl SelectionConfig {
    pub fn sequential(ratio: f64) -> Self {
        Self {
            ratio,
            batch_size: 50,
            reestimations: 8,
            d_min: 0.05,
            seed_strides: (2, 4),
            variant: Variant::Sequential,
            d_min_across_batches: false,
        }
    }

    pub fn distributed(ratio: f64) -> Self {
        Self {
            batch_size: 7049,
            variant: Variant::Distributed,
            ..Self::sequential(ratio)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio.is_finite()) {
            return Err(Error::InvalidParameter(format!("ratio must be positive, got {}", self.ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        if !(self.d_min >= 0.0) {
            return Err(Error::InvalidParameter("d_min must be non-negative".into()));
        }
        if self.seed_strides.0 == 0 || self.seed_strides.1 == 0 {
            return Err(Error::InvalidParameter("seed strides must be at least 1".into()));
        }
        Ok(())
    }
}

/// Budget in 32-bit numbers, with the index cost estimated at a fixed number
/// of bits per stored pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetReport {
    pub total_numbers: f64,
    pub model_burden: f64,
    pub remaining: f64,
    pub index_bits_per_pair: f64,
}

impl BudgetReport {
    /// Whether `real` single and `complex` double coefficients fit.
    pub fn fits(&self, real: usize, complex: usize) -> bool {
        let pairs = (real + complex) as f64;
        real as f64 + 2.0 * complex as f64 + pairs * self.index_bits_per_pair / 32.0 <= self.remaining
    }
}

pub fn compute_budget(ratio: f64, n_pixels: usize, n_time: usize, index_bits_per_pair: f64) -> Result<BudgetReport> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidParameter(format!("ratio must be positive, got {ratio}")));
    }
    let total = (n_pixels * n_time) as f64 / ratio;
    let burden = 3.0 + 3.0 * n_pixels as f64 + (5 * n_time).div_ceil(2) as f64;
    if burden > total {
        return Err(Error::BudgetInfeasible {
            needed: burden,
            available: total,
        });
    }
    Ok(BudgetReport {
        total_numbers: total,
        model_burden: burden,
        remaining: total - burden,
        index_bits_per_pair,
    })
}

/// Pixels on every `strides.0`-th row and `strides.1`-th column.
pub fn seed_grid(grid: &Grid, strides: (usize, usize)) -> Vec<usize> {
    let (sr, sc) = (strides.0.max(1), strides.1.max(1));
    let mut out = Vec::new();
    for r in (0..grid.n_lat()).step_by(sr) {
        for c in (0..grid.n_lon()).step_by(sc) {
            out.push(grid.pixel(r, c));
        }
    }
    out
}

/// Up to `m` unstored candidates in decreasing score, each at least `d_min`
/// from every candidate already taken (and from `avoid`). Ties go to the
/// lower index.
pub fn pick_batch(
    scores: &[f64],
    unstored: &[usize],
    coords: &[[f64; 3]],
    m: usize,
    d_min: f64,
    avoid: &[usize],
) -> Vec<usize> {
    let mut order: Vec<usize> = unstored.to_vec();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut taken: Vec<usize> = Vec::with_capacity(m.min(order.len()));
    for v in order {
        if taken.len() >= m {
            break;
        }
        let clear = |others: &[usize]| others.iter().all(|&t| chordal_distance(&coords[t], &coords[v]) >= d_min);
        if d_min > 0.0 && (!clear(&taken) || !clear(avoid)) {
            continue;
        }
        taken.push(v);
    }
    taken
}

/// Largest-remainder split of `m` proportional to `scores`, skipping
/// frequencies whose `capacity` is zero and capping each share at its
/// capacity; the excess is split again among the rest.
pub fn allocate_m_k(scores: &[f64], m: usize, capacity: Option<&[usize]>) -> Result<Vec<usize>> {
    let cap: Vec<usize> = match capacity {
        Some(c) => c.to_vec(),
        None => vec![usize::MAX; scores.len()],
    };
    let mut alloc = vec![0usize; scores.len()];
    let mut remaining = m;
    let mut open: Vec<bool> = scores.iter().zip(&cap).map(|(&d, &c)| d > 0.0 && c > 0).collect();
    if !open.iter().any(|&o| o) {
        return Err(Error::Degenerate("all selection scores are zero".into()));
    }
    while remaining > 0 && open.iter().any(|&o| o) {
        let total: f64 = scores.iter().zip(&open).filter(|(_, &o)| o).map(|(d, _)| d).sum();
        let mut shares: Vec<(usize, f64)> = Vec::new();
        let mut given = 0usize;
        for k in 0..scores.len() {
            if !open[k] {
                continue;
            }
            let exact = scores[k] / total * remaining as f64;
            let base = exact.floor() as usize;
            alloc[k] += base;
            given += base;
            shares.push((k, exact - base as f64));
        }
        shares.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(k, _) in shares.iter().take(remaining - given) {
            alloc[k] += 1;
        }
        // clip to capacity and hand the excess out again
        remaining = 0;
        for k in 0..scores.len() {
            if alloc[k] >= cap[k] {
                remaining += alloc[k] - cap[k];
                alloc[k] = cap[k];
                open[k] = false;
            }
        }
    }
    Ok(alloc)
}

/// Bytes of a base-128 varint.
#[inline]
pub fn varint_len(mut v: u64) -> usize {
    let mut n = 1;
    while v >= 0x80 {
        v >>= 7;
        n += 1;
    }
    n
}

/// Exact byte accounting for the stored pairs: value bytes plus the
/// delta/varint index stream, kept under a fixed capacity.
#[derive(Debug, Clone)]
pub struct ByteBudget {
    capacity: usize,
    used: usize,
    index_bytes: usize,
    keys: BTreeSet<u64>,
}

impl ByteBudget {
    /// `fixed` bytes (header and model) are charged up front.
    pub fn new(capacity: usize, fixed: usize) -> Result<Self> {
        if fixed > capacity {
            return Err(Error::BudgetInfeasible {
                needed: fixed as f64 / 4.0,
                available: capacity as f64 / 4.0,
            });
        }
        Ok(Self {
            capacity,
            used: fixed,
            index_bytes: 0,
            keys: BTreeSet::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn index_bytes(&self) -> usize {
        self.index_bytes
    }

    pub fn n_pairs(&self) -> usize {
        self.keys.len()
    }

    /// Change in index bytes from inserting `key`.
    pub fn index_cost(&self, key: u64) -> usize {
        let pred = self.keys.range(..key).next_back().copied().unwrap_or(0);
        let head = varint_len(key - pred);
        match self.keys.range(key + 1..).next() {
            Some(&succ) => head + varint_len(succ - key) - varint_len(succ - pred),
            None => head,
        }
    }

    /// Adds `key` with `value_bytes` of payload if it fits.
    pub fn try_add(&mut self, key: u64, value_bytes: usize) -> bool {
        if self.keys.contains(&key) {
            return false;
        }
        let idx = self.index_cost(key);
        if self.used + idx + value_bytes > self.capacity {
            return false;
        }
        self.keys.insert(key);
        self.used += idx + value_bytes;
        self.index_bytes += idx;
        true
    }
}

/// Vertex-level view of the scaled coefficients and fitted spectra.
#[derive(Debug, Clone)]
pub struct SelectionProblem {
    pub n_pixels: usize,
    pub n_time: usize,
    /// `z[k][v]`: scaled coefficient of the vertex's representative pixel.
    pub z: Vec<Vec<Complex64>>,
    /// `f[k][v]`: fitted spectral density at the representative pixel.
    pub f: Vec<Vec<f64>>,
    pub coords: Vec<[f64; 3]>,
    pub rep_pixel: Vec<usize>,
}

impl SelectionProblem {
    /// `anomalies` is the mean-removed field.
    pub fn new(mesh: &SphereMesh, anomalies: &SpectralField, spectra: &FittedSpectra) -> Self {
        let nv = mesh.n_vertices();
        let rep: Vec<usize> = (0..nv).map(|v| mesh.representative_pixel(v)).collect();
        let kk = anomalies.n_freq();
        let f: Vec<Vec<f64>> = (0..kk).map(|k| rep.iter().map(|&p| spectra.get(p, k)).collect()).collect();
        let z = (0..kk)
            .map(|k| rep.iter().zip(&f[k]).map(|(&p, fv)| anomalies.get(p, k) / fv.sqrt()).collect())
            .collect();
        Self {
            n_pixels: anomalies.n_pixels(),
            n_time: anomalies.n_time(),
            z,
            f,
            coords: mesh.vertices().to_vec(),
            rep_pixel: rep,
        }
    }

    pub fn n_freq(&self) -> usize {
        self.z.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.coords.len()
    }

    fn value_bytes(&self, k: usize) -> usize {
        if is_real_frequency(k, self.n_time) {
            4
        } else {
            8
        }
    }

    fn key(&self, k: usize, v: usize) -> u64 {
        (k * self.n_pixels + self.rep_pixel[v]) as u64
    }

    fn log_f(&self, k: usize) -> Vec<f64> {
        self.f[k].iter().map(|v| v.ln()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub frequency: usize,
    pub batch: usize,
    pub score: f64,
    pub stored: usize,
}

#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    /// Sorted stored vertices per frequency.
    pub stored: Vec<Vec<usize>>,
    pub kappa: CoherenceParams,
    pub initial_kappa: Vec<f64>,
    pub kappa_at_bound: Vec<bool>,
    pub trace: Vec<TraceEntry>,
    pub bytes_used: usize,
    pub index_bytes: usize,
}

impl SelectionOutcome {
    pub fn n_pairs(&self) -> usize {
        self.stored.iter().map(Vec::len).sum()
    }

    pub fn trace_text(&self) -> String {
        let mut s = String::from("iteration\tfrequency\tbatch\tscore\tstored\n");
        for t in &self.trace {
            let _ = writeln!(s, "{}\t{}\t{}\t{:e}\t{}", t.iteration, t.frequency, t.batch, t.score, t.stored);
        }
        s
    }
}

/// Per-frequency search state.
struct FreqState {
    stored: BTreeSet<usize>,
    scores: Vec<f64>,
    best: f64,
    frozen: bool,
}

impl FreqState {
    fn unstored(&self, nv: usize) -> Vec<usize> {
        (0..nv).filter(|v| !self.stored.contains(v)).collect()
    }

    fn exhausted(&self, nv: usize) -> bool {
        self.frozen || self.stored.len() >= nv
    }
}

/// `|R|² = f̂ |Z − Ẑ|²` on unstored vertices, zero on stored ones.
fn residual_scores(problem: &SelectionProblem, op: &PrecisionOperator, k: usize, kappa: f64, stored: &BTreeSet<usize>) -> Result<Vec<f64>> {
    let nv = problem.n_vertices();
    let part = FrequencyPartition::new(nv, stored.iter().copied().collect())?;
    let mut scores = vec![0.0; nv];
    if part.unstored().is_empty() {
        return Ok(scores);
    }
    let z = &problem.z[k];
    let zhat: Vec<Complex64> = if part.stored().is_empty() {
        vec![Complex64::new(0.0, 0.0); part.unstored().len()]
    } else {
        let q = op.assemble(kappa)?.matrix;
        let factor = op.plan(part.unstored())?.factor(op, kappa)?;
        let z1: Vec<Complex64> = part.stored().iter().map(|&s| z[s]).collect();
        conditional_expectation_with(&q, Some(&factor), &part, &z1)?
    };
    for (slot, &u) in part.unstored().iter().enumerate() {
        scores[u] = problem.f[k][u] * (z[u] - zhat[slot]).norm_sqr();
    }
    Ok(scores)
}

fn max_score(scores: &[f64]) -> f64 {
    scores.iter().copied().fold(0.0, f64::max)
}

/// Marginal κ̂₀ at every free frequency (pinned ones are returned as is).
pub fn initial_kappa(problem: &SelectionProblem, op: &PrecisionOperator, params: &CoherenceParams) -> Result<Vec<(f64, bool)>> {
    (0..problem.n_freq())
        .into_par_iter()
        .map(|k| {
            if params.fixed[k] {
                return Ok((params.kappa[k], false));
            }
            let log_f = problem.log_f(k);
            let est = maximize_log_kappa(params.kappa[k], |kappa| marginal_loglik(op, kappa, &problem.z[k], &log_f))?;
            Ok((est.kappa, est.at_bound))
        })
        .collect()
}

fn reestimate(
    problem: &SelectionProblem,
    op: &PrecisionOperator,
    params: &CoherenceParams,
    start: &[f64],
    states: &[FreqState],
) -> Result<Vec<(f64, bool)>> {
    let nv = problem.n_vertices();
    (0..problem.n_freq())
        .into_par_iter()
        .map(|k| {
            if params.fixed[k] {
                return Ok((params.kappa[k], false));
            }
            let part = FrequencyPartition::new(nv, states[k].stored.iter().copied().collect())?;
            if part.unstored().is_empty() {
                return Ok((params.kappa[k], false));
            }
            let plan = op.plan(part.unstored())?;
            let log_f = problem.log_f(k);
            let est = maximize_log_kappa(start[k], |kappa| {
                conditional_loglik_with(op, &plan, kappa, &part, &problem.z[k], &log_f)
            })?;
            Ok((est.kappa, est.at_bound))
        })
        .collect()
}

fn refresh(problem: &SelectionProblem, op: &PrecisionOperator, kappa: &[f64], states: &mut [FreqState], which: &[usize]) -> Result<()> {
    let fresh: Vec<Vec<f64>> = which
        .par_iter()
        .map(|&k| residual_scores(problem, op, k, kappa[k], &states[k].stored))
        .collect::<Result<_>>()?;
    for (&k, s) in which.iter().zip(fresh) {
        states[k].best = max_score(&s);
        states[k].scores = s;
    }
    Ok(())
}

/// Runs the greedy search. `budget` already carries the fixed header and
/// model bytes; `seeds` are pixels stored at k = 0 and 1 before the search.
pub fn run_selection(
    problem: &SelectionProblem,
    op: &PrecisionOperator,
    mesh: &SphereMesh,
    config: &SelectionConfig,
    seeds: &[usize],
    mut budget: ByteBudget,
) -> Result<SelectionOutcome> {
    config.validate()?;
    let kk = problem.n_freq();
    let nv = problem.n_vertices();
    let mut params = CoherenceParams::new(kk, 1.0);
    let init = initial_kappa(problem, op, &params)?;
    let initial: Vec<f64> = init.iter().map(|r| r.0).collect();
    let mut at_bound: Vec<bool> = init.iter().map(|r| r.1).collect();
    params.kappa.clone_from(&initial);

    let mut states: Vec<FreqState> = (0..kk)
        .map(|_| FreqState {
            stored: BTreeSet::new(),
            scores: Vec::new(),
            best: 0.0,
            frozen: false,
        })
        .collect();

    // seed grids at k = 0, 1, as vertices
    let mut seed_vertices: Vec<usize> = seeds.iter().map(|&p| mesh.vertex_of_pixel()[p]).collect();
    seed_vertices.sort_unstable();
    seed_vertices.dedup();
    for k in 0..kk.min(2) {
        for &v in &seed_vertices {
            if budget.try_add(problem.key(k, v), problem.value_bytes(k)) {
                states[k].stored.insert(v);
            }
        }
    }

    let all: Vec<usize> = (0..kk).collect();
    refresh(problem, op, &params.kappa, &mut states, &all)?;

    let start_used = budget.used();
    let span = budget.capacity().saturating_sub(start_used);
    let milestones: Vec<usize> = (1..=config.reestimations)
        .map(|j| start_used + span * j / (config.reestimations + 1))
        .collect();
    let mut next_milestone = 0;
    let mut trace = Vec::new();
    let mut iteration = 0;

    loop {
        let open: Vec<usize> = (0..kk).filter(|&k| !states[k].exhausted(nv)).collect();
        if open.is_empty() {
            break;
        }
        let plan: Vec<(usize, usize)> = match config.variant {
            Variant::Sequential => {
                let mut best = open[0];
                for &k in &open {
                    if states[k].best > states[best].best {
                        best = k;
                    }
                }
                vec![(best, config.batch_size)]
            }
            Variant::Distributed => {
                let scores: Vec<f64> = (0..kk).map(|k| if states[k].exhausted(nv) { 0.0 } else { states[k].best }).collect();
                let caps: Vec<usize> = (0..kk)
                    .map(|k| if states[k].exhausted(nv) { 0 } else { nv - states[k].stored.len() })
                    .collect();
                if scores.iter().all(|&s| s == 0.0) {
                    // only zero residuals left: spread evenly over open frequencies
                    let flat: Vec<f64> = caps.iter().map(|&c| if c > 0 { 1.0 } else { 0.0 }).collect();
                    allocate_m_k(&flat, config.batch_size, Some(&caps))?
                } else {
                    allocate_m_k(&scores, config.batch_size, Some(&caps))?
                }
                .into_iter()
                .enumerate()
                .filter(|&(_, m)| m > 0)
                .collect()
            }
        };

        let batches: Vec<Vec<usize>> = plan
            .par_iter()
            .map(|&(k, m)| {
                let st = &states[k];
                let unstored = st.unstored(nv);
                let avoid: Vec<usize> = if config.d_min_across_batches { st.stored.iter().copied().collect() } else { Vec::new() };
                pick_batch(&st.scores, &unstored, &problem.coords, m, config.d_min, &avoid)
            })
            .collect();

        let mut touched = Vec::new();
        for (&(k, _), batch) in plan.iter().zip(&batches) {
            let mut added = 0;
            for &v in batch {
                if budget.try_add(problem.key(k, v), problem.value_bytes(k)) {
                    states[k].stored.insert(v);
                    added += 1;
                }
            }
            if added == 0 {
                states[k].frozen = true;
            } else {
                touched.push(k);
            }
            trace.push(TraceEntry {
                iteration,
                frequency: k,
                batch: added,
                score: states[k].best,
                stored: budget.n_pairs(),
            });
        }
        iteration += 1;
        if touched.is_empty() {
            continue;
        }

        let mut crossed = false;
        while next_milestone < milestones.len() && budget.used() >= milestones[next_milestone] {
            next_milestone += 1;
            crossed = true;
        }
        if crossed {
            let est = reestimate(problem, op, &params, &initial, &states)?;
            for (k, (kappa, b)) in est.into_iter().enumerate() {
                params.kappa[k] = kappa;
                at_bound[k] = b;
            }
            refresh(problem, op, &params.kappa, &mut states, &all)?;
        } else {
            refresh(problem, op, &params.kappa, &mut states, &touched)?;
        }
    }

    let est = reestimate(problem, op, &params, &initial, &states)?;
    for (k, (kappa, b)) in est.into_iter().enumerate() {
        params.kappa[k] = kappa;
        at_bound[k] = b;
    }
    params.quantize();
    Ok(SelectionOutcome {
        stored: states.into_iter().map(|s| s.stored.into_iter().collect()).collect(),
        kappa: params,
        initial_kappa: initial,
        kappa_at_bound: at_bound,
        trace,
        bytes_used: budget.used(),
        index_bytes: budget.index_bytes(),
    })
}
