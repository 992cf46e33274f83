//! Wasserstein-1 distances between equal-weight empirical measures of fields.
//!
//! The ground cost is `||x - y||_{H^delta}` on the grid. Distances between
//! equal-size samples reduce to an assignment problem, solved exactly by a
//! shortest-augmenting-path Hungarian method with dual potentials, or
//! approximately by log-domain Sinkhorn iterations followed by rounding onto
//! the feasible set.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Domain, Field, SobolevIndex};

/// Tolerance on reduced costs accepted as dual feasible.
pub const DUAL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub label: String,
    pub model_hash: String,
    pub mu: Option<f64>,
    pub burn_in: f64,
    pub seed: u64,
}

/// `n` fields with weights `1/n`. `blocks[k]` is the replica that produced sample `k`.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    domain: Domain,
    samples: Vec<Field>,
    blocks: Vec<usize>,
    pub provenance: Provenance,
}

impl EmpiricalMeasure {
    pub fn new(domain: &Domain, samples: Vec<Field>) -> Result<Self> {
        let blocks = (0..samples.len()).collect();
        Self::with_blocks(domain, samples, blocks)
    }

    pub fn with_blocks(domain: &Domain, samples: Vec<Field>, blocks: Vec<usize>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        if blocks.len() != samples.len() {
            return Err(Error::LengthMismatch { expected: samples.len(), got: blocks.len() });
        }
        for s in &samples {
            domain.check(s)?;
        }
        Ok(Self { domain: domain.clone(), samples, blocks, provenance: Provenance::default() })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Field] {
        &self.samples
    }

    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    /// Pointwise image of every sample, keeping blocks and provenance.
    pub fn try_map(&self, f: impl Fn(&Field) -> Result<Field>) -> Result<Self> {
        let samples = self.samples.iter().map(f).collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, ..self.clone() })
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let samples = idx.iter().map(|&k| self.samples[k].clone()).collect();
        let blocks = idx.iter().map(|&k| self.blocks[k]).collect();
        Ok(Self::with_blocks(&self.domain, samples, blocks)?.with_provenance(self.provenance.clone()))
    }
}

/// Dense row-major `rows x cols` costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    pub delta: f64,
}

impl CostMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, delta: f64) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if r == 0 || c == 0 {
            return Err(Error::InvalidParameter("empty cost matrix".into()));
        }
        if let Some(bad) = rows.iter().find(|row| row.len() != c) {
            return Err(Error::LengthMismatch { expected: c, got: bad.len() });
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("costs must be finite".into()));
        }
        Ok(Self { rows: r, cols: c, data, delta })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.get(i, j);
            }
        }
        Self { rows: self.cols, cols: self.rows, data, delta: self.delta }
    }

    /// Principal-style submatrix with the given row and column indices.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        let data = rows.iter().flat_map(|&i| cols.iter().map(move |&j| self.get(i, j))).collect();
        Self { rows: rows.len(), cols: cols.len(), data, delta: self.delta }
    }
}

fn weighted_coefficients(m: &EmpiricalMeasure, delta: f64) -> Vec<Vec<f64>> {
    let dom = m.domain();
    let w: Vec<f64> = dom.sobolev_weights(SobolevIndex(delta)).into_iter().map(f64::sqrt).collect();
    m.samples().par_iter().map(|s| dom.dst_forward(s).0.iter().zip(&w).map(|(c, w)| c * w).collect()).collect()
}

/// `c_jk = ||a_j - b_k||_{H^delta}`.
pub fn cost_matrix(a: &EmpiricalMeasure, b: &EmpiricalMeasure, delta: f64) -> Result<CostMatrix> {
    if a.domain() != b.domain() {
        return Err(Error::DomainMismatch);
    }
    let ca = weighted_coefficients(a, delta);
    let cb = weighted_coefficients(b, delta);
    let data: Vec<f64> = ca
        .par_iter()
        .flat_map_iter(|x| cb.iter().map(move |y| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()))
        .collect();
    Ok(CostMatrix { rows: a.len(), cols: b.len(), data, delta })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Method {
    Exact,
    Entropic { eps_reg: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Plan {
    /// `perm[i]` is the column matched to row `i`.
    Permutation(Vec<usize>),
    /// Dense row-major coupling with total mass one.
    Coupling { rows: usize, cols: usize, mass: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportResult {
    pub value: f64,
    pub plan: Plan,
    pub method: Method,
    /// Exact solver: row and column potentials with `c_ij - u_i - v_j >= 0`.
    pub potentials: Option<(Vec<f64>, Vec<f64>)>,
    /// Entropic solver: L1 marginal violation before rounding.
    pub marginal_residual: Option<f64>,
    pub converged: bool,
}

impl TransportResult {
    /// Smallest reduced cost `c_ij - u_i - v_j`; `None` for the entropic method.
    pub fn min_reduced_cost(&self, cost: &CostMatrix) -> Option<f64> {
        let (u, v) = self.potentials.as_ref()?;
        let mut min = f64::INFINITY;
        for (i, ui) in u.iter().enumerate() {
            for (j, vj) in v.iter().enumerate() {
                min = min.min(cost.get(i, j) - ui - vj);
            }
        }
        Some(min)
    }

    /// Dual feasibility plus zero duality gap, both to [`DUAL_TOLERANCE`]
    /// relative to the cost scale.
    pub fn certify(&self, cost: &CostMatrix) -> Result<()> {
        let (u, v) = self
            .potentials
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("only exact solves carry a certificate".into()))?;
        let scale = cost.data.iter().fold(1.0f64, |m, &c| m.max(c));
        let min = self.min_reduced_cost(cost).unwrap_or(0.0);
        if min < -DUAL_TOLERANCE * scale {
            return Err(Error::InvalidParameter(format!("dual infeasible: reduced cost {min:e}")));
        }
        let n = u.len() as f64;
        let dual = (u.iter().sum::<f64>() + v.iter().sum::<f64>()) / n;
        if (dual - self.value).abs() > DUAL_TOLERANCE * scale {
            return Err(Error::InvalidParameter(format!("duality gap {:e}", dual - self.value)));
        }
        Ok(())
    }

    /// `(row, col, mass)` triples with nonzero mass.
    pub fn plan_entries(&self) -> Vec<(usize, usize, f64)> {
        match &self.plan {
            Plan::Permutation(p) => {
                let w = 1.0 / p.len() as f64;
                p.iter().enumerate().map(|(i, &j)| (i, j, w)).collect()
            }
            Plan::Coupling { cols, mass, .. } => {
                mass.iter().enumerate().filter(|(_, &m)| m > 0.0).map(|(k, &m)| (k / cols, k % cols, m)).collect()
            }
        }
    }

    pub fn write_plan_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["row", "col", "mass"])?;
        for (i, j, m) in self.plan_entries() {
            out.write_record([i.to_string(), j.to_string(), format!("{m:e}")])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Optimal assignment for a square cost matrix, `O(n^3)`.
///
/// Shortest augmenting paths with row/column potentials; rows are inserted in
/// index order and ties pick the lowest column, so plans are deterministic.
pub fn w1_exact(cost: &CostMatrix) -> Result<TransportResult> {
    if cost.rows != cost.cols {
        return Err(Error::NonSquare { rows: cost.rows, cols: cost.cols });
    }
    let n = cost.rows;
    // 1-based arrays; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost.data[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    let value = perm.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum::<f64>() / n as f64;
    let pu: Vec<f64> = u[1..].to_vec();
    let pv: Vec<f64> = v[1..].to_vec();
    Ok(TransportResult {
        value,
        plan: Plan::Permutation(perm),
        method: Method::Exact,
        potentials: Some((pu, pv)),
        marginal_residual: None,
        converged: true,
    })
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic approximation with uniform marginals.
///
/// Runs log-domain Sinkhorn updates, annealing the regularization from the
/// largest cost down to `eps_reg`, until the L1 row-marginal violation is
/// below `tol` (or `max_iter` total updates are spent, reported through
/// `converged`), then
/// rounds the plan onto the exact marginals. The returned value is the cost of
/// that feasible plan and therefore never below the exact optimum.
pub fn w1_entropic(cost: &CostMatrix, eps_reg: f64, tol: f64, max_iter: usize) -> Result<TransportResult> {
    if !(eps_reg > 0.0) {
        return Err(Error::InvalidParameter(format!("regularization must be positive, got {eps_reg}")));
    }
    let (n, m) = (cost.rows, cost.cols);
    let la = -(n as f64).ln();
    let lb = -(m as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let plan_entry = |f: &[f64], g: &[f64], eps: f64, i: usize, j: usize| ((f[i] + g[j] - cost.get(i, j)) / eps).exp();
    // anneal from the cost scale down to eps_reg, warm-starting the potentials
    let top = cost.data.iter().fold(0.0f64, |a, &c| a.max(c));
    let mut schedule = Vec::new();
    let mut e = top.max(eps_reg);
    while e > eps_reg {
        schedule.push(e);
        e *= 0.5;
    }
    schedule.push(eps_reg);
    let mut residual = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for (stage, &eps) in schedule.iter().enumerate() {
        let last = stage + 1 == schedule.len();
        let stage_tol = if last { tol } else { tol.max(1e-3) };
        while iterations < max_iter {
            iterations += 1;
            for (i, fi) in f.iter_mut().enumerate() {
                *fi = eps * (la - log_sum_exp((0..m).map(|j| (g[j] - cost.get(i, j)) / eps)));
            }
            for (j, gj) in g.iter_mut().enumerate() {
                *gj = eps * (lb - log_sum_exp((0..n).map(|i| (f[i] - cost.get(i, j)) / eps)));
            }
            // columns are exact after the g update; measure the rows
            residual = (0..n)
                .map(|i| ((0..m).map(|j| plan_entry(&f, &g, eps, i, j)).sum::<f64>() - 1.0 / n as f64).abs())
                .sum();
            if residual < stage_tol {
                converged = last;
                break;
            }
        }
    }
    let mut mass: Vec<f64> = (0..n * m).map(|k| plan_entry(&f, &g, eps_reg, k / m, k % m)).collect();
    round_to_marginals(&mut mass, n, m);
    let value = mass.iter().zip(&cost.data).map(|(p, c)| p * c).sum();
    Ok(TransportResult {
        value,
        plan: Plan::Coupling { rows: n, cols: m, mass },
        method: Method::Entropic { eps_reg },
        potentials: None,
        marginal_residual: Some(residual),
        converged,
    })
}

/// Projection of a nonnegative matrix onto the uniform transport polytope:
/// shrink overfull rows, then overfull columns, then add the rank-one deficit.
fn round_to_marginals(p: &mut [f64], n: usize, m: usize) {
    let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
    for i in 0..n {
        let s: f64 = p[i * m..(i + 1) * m].iter().sum();
        if s > a {
            p[i * m..(i + 1) * m].iter_mut().for_each(|x| *x *= a / s);
        }
    }
    for j in 0..m {
        let s: f64 = (0..n).map(|i| p[i * m + j]).sum();
        if s > b {
            (0..n).for_each(|i| p[i * m + j] *= b / s);
        }
    }
    let er: Vec<f64> = (0..n).map(|i| a - p[i * m..(i + 1) * m].iter().sum::<f64>()).collect();
    let ec: Vec<f64> = (0..m).map(|j| b - (0..n).map(|i| p[i * m + j]).sum::<f64>()).collect();
    let total: f64 = er.iter().sum();
    if total > 0.0 {
        for i in 0..n {
            for j in 0..m {
                p[i * m + j] += er[i] * ec[j] / total;
            }
        }
    }
}

/// Exact `W_1` between two measures of equal size.
pub fn w1_between(a: &EmpiricalMeasure, b: &EmpiricalMeasure, delta: f64) -> Result<TransportResult> {
    if a.len() != b.len() {
        return Err(Error::NonSquare { rows: a.len(), cols: b.len() });
    }
    w1_exact(&cost_matrix(a, b, delta)?)
}

/// Exact distances between `splits` random half-splits of `a`.
///
/// Each split shuffles the sample indices with a ChaCha8 generator seeded by
/// `(seed, split)` and compares the first `n/2` samples with the next `n/2`.
pub fn split_half_distances(a: &EmpiricalMeasure, delta: f64, splits: usize, seed: u64) -> Result<Vec<f64>> {
    let n = a.len();
    if n < 4 {
        return Err(Error::TooFewSamples { needed: 4, got: n });
    }
    let full = cost_matrix(a, a, delta)?;
    let half = n / 2;
    (0..splits)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let sub = full.select(&idx[..half], &idx[half..2 * half]);
            w1_exact(&sub).map(|r| r.value)
        })
        .collect()
}

/// Mean split-half self-distance: the resolution limit for distances
/// estimated from samples of this size.
pub fn noise_floor(a: &EmpiricalMeasure, delta: f64, splits: usize, seed: u64) -> Result<f64> {
    if splits == 0 {
        return Err(Error::InvalidParameter("at least one split is needed".into()));
    }
    let d = split_half_distances(a, delta, splits, seed)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}
