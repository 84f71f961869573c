//! Balanced per-plate assignment of predictions.
//!
//! Every class occurs at most once per plate, so the wells of a plate whose
//! labels are unknown must take the remaining classes bijectively.
//! [`balance_heuristic`] nudges the probabilities of over-claimed classes
//! until each row's argmax is distinct; [`balance_oracle`] solves the same
//! problem exactly as a linear assignment on `−ln p`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::plate_data::{DatasetManifest, PlateKey, Split};

pub const INITIAL_DELTA: f64 = 0.001;
pub const MAX_SWEEPS: usize = 10_000;
/// Probability floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Largest size accepted by [`brute_force_assignment`].
pub const BRUTE_FORCE_MAX: usize = 12;

/// Predictions for the unlabeled wells of one plate over the classes still
/// available on it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    pub plate: PlateKey,
    /// Image index of each row.
    pub wells: Vec<u32>,
    /// Class id of each column.
    pub classes: Vec<usize>,
    probs: Vec<f64>,
}

impl ProbabilityMatrix {
    /// Rows must each sum to 1 within `1e-8`.
    pub fn new(plate: PlateKey, wells: Vec<u32>, classes: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        let (n, m) = (wells.len(), classes.len());
        if probs.len() != n * m {
            return Err(Error::shape(
                "ProbabilityMatrix",
                format!("{} values for {n} wells x {m} classes", probs.len()),
            ));
        }
        if m > 0 {
            for (i, row) in probs.chunks(m).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-8 || row.iter().any(|p| !(*p >= 0.0)) {
                    return Err(Error::Numeric(format!(
                        "row {i} of plate {plate} is not a probability distribution (sum {s})"
                    )));
                }
            }
        }
        Ok(Self {
            plate,
            wells,
            classes,
            probs,
        })
    }

    /// Builds from raw non-negative scores, renormalizing each row. All-zero
    /// rows become uniform.
    pub fn from_scores(plate: PlateKey, wells: Vec<u32>, classes: Vec<usize>, mut scores: Vec<f64>) -> Result<Self> {
        let m = classes.len();
        if m > 0 {
            for row in scores.chunks_mut(m) {
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    row.iter_mut().for_each(|v| *v /= s);
                } else {
                    row.iter_mut().for_each(|v| *v = 1.0 / m as f64);
                }
            }
        }
        Self::new(plate, wells, classes, scores)
    }

    pub fn rows(&self) -> usize {
        self.wells.len()
    }

    pub fn cols(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.probs[row * self.cols() + col]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn require_square(&self, op: &'static str) -> Result<usize> {
        if self.rows() != self.cols() {
            return Err(Error::shape(
                op,
                format!("plate {} has {} wells but {} eligible classes", self.plate, self.rows(), self.cols()),
            ));
        }
        Ok(self.rows())
    }

    /// Argmax column per row, lowest column on ties.
    pub fn argmax_columns(&self) -> Vec<usize> {
        (0..self.rows()).map(|i| argmax(&self.probs[i * self.cols()..(i + 1) * self.cols()])).collect()
    }
}

/// Bijection from rows to columns of a square [`ProbabilityMatrix`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// Column chosen for each row.
    pub columns: Vec<usize>,
    /// Adjustment sweeps run by the heuristic before it stopped.
    pub sweeps: usize,
    /// Whether the greedy fallback had to finish the job.
    pub used_fallback: bool,
}

impl Assignment {
    fn exact(columns: Vec<usize>) -> Self {
        Self {
            columns,
            sweeps: 0,
            used_fallback: false,
        }
    }

    pub fn is_bijection(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        self.columns.len() == n
            && self.columns.iter().all(|&c| c < n && !std::mem::replace(&mut seen[c], true))
    }

    /// `image_index → class` pairs.
    pub fn well_classes(&self, pm: &ProbabilityMatrix) -> BTreeMap<u32, usize> {
        pm.wells
            .iter()
            .zip(&self.columns)
            .map(|(&w, &c)| (w, pm.classes[c]))
            .collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// `Σ ln max(p, PROB_FLOOR)` over the assigned cells.
pub fn log_objective(pm: &ProbabilityMatrix, a: &Assignment) -> f64 {
    a.columns
        .iter()
        .enumerate()
        .map(|(i, &c)| pm.get(i, c).max(PROB_FLOOR).ln())
        .sum()
}

/// Iterative de-duplication of row argmaxes.
///
/// Each sweep takes the argmax of every row on the adjusted matrix. For every
/// class claimed by more than one row, the claimant with the highest adjusted
/// probability keeps it (lowest row on ties) and every other claimant has its
/// entry for that class lowered by `δ`. `δ` starts at [`INITIAL_DELTA`] and
/// halves after each sweep. A sweep without duplicates ends the loop. If
/// duplicates remain after [`MAX_SWEEPS`], the winners keep their classes and
/// the remaining rows are filled greedily by descending probability over the
/// unused classes.
pub fn balance_heuristic(pm: &ProbabilityMatrix) -> Result<Assignment> {
    let n = pm.require_square("balance_heuristic")?;
    let mut adj = pm.probs.clone();
    let mut delta = INITIAL_DELTA;
    let mut sweeps = 0;
    let mut claimants: Vec<Vec<usize>> = vec![Vec::new(); n];
    loop {
        let choice: Vec<usize> = (0..n).map(|i| argmax(&adj[i * n..(i + 1) * n])).collect();
        claimants.iter_mut().for_each(Vec::clear);
        for (i, &c) in choice.iter().enumerate() {
            claimants[c].push(i);
        }
        if claimants.iter().all(|rows| rows.len() <= 1) {
            return Ok(Assignment {
                columns: choice,
                sweeps,
                used_fallback: false,
            });
        }
        if sweeps == MAX_SWEEPS {
            return Ok(greedy_fallback(&adj, n, &claimants, sweeps));
        }
        let mut changed = false;
        for (c, rows) in claimants.iter().enumerate().filter(|(_, r)| r.len() > 1) {
            let winner = winner_of(&adj, n, c, rows);
            for &i in rows.iter().filter(|&&i| i != winner) {
                let cell = &mut adj[i * n + c];
                let lowered = *cell - delta;
                changed |= lowered != *cell;
                *cell = lowered;
            }
        }
        sweeps += 1;
        delta *= 0.5;
        if !changed {
            // δ no longer moves any entry; later sweeps would repeat this one.
            return Ok(greedy_fallback(&adj, n, &claimants, sweeps));
        }
    }
}

fn winner_of(adj: &[f64], n: usize, class: usize, rows: &[usize]) -> usize {
    let mut best = rows[0];
    for &i in &rows[1..] {
        if adj[i * n + class] > adj[best * n + class] {
            best = i;
        }
    }
    best
}

fn greedy_fallback(adj: &[f64], n: usize, claimants: &[Vec<usize>], sweeps: usize) -> Assignment {
    let mut columns = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for (c, rows) in claimants.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let w = winner_of(adj, n, c, rows);
        columns[w] = c;
        used[c] = true;
    }
    let mut pairs: Vec<(usize, usize)> = (0..n)
        .filter(|&i| columns[i] == usize::MAX)
        .flat_map(|i| (0..n).filter(|&c| !used[c]).map(move |c| (i, c)))
        .collect();
    pairs.sort_by(|a, b| {
        adj[b.0 * n + b.1]
            .total_cmp(&adj[a.0 * n + a.1])
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    for (i, c) in pairs {
        if columns[i] == usize::MAX && !used[c] {
            columns[i] = c;
            used[c] = true;
        }
    }
    Assignment {
        columns,
        sweeps,
        used_fallback: true,
    }
}

fn cost_matrix(pm: &ProbabilityMatrix) -> Vec<f64> {
    pm.probs.iter().map(|p| -p.max(PROB_FLOOR).ln()).collect()
}

/// Exact maximizer of [`log_objective`] by shortest augmenting paths
/// (`O(n³)`).
pub fn balance_oracle(pm: &ProbabilityMatrix) -> Result<Assignment> {
    let n = pm.require_square("balance_oracle")?;
    Ok(Assignment::exact(hungarian(&cost_matrix(pm), n)))
}

/// Minimum-cost perfect matching on an `n × n` row-major cost matrix.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut columns = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            columns[owner[j] - 1] = j - 1;
        }
    }
    columns
}

/// Exhaustive search over all `n!` permutations; `n ≤ BRUTE_FORCE_MAX`.
pub fn brute_force_assignment(pm: &ProbabilityMatrix) -> Result<Assignment> {
    let n = pm.require_square("brute_force_assignment")?;
    if n > BRUTE_FORCE_MAX {
        return Err(Error::Config(format!("brute force limited to n <= {BRUTE_FORCE_MAX}, got {n}")));
    }
    let logs: Vec<f64> = pm.probs.iter().map(|p| p.max(PROB_FLOOR).ln()).collect();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut perm = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fn rec(
        logs: &[f64],
        n: usize,
        perm: &mut Vec<usize>,
        used: &mut [bool],
        acc: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        let row = perm.len();
        if row == n {
            if acc > best.0 {
                *best = (acc, perm.clone());
            }
            return;
        }
        for c in 0..n {
            if !used[c] {
                used[c] = true;
                perm.push(c);
                rec(logs, n, perm, used, acc + logs[row * n + c], best);
                perm.pop();
                used[c] = false;
            }
        }
    }
    rec(&logs, n, &mut perm, &mut used, 0.0, &mut best);
    Ok(Assignment::exact(best.1))
}

/// Which solver [`apply_postprocess_with`] runs per plate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Balancer {
    Heuristic,
    Oracle,
}

/// Per-plate probability matrices for the test wells, restricted to each
/// plate's eligible classes.
pub fn plate_matrices(
    predictions: &BTreeMap<u32, Vec<f64>>,
    manifest: &DatasetManifest,
) -> Result<Vec<ProbabilityMatrix>> {
    let mut out = Vec::new();
    for (plate, records) in manifest.by_plate() {
        let wells: Vec<u32> = records
            .iter()
            .filter(|r| r.split == Split::Test)
            .map(|r| r.image_index)
            .collect();
        if wells.is_empty() {
            continue;
        }
        let classes = manifest.eligible_test_classes(plate);
        if classes.len() != wells.len() {
            return Err(Error::Invariant(format!(
                "plate {plate}: {} test wells but {} eligible classes",
                wells.len(),
                classes.len()
            )));
        }
        let mut scores = Vec::with_capacity(wells.len() * classes.len());
        for w in &wells {
            let p = predictions
                .get(w)
                .ok_or_else(|| Error::Invariant(format!("plate {plate}: no prediction for image {w}")))?;
            if p.len() != manifest.num_classes as usize {
                return Err(Error::shape(
                    "apply_postprocess",
                    format!("image {w} has {} class scores, expected {}", p.len(), manifest.num_classes),
                ));
            }
            scores.extend(classes.iter().map(|&c| p[c]));
        }
        out.push(ProbabilityMatrix::from_scores(plate, wells, classes, scores)?);
    }
    Ok(out)
}

/// Balanced `image_index → class` over every test well in the manifest.
pub fn apply_postprocess(
    predictions: &BTreeMap<u32, Vec<f64>>,
    manifest: &DatasetManifest,
) -> Result<BTreeMap<u32, usize>> {
    apply_postprocess_with(predictions, manifest, Balancer::Heuristic)
}

pub fn apply_postprocess_with(
    predictions: &BTreeMap<u32, Vec<f64>>,
    manifest: &DatasetManifest,
    balancer: Balancer,
) -> Result<BTreeMap<u32, usize>> {
    let matrices = plate_matrices(predictions, manifest)?;
    let solved: Vec<BTreeMap<u32, usize>> = matrices
        .par_iter()
        .map(|pm| {
            let a = match balancer {
                Balancer::Heuristic => balance_heuristic(pm)?,
                Balancer::Oracle => balance_oracle(pm)?,
            };
            Ok(a.well_classes(pm))
        })
        .collect::<Result<_>>()?;
    Ok(solved.into_iter().flatten().collect())
}

/// Raw argmax over all classes, ignoring the plate prior.
pub fn argmax_predictions(predictions: &BTreeMap<u32, Vec<f64>>) -> BTreeMap<u32, usize> {
    predictions.iter().map(|(&w, p)| (w, argmax(p))).collect()
}

pub fn predictions_csv(assigned: &BTreeMap<u32, usize>) -> String {
    let mut out = String::from("image_index,predicted_class\n");
    for (w, c) in assigned {
        writeln!(out, "{w},{c}").unwrap();
    }
    out
}

pub fn write_predictions_csv(path: &Path, assigned: &BTreeMap<u32, usize>) -> Result<()> {
    std::fs::write(path, predictions_csv(assigned)).map_err(|e| Error::io(path, e))
}
