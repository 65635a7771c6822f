//! Probability measures on R^d: weighted empirical measures, grid-quantized measures
//! with denominator `n`, exact Wasserstein-1 distance and the quantizer between them.

pub mod transport;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;

const WEIGHT_TOL: f64 = 1e-12;

/// Default cap on the number of enumerated quantized measures.
pub const DEFAULT_ENUMERATION_CAP: u128 = 200_000;

/// Finitely supported probability measure. Atoms are stored row-major, `dim` coordinates each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    dim: usize,
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("dimension must be positive".into()));
        }
        if atoms.len() != weights.len() * dim {
            return Err(Error::InvalidMeasure(format!(
                "{} coordinates for {} atoms of dimension {dim}",
                atoms.len(),
                weights.len()
            )));
        }
        if weights.is_empty() {
            return Err(Error::InvalidMeasure("empty support".into()));
        }
        if atoms.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidMeasure("non-finite atom".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidMeasure("negative or non-finite weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}")));
        }
        Ok(Self { dim, atoms, weights })
    }

    /// Uniform weights `1/k` on the given atoms.
    pub fn uniform(dim: usize, atoms: Vec<f64>) -> Result<Self> {
        if dim == 0 || atoms.is_empty() || atoms.len() % dim != 0 {
            return Err(Error::InvalidMeasure("malformed atom list".into()));
        }
        let k = atoms.len() / dim;
        Self::new(dim, atoms, vec![1.0 / k as f64; k])
    }

    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::new(point.len(), point.to_vec(), vec![1.0])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atoms_flat(&self) -> &[f64] {
        &self.atoms
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.atoms
            .chunks_exact(self.dim)
            .zip(self.weights.iter().copied())
    }

    /// `∫ f dμ`
    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        self.iter().map(|(x, w)| w * f(x)).sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (x, w) in self.iter() {
            for (mi, xi) in m.iter_mut().zip(x) {
                *mi += w * xi;
            }
        }
        m
    }

    /// Translates every atom by `shift`.
    pub fn shifted(&self, shift: &[f64]) -> Self {
        let mut atoms = self.atoms.clone();
        for chunk in atoms.chunks_exact_mut(self.dim) {
            for (a, s) in chunk.iter_mut().zip(shift) {
                *a += s;
            }
        }
        Self {
            dim: self.dim,
            atoms,
            weights: self.weights.clone(),
        }
    }

    /// One row per atom: coordinates then weight.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for j in 0..self.dim {
            let _ = write!(s, "x{j},");
        }
        s.push_str("weight\n");
        for (x, w) in self.iter() {
            for xi in x {
                let _ = write!(s, "{},", crate::fmt_f64(*xi));
            }
            let _ = writeln!(s, "{}", crate::fmt_f64(w));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidMeasure("empty csv".into()))?;
        let cols = header.split(',').count();
        if cols < 2 {
            return Err(Error::InvalidMeasure("csv needs coordinates and weight".into()));
        }
        let dim = cols - 1;
        let mut atoms = Vec::new();
        let mut weights = Vec::new();
        for line in lines {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidMeasure(format!("bad csv value: {e}")))?;
            if vals.len() != cols {
                return Err(Error::InvalidMeasure("ragged csv row".into()));
            }
            atoms.extend_from_slice(&vals[..dim]);
            weights.push(vals[dim]);
        }
        Self::new(dim, atoms, weights)
    }
}

/// Product grid over the truncation box `[-L, L]^d`.
///
/// The first and last cell of every axis extend to infinity, so the grid partitions
/// all of R^d; representative points are the centers of the in-box part of each cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    /// Cell edges per axis, strictly increasing, including both box ends.
    axes: Vec<Vec<f64>>,
}

impl StateGrid {
    /// `cells_per_axis` equal cells on `[-half_width, half_width]` along each of `dim` axes.
    pub fn uniform(dim: usize, half_width: f64, cells_per_axis: usize) -> Result<Self> {
        if dim == 0 || cells_per_axis == 0 || !(half_width > 0.0) || !half_width.is_finite() {
            return Err(Error::config(
                "measure",
                "grid needs dim >= 1, at least one cell and a positive finite half-width",
            ));
        }
        let m = cells_per_axis;
        let edges: Vec<f64> = (0..=m)
            .map(|i| half_width * (2 * i as i64 - m as i64) as f64 / m as f64)
            .collect();
        Ok(Self {
            axes: vec![edges; dim],
        })
    }

    pub fn from_edges(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::config("measure", "grid needs at least one axis"));
        }
        for edges in &axes {
            if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::config("measure", "grid edges must be strictly increasing"));
            }
            if edges.iter().any(|e| !e.is_finite()) {
                return Err(Error::config("measure", "grid edges must be finite"));
            }
        }
        Ok(Self { axes })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axis_edges(&self, axis: usize) -> &[f64] {
        &self.axes[axis]
    }

    pub fn cells_on_axis(&self, axis: usize) -> usize {
        self.axes[axis].len() - 1
    }

    /// Total cell count `m`.
    pub fn cell_count(&self) -> usize {
        self.axes.iter().map(|e| e.len() - 1).product()
    }

    /// Cell index along one axis, boundary cells absorbing everything outside the box.
    pub fn axis_cell(&self, axis: usize, x: f64) -> usize {
        let edges = &self.axes[axis];
        let m = edges.len() - 1;
        // number of interior edges <= x
        let interior = &edges[1..m];
        interior.partition_point(|&e| e <= x)
    }

    /// Flat cell index; axis 0 varies slowest.
    pub fn cell_of(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for (axis, &xi) in x.iter().enumerate() {
            idx = idx * self.cells_on_axis(axis) + self.axis_cell(axis, xi);
        }
        idx
    }

    pub fn multi_index(&self, mut cell: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for axis in (0..self.dim()).rev() {
            let m = self.cells_on_axis(axis);
            out[axis] = cell % m;
            cell /= m;
        }
        out
    }

    pub fn axis_center(&self, axis: usize, i: usize) -> f64 {
        0.5 * (self.axes[axis][i] + self.axes[axis][i + 1])
    }

    /// Axis interval of cell `i` with the boundary cells extended to ±∞.
    pub fn axis_interval(&self, axis: usize, i: usize) -> (f64, f64) {
        let edges = &self.axes[axis];
        let m = edges.len() - 1;
        let lo = if i == 0 { f64::NEG_INFINITY } else { edges[i] };
        let hi = if i + 1 == m { f64::INFINITY } else { edges[i + 1] };
        (lo, hi)
    }

    pub fn center(&self, cell: usize) -> Vec<f64> {
        self.multi_index(cell)
            .into_iter()
            .enumerate()
            .map(|(axis, i)| self.axis_center(axis, i))
            .collect()
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        (0..self.cell_count()).map(|c| self.center(c)).collect()
    }

    /// Largest Euclidean diameter of the in-box part of any cell.
    pub fn max_cell_diameter(&self) -> f64 {
        self.axes
            .iter()
            .map(|e| {
                let w = e.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
                w * w
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Largest box side length.
    pub fn span(&self) -> f64 {
        self.axes
            .iter()
            .map(|e| e[e.len() - 1] - e[0])
            .fold(0.0, f64::max)
    }

    /// Mass of `mu` in each cell.
    pub fn cell_masses(&self, mu: &EmpiricalMeasure) -> Vec<f64> {
        let mut mass = vec![0.0; self.cell_count()];
        for (x, w) in mu.iter() {
            mass[self.cell_of(x)] += w;
        }
        mass
    }
}

/// Counts per grid cell summing to the denominator `n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantizedMeasure {
    counts: Vec<u32>,
    n: u32,
}

impl QuantizedMeasure {
    pub fn new(counts: Vec<u32>) -> Result<Self> {
        let n: u64 = counts.iter().map(|&c| c as u64).sum();
        if n == 0 {
            return Err(Error::InvalidMeasure("quantized measure with zero total".into()));
        }
        let n = u32::try_from(n).map_err(|_| Error::InvalidMeasure("denominator overflow".into()))?;
        Ok(Self { counts, n })
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn denominator(&self) -> u32 {
        self.n
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

/// Serialized form of a quantized measure: counts together with the grid they live on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMeasureFile {
    pub grid: StateGrid,
    pub n: u32,
    pub counts: Vec<u32>,
}

impl QuantizedMeasureFile {
    pub fn new(q: &QuantizedMeasure, grid: &StateGrid) -> Self {
        Self {
            grid: grid.clone(),
            n: q.denominator(),
            counts: q.counts().to_vec(),
        }
    }

    pub fn into_parts(self) -> Result<(QuantizedMeasure, StateGrid)> {
        if self.counts.len() != self.grid.cell_count() {
            return Err(Error::InvalidMeasure("count vector does not match grid".into()));
        }
        let q = QuantizedMeasure::new(self.counts)?;
        if q.denominator() != self.n {
            return Err(Error::InvalidMeasure("counts do not sum to n".into()));
        }
        Ok((q, self.grid))
    }
}

/// Exact Wasserstein-1 distance with Euclidean ground cost.
///
/// One dimension uses the quantile coupling; higher dimensions solve the transport
/// problem exactly and refuse supports larger than [`transport::MAX_EXACT_ATOMS`].
pub fn wasserstein1(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            got: nu.dim(),
        });
    }
    if mu.dim() == 1 {
        return Ok(quantile_coupling_w1(mu, nu));
    }
    let limit = transport::MAX_EXACT_ATOMS;
    if mu.len() > limit || nu.len() > limit {
        return Err(Error::SupportTooLarge {
            left: mu.len(),
            right: nu.len(),
            limit,
        });
    }
    Ok(transport_w1(mu, nu))
}

/// W1 via the general transport solver, any dimension, no size check.
pub fn transport_w1(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    let cost: Vec<Vec<f64>> = mu
        .iter()
        .map(|(x, _)| nu.iter().map(|(y, _)| euclid(x, y)).collect())
        .collect();
    transport::min_cost_transport(mu.weights(), nu.weights(), &cost)
}

/// Sorted-atom transport in one dimension, splitting weights where needed.
pub fn quantile_coupling_w1(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    let sorted = |m: &EmpiricalMeasure| {
        let mut v: Vec<(f64, f64)> = m.iter().map(|(x, w)| (x[0], w)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let a = sorted(mu);
    let b = sorted(nu);
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let moved = ra.min(rb);
        total += moved * (a[i].0 - b[j].0).abs();
        ra -= moved;
        rb -= moved;
        if ra <= 0.0 {
            i += 1;
            if i < a.len() {
                ra = a[i].1;
            }
        }
        if rb <= 0.0 {
            j += 1;
            if j < b.len() {
                rb = b[j].1;
            }
        }
    }
    total
}

fn euclid(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Largest-remainder apportionment of `masses` into a composition of `n`.
/// Ties in the fractional parts go to the lower cell index.
pub fn apportion(masses: &[f64], n: u32) -> Vec<u32> {
    let total: f64 = masses.iter().sum();
    let scaled: Vec<f64> = masses.iter().map(|&p| p / total * n as f64).collect();
    let mut counts: Vec<u32> = scaled.iter().map(|&s| s.floor() as u32).collect();
    let assigned: u32 = counts.iter().sum();
    let mut order: Vec<usize> = (0..masses.len()).collect();
    // stable sort keeps lower indices first among equal remainders
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - scaled[a].floor();
        let fb = scaled[b] - scaled[b].floor();
        fb.total_cmp(&fa)
    });
    for &i in order.iter().take(n.saturating_sub(assigned) as usize) {
        counts[i] += 1;
    }
    counts
}

/// Rounds the cell masses of `mu` to a composition of `n`.
pub fn quantize(mu: &EmpiricalMeasure, grid: &StateGrid, n: u32) -> Result<QuantizedMeasure> {
    if n == 0 {
        return Err(Error::config("measure", "denominator n must be at least 1"));
    }
    if mu.dim() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            got: mu.dim(),
        });
    }
    QuantizedMeasure::new(apportion(&grid.cell_masses(mu), n))
}

/// Atoms at cell centers with weights `counts / n`. Empty cells are dropped.
pub fn dequantize(q: &QuantizedMeasure, grid: &StateGrid) -> EmpiricalMeasure {
    let n = q.denominator() as f64;
    let mut atoms = Vec::new();
    let mut weights = Vec::new();
    for (cell, &c) in q.counts().iter().enumerate() {
        if c > 0 {
            atoms.extend(grid.center(cell));
            weights.push(c as f64 / n);
        }
    }
    EmpiricalMeasure {
        dim: grid.dim(),
        atoms,
        weights,
    }
}

/// `C(n + m - 1, m - 1)`, saturating.
pub fn composition_count(m: usize, n: u32) -> u128 {
    if m == 0 {
        return 0;
    }
    let k = (m - 1) as u128;
    let top = n as u128 + k;
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul(top - i) {
            Some(v) => v / (i + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// All compositions of `n` into `grid.cell_count()` cells, first cell's count descending.
pub fn enumerate_quantized(grid: &StateGrid, n: u32) -> Result<Vec<QuantizedMeasure>> {
    enumerate_quantized_capped(grid.cell_count(), n, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_quantized_capped(m: usize, n: u32, cap: u128) -> Result<Vec<QuantizedMeasure>> {
    if n == 0 || m == 0 {
        return Err(Error::config("measure", "enumeration needs m >= 1 and n >= 1"));
    }
    let count = composition_count(m, n);
    if count > cap {
        return Err(Error::Blowup {
            what: "quantized measure enumeration",
            count,
            cap,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut current = vec![0u32; m];
    fn rec(pos: usize, left: u32, current: &mut Vec<u32>, out: &mut Vec<QuantizedMeasure>, n: u32) {
        if pos + 1 == current.len() {
            current[pos] = left;
            out.push(QuantizedMeasure {
                counts: current.clone(),
                n,
            });
            return;
        }
        for c in (0..=left).rev() {
            current[pos] = c;
            rec(pos + 1, left - c, current, out, n);
        }
    }
    rec(0, n, &mut current, &mut out, n);
    Ok(out)
}

/// The enumerated set of quantized measures on a grid, with W1-nearest projection.
#[derive(Debug, Clone)]
pub struct MeasureSet {
    grid: StateGrid,
    n: u32,
    members: Vec<QuantizedMeasure>,
    index: HashMap<Vec<u32>, usize>,
    /// cumulative probabilities per member (1-d fast path)
    cdfs: Vec<Vec<f64>>,
    /// gaps between consecutive centers (1-d fast path)
    gaps: Vec<f64>,
    centers: Vec<Vec<f64>>,
}

impl MeasureSet {
    pub fn new(grid: &StateGrid, n: u32) -> Result<Self> {
        Self::with_cap(grid, n, DEFAULT_ENUMERATION_CAP)
    }

    pub fn with_cap(grid: &StateGrid, n: u32, cap: u128) -> Result<Self> {
        let members = enumerate_quantized_capped(grid.cell_count(), n, cap)?;
        let index = members
            .iter()
            .enumerate()
            .map(|(i, q)| (q.counts.clone(), i))
            .collect();
        let centers = grid.centers();
        let (cdfs, gaps) = if grid.dim() == 1 {
            let cdfs = members
                .iter()
                .map(|q| cumulative(&q.probabilities()))
                .collect();
            let gaps = centers.windows(2).map(|w| w[1][0] - w[0][0]).collect();
            (cdfs, gaps)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Self {
            grid: grid.clone(),
            n,
            members,
            index,
            cdfs,
            gaps,
            centers,
        })
    }

    pub fn grid(&self) -> &StateGrid {
        &self.grid
    }

    pub fn denominator(&self) -> u32 {
        self.n
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn get(&self, i: usize) -> &QuantizedMeasure {
        &self.members[i]
    }

    pub fn members(&self) -> &[QuantizedMeasure] {
        &self.members
    }

    pub fn index_of(&self, q: &QuantizedMeasure) -> Option<usize> {
        if q.n != self.n {
            return None;
        }
        self.index.get(&q.counts).copied()
    }

    /// W1 between a cell-mass vector and member `i`, both placed at cell centers.
    pub fn distance_to_member(&self, masses: &[f64], i: usize) -> f64 {
        if self.grid.dim() == 1 {
            let f = cumulative(masses);
            cdf_distance(&f, &self.cdfs[i], &self.gaps)
        } else {
            self.transport_distance(masses, i)
        }
    }

    fn transport_distance(&self, masses: &[f64], i: usize) -> f64 {
        let src: Vec<usize> = (0..masses.len()).filter(|&c| masses[c] > 0.0).collect();
        let q = &self.members[i];
        let dst: Vec<usize> = (0..q.counts.len()).filter(|&c| q.counts[c] > 0).collect();
        let supply: Vec<f64> = src.iter().map(|&c| masses[c]).collect();
        let total: f64 = supply.iter().sum();
        let supply: Vec<f64> = supply.iter().map(|s| s / total).collect();
        let demand: Vec<f64> = dst
            .iter()
            .map(|&c| q.counts[c] as f64 / self.n as f64)
            .collect();
        let cost: Vec<Vec<f64>> = src
            .iter()
            .map(|&a| {
                dst.iter()
                    .map(|&b| euclid(&self.centers[a], &self.centers[b]))
                    .collect()
            })
            .collect();
        transport::min_cost_transport(&supply, &demand, &cost)
    }

    /// Index of the W1-nearest member to a cell-mass vector; ties resolve to the
    /// earliest member in enumeration order.
    pub fn project(&self, masses: &[f64]) -> usize {
        let mut best = f64::INFINITY;
        let mut arg = 0;
        if self.grid.dim() == 1 {
            let f = cumulative(masses);
            for (i, g) in self.cdfs.iter().enumerate() {
                let d = cdf_distance(&f, g, &self.gaps);
                if d < best - PROJECTION_TIE_TOL {
                    best = d;
                    arg = i;
                }
            }
        } else {
            for i in 0..self.members.len() {
                let d = self.transport_distance(masses, i);
                if d < best - PROJECTION_TIE_TOL {
                    best = d;
                    arg = i;
                }
            }
        }
        arg
    }

    /// Projection of an empirical measure: exact cell masses, then [`Self::project`].
    pub fn project_measure(&self, mu: &EmpiricalMeasure) -> usize {
        self.project(&self.grid.cell_masses(mu))
    }
}

/// Distances closer than this are treated as ties in projection.
pub const PROJECTION_TIE_TOL: f64 = 1e-12;

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .map(|&x| {
            acc += x;
            acc
        })
        .collect()
}

fn cdf_distance(f: &[f64], g: &[f64], gaps: &[f64]) -> f64 {
    gaps.iter()
        .enumerate()
        .map(|(j, gap)| (f[j] - g[j]).abs() * gap)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m1(points: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(1, points.to_vec()).unwrap()
    }

    #[test]
    fn w1_single_atoms() {
        let a = EmpiricalMeasure::dirac(&[0.0]).unwrap();
        let b = EmpiricalMeasure::dirac(&[1.0]).unwrap();
        assert_eq!(wasserstein1(&a, &b).unwrap(), 1.0);
        assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn w1_two_point_supports() {
        // only couplings of the 2x2 problem: t on the diagonal, 1/2 - t off it;
        // cost(t) = t*1 + t*1 + (1/2 - t)*3 + (1/2 - t)*1 = 2 - 2t, minimized at t = 1/2
        let oracle = (0..=100)
            .map(|k| {
                let t = 0.5 * k as f64 / 100.0;
                t * 1.0 + t * 1.0 + (0.5 - t) * 3.0 + (0.5 - t) * 1.0
            })
            .fold(f64::INFINITY, f64::min);
        let v = wasserstein1(&m1(&[0.0, 2.0]), &m1(&[1.0, 3.0])).unwrap();
        assert!((v - oracle).abs() < 1e-15);
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn w1_rejects_mismatch_and_large_supports() {
        let a = m1(&[0.0]);
        let b = EmpiricalMeasure::dirac(&[0.0, 0.0]).unwrap();
        assert!(matches!(wasserstein1(&a, &b), Err(Error::DimensionMismatch { .. })));
        let big = EmpiricalMeasure::uniform(2, vec![0.0; 2 * 513]).unwrap();
        assert!(matches!(
            wasserstein1(&big, &b),
            Err(Error::SupportTooLarge { .. })
        ));
    }

    #[test]
    fn w1_two_dimensional() {
        let a = EmpiricalMeasure::uniform(2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let b = EmpiricalMeasure::uniform(2, vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((wasserstein1(&a, &b).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn measure_validation() {
        assert!(EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
        assert!(EmpiricalMeasure::new(1, vec![f64::NAN], vec![1.0]).is_err());
        assert!(EmpiricalMeasure::new(1, vec![], vec![]).is_err());
        assert!(EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![-0.5, 1.5]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mu = EmpiricalMeasure::new(2, vec![0.1, -2.0, 3.5, 1e-7], vec![0.25, 0.75]).unwrap();
        assert_eq!(EmpiricalMeasure::from_csv(&mu.to_csv()).unwrap(), mu);
    }

    #[test]
    fn grid_cells_and_overflow() {
        let g = StateGrid::uniform(1, 4.0, 16).unwrap();
        assert_eq!(g.cell_count(), 16);
        assert_eq!(g.cell_of(&[-100.0]), 0);
        assert_eq!(g.cell_of(&[100.0]), 15);
        assert_eq!(g.cell_of(&[0.0]), 8);
        assert_eq!(g.cell_of(&[-0.1]), 7);
        assert_eq!(g.center(8), vec![0.25]);
        assert_eq!(g.axis_interval(0, 0).0, f64::NEG_INFINITY);
        assert_eq!(g.axis_interval(0, 15).1, f64::INFINITY);

        let g2 = StateGrid::uniform(2, 1.0, 2).unwrap();
        assert_eq!(g2.cell_count(), 4);
        assert_eq!(g2.cell_of(&[-0.5, 0.5]), 1);
        assert_eq!(g2.cell_of(&[0.5, -0.5]), 2);
        assert_eq!(g2.center(3), vec![0.5, 0.5]);
    }

    #[test]
    fn quantize_denominator_one_takes_heaviest_cell() {
        let g = StateGrid::uniform(1, 1.0, 4).unwrap();
        let mu = EmpiricalMeasure::new(1, vec![-0.9, 0.1, 0.9], vec![0.3, 0.4, 0.3]).unwrap();
        assert_eq!(quantize(&mu, &g, 1).unwrap().counts(), &[0, 0, 1, 0]);
        // tie between cells 0 and 3 goes to the lower index
        let tie = EmpiricalMeasure::new(1, vec![-0.9, 0.9], vec![0.5, 0.5]).unwrap();
        assert_eq!(quantize(&tie, &g, 1).unwrap().counts(), &[1, 0, 0, 0]);
    }

    #[test]
    fn quantize_exact_on_centers() {
        let g = StateGrid::uniform(1, 2.0, 4).unwrap();
        let centers: Vec<f64> = g.centers().into_iter().map(|c| c[0]).collect();
        let mu = EmpiricalMeasure::new(1, centers.clone(), vec![0.125, 0.375, 0.25, 0.25]).unwrap();
        let q = quantize(&mu, &g, 8).unwrap();
        assert_eq!(q.counts(), &[1, 3, 2, 2]);
        let back = dequantize(&q, &g);
        assert!(wasserstein1(&mu, &back).unwrap() <= g.max_cell_diameter() / 2.0);
        assert_eq!(quantize(&back, &g, 8).unwrap(), q);
    }

    #[test]
    fn dequantize_single_cell() {
        let g = StateGrid::uniform(1, 1.0, 3).unwrap();
        let q = QuantizedMeasure::new(vec![0, 5, 0]).unwrap();
        let d = dequantize(&q, &g);
        assert_eq!(d.len(), 1);
        assert_eq!(d.atom(0), &[0.0]);
        assert_eq!(d.weight(0), 1.0);
    }

    #[test]
    fn enumeration_order_and_counts() {
        let g2 = StateGrid::uniform(1, 1.0, 2).unwrap();
        let e = enumerate_quantized(&g2, 2).unwrap();
        let counts: Vec<&[u32]> = e.iter().map(|q| q.counts()).collect();
        assert_eq!(counts, vec![&[2, 0][..], &[1, 1][..], &[0, 2][..]]);
        let g1 = StateGrid::uniform(1, 1.0, 1).unwrap();
        assert_eq!(enumerate_quantized(&g1, 7).unwrap()[0].counts(), &[7]);
        let g4 = StateGrid::uniform(1, 1.0, 4).unwrap();
        assert_eq!(enumerate_quantized(&g4, 3).unwrap().len(), 20);
        let g3 = StateGrid::uniform(1, 1.0, 3).unwrap();
        let six = enumerate_quantized(&g3, 2).unwrap();
        assert_eq!(six.len(), 6);
        let ds: Vec<EmpiricalMeasure> = six.iter().map(|q| dequantize(q, &g3)).collect();
        for i in 0..ds.len() {
            for j in i + 1..ds.len() {
                assert_ne!(ds[i], ds[j]);
            }
        }
    }

    #[test]
    fn enumeration_cap() {
        assert_eq!(composition_count(16, 8), 490_314);
        let err = enumerate_quantized_capped(16, 8, 1000).unwrap_err();
        assert!(matches!(err, Error::Blowup { .. }));
    }

    #[test]
    fn projection_returns_member_itself() {
        let g = StateGrid::uniform(1, 2.0, 4).unwrap();
        let set = MeasureSet::new(&g, 3).unwrap();
        for i in 0..set.len() {
            assert_eq!(set.project(&set.get(i).probabilities()), i);
        }
    }

    #[test]
    fn projection_two_dimensional_matches_one_dimensional_embedding() {
        // a 2-d grid with a single cell on axis 1 behaves like the 1-d grid
        let g1 = StateGrid::uniform(1, 1.0, 3).unwrap();
        let g2 = StateGrid::from_edges(vec![g1.axis_edges(0).to_vec(), vec![-1.0, 1.0]]).unwrap();
        let s1 = MeasureSet::new(&g1, 3).unwrap();
        let s2 = MeasureSet::new(&g2, 3).unwrap();
        for masses in [[0.2, 0.5, 0.3], [0.9, 0.05, 0.05], [0.0, 0.34, 0.66]] {
            assert_eq!(s1.project(&masses), s2.project(&masses));
            for i in 0..s1.len() {
                let a = s1.distance_to_member(&masses, i);
                let b = s2.distance_to_member(&masses, i);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
