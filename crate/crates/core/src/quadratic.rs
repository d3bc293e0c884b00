//! Sparse symmetric matrices and degree-2 polynomials `f(z) = zᵀQz + cᵀz + d`.
//!
//! Every objective and constraint of the ACOPF formulation is quadratic, so this
//! is the one function representation used by the problem builders, the local
//! solver and the certification routines.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

/// Real symmetric matrix stored as its upper triangle (`row <= col`), sorted
/// and duplicate-free. Symmetry is exact by construction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SymMatrix {
    dim: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    /// Builds from symmetric-matrix entries given once per unordered pair: an
    /// entry `(r, c, v)` with `r != c` sets both `A[r][c]` and `A[c][r]` to `v`.
    /// Repeated pairs are summed.
    pub fn from_upper<I>(dim: usize, triplets: I) -> Self
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (r, c, v) in triplets {
            assert!(r < dim && c < dim, "entry ({r}, {c}) outside {dim}x{dim}");
            let key = if r <= c { (r, c) } else { (c, r) };
            *acc.entry(key).or_insert(0.0) += v;
        }
        Self::from_map(dim, acc)
    }

    /// Builds from a full (both triangles) entry list. Returns `None` when the
    /// accumulated matrix is not exactly symmetric.
    pub fn from_full<I>(dim: usize, triplets: I) -> Option<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (r, c, v) in triplets {
            assert!(r < dim && c < dim, "entry ({r}, {c}) outside {dim}x{dim}");
            *acc.entry((r, c)).or_insert(0.0) += v;
        }
        let mut upper = BTreeMap::new();
        for (&(r, c), &v) in &acc {
            if r > c {
                continue;
            }
            if r != c {
                let mirror = acc.get(&(c, r)).copied().unwrap_or(0.0);
                if mirror != v {
                    return None;
                }
            }
            upper.insert((r, c), v);
        }
        for (&(r, c), &v) in &acc {
            if r > c && v != 0.0 && !acc.contains_key(&(c, r)) {
                return None;
            }
        }
        Some(Self::from_map(dim, upper))
    }

    fn from_map(dim: usize, acc: BTreeMap<(usize, usize), f64>) -> Self {
        let entries = acc
            .into_iter()
            .filter(|&(_, v)| v != 0.0)
            .map(|((r, c), v)| (r, c, v))
            .collect();
        Self { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Upper-triangle entries `(row, col, value)` with `row <= col`.
    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let key = if r <= c { (r, c) } else { (c, r) };
        self.entries
            .binary_search_by(|&(a, b, _)| (a, b).cmp(&key))
            .map(|i| self.entries[i].2)
            .unwrap_or(0.0)
    }

    /// `xᵀ A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.entries
            .iter()
            .map(|&(r, c, v)| {
                if r == c {
                    v * x[r] * x[r]
                } else {
                    2.0 * v * x[r] * x[c]
                }
            })
            .sum()
    }

    /// `out += scale · A x`.
    pub fn mul_add(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        for &(r, c, v) in &self.entries {
            out[r] += scale * v * x[c];
            if r != c {
                out[c] += scale * v * x[r];
            }
        }
    }

    /// `tr(A W)` for a symmetric dense `W`.
    pub fn trace_with(&self, w: &DMatrix<f64>) -> f64 {
        self.entries
            .iter()
            .map(|&(r, c, v)| {
                if r == c {
                    v * w[(r, r)]
                } else {
                    v * (w[(r, c)] + w[(c, r)])
                }
            })
            .sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for &(r, c, v) in &self.entries {
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
        m
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .map(|&(r, c, v)| (r, c, v * s))
                .filter(|e| e.2 != 0.0)
                .collect(),
        }
    }

    /// Re-indexes into a space of dimension `dim`; entries whose row or column
    /// maps to `None` are dropped.
    pub fn remap(&self, dim: usize, map: impl Fn(usize) -> Option<usize>) -> Self {
        Self::from_upper(
            dim,
            self.entries
                .iter()
                .filter_map(|&(r, c, v)| Some((map(r)?, map(c)?, v))),
        )
    }

    /// Sum of `self` and `other` scaled by `s`.
    pub fn add_scaled(&self, other: &SymMatrix, s: f64) -> Self {
        assert_eq!(self.dim, other.dim);
        Self::from_upper(
            self.dim,
            self.entries
                .iter()
                .copied()
                .chain(other.entries.iter().map(|&(r, c, v)| (r, c, v * s))),
        )
    }

    /// Indices touched by any entry.
    pub fn support(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.entries.iter().flat_map(|&(r, c, _)| [r, c]).collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }

    /// Frobenius inner product `⟨A, B⟩`.
    pub fn frobenius_dot(&self, other: &SymMatrix) -> f64 {
        let (mut i, mut j) = (0, 0);
        let mut acc = 0.0;
        while i < self.entries.len() && j < other.entries.len() {
            let (r1, c1, v1) = self.entries[i];
            let (r2, c2, v2) = other.entries[j];
            match (r1, c1).cmp(&(r2, c2)) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += if r1 == c1 { v1 * v2 } else { 2.0 * v1 * v2 };
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

/// `f(z) = zᵀQz + cᵀz + d` over a fixed-dimension variable vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFunction {
    pub q: SymMatrix,
    /// Sparse linear term, sorted by index and duplicate-free.
    pub c: Vec<(usize, f64)>,
    pub d: f64,
}

impl QuadraticFunction {
    pub fn new(q: SymMatrix, linear: impl IntoIterator<Item = (usize, f64)>, d: f64) -> Self {
        let dim = q.dim();
        Self {
            c: merge_linear(dim, linear),
            q,
            d,
        }
    }

    pub fn constant(dim: usize, d: f64) -> Self {
        Self::new(SymMatrix::zeros(dim), [], d)
    }

    pub fn linear(dim: usize, terms: impl IntoIterator<Item = (usize, f64)>, d: f64) -> Self {
        Self::new(SymMatrix::zeros(dim), terms, d)
    }

    pub fn dim(&self) -> usize {
        self.q.dim()
    }

    pub fn is_linear(&self) -> bool {
        self.q.is_empty()
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        self.q.quad_form(z) + self.c.iter().map(|&(i, v)| v * z[i]).sum::<f64>() + self.d
    }

    /// `∇f(z) = 2Qz + c`.
    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.gradient_add(z, 1.0, &mut g);
        g
    }

    /// `out += scale · ∇f(z)`.
    pub fn gradient_add(&self, z: &[f64], scale: f64, out: &mut [f64]) {
        self.q.mul_add(z, 2.0 * scale, out);
        for &(i, v) in &self.c {
            out[i] += scale * v;
        }
    }

    /// Sparse gradient restricted to the variables the function touches.
    pub fn gradient_sparse(&self, z: &[f64]) -> Vec<(usize, f64)> {
        let mut acc: BTreeMap<usize, f64> = self.c.iter().copied().collect();
        for &(r, c, v) in self.q.entries() {
            *acc.entry(r).or_insert(0.0) += 2.0 * v * z[c];
            if r != c {
                *acc.entry(c).or_insert(0.0) += 2.0 * v * z[r];
            }
        }
        acc.into_iter().collect()
    }

    /// Constant Hessian `2Q` as a dense matrix.
    pub fn hessian(&self) -> DMatrix<f64> {
        self.q.to_dense() * 2.0
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            q: self.q.scaled(s),
            c: self.c.iter().map(|&(i, v)| (i, v * s)).collect(),
            d: self.d * s,
        }
    }

    pub fn add(&self, other: &QuadraticFunction) -> Self {
        Self::new(
            self.q.add_scaled(&other.q, 1.0),
            self.c.iter().chain(other.c.iter()).copied(),
            self.d + other.d,
        )
    }

    pub fn negated(&self) -> Self {
        self.scaled(-1.0)
    }

    /// Same function viewed in a larger (or re-ordered) variable space.
    pub fn remap(&self, dim: usize, map: impl Fn(usize) -> Option<usize> + Copy) -> Self {
        Self::new(
            self.q.remap(dim, map),
            self.c.iter().filter_map(|&(i, v)| Some((map(i)?, v))),
            self.d,
        )
    }

    /// Variables this function depends on.
    pub fn support(&self) -> Vec<usize> {
        let mut idx = self.q.support();
        idx.extend(self.c.iter().map(|&(i, _)| i));
        idx.sort_unstable();
        idx.dedup();
        idx
    }

    pub fn with_linear_term(&self, index: usize, coef: f64) -> Self {
        Self::new(
            self.q.clone(),
            self.c.iter().copied().chain(std::iter::once((index, coef))),
            self.d,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.d.is_finite()
            && self.c.iter().all(|(_, v)| v.is_finite())
            && self.q.entries().iter().all(|e| e.2.is_finite())
    }
}

fn merge_linear(dim: usize, terms: impl IntoIterator<Item = (usize, f64)>) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for (i, v) in terms {
        assert!(i < dim, "linear term index {i} outside dimension {dim}");
        *acc.entry(i).or_insert(0.0) += v;
    }
    acc.into_iter().filter(|&(_, v)| v != 0.0).collect()
}
