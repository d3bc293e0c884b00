//! Bus admittance matrix and the real quadratic forms of rectangular power flow.
//!
//! With `x = (Re V, Im V)` of length `2n`, every power quantity of the network
//! is a quadratic form `xᵀ A x`:
//!
//! * `Y_k`, `Ȳ_k`: active and reactive injection at bus `k`;
//! * `M_k`: squared voltage magnitude at bus `k`;
//! * `Y_lm`, `Ȳ_lm`: active and reactive flow entering branch `(l, m)` at `l`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::case_io::CaseData;
use crate::error::{Error, Result};
use crate::quadratic::SymMatrix;

/// Π-model two-port admittances of one in-service branch, with bus positions.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchAdmittance {
    /// Position in `CaseData::branches`.
    pub branch: usize,
    pub from: usize,
    pub to: usize,
    pub yff: Complex64,
    pub yft: Complex64,
    pub ytf: Complex64,
    pub ytt: Complex64,
}

impl BranchAdmittance {
    /// Row operator of the from end: current `I_lm = yff V_l + yft V_m`.
    pub fn from_row(&self) -> [(usize, Complex64); 2] {
        [(self.from, self.yff), (self.to, self.yft)]
    }

    /// Row operator of the to end: current `I_ml = ytt V_m + ytf V_l`.
    pub fn to_row(&self) -> [(usize, Complex64); 2] {
        [(self.to, self.ytt), (self.from, self.ytf)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceModel {
    pub n: usize,
    pub y: DMatrix<Complex64>,
    pub branches: Vec<BranchAdmittance>,
}

impl AdmittanceModel {
    /// Nonzero entries of row `k` of `y`, i.e. the operator `y_k = e_k e_kᵀ y`.
    pub fn row(&self, k: usize) -> Vec<(usize, Complex64)> {
        (0..self.n)
            .filter_map(|j| {
                let v = self.y[(k, j)];
                (v != Complex64::new(0.0, 0.0)).then_some((j, v))
            })
            .collect()
    }

    /// Complex power injections `V ∘ conj(y V)`.
    pub fn injections(&self, v: &[Complex64]) -> Vec<Complex64> {
        let vv = nalgebra::DVector::from_column_slice(v);
        let i = &self.y * vv;
        v.iter().zip(i.iter()).map(|(a, b)| a * b.conj()).collect()
    }
}

/// Assembles `y` from the Π-model with tap ratio and phase shift at the from
/// end, half line charging at each end and bus shunts on the diagonal.
/// Out-of-service branches are skipped.
pub fn build_admittance(case: &CaseData) -> Result<AdmittanceModel> {
    let n = case.buses.len();
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    let mut branches = Vec::new();
    for (idx, br) in case.branches.iter().enumerate() {
        if !br.in_service {
            continue;
        }
        let z = Complex64::new(br.r, br.x);
        if z.norm_sqr() <= 0.0 {
            return Err(Error::ZeroImpedanceBranch(idx));
        }
        let from = case
            .bus_index(br.from)
            .ok_or(Error::UnknownBusReference(br.from))?;
        let to = case
            .bus_index(br.to)
            .ok_or(Error::UnknownBusReference(br.to))?;
        let ys = z.inv();
        let half_b = Complex64::new(0.0, br.b_charge / 2.0);
        let t = Complex64::from_polar(br.tap, br.shift);
        let yff = (ys + half_b) / (br.tap * br.tap);
        let yft = -ys / t.conj();
        let ytf = -ys / t;
        let ytt = ys + half_b;
        y[(from, from)] += yff;
        y[(from, to)] += yft;
        y[(to, from)] += ytf;
        y[(to, to)] += ytt;
        branches.push(BranchAdmittance {
            branch: idx,
            from,
            to,
            yff,
            yft,
            ytf,
            ytt,
        });
    }
    for (k, bus) in case.buses.iter().enumerate() {
        y[(k, k)] += Complex64::new(bus.gs, bus.bs);
    }
    Ok(AdmittanceModel { n, y, branches })
}

/// Flow forms of one oriented branch `(l, m)`, measured at `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedFlow {
    pub branch: usize,
    pub from: usize,
    pub to: usize,
    pub y: SymMatrix,
    pub ybar: SymMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowMatrices {
    pub n: usize,
    pub yk: Vec<SymMatrix>,
    pub ybar_k: Vec<SymMatrix>,
    pub mk: Vec<SymMatrix>,
    /// Both orientations of every in-service branch: `(l, m)` then `(m, l)`.
    pub flows: Vec<OrientedFlow>,
}

/// Real forms `(Y, Ȳ)` of `V_k · conj(Σ_j a_j V_j)` for a single-row operator.
///
/// Equal to the block formulas
/// `Y = ½[[Re(A+Aᵀ), Im(Aᵀ−A)], [Im(A−Aᵀ), Re(A+Aᵀ)]]` and
/// `Ȳ = −½[[Im(A+Aᵀ), Re(A−Aᵀ)], [Re(Aᵀ−A), Im(A+Aᵀ)]]`
/// with `A = e_k aᵀ`, assembled entry by entry.
pub fn power_forms(n: usize, k: usize, row: &[(usize, Complex64)]) -> (SymMatrix, SymMatrix) {
    let mut p = Vec::with_capacity(8 * row.len());
    let mut q = Vec::with_capacity(8 * row.len());
    let (ek, fk) = (k, n + k);
    for &(j, a) in row {
        let (ej, fj) = (j, n + j);
        let (g, b) = (a.re, a.im);
        push_product(&mut p, ek, ej, g);
        push_product(&mut p, fk, fj, g);
        push_product(&mut p, fk, ej, b);
        push_product(&mut p, ek, fj, -b);
        push_product(&mut q, fk, ej, g);
        push_product(&mut q, ek, fj, -g);
        push_product(&mut q, ek, ej, -b);
        push_product(&mut q, fk, fj, -b);
    }
    (SymMatrix::from_upper(2 * n, p), SymMatrix::from_upper(2 * n, q))
}

/// Adds `coef · x_a x_b` to an upper-triangle entry list.
fn push_product(out: &mut Vec<(usize, usize, f64)>, a: usize, b: usize, coef: f64) {
    if coef == 0.0 {
        return;
    }
    if a == b {
        out.push((a, a, coef));
    } else {
        out.push((a.min(b), a.max(b), coef / 2.0));
    }
}

pub fn build_flow_matrices(adm: &AdmittanceModel) -> FlowMatrices {
    let n = adm.n;
    let mut yk = Vec::with_capacity(n);
    let mut ybar_k = Vec::with_capacity(n);
    let mut mk = Vec::with_capacity(n);
    for k in 0..n {
        let (p, q) = power_forms(n, k, &adm.row(k));
        yk.push(p);
        ybar_k.push(q);
        mk.push(SymMatrix::from_upper(2 * n, [(k, k, 1.0), (n + k, n + k, 1.0)]));
    }
    let mut flows = Vec::with_capacity(2 * adm.branches.len());
    for br in &adm.branches {
        let (p, q) = power_forms(n, br.from, &br.from_row());
        flows.push(OrientedFlow {
            branch: br.branch,
            from: br.from,
            to: br.to,
            y: p,
            ybar: q,
        });
        let (p, q) = power_forms(n, br.to, &br.to_row());
        flows.push(OrientedFlow {
            branch: br.branch,
            from: br.to,
            to: br.from,
            y: p,
            ybar: q,
        });
    }
    FlowMatrices {
        n,
        yk,
        ybar_k,
        mk,
        flows,
    }
}

/// Complex voltages from the rectangular vector `x = (Re V, Im V)`.
pub fn voltages(x: &[f64]) -> Vec<Complex64> {
    let n = x.len() / 2;
    (0..n).map(|k| Complex64::new(x[k], x[n + k])).collect()
}
