//! PWM basis functions on the unit period.
//!
//! Every function is stored as a [`PiecewisePolynomial`] whose segments carry
//! monomial coefficients in the centered local coordinate
//! `u = (2 tau - a - b) / (b - a)` of the segment `[a, b]`, so `u ∈ [-1, 1]`.
//! Products, derivatives and integrals are evaluated in closed form, so inner
//! products are exact up to rounding.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Piecewise polynomial on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePolynomial {
    breakpoints: Vec<f64>,
    segments: Vec<Vec<f64>>,
}

impl PiecewisePolynomial {
    /// Builds a piecewise polynomial from breakpoints and local monomial
    /// coefficients (lowest degree first) for each segment.
    pub fn new(breakpoints: Vec<f64>, segments: Vec<Vec<f64>>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(Error::MalformedPolynomial(
                "at least two breakpoints are required".into(),
            ));
        }
        if breakpoints[0] != 0.0 || *breakpoints.last().unwrap() != 1.0 {
            return Err(Error::MalformedPolynomial(
                "breakpoints must start at 0 and end at 1".into(),
            ));
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::MalformedPolynomial(
                "breakpoints must be strictly increasing".into(),
            ));
        }
        if segments.len() != breakpoints.len() - 1 {
            return Err(Error::MalformedPolynomial(format!(
                "{} breakpoints need {} segments, got {}",
                breakpoints.len(),
                breakpoints.len() - 1,
                segments.len()
            )));
        }
        if segments.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::MalformedPolynomial("non-finite coefficient".into()));
        }
        let segments = segments
            .into_iter()
            .map(|c| if c.is_empty() { vec![0.0] } else { c })
            .collect();
        Ok(Self {
            breakpoints,
            segments,
        })
    }

    /// Constant `value` with a breakpoint at `split` (kept so it shares
    /// segments with the basis functions).
    pub fn constant(value: f64, split: f64) -> Result<Self> {
        Self::new(vec![0.0, split, 1.0], vec![vec![value], vec![value]])
    }

    /// Pulse of height `amplitude` on `[0, duty)` and zero on `[duty, 1]`.
    pub fn pulse(amplitude: f64, duty: f64) -> Result<Self> {
        Self::new(vec![0.0, duty, 1.0], vec![vec![amplitude], vec![0.0]])
    }

    pub fn zero() -> Self {
        Self {
            breakpoints: vec![0.0, 1.0],
            segments: vec![vec![0.0]],
        }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Local monomial coefficients of each segment.
    pub fn segments(&self) -> &[Vec<f64>] {
        &self.segments
    }

    /// Highest nonzero power on the given segment (0 for the zero polynomial).
    pub fn degree_on(&self, segment: usize) -> usize {
        self.segments[segment]
            .iter()
            .rposition(|&c| c != 0.0)
            .unwrap_or(0)
    }

    fn segment_of(&self, tau: f64) -> usize {
        // right-continuous: a breakpoint belongs to the segment it starts
        let n = self.segments.len();
        match self.breakpoints[1..n].iter().rposition(|&b| b <= tau) {
            Some(i) => i + 1,
            None => 0,
        }
    }

    fn local(&self, segment: usize, tau: f64) -> (f64, f64) {
        let a = self.breakpoints[segment];
        let b = self.breakpoints[segment + 1];
        let h = b - a;
        ((2.0 * tau - a - b) / h, h)
    }

    /// Value at `tau`; at an interior breakpoint the right segment is used.
    pub fn eval(&self, tau: f64) -> f64 {
        let seg = self.segment_of(tau);
        let (s, _) = self.local(seg, tau);
        horner(&self.segments[seg], s)
    }

    /// Value at `tau` taken from the segment ending there (left limit).
    pub fn eval_left(&self, tau: f64) -> f64 {
        let mut seg = self.segment_of(tau);
        if seg > 0 && self.breakpoints[seg] == tau {
            seg -= 1;
        }
        let (s, _) = self.local(seg, tau);
        horner(&self.segments[seg], s)
    }

    /// Evaluates, at `tau`, the polynomial piece of the segment containing
    /// `hint`. Used to keep the input of one smooth interval active up to
    /// and including its right end.
    pub fn eval_piece(&self, hint: f64, tau: f64) -> f64 {
        let seg = self.segment_of(hint);
        let (s, _) = self.local(seg, tau);
        horner(&self.segments[seg], s)
    }

    /// First derivative with respect to `tau` at `tau` (right segment at breakpoints).
    pub fn eval_derivative(&self, tau: f64) -> f64 {
        let seg = self.segment_of(tau);
        let (s, h) = self.local(seg, tau);
        let c = &self.segments[seg];
        let mut acc = 0.0;
        for (i, &ci) in c.iter().enumerate().skip(1).rev() {
            acc = acc * s + i as f64 * ci;
        }
        2.0 * acc / h
    }

    /// Derivative with respect to `tau`, segment by segment.
    pub fn derivative(&self) -> Self {
        let segments = self
            .segments
            .iter()
            .zip(self.breakpoints.windows(2))
            .map(|(c, w)| {
                let h = w[1] - w[0];
                if c.len() <= 1 {
                    vec![0.0]
                } else {
                    c.iter()
                        .enumerate()
                        .skip(1)
                        .map(|(i, &ci)| 2.0 * i as f64 * ci / h)
                        .collect()
                }
            })
            .collect();
        Self {
            breakpoints: self.breakpoints.clone(),
            segments,
        }
    }

    /// Continuous antiderivative, zero at `tau = 0`.
    pub fn antiderivative(&self) -> Self {
        let mut offset = 0.0;
        let mut segments = Vec::with_capacity(self.segments.len());
        for (c, w) in self.segments.iter().zip(self.breakpoints.windows(2)) {
            let half = 0.5 * (w[1] - w[0]);
            let mut out = Vec::with_capacity(c.len() + 1);
            out.push(0.0);
            out.extend(
                c.iter()
                    .enumerate()
                    .map(|(i, &ci)| half * ci / (i + 1) as f64),
            );
            // anchor the value at u = -1 to the running offset
            let at_left: f64 = out
                .iter()
                .enumerate()
                .map(|(i, &v)| if i % 2 == 0 { v } else { -v })
                .sum();
            out[0] = offset - at_left;
            offset = out.iter().sum();
            segments.push(out);
        }
        Self {
            breakpoints: self.breakpoints.clone(),
            segments,
        }
    }

    /// Exact integral over `[0, 1]`.
    pub fn integral(&self) -> f64 {
        self.segments
            .iter()
            .zip(self.breakpoints.windows(2))
            .map(|(c, w)| {
                let h = w[1] - w[0];
                h * c
                    .iter()
                    .step_by(2)
                    .enumerate()
                    .map(|(i, &ci)| ci / (2 * i + 1) as f64)
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            breakpoints: self.breakpoints.clone(),
            segments: self
                .segments
                .iter()
                .map(|c| c.iter().map(|&v| v * factor).collect())
                .collect(),
        }
    }

    /// `self += alpha * other`; both must share breakpoints.
    fn axpy(&mut self, alpha: f64, other: &Self) {
        debug_assert_eq!(self.breakpoints, other.breakpoints);
        for (mine, theirs) in self.segments.iter_mut().zip(&other.segments) {
            if mine.len() < theirs.len() {
                mine.resize(theirs.len(), 0.0);
            }
            for (m, &t) in mine.iter_mut().zip(theirs) {
                *m += alpha * t;
            }
        }
    }

    /// Re-expresses the polynomial on a finer set of breakpoints that
    /// contains all of its own.
    pub fn refine(&self, breakpoints: &[f64]) -> Self {
        if breakpoints == self.breakpoints.as_slice() {
            return self.clone();
        }
        let segments = breakpoints
            .windows(2)
            .map(|w| {
                let mid = 0.5 * (w[0] + w[1]);
                let seg = self.segment_of(mid);
                let a = self.breakpoints[seg];
                let b = self.breakpoints[seg + 1];
                let h = b - a;
                // u = offset + scale * u' maps the sub-interval onto [-1, 1]
                let offset = (w[0] + w[1] - a - b) / h;
                let scale = (w[1] - w[0]) / h;
                affine_substitute(&self.segments[seg], offset, scale)
            })
            .collect();
        Self {
            breakpoints: breakpoints.to_vec(),
            segments,
        }
    }
}

fn horner(c: &[f64], s: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * s + ci)
}

/// Coefficients of `q(offset + scale * u)` as a polynomial in `u`.
fn affine_substitute(q: &[f64], offset: f64, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; q.len()];
    for &qi in q.iter().rev() {
        // out <- out * (offset + scale s) + qi
        let mut next = vec![0.0; q.len()];
        for (i, &o) in out.iter().enumerate() {
            next[i] += o * offset;
            if i + 1 < next.len() {
                next[i + 1] += o * scale;
            }
        }
        next[0] += qi;
        out = next;
    }
    out
}

fn merged_breakpoints(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut merged: Vec<f64> = a.iter().chain(b).copied().collect();
    merged.sort_by(f64::total_cmp);
    merged.dedup();
    merged
}

/// `∫ f g dtau` over a segment of width `h` (odd powers of `u` vanish).
fn segment_product_integral(f: &[f64], g: &[f64], h: f64) -> f64 {
    let mut acc = 0.0;
    for (i, &fi) in f.iter().enumerate() {
        for (j, &gj) in g.iter().enumerate().skip(i % 2).step_by(2) {
            acc += fi * gj / (i + j + 1) as f64;
        }
    }
    h * acc
}

/// Exact L2(0,1) inner product.
pub fn inner_product(f: &PiecewisePolynomial, g: &PiecewisePolynomial) -> f64 {
    if f.breakpoints == g.breakpoints {
        return f
            .segments
            .iter()
            .zip(&g.segments)
            .zip(f.breakpoints.windows(2))
            .map(|((fs, gs), w)| segment_product_integral(fs, gs, w[1] - w[0]))
            .sum();
    }
    let merged = merged_breakpoints(&f.breakpoints, &g.breakpoints);
    inner_product(&f.refine(&merged), &g.refine(&merged))
}

/// Orthonormal PWM basis `p_0, ..., p_Np` with breakpoint `D`.
#[derive(Debug, Clone)]
pub struct PwmBasis {
    duty: f64,
    functions: Vec<PiecewisePolynomial>,
    derivatives: Vec<PiecewisePolynomial>,
}

/// Norms below this are treated as a numerically degenerate basis.
const MIN_NORM: f64 = 1e-14;

impl PwmBasis {
    /// Builds `p_0 = 1`, the piecewise linear `p_1`, and higher functions by
    /// integrating the previous one and orthonormalizing it against all
    /// lower ones (modified Gram-Schmidt with one reorthogonalization pass).
    pub fn new(duty: f64, np: usize) -> Result<Self> {
        if !(duty > 0.0 && duty < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "basis parameter D = {duty} must lie in (0, 1)"
            )));
        }
        let sqrt3 = 3f64.sqrt();
        let mut functions = vec![PiecewisePolynomial::constant(1.0, duty)?];
        if np >= 1 {
            // sqrt(3)(2 tau - D)/D on [0, D] and sqrt(3)(1 + D - 2 tau)/(1 - D)
            // on [D, 1], i.e. sqrt(3) u and -sqrt(3) u in local coordinates
            functions.push(PiecewisePolynomial::new(
                vec![0.0, duty, 1.0],
                vec![vec![0.0, sqrt3], vec![0.0, -sqrt3]],
            )?);
        }
        for k in 2..=np {
            let candidate = functions[k - 1].antiderivative();
            let next = orthonormalize(candidate, &functions, k)?;
            functions.push(next);
        }
        let derivatives = functions
            .iter()
            .map(PiecewisePolynomial::derivative)
            .collect();
        Ok(Self {
            duty,
            functions,
            derivatives,
        })
    }

    pub fn duty(&self) -> f64 {
        self.duty
    }

    /// Highest basis index `Np`.
    pub fn order(&self) -> usize {
        self.functions.len() - 1
    }

    /// Number of basis functions, `Np + 1`.
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn functions(&self) -> &[PiecewisePolynomial] {
        &self.functions
    }

    pub fn function(&self, k: usize) -> Result<&PiecewisePolynomial> {
        self.functions.get(k).ok_or(Error::IndexOutOfRange {
            index: k,
            max: self.order(),
        })
    }

    /// `p_k(tau)` with range checks on both arguments.
    pub fn evaluate(&self, k: usize, tau: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::TauOutOfRange(tau));
        }
        Ok(self.function(k)?.eval(tau))
    }

    /// All basis values at `tau` (unchecked, `tau` must be in `[0, 1]`).
    pub fn values_into(&self, tau: f64, out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.functions) {
            *o = p.eval(tau);
        }
    }

    /// All basis derivatives `dp_k/dtau` at `tau`.
    pub fn derivatives_into(&self, tau: f64, out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.derivatives) {
            *o = p.eval(tau);
        }
    }

    /// Gram matrix of exact pairwise inner products.
    pub fn gram(&self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |k, l| {
            inner_product(&self.functions[k], &self.functions[l])
        })
    }

    /// Galerkin mass (`cI`) and transport (`cQ`) matrices for period `ts`.
    pub fn galerkin_matrices(&self, ts: f64) -> Result<GalerkinMatrices> {
        if !(ts > 0.0 && ts.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "switching period {ts} must be positive"
            )));
        }
        let n = self.len();
        let identity = self.gram() * ts;
        let transport = DMatrix::from_fn(n, n, |k, l| {
            -inner_product(&self.derivatives[k], &self.functions[l])
        });
        Ok(GalerkinMatrices {
            identity,
            transport,
            ts,
        })
    }

    /// Exact projections `∫ w p_l dtau` of a waveform onto every basis function.
    pub fn project(&self, waveform: &PiecewisePolynomial) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.functions.iter().map(|p| inner_product(waveform, p)),
        )
    }
}

/// Removes the components of `candidate` along `lower` (two passes) and
/// normalizes; the leading coefficient on the first segment is made positive.
pub(crate) fn orthonormalize(
    mut candidate: PiecewisePolynomial,
    lower: &[PiecewisePolynomial],
    index: usize,
) -> Result<PiecewisePolynomial> {
    for _pass in 0..2 {
        for q in lower {
            let coeff = inner_product(&candidate, q);
            candidate.axpy(-coeff, q);
        }
    }
    let norm = inner_product(&candidate, &candidate).max(0.0).sqrt();
    if !(norm >= MIN_NORM) {
        return Err(Error::DegenerateBasis { index, norm });
    }
    let lead = candidate.segments[0]
        .iter()
        .rev()
        .find(|&&c| c != 0.0)
        .copied()
        .unwrap_or(1.0);
    let sign = if lead < 0.0 { -1.0 } else { 1.0 };
    Ok(candidate.scaled(sign / norm))
}

/// Galerkin projection matrices of a [`PwmBasis`].
#[derive(Debug, Clone)]
pub struct GalerkinMatrices {
    /// `Ts ∫ P Pᵀ dtau`
    pub identity: DMatrix<f64>,
    /// `-∫ (dP/dtau) Pᵀ dtau`
    pub transport: DMatrix<f64>,
    pub ts: f64,
}
