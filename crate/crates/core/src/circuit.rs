//! Circuit models of the form `A(x) dx/dt + B(x) x = c(t)` with a
//! periodic, piecewise-polynomial excitation.

use nalgebra::{DMatrix, DVector};

use crate::basis::PiecewisePolynomial;
use crate::error::{Error, Result};

/// A circuit `A(x) dx/dt + B(x) x = c(t)` whose excitation has period `Ts`.
///
/// The excitation is described over one period as a function of
/// `tau = t / Ts mod 1`; this is what the Galerkin projection integrates.
pub trait CircuitModel: Send + Sync {
    /// Number of state variables `Ns`.
    fn ns(&self) -> usize;

    /// Switching period `Ts` in seconds.
    fn period(&self) -> f64;

    /// Writes `A(x)` into `out` (`Ns x Ns`).
    fn mass_matrix_into(&self, x: &[f64], out: &mut DMatrix<f64>);

    /// Writes `B(x)` into `out` (`Ns x Ns`).
    fn stiffness_matrix_into(&self, x: &[f64], out: &mut DMatrix<f64>);

    /// `c_j(tau)` over one period, one entry per state.
    fn excitation_profile(&self) -> &[PiecewisePolynomial];

    /// Names used as CSV column headers.
    fn state_names(&self) -> Vec<String> {
        (1..=self.ns()).map(|j| format!("x{j}")).collect()
    }

    /// Whether `A` and `B` are independent of the state.
    fn is_linear(&self) -> bool {
        false
    }

    /// Interior switching instants of one period, as fractions in `(0, 1)`.
    fn switching_fractions(&self) -> Vec<f64> {
        let mut fractions: Vec<f64> = self
            .excitation_profile()
            .iter()
            .flat_map(|p| {
                let bp = p.breakpoints();
                bp[1..bp.len() - 1].to_vec()
            })
            .collect();
        fractions.sort_by(f64::total_cmp);
        fractions.dedup();
        fractions
    }

    /// `c(t)`, right-continuous at switching instants.
    fn excitation(&self, t: f64) -> DVector<f64> {
        let tau = fast_phase(t, self.period());
        DVector::from_iterator(
            self.ns(),
            self.excitation_profile().iter().map(|p| p.eval(tau)),
        )
    }
}

/// `tau(t) = t / Ts mod 1`.
pub fn fast_phase(t: f64, ts: f64) -> f64 {
    let tau = (t / ts).rem_euclid(1.0);
    // rem_euclid can round up to exactly 1.0 for tiny negative inputs
    if tau >= 1.0 {
        0.0
    } else {
        tau
    }
}

/// Pulsed input voltage: `vi` while `t/Ts mod 1 < duty`, else zero.
pub fn pulse_voltage(t: f64, vi: f64, duty: f64, ts: f64) -> f64 {
    if fast_phase(t, ts) < duty {
        vi
    } else {
        0.0
    }
}

/// `A(x)`, `B(x)` and `c(t)` of a model at one point.
pub fn assemble_eq1<M: CircuitModel + ?Sized>(
    model: &M,
    x: &[f64],
    t: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let n = model.ns();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    model.mass_matrix_into(x, &mut a);
    model.stiffness_matrix_into(x, &mut b);
    (a, b, model.excitation(t))
}

/// `r = A(x) xdot + B(x) x - c(t)`.
pub fn residual<M: CircuitModel + ?Sized>(
    model: &M,
    x: &[f64],
    xdot: &[f64],
    t: f64,
) -> DVector<f64> {
    let (a, b, c) = assemble_eq1(model, x, t);
    let x = DVector::from_column_slice(x);
    let xdot = DVector::from_column_slice(xdot);
    a * xdot + b * x - c
}

/// Saturating inductance `L(i) = Linf + (L0 - Linf) / (1 + (|i|/Iknee)^p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturationCurve {
    pub l0: f64,
    pub linf: f64,
    pub iknee: f64,
    pub p: f64,
}

impl Default for SaturationCurve {
    fn default() -> Self {
        Self {
            l0: 1e-3,
            linf: 0.2e-3,
            iknee: 0.6,
            p: 4.0,
        }
    }
}

impl SaturationCurve {
    /// A curve with `L(i) = l` everywhere.
    pub fn constant(l: f64) -> Self {
        Self {
            l0: l,
            linf: l,
            iknee: 1.0,
            p: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l0 > 0.0 && self.linf > 0.0 && self.iknee > 0.0) {
            return Err(Error::InvalidParameter(
                "inductances and knee current must be positive".into(),
            ));
        }
        if self.linf > self.l0 {
            return Err(Error::InvalidParameter(format!(
                "saturated inductance {} exceeds unsaturated {}",
                self.linf, self.l0
            )));
        }
        if !(self.p >= 2.0) {
            return Err(Error::InvalidParameter(format!(
                "sharpness exponent {} must be at least 2",
                self.p
            )));
        }
        Ok(())
    }

    pub fn inductance(&self, i: f64) -> f64 {
        let u = (i.abs() / self.iknee).powf(self.p);
        if u.is_infinite() {
            return self.linf;
        }
        self.linf + (self.l0 - self.linf) / (1.0 + u)
    }

    /// `dL/di`.
    pub fn inductance_derivative(&self, i: f64) -> f64 {
        if i == 0.0 {
            return 0.0;
        }
        let r = i.abs() / self.iknee;
        let u = r.powf(self.p);
        let du = self.p * r.powf(self.p - 1.0) / self.iknee * i.signum();
        -(self.l0 - self.linf) * du / ((1.0 + u) * (1.0 + u))
    }
}

/// Circuit parameters of the buck converter benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuckParameters {
    /// Input voltage (V).
    pub vi: f64,
    /// Load resistance (Ω).
    pub r: f64,
    /// Output capacitance (F).
    pub c: f64,
    pub curve: SaturationCurve,
    /// Duty cycle of the pulsed source.
    pub d_pulse: f64,
}

impl Default for BuckParameters {
    fn default() -> Self {
        Self {
            vi: 10.0,
            r: 10.0,
            c: 100e-6,
            curve: SaturationCurve::default(),
            d_pulse: 0.7,
        }
    }
}

/// Simplified buck converter: a pulsed source feeding a saturating coil
/// and an RC load. State `x = [iL, vC]`.
///
/// ```text
/// A(x) = diag(L(iL), C)
/// B    = [[0, 1], [-1, 1/R]]
/// c(t) = [v_pulse(t), 0]
/// ```
#[derive(Debug, Clone)]
pub struct BuckConverter {
    params: BuckParameters,
    ts: f64,
    profile: Vec<PiecewisePolynomial>,
}

impl BuckConverter {
    pub fn new(params: BuckParameters, ts: f64) -> Result<Self> {
        params.curve.validate()?;
        let positive = [
            ("vi", params.vi),
            ("r", params.r),
            ("c", params.c),
            ("ts", ts),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} = {v} must be positive"
                )));
            }
        }
        if !(params.d_pulse > 0.0 && params.d_pulse < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "duty cycle {} must lie in (0, 1)",
                params.d_pulse
            )));
        }
        let profile = vec![
            PiecewisePolynomial::pulse(params.vi, params.d_pulse)?,
            PiecewisePolynomial::constant(0.0, params.d_pulse)?,
        ];
        Ok(Self {
            params,
            ts,
            profile,
        })
    }

    pub fn params(&self) -> &BuckParameters {
        &self.params
    }

    /// DC operating point for the period-averaged input `D Vi`.
    pub fn dc_operating_point(&self) -> [f64; 2] {
        let v = self.params.d_pulse * self.params.vi;
        [v / self.params.r, v]
    }
}

impl CircuitModel for BuckConverter {
    fn ns(&self) -> usize {
        2
    }

    fn period(&self) -> f64 {
        self.ts
    }

    fn mass_matrix_into(&self, x: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
        out[(0, 0)] = self.params.curve.inductance(x[0]);
        out[(1, 1)] = self.params.c;
    }

    fn stiffness_matrix_into(&self, _x: &[f64], out: &mut DMatrix<f64>) {
        out[(0, 0)] = 0.0;
        out[(0, 1)] = 1.0;
        out[(1, 0)] = -1.0;
        out[(1, 1)] = 1.0 / self.params.r;
    }

    fn excitation_profile(&self) -> &[PiecewisePolynomial] {
        &self.profile
    }

    fn state_names(&self) -> Vec<String> {
        vec!["iL".into(), "vC".into()]
    }

    fn is_linear(&self) -> bool {
        self.params.curve.l0 == self.params.curve.linf
    }

    fn excitation(&self, t: f64) -> DVector<f64> {
        DVector::from_vec(vec![
            pulse_voltage(t, self.params.vi, self.params.d_pulse, self.ts),
            0.0,
        ])
    }
}

/// Linear time-invariant circuit with constant `A`, `B` and an arbitrary
/// periodic piecewise-polynomial excitation.
#[derive(Debug, Clone)]
pub struct LinearCircuit {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    profile: Vec<PiecewisePolynomial>,
    ts: f64,
}

impl LinearCircuit {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        profile: Vec<PiecewisePolynomial>,
        ts: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: b.nrows(),
            });
        }
        if profile.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: profile.len(),
            });
        }
        if !(ts > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "period {ts} must be positive"
            )));
        }
        Ok(Self { a, b, profile, ts })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
}

impl CircuitModel for LinearCircuit {
    fn ns(&self) -> usize {
        self.a.nrows()
    }

    fn period(&self) -> f64 {
        self.ts
    }

    fn mass_matrix_into(&self, _x: &[f64], out: &mut DMatrix<f64>) {
        out.copy_from(&self.a);
    }

    fn stiffness_matrix_into(&self, _x: &[f64], out: &mut DMatrix<f64>) {
        out.copy_from(&self.b);
    }

    fn excitation_profile(&self) -> &[PiecewisePolynomial] {
        &self.profile
    }

    fn is_linear(&self) -> bool {
        true
    }
}
