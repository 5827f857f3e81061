//! Galerkin-in-time assembly of the multirate system.
//!
//! The solution is expanded as `x_j(t1, t2) = Σ_k p_k(tau(t2)) w_{j,k}(t1)`
//! and the residual is projected onto every `p_l` over one switching
//! period. Coefficients are stored state-major:
//! `[w_{1,0}, …, w_{1,Np}, w_{2,0}, …, w_{Ns,Np}]`.
//!
//! Two variants are provided:
//!
//! * [`GalerkinMode::Simplified`] evaluates `A` and `B` at the envelope
//!   `[w_{1,0}, …, w_{Ns,0}]` only, which turns the projection into the
//!   Kronecker system `cA(w) W' + cB(w) W = cC` with `cA = A ⊗ cI` and
//!   `cB = B ⊗ cI + A ⊗ cQ`.
//! * [`GalerkinMode::Original`] evaluates the full projection integrals by
//!   composite Gauss–Legendre quadrature at every call.

use nalgebra::{DMatrix, DVector};

use crate::basis::{GalerkinMatrices, PwmBasis};
use crate::circuit::{fast_phase, CircuitModel};
use crate::error::{Error, Result};
use crate::integrate::{ImplicitSystem, Segment, Trajectory};
use crate::quadrature::CompositeRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GalerkinMode {
    Simplified,
    Original,
}

/// How the ripple coefficients are set at `t1 = 0`.
///
/// Only `x̂(0, 0) = x(0)` constrains the diagonal, so the rest of the initial
/// fast-scale profile is free. Starting with zero ripples puts a profile on
/// the initial line that the truncated basis can only follow through fast,
/// weakly damped coefficient oscillations; the quasi-static choice starts on
/// the slow manifold instead.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub enum RippleInit {
    /// Envelope = `x0`, ripples zero.
    Zero,
    /// Ripple rows of the envelope-evaluated projection balanced with
    /// `W' = 0`, envelope shifted so that the reconstruction at `t = 0`
    /// equals `x0`. The envelope-evaluated form is used in both modes: the
    /// full projection has no quasi-static ripple solution at low switching
    /// frequencies with a strongly saturating inductor.
    #[default]
    QuasiStatic,
}

/// Index arithmetic of the state-major coefficient vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoefficientLayout {
    pub ns: usize,
    pub np: usize,
}

impl CoefficientLayout {
    pub fn new(ns: usize, np: usize) -> Self {
        Self { ns, np }
    }

    pub fn block(&self) -> usize {
        self.np + 1
    }

    pub fn len(&self) -> usize {
        self.ns * self.block()
    }

    pub fn is_empty(&self) -> bool {
        self.ns == 0
    }

    pub fn index(&self, state: usize, k: usize) -> usize {
        state * self.block() + k
    }

    fn check(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: w.len(),
            });
        }
        Ok(())
    }

    /// Initial coefficients: envelope = `x0`, ripples zero.
    pub fn initial_state(&self, x0: &[f64]) -> Result<DVector<f64>> {
        if x0.len() != self.ns {
            return Err(Error::DimensionMismatch {
                expected: self.ns,
                got: x0.len(),
            });
        }
        let mut w = DVector::zeros(self.len());
        for (j, &x) in x0.iter().enumerate() {
            w[self.index(j, 0)] = x;
        }
        Ok(w)
    }
}

/// Extracts the envelope `[w_{1,0}, w_{2,0}, …, w_{Ns,0}]`.
pub fn envelope(w: &[f64], ns: usize, np: usize) -> Result<DVector<f64>> {
    let layout = CoefficientLayout::new(ns, np);
    layout.check(w)?;
    Ok(DVector::from_iterator(
        ns,
        (0..ns).map(|j| w[layout.index(j, 0)]),
    ))
}

/// Composite Gauss–Legendre settings for the original formulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadratureSpec {
    /// Points per panel.
    pub order: usize,
    /// Panels per smooth piece of the period.
    pub panels: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            order: 15,
            panels: 4,
        }
    }
}

/// Tabulated basis and excitation values at the quadrature nodes.
#[derive(Debug, Clone)]
struct QuadratureCache {
    weights: Vec<f64>,
    /// `nq x (Np+1)`, row-major
    values: Vec<f64>,
    derivatives: Vec<f64>,
    /// `nq x Ns`, row-major
    excitation: Vec<f64>,
}

/// The multirate coefficient system `cA(W) W' + cB(W) W = cC` (or its
/// quadrature-based original form) for one circuit and one basis.
#[derive(Debug, Clone)]
pub struct MpdeSystem<M> {
    model: M,
    basis: PwmBasis,
    matrices: GalerkinMatrices,
    mode: GalerkinMode,
    layout: CoefficientLayout,
    rhs: DVector<f64>,
    quad: QuadratureCache,
}

impl<M: CircuitModel> MpdeSystem<M> {
    pub fn new(
        model: M,
        basis: PwmBasis,
        mode: GalerkinMode,
        quadrature: QuadratureSpec,
    ) -> Result<Self> {
        let ts = model.period();
        let matrices = basis.galerkin_matrices(ts)?;
        let ns = model.ns();
        let layout = CoefficientLayout::new(ns, basis.order());
        let nb = layout.block();

        // cC: block j is Ts times the projection of c_j(tau)
        let mut rhs = DVector::zeros(layout.len());
        for (j, profile) in model.excitation_profile().iter().enumerate() {
            let proj = basis.project(profile);
            for k in 0..nb {
                rhs[layout.index(j, k)] = ts * proj[k];
            }
        }

        let mut splits = vec![0.0, basis.duty(), 1.0];
        splits.extend(model.switching_fractions());
        splits.sort_by(f64::total_cmp);
        splits.dedup();
        let rule = CompositeRule::new(&splits, quadrature.panels, quadrature.order);
        let nq = rule.nodes.len();
        let mut values = vec![0.0; nq * nb];
        let mut derivatives = vec![0.0; nq * nb];
        let mut excitation = vec![0.0; nq * ns];
        for (q, &tau) in rule.nodes.iter().enumerate() {
            basis.values_into(tau, &mut values[q * nb..(q + 1) * nb]);
            basis.derivatives_into(tau, &mut derivatives[q * nb..(q + 1) * nb]);
            for (j, profile) in model.excitation_profile().iter().enumerate() {
                excitation[q * ns + j] = profile.eval(tau);
            }
        }
        let quad = QuadratureCache {
            weights: rule.weights,
            values,
            derivatives,
            excitation,
        };

        Ok(Self {
            model,
            basis,
            matrices,
            mode,
            layout,
            rhs,
            quad,
        })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn basis(&self) -> &PwmBasis {
        &self.basis
    }

    pub fn matrices(&self) -> &GalerkinMatrices {
        &self.matrices
    }

    pub fn mode(&self) -> GalerkinMode {
        self.mode
    }

    pub fn layout(&self) -> CoefficientLayout {
        self.layout
    }

    /// `cC`, independent of `t1` because the excitation only depends on
    /// the fast time scale.
    pub fn projected_excitation(&self) -> &DVector<f64> {
        &self.rhs
    }

    fn envelope_matrices(&self, w: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let ns = self.layout.ns;
        let env: Vec<f64> = (0..ns).map(|j| w[self.layout.index(j, 0)]).collect();
        let mut a = DMatrix::zeros(ns, ns);
        let mut b = DMatrix::zeros(ns, ns);
        self.model.mass_matrix_into(&env, &mut a);
        self.model.stiffness_matrix_into(&env, &mut b);
        (a, b)
    }

    /// Kronecker-assembled `(cA, cB, cC)` with `A`, `B` taken at the envelope.
    pub fn assemble_simplified(
        &self,
        w: &[f64],
        _t1: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
        self.layout.check(w)?;
        let (a, b) = self.envelope_matrices(w);
        let ci = &self.matrices.identity;
        let cq = &self.matrices.transport;
        let ca = a.kronecker(ci);
        let cb = b.kronecker(ci) + a.kronecker(cq);
        Ok((ca, cb, self.rhs.clone()))
    }

    /// Projected residual of the full multirate equation, integrated by
    /// composite quadrature with `A`, `B` evaluated on the reconstructed
    /// ripple waveform.
    pub fn assemble_original_residual(
        &self,
        w: &[f64],
        dw: &[f64],
        _t1: f64,
    ) -> Result<DVector<f64>> {
        self.layout.check(w)?;
        self.layout.check(dw)?;
        let ns = self.layout.ns;
        let nb = self.layout.block();
        let ts = self.matrices.ts;
        let mut a = DMatrix::zeros(ns, ns);
        let mut b = DMatrix::zeros(ns, ns);
        let mut x = vec![0.0; ns];
        let mut xdot = vec![0.0; ns];
        let mut out = DVector::zeros(self.layout.len());
        for (q, &weight) in self.quad.weights.iter().enumerate() {
            let p = &self.quad.values[q * nb..(q + 1) * nb];
            let dp = &self.quad.derivatives[q * nb..(q + 1) * nb];
            for j in 0..ns {
                let wj = &w[j * nb..(j + 1) * nb];
                let dwj = &dw[j * nb..(j + 1) * nb];
                x[j] = dot(p, wj);
                // ∂/∂t1 + ∂/∂t2, with dtau/dt2 = 1/Ts
                xdot[j] = dot(p, dwj) + dot(dp, wj) / ts;
            }
            self.model.mass_matrix_into(&x, &mut a);
            self.model.stiffness_matrix_into(&x, &mut b);
            for j in 0..ns {
                let mut r = -self.quad.excitation[q * ns + j];
                for i in 0..ns {
                    r += a[(j, i)] * xdot[i] + b[(j, i)] * x[i];
                }
                let scale = ts * weight * r;
                for l in 0..nb {
                    out[j * nb + l] += scale * p[l];
                }
            }
        }
        Ok(out)
    }

    fn evaluate_simplified(&self, w: &[f64], mass: &mut DMatrix<f64>, forcing: &mut DVector<f64>) {
        let ns = self.layout.ns;
        let nb = self.layout.block();
        let (a, b) = self.envelope_matrices(w);
        let ci = &self.matrices.identity;
        let cq = &self.matrices.transport;
        forcing.copy_from(&self.rhs);
        for j in 0..ns {
            for i in 0..ns {
                let (aji, bji) = (a[(j, i)], b[(j, i)]);
                for l in 0..nb {
                    let row = j * nb + l;
                    let mut acc = 0.0;
                    for k in 0..nb {
                        let col = i * nb + k;
                        mass[(row, col)] = aji * ci[(l, k)];
                        acc += (bji * ci[(l, k)] + aji * cq[(l, k)]) * w[col];
                    }
                    forcing[row] -= acc;
                }
            }
        }
    }

    fn evaluate_original(&self, w: &[f64], mass: &mut DMatrix<f64>, forcing: &mut DVector<f64>) {
        let ns = self.layout.ns;
        let nb = self.layout.block();
        let ts = self.matrices.ts;
        let mut a = DMatrix::zeros(ns, ns);
        let mut b = DMatrix::zeros(ns, ns);
        let mut x = vec![0.0; ns];
        let mut xt2 = vec![0.0; ns];
        mass.fill(0.0);
        forcing.fill(0.0);
        for (q, &weight) in self.quad.weights.iter().enumerate() {
            let p = &self.quad.values[q * nb..(q + 1) * nb];
            let dp = &self.quad.derivatives[q * nb..(q + 1) * nb];
            for j in 0..ns {
                let wj = &w[j * nb..(j + 1) * nb];
                x[j] = dot(p, wj);
                xt2[j] = dot(dp, wj) / ts;
            }
            self.model.mass_matrix_into(&x, &mut a);
            self.model.stiffness_matrix_into(&x, &mut b);
            let tw = ts * weight;
            for j in 0..ns {
                let mut r = self.quad.excitation[q * ns + j];
                for i in 0..ns {
                    r -= a[(j, i)] * xt2[i] + b[(j, i)] * x[i];
                    let aji = tw * a[(j, i)];
                    if aji != 0.0 {
                        for l in 0..nb {
                            let al = aji * p[l];
                            for k in 0..nb {
                                mass[(j * nb + l, i * nb + k)] += al * p[k];
                            }
                        }
                    }
                }
                let scale = tw * r;
                for l in 0..nb {
                    forcing[j * nb + l] += scale * p[l];
                }
            }
        }
    }
}

impl<M: CircuitModel> MpdeSystem<M> {
    /// Initial coefficient vector for `x(0) = x0`.
    pub fn initial_coefficients(&self, x0: &[f64], init: RippleInit) -> Result<DVector<f64>> {
        let mut w = self.layout.initial_state(x0)?;
        if init == RippleInit::Zero || self.layout.np == 0 {
            return Ok(w);
        }
        self.balance_ripples(x0, &mut w)?;
        Ok(w)
    }

    /// Newton solve of `x̂(0, 0) = x0` together with the ripple rows of
    /// `cB W = cC`.
    fn balance_ripples(&self, x0: &[f64], w: &mut DVector<f64>) -> Result<()> {
        const MAX_ITER: usize = 50;
        let n = self.layout.len();
        let nb = self.layout.block();
        let p0: Vec<f64> = self.basis.functions().iter().map(|p| p.eval(0.0)).collect();
        let mut mass = DMatrix::zeros(n, n);
        let mut forcing = DVector::zeros(n);
        let mut residual = |w: &[f64], out: &mut DVector<f64>| {
            self.evaluate_simplified(w, &mut mass, &mut forcing);
            for (j, &x) in x0.iter().enumerate().take(self.layout.ns) {
                let row = j * nb;
                out[row] = dot(&p0, &w[row..row + nb]) - x;
                for l in 1..nb {
                    out[row + l] = forcing[row + l];
                }
            }
        };
        let mut r = DVector::zeros(n);
        let mut shifted = DVector::zeros(n);
        let mut trial = DVector::zeros(n);
        let mut jac = DMatrix::zeros(n, n);
        let mut norm = f64::INFINITY;
        for _ in 0..MAX_ITER {
            residual(w.as_slice(), &mut r);
            norm = r.amax();
            if !norm.is_finite() {
                break;
            }
            for c in 0..n {
                let saved = w[c];
                let delta = 1e-7 * saved.abs().max(1e-3);
                w[c] = saved + delta;
                residual(w.as_slice(), &mut shifted);
                w[c] = saved;
                for row in 0..n {
                    jac[(row, c)] = (shifted[row] - r[row]) / delta;
                }
            }
            let Some(step) = jac.clone().lu().solve(&r) else {
                break;
            };
            // Backtracking keeps strongly saturated cases from cycling.
            let mut lambda = 1.0;
            loop {
                trial.copy_from(w);
                trial.axpy(-lambda, &step, 1.0);
                residual(trial.as_slice(), &mut shifted);
                if shifted.amax() < norm || lambda < 1e-3 {
                    break;
                }
                lambda *= 0.5;
            }
            w.copy_from(&trial);
            let scale = w.amax().max(1e-3);
            if lambda * step.amax() <= 1e-13 * scale {
                return Ok(());
            }
        }
        Err(Error::Initialization {
            iterations: MAX_ITER,
            residual: norm,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl<M: CircuitModel> ImplicitSystem for MpdeSystem<M> {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn evaluate(
        &self,
        _t: f64,
        _segment: Segment,
        y: &[f64],
        mass: &mut DMatrix<f64>,
        forcing: &mut DVector<f64>,
    ) {
        match self.mode {
            GalerkinMode::Simplified => self.evaluate_simplified(y, mass, forcing),
            GalerkinMode::Original => self.evaluate_original(y, mass, forcing),
        }
    }
}

/// `x(t) = x̂(t, t) = Σ_k p_k(tau(t)) w_{j,k}(t)` from a coefficient trajectory.
pub fn reconstruct(
    basis: &PwmBasis,
    trajectory: &Trajectory,
    t: f64,
    ts: f64,
) -> Result<DVector<f64>> {
    let nb = basis.len();
    if !trajectory.dim().is_multiple_of(nb) {
        return Err(Error::DimensionMismatch {
            expected: nb,
            got: trajectory.dim(),
        });
    }
    let mut w = vec![0.0; trajectory.dim()];
    let mut p = vec![0.0; nb];
    let mut x = DVector::zeros(trajectory.dim() / nb);
    reconstruct_into(basis, trajectory, t, ts, &mut w, &mut p, x.as_mut_slice())?;
    Ok(x)
}

pub(crate) fn reconstruct_into(
    basis: &PwmBasis,
    trajectory: &Trajectory,
    t: f64,
    ts: f64,
    w: &mut [f64],
    p: &mut [f64],
    x: &mut [f64],
) -> Result<()> {
    if !trajectory.interpolate_into(t, w) {
        return Err(Error::OutsideSpan {
            t,
            start: trajectory.t_start(),
            end: trajectory.t_end(),
        });
    }
    basis.values_into(fast_phase(t, ts), p);
    let nb = p.len();
    for (j, xj) in x.iter_mut().enumerate() {
        *xj = dot(p, &w[j * nb..(j + 1) * nb]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::PiecewisePolynomial;
    use crate::circuit::{BuckConverter, BuckParameters, LinearCircuit};

    fn rc_model(ts: f64) -> LinearCircuit {
        // series inductor into RC load, constant inductance
        LinearCircuit::new(
            DMatrix::from_row_slice(2, 2, &[1e-3, 0.0, 0.0, 1e-4]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.1]),
            vec![
                PiecewisePolynomial::pulse(10.0, 0.7).unwrap(),
                PiecewisePolynomial::constant(0.0, 0.7).unwrap(),
            ],
            ts,
        )
        .unwrap()
    }

    #[test]
    fn envelope_picks_zeroth_coefficients() {
        let w = [1.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(envelope(&w, 2, 4).unwrap().as_slice(), &[1.0, 3.0]);
        assert_eq!(
            envelope(&[1.0, 5.0, 3.0, 7.0], 2, 1).unwrap().as_slice(),
            &[1.0, 3.0]
        );
        assert_eq!(envelope(&[0.0; 6], 2, 2).unwrap().as_slice(), &[0.0, 0.0]);
        assert!(matches!(
            envelope(&[1.0, 2.0, 3.0], 2, 1),
            Err(Error::DimensionMismatch {
                expected: 4,
                got: 3
            })
        ));
    }

    #[test]
    fn averaged_model_for_np0() {
        let model = rc_model(1e-4);
        let basis = PwmBasis::new(0.7, 0).unwrap();
        let sys = MpdeSystem::new(
            model.clone(),
            basis,
            GalerkinMode::Simplified,
            QuadratureSpec::default(),
        )
        .unwrap();
        let (ca, cb, cc) = sys.assemble_simplified(&[0.3, 1.2], 0.0).unwrap();
        let ts = 1e-4;
        assert!((ca / ts - model.a()).amax() < 1e-12);
        assert!((cb / ts - model.b()).amax() < 1e-12);
        assert!((cc[0] / ts - 7.0).abs() < 1e-12);
        assert_eq!(cc[1], 0.0);
    }

    #[test]
    fn buck_rhs_projection() {
        let model = BuckConverter::new(BuckParameters::default(), 1e-4).unwrap();
        let basis = PwmBasis::new(0.7, 4).unwrap();
        let pulse = PiecewisePolynomial::pulse(1.0, 0.7).unwrap();
        let proj = basis.project(&pulse);
        let sys = MpdeSystem::new(
            model,
            basis,
            GalerkinMode::Simplified,
            QuadratureSpec::default(),
        )
        .unwrap();
        let cc = sys.projected_excitation();
        assert!((cc[0] - 1e-4 * 10.0 * 0.7).abs() < 1e-18);
        assert_eq!(cc[1], 0.0);
        for k in 2..5 {
            assert!((cc[k] - 1e-4 * 10.0 * proj[k]).abs() < 1e-18);
        }
        assert!(cc.rows(5, 5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_state_zero_input_zero_residual() {
        let model = LinearCircuit::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            vec![PiecewisePolynomial::zero(), PiecewisePolynomial::zero()],
            1e-3,
        )
        .unwrap();
        let basis = PwmBasis::new(0.5, 3).unwrap();
        let sys = MpdeSystem::new(
            model,
            basis,
            GalerkinMode::Original,
            QuadratureSpec::default(),
        )
        .unwrap();
        let r = sys
            .assemble_original_residual(&[0.0; 8], &[0.0; 8], 0.0)
            .unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dc_state_has_zero_original_residual() {
        // constant input equal to the average, Np = 0, DC coefficients
        let model = LinearCircuit::new(
            DMatrix::from_row_slice(2, 2, &[1e-3, 0.0, 0.0, 1e-4]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.1]),
            vec![
                PiecewisePolynomial::constant(7.0, 0.7).unwrap(),
                PiecewisePolynomial::constant(0.0, 0.7).unwrap(),
            ],
            1e-3,
        )
        .unwrap();
        let basis = PwmBasis::new(0.7, 0).unwrap();
        let sys = MpdeSystem::new(
            model,
            basis,
            GalerkinMode::Original,
            QuadratureSpec::default(),
        )
        .unwrap();
        let r = sys
            .assemble_original_residual(&[0.7, 7.0], &[0.0, 0.0], 0.0)
            .unwrap();
        assert!(r.amax() < 1e-15, "{r}");
    }

    #[test]
    fn integrator_form_matches_residual() {
        let model = BuckConverter::new(BuckParameters::default(), 1e-4).unwrap();
        let basis = PwmBasis::new(0.7, 4).unwrap();
        let w: Vec<f64> = (0..10).map(|i| 0.1 * i as f64 - 0.3).collect();
        let dw: Vec<f64> = (0..10).map(|i| 50.0 * (i as f64).sin()).collect();
        let seg = Segment {
            start: 0.0,
            end: 1.0,
        };
        for mode in [GalerkinMode::Original, GalerkinMode::Simplified] {
            let sys = MpdeSystem::new(
                model.clone(),
                basis.clone(),
                mode,
                QuadratureSpec::default(),
            )
            .unwrap();
            let via_trait = sys.residual(0.0, seg, &w, &dw);
            let direct = match mode {
                GalerkinMode::Original => sys.assemble_original_residual(&w, &dw, 0.0).unwrap(),
                GalerkinMode::Simplified => {
                    let (ca, cb, cc) = sys.assemble_simplified(&w, 0.0).unwrap();
                    ca * DVector::from_vec(dw.clone()) + cb * DVector::from_vec(w.clone()) - cc
                }
            };
            let scale = direct.amax().max(1e-12);
            assert!((via_trait - &direct).amax() < 1e-12 * scale, "{mode:?}");
        }
    }

    #[test]
    fn reconstruct_outside_span_fails() {
        use crate::integrate::{integrate, IntegratorConfig};
        let model = rc_model(1e-4);
        let basis = PwmBasis::new(0.7, 1).unwrap();
        let sys = MpdeSystem::new(
            model,
            basis.clone(),
            GalerkinMode::Simplified,
            QuadratureSpec::default(),
        )
        .unwrap();
        let w0 = sys.layout().initial_state(&[0.0, 0.0]).unwrap();
        let traj = integrate(
            &sys,
            w0.as_slice(),
            0.0,
            1e-3,
            &IntegratorConfig::default(),
            &[],
        )
        .unwrap();
        assert!(reconstruct(&basis, &traj, 2e-3, 1e-4).is_err());
        assert!(reconstruct(&basis, &traj, 0.5e-3, 1e-4).is_ok());
    }

    #[test]
    fn quasi_static_start_matches_initial_state_and_balances_ripples() {
        let ts = 1e-4;
        let model = BuckConverter::new(BuckParameters::default(), ts).unwrap();
        let basis = PwmBasis::new(0.7, 4).unwrap();
        let sys = MpdeSystem::new(
            model,
            basis.clone(),
            GalerkinMode::Simplified,
            QuadratureSpec::default(),
        )
        .unwrap();
        let x0 = [0.2, 1.5];
        let w = sys
            .initial_coefficients(&x0, RippleInit::QuasiStatic)
            .unwrap();
        let nb = sys.layout().block();
        for j in 0..2 {
            let x: f64 = (0..nb)
                .map(|k| basis.evaluate(k, 0.0).unwrap() * w[j * nb + k])
                .sum();
            assert!((x - x0[j]).abs() < 1e-12, "state {j}: {x}");
        }
        let (_, cb, cc) = sys.assemble_simplified(w.as_slice(), 0.0).unwrap();
        let r = cc - cb * &w;
        for j in 0..2 {
            for l in 1..nb {
                assert!(
                    r[j * nb + l].abs() < 1e-12,
                    "row ({j},{l}) = {:e}",
                    r[j * nb + l]
                );
            }
        }
        assert!(w
            .iter()
            .enumerate()
            .any(|(i, v)| i % nb != 0 && v.abs() > 1e-6));

        let zero = sys.initial_coefficients(&x0, RippleInit::Zero).unwrap();
        assert_eq!(zero, sys.layout().initial_state(&x0).unwrap());
    }
}
