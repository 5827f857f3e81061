//! End-to-end solution paths: conventional transient reference and MPDE.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::basis::PwmBasis;
use crate::circuit::{fast_phase, BuckConverter, BuckParameters, CircuitModel};
use crate::error::{Error, Result};
use crate::galerkin::{reconstruct_into, GalerkinMode, MpdeSystem, QuadratureSpec, RippleInit};
use crate::integrate::{integrate, ImplicitSystem, IntegratorConfig, Segment, Trajectory};

/// Samples per switching period on the output grid.
pub const SAMPLES_PER_PERIOD: f64 = 50.0;
/// Upper bound on the output grid size.
pub const MAX_SAMPLES: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolveMode {
    Reference,
    MpdeSimplified,
    MpdeOriginal,
}

impl SolveMode {
    pub fn galerkin(self) -> Option<GalerkinMode> {
        match self {
            SolveMode::Reference => None,
            SolveMode::MpdeSimplified => Some(GalerkinMode::Simplified),
            SolveMode::MpdeOriginal => Some(GalerkinMode::Original),
        }
    }
}

impl fmt::Display for SolveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveMode::Reference => "reference",
            SolveMode::MpdeSimplified => "mpde-simplified",
            SolveMode::MpdeOriginal => "mpde-original",
        })
    }
}

impl FromStr for SolveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "reference" => Ok(SolveMode::Reference),
            "mpde-simplified" => Ok(SolveMode::MpdeSimplified),
            "mpde-original" => Ok(SolveMode::MpdeOriginal),
            other => Err(Error::InvalidParameter(format!(
                "unknown mode '{other}' (expected reference, mpde-simplified or mpde-original)"
            ))),
        }
    }
}

/// One buck-converter run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub circuit: BuckParameters,
    /// Switching frequency (Hz); `Ts = 1 / fs`.
    pub fs: f64,
    pub t_end: f64,
    pub np: usize,
    pub d_basis: f64,
    pub mode: SolveMode,
    pub tolerances: IntegratorConfig,
    pub quadrature: QuadratureSpec,
    pub ripple_init: RippleInit,
    pub x0: [f64; 2],
}

impl Default for SimulationSpec {
    fn default() -> Self {
        let circuit = BuckParameters::default();
        Self {
            circuit,
            fs: 1e3,
            t_end: 10e-3,
            np: 4,
            d_basis: circuit.d_pulse,
            mode: SolveMode::MpdeSimplified,
            tolerances: IntegratorConfig::with_tolerance(1e-6),
            quadrature: QuadratureSpec::default(),
            ripple_init: RippleInit::default(),
            x0: [0.0, 0.0],
        }
    }
}

impl SimulationSpec {
    pub fn period(&self) -> f64 {
        1.0 / self.fs
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "fs = {} must be positive",
                self.fs
            )));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "t_end = {} must be positive",
                self.t_end
            )));
        }
        if !(self.d_basis > 0.0 && self.d_basis < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "d_basis = {} must lie in (0, 1)",
                self.d_basis
            )));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<BuckConverter> {
        BuckConverter::new(self.circuit, self.period())
    }
}

/// Uniform grid with at least [`SAMPLES_PER_PERIOD`] points per period.
pub fn sample_grid(t_end: f64, ts: f64) -> Vec<f64> {
    let intervals = (SAMPLES_PER_PERIOD * t_end / ts * (1.0 - 1e-12)).ceil() as usize;
    let count = (intervals + 1).clamp(2, MAX_SAMPLES);
    let step = t_end / (count - 1) as f64;
    let mut times: Vec<f64> = (0..count).map(|i| i as f64 * step).collect();
    times[count - 1] = t_end;
    times
}

/// Solution samples on a time grid, one column per state.
#[derive(Debug, Clone)]
pub struct Samples {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum Evaluator {
    Direct,
    Mpde { basis: PwmBasis },
}

/// Result of one solve.
#[derive(Debug, Clone)]
pub struct SolutionRecord {
    pub mode: SolveMode,
    pub ts: f64,
    pub np: usize,
    pub rtol: f64,
    pub state_names: Vec<String>,
    /// States (reference) or Galerkin coefficients (MPDE) over time.
    pub trajectory: Trajectory,
    pub samples: Samples,
    /// Wall-clock time of the integration alone (s).
    pub solve_time: f64,
    /// Basis and matrix construction time (s).
    pub setup_time: f64,
    pub steps: usize,
    evaluator: Evaluator,
}

impl SolutionRecord {
    pub fn ns(&self) -> usize {
        self.state_names.len()
    }

    pub fn t_start(&self) -> f64 {
        self.trajectory.t_start()
    }

    pub fn t_end(&self) -> f64 {
        self.trajectory.t_end()
    }

    /// Circuit state at `t` (dense output, reconstructed for MPDE runs).
    pub fn state_at(&self, t: f64) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.ns());
        self.state_into(t, &mut Scratch::new(self), out.as_mut_slice())?;
        Ok(out)
    }

    fn state_into(&self, t: f64, scratch: &mut Scratch, out: &mut [f64]) -> Result<()> {
        match &self.evaluator {
            Evaluator::Direct => {
                if !self.trajectory.interpolate_into(t, out) {
                    return Err(Error::OutsideSpan {
                        t,
                        start: self.t_start(),
                        end: self.t_end(),
                    });
                }
                Ok(())
            }
            Evaluator::Mpde { basis } => reconstruct_into(
                basis,
                &self.trajectory,
                t,
                self.ts,
                &mut scratch.w,
                &mut scratch.p,
                out,
            ),
        }
    }

    /// Samples one state component at arbitrary times.
    pub fn component_at(&self, component: usize, times: &[f64]) -> Result<Vec<f64>> {
        let mut scratch = Scratch::new(self);
        let mut x = vec![0.0; self.ns()];
        times
            .iter()
            .map(|&t| {
                self.state_into(t, &mut scratch, &mut x)?;
                Ok(x[component])
            })
            .collect()
    }

    pub fn basis(&self) -> Option<&PwmBasis> {
        match &self.evaluator {
            Evaluator::Mpde { basis } => Some(basis),
            Evaluator::Direct => None,
        }
    }
}

struct Scratch {
    w: Vec<f64>,
    p: Vec<f64>,
}

impl Scratch {
    fn new(record: &SolutionRecord) -> Self {
        Self {
            w: vec![0.0; record.trajectory.dim()],
            p: vec![0.0; record.basis().map_or(0, PwmBasis::len)],
        }
    }
}

fn sample(record: &mut SolutionRecord, t_end: f64) -> Result<()> {
    let times = sample_grid(t_end, record.ts);
    let ns = record.ns();
    let mut states = vec![Vec::with_capacity(times.len()); ns];
    let mut scratch = Scratch::new(record);
    let mut x = vec![0.0; ns];
    for &t in &times {
        record.state_into(t, &mut scratch, &mut x)?;
        for (col, &v) in states.iter_mut().zip(&x) {
            col.push(v);
        }
    }
    record.samples = Samples { times, states };
    Ok(())
}

/// `A(x) x' = c(t) - B(x) x` with the input piece fixed per smooth segment.
struct TransientSystem<'a, M: ?Sized> {
    model: &'a M,
    b: std::cell::RefCell<DMatrix<f64>>,
}

impl<M: CircuitModel + ?Sized> ImplicitSystem for TransientSystem<'_, M> {
    fn dim(&self) -> usize {
        self.model.ns()
    }

    fn evaluate(
        &self,
        t: f64,
        segment: Segment,
        y: &[f64],
        mass: &mut DMatrix<f64>,
        forcing: &mut DVector<f64>,
    ) {
        let ts = self.model.period();
        let mid = segment.midpoint();
        let hint = fast_phase(mid, ts);
        let tau = hint + (t - mid) / ts;
        self.model.mass_matrix_into(y, mass);
        let mut b = self.b.borrow_mut();
        self.model.stiffness_matrix_into(y, &mut b);
        for (j, profile) in self.model.excitation_profile().iter().enumerate() {
            let mut acc = profile.eval_piece(hint, tau);
            for (i, &yi) in y.iter().enumerate() {
                acc -= b[(j, i)] * yi;
            }
            forcing[j] = acc;
        }
    }
}

/// Every switching edge `(m + f) Ts` inside `(0, t_end)`.
pub fn switching_edges<M: CircuitModel + ?Sized>(model: &M, t_end: f64) -> Vec<f64> {
    let ts = model.period();
    let mut fractions = vec![0.0];
    fractions.extend(model.switching_fractions());
    let periods = (t_end / ts).ceil() as usize + 1;
    let mut edges = Vec::with_capacity(periods * fractions.len());
    for m in 0..periods {
        for &f in &fractions {
            let t = (m as f64 + f) * ts;
            if t > 0.0 && t < t_end {
                edges.push(t);
            }
        }
    }
    edges
}

/// Conventional transient solve of `A(x) x' + B(x) x = c(t)` with break
/// points at every switching edge.
pub fn simulate_reference<M: CircuitModel + ?Sized>(
    model: &M,
    x0: &[f64],
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<SolutionRecord> {
    let ns = model.ns();
    let sys = TransientSystem {
        model,
        b: std::cell::RefCell::new(DMatrix::zeros(ns, ns)),
    };
    let setup = Instant::now();
    let edges = switching_edges(model, t_end);
    let setup_time = setup.elapsed().as_secs_f64();
    let start = Instant::now();
    let trajectory =
        integrate(&sys, x0, 0.0, t_end, cfg, &edges).map_err(|source| Error::Solve {
            context: format!("reference solve at fs = {} Hz", 1.0 / model.period()),
            source,
        })?;
    let solve_time = start.elapsed().as_secs_f64();
    let steps = trajectory.stats.accepted;
    let mut record = SolutionRecord {
        mode: SolveMode::Reference,
        ts: model.period(),
        np: 0,
        rtol: cfg.rtol,
        state_names: model.state_names(),
        trajectory,
        samples: Samples {
            times: Vec::new(),
            states: Vec::new(),
        },
        solve_time,
        setup_time,
        steps,
        evaluator: Evaluator::Direct,
    };
    sample(&mut record, t_end)?;
    Ok(record)
}

/// MPDE solve: Galerkin in the fast scale, Radau IIA in the slow scale,
/// without break points.
#[allow(clippy::too_many_arguments)]
pub fn simulate_mpde<M: CircuitModel>(
    model: M,
    x0: &[f64],
    t_end: f64,
    np: usize,
    d_basis: f64,
    mode: GalerkinMode,
    quadrature: QuadratureSpec,
    ripple_init: RippleInit,
    cfg: &IntegratorConfig,
) -> Result<SolutionRecord> {
    let ts = model.period();
    let state_names = model.state_names();
    let setup = Instant::now();
    let basis = PwmBasis::new(d_basis, np)?;
    let sys = MpdeSystem::new(model, basis.clone(), mode, quadrature)?;
    let w0 = sys.initial_coefficients(x0, ripple_init)?;
    let setup_time = setup.elapsed().as_secs_f64();
    let start = Instant::now();
    let trajectory =
        integrate(&sys, w0.as_slice(), 0.0, t_end, cfg, &[]).map_err(|source| Error::Solve {
            context: format!("MPDE ({mode:?}) solve at fs = {} Hz", 1.0 / ts),
            source,
        })?;
    let solve_time = start.elapsed().as_secs_f64();
    let steps = trajectory.stats.accepted;
    let mut record = SolutionRecord {
        mode: match mode {
            GalerkinMode::Simplified => SolveMode::MpdeSimplified,
            GalerkinMode::Original => SolveMode::MpdeOriginal,
        },
        ts,
        np,
        rtol: cfg.rtol,
        state_names,
        trajectory,
        samples: Samples {
            times: Vec::new(),
            states: Vec::new(),
        },
        solve_time,
        setup_time,
        steps,
        evaluator: Evaluator::Mpde { basis },
    };
    sample(&mut record, t_end)?;
    Ok(record)
}

/// Reference solve of a [`SimulationSpec`].
pub fn solve_reference(spec: &SimulationSpec) -> Result<SolutionRecord> {
    spec.validate()?;
    let model = spec.model()?;
    simulate_reference(&model, &spec.x0, spec.t_end, &spec.tolerances)
}

/// MPDE solve of a [`SimulationSpec`] in its simplified or original mode.
pub fn solve_mpde(spec: &SimulationSpec) -> Result<SolutionRecord> {
    spec.validate()?;
    let mode = spec
        .mode
        .galerkin()
        .ok_or_else(|| Error::InvalidParameter("solve_mpde needs an MPDE mode".into()))?;
    let model = spec.model()?;
    simulate_mpde(
        model,
        &spec.x0,
        spec.t_end,
        spec.np,
        spec.d_basis,
        mode,
        spec.quadrature,
        spec.ripple_init,
        &spec.tolerances,
    )
}

/// Dispatches on `spec.mode`.
pub fn solve(spec: &SimulationSpec) -> Result<SolutionRecord> {
    match spec.mode {
        SolveMode::Reference => solve_reference(spec),
        _ => solve_mpde(spec),
    }
}
