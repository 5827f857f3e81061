//! Flat `key = value` run configuration with command-line overrides.

use std::path::{Path, PathBuf};

use mpde::{
    BuckParameters, IntegratorConfig, QuadratureSpec, RippleInit, SaturationCurve, SimulationSpec,
    SolveMode,
};
use serde::Deserialize;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Every key a config file or `--key=value` override may set.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub vi: f64,
    pub r: f64,
    pub c: f64,
    pub l0: f64,
    pub linf: f64,
    pub iknee: f64,
    pub p: f64,
    pub d_pulse: f64,
    pub np: usize,
    /// Defaults to `d_pulse`.
    pub d_basis: Option<f64>,
    pub mode: String,
    pub fs: f64,
    pub t_end: f64,
    pub x0: [f64; 2],
    pub ripple_init: String,
    pub sweep_frequencies: Vec<f64>,
    pub tol_mpde: f64,
    pub tol_reference: f64,
    pub serial_timing: bool,
    pub timing_repeats: usize,
    /// State whose error is reported (`vC` or `iL`).
    pub error_state: String,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let circuit = BuckParameters::default();
        Self {
            vi: circuit.vi,
            r: circuit.r,
            c: circuit.c,
            l0: circuit.curve.l0,
            linf: circuit.curve.linf,
            iknee: circuit.curve.iknee,
            p: circuit.curve.p,
            d_pulse: circuit.d_pulse,
            np: 4,
            d_basis: None,
            mode: "mpde-simplified".into(),
            fs: 1e3,
            t_end: 10e-3,
            x0: [0.0, 0.0],
            ripple_init: "quasi-static".into(),
            sweep_frequencies: vec![500.0, 1e3, 2e3, 5e3, 10e3, 20e3, 50e3, 100e3],
            tol_mpde: 1e-6,
            tol_reference: 1e-12,
            serial_timing: false,
            timing_repeats: 3,
            error_state: "vC".into(),
            out_dir: PathBuf::from("."),
        }
    }
}

/// Parses `key=value` as one TOML assignment; bare words become strings.
fn override_table(assignment: &str) -> Result<toml::Table, ConfigError> {
    let (key, value) = assignment.split_once('=').ok_or_else(|| {
        ConfigError(format!(
            "override '{assignment}' is not of the form key=value"
        ))
    })?;
    let key = key.trim();
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("{key} = {value}"))
        .or_else(|_| toml::from_str::<toml::Table>(&format!("{key} = {:?}", value)));
    parsed.map_err(|e| ConfigError(format!("cannot parse override '{assignment}': {e}")))
}

impl RunConfig {
    /// Loads the optional file, then applies overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for assignment in overrides {
            table.extend(override_table(assignment)?);
        }
        let config: RunConfig =
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| {
                    ConfigError(format!("invalid configuration: {}", e.message()))
                })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("vi", self.vi),
            ("r", self.r),
            ("c", self.c),
            ("l0", self.l0),
            ("linf", self.linf),
            ("iknee", self.iknee),
            ("p", self.p),
            ("fs", self.fs),
            ("t_end", self.t_end),
            ("tol_mpde", self.tol_mpde),
            ("tol_reference", self.tol_reference),
        ];
        for (key, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ConfigError(format!("{key} = {value} must be positive")));
            }
        }
        for (key, value) in [("d_pulse", self.d_pulse), ("d_basis", self.d_basis())] {
            if !(value > 0.0 && value < 1.0) {
                return Err(ConfigError(format!("{key} = {value} must lie in (0, 1)")));
            }
        }
        if let Some(bad) = self
            .sweep_frequencies
            .iter()
            .find(|f| !(**f > 0.0 && f.is_finite()))
        {
            return Err(ConfigError(format!(
                "sweep_frequencies: {bad} must be positive"
            )));
        }
        self.solve_mode()?;
        self.ripple_init()?;
        self.error_component()?;
        self.curve()
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        Ok(())
    }

    pub fn d_basis(&self) -> f64 {
        self.d_basis.unwrap_or(self.d_pulse)
    }

    pub fn solve_mode(&self) -> Result<SolveMode, ConfigError> {
        self.mode
            .parse()
            .map_err(|e: mpde::Error| ConfigError(format!("mode: {e}")))
    }

    pub fn ripple_init(&self) -> Result<RippleInit, ConfigError> {
        match self.ripple_init.replace('_', "-").as_str() {
            "quasi-static" => Ok(RippleInit::QuasiStatic),
            "zero" => Ok(RippleInit::Zero),
            other => Err(ConfigError(format!(
                "ripple_init: unknown value '{other}' (expected quasi-static or zero)"
            ))),
        }
    }

    /// State index for error reporting.
    pub fn error_component(&self) -> Result<usize, ConfigError> {
        match self.error_state.as_str() {
            "iL" => Ok(0),
            "vC" => Ok(1),
            other => Err(ConfigError(format!(
                "error_state: unknown state '{other}' (expected iL or vC)"
            ))),
        }
    }

    fn curve(&self) -> SaturationCurve {
        SaturationCurve {
            l0: self.l0,
            linf: self.linf,
            iknee: self.iknee,
            p: self.p,
        }
    }

    pub fn simulation_spec(&self) -> Result<SimulationSpec, ConfigError> {
        let mode = self.solve_mode()?;
        let tol = if mode == SolveMode::Reference {
            self.tol_reference
        } else {
            self.tol_mpde
        };
        Ok(SimulationSpec {
            circuit: BuckParameters {
                vi: self.vi,
                r: self.r,
                c: self.c,
                curve: self.curve(),
                d_pulse: self.d_pulse,
            },
            fs: self.fs,
            t_end: self.t_end,
            np: self.np,
            d_basis: self.d_basis(),
            mode,
            tolerances: IntegratorConfig::with_tolerance(tol),
            quadrature: QuadratureSpec::default(),
            ripple_init: self.ripple_init()?,
            x0: self.x0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.d_basis(), 0.7);
        assert_eq!(cfg.sweep_frequencies.len(), 8);
    }

    #[test]
    fn overrides_accept_bare_words_and_numbers() {
        let cfg = RunConfig::load(
            None,
            &[
                "mode=reference".into(),
                "fs=1e4".into(),
                "np=2".into(),
                "sweep_frequencies=[1e3, 2e3]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.solve_mode().unwrap(), SolveMode::Reference);
        assert_eq!(cfg.fs, 1e4);
        assert_eq!(cfg.np, 2);
        assert_eq!(cfg.sweep_frequencies, vec![1e3, 2e3]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::load(None, &["frequency=10".into()]).unwrap_err();
        assert!(err.0.contains("frequency"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        for bad in [
            "d_pulse=1.0",
            "fs=-1",
            "mode=fourier",
            "p=1",
            "error_state=x",
            "ripple_init=random",
        ] {
            assert!(RunConfig::load(None, &[bad.into()]).is_err(), "{bad}");
        }
    }
}
