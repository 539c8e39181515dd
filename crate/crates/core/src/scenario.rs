//! Scenario documents: parsing, rendering and physical sanity checks.
//!
//! Scenarios are TOML. Complex numbers are `[re, im]` pairs (a bare real is
//! accepted as shorthand), matrices are row-major nested arrays. A minimal
//! two-level document:
//!
//! ```toml
//! name = "two_level"
//! dim = 2
//! epsilon = 1e-3
//!
//! [model]
//! kind = "linear"
//! h0 = [[0.0, 0.5], [0.5, 0.0]]
//! v = [[0.5, 0.0], [0.0, -0.5]]
//!
//! [feedback]
//! observable = [[-1.0, [0.0, -1.0]], [[0.0, 1.0], 1.0]]
//!
//! [initial]
//! p = [0.5, 0.5]
//!
//! [run]
//! mode = "exact"
//! tau_max = 5.0
//! ```

use std::fmt::Write as _;

use num_complex::Complex64;
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::exact::{FeedbackForm, FeedbackSpec};
use crate::linalg::{ensure_dim, ensure_hermitian, hermitian_deviation, CMatrix, CVector};
use crate::mixed::{hybrid_observable, MixedAmplitudes, MixedScenario};
use crate::ode::IntegratorOptions;
use crate::reduced::{PayoffSource, SimplexState};
use crate::spectral::{
    adiabatic_matrix, eigenframe, payoff_matrices, ConnectionMatrix, HamiltonianModel,
    DEFAULT_GAP_TOL,
};

const MATRIX_TOL: f64 = 1e-9;
const RESONANCE_SAMPLES: usize = 33;

/// H[R] = H0 + R·V.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub h0: CMatrix,
    pub v: CMatrix,
}

impl HamiltonianModel for LinearModel {
    fn dim(&self) -> usize {
        self.h0.nrows()
    }

    fn hamiltonian(&self, r: f64) -> CMatrix {
        &self.h0 + &self.v * Complex64::from(r)
    }

    fn derivative(&self, _r: f64) -> CMatrix {
        self.v.clone()
    }

    fn apply(&self, r: f64, psi: &[Complex64], out: &mut [Complex64]) {
        let d = self.h0.nrows();
        for i in 0..d {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..d {
                acc += (self.h0[(i, j)] + self.v[(i, j)] * r) * psi[j];
            }
            out[i] = acc;
        }
    }
}

pub fn linear_model(h0: CMatrix, v: CMatrix) -> Result<LinearModel> {
    ensure_hermitian(&h0, "h0", MATRIX_TOL)?;
    ensure_hermitian(&v, "v", MATRIX_TOL)?;
    ensure_dim(h0.nrows(), v.nrows())?;
    Ok(LinearModel { h0, v })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Linear(LinearModel),
    /// Frame given directly by its connection; energies and slopes are
    /// needed only for the hybrid observable and for validation.
    AbstractFrame {
        connection: ConnectionMatrix,
        energies: Option<Vec<f64>>,
        energy_slopes: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObservableSpec {
    /// Lab basis for linear models, adiabatic basis for abstract frames.
    Matrix(CMatrix),
    /// A = −∂_R H.
    Hybrid,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialData {
    /// Lab-basis state for linear models, adiabatic amplitudes otherwise.
    Pure(CVector),
    /// Adiabatic populations and phases.
    Simplex { p: Vec<f64>, phases: Vec<f64> },
    Mixed(CMatrix),
    /// (1 − η)·1/d + η|ψ⟩⟨ψ| with ψ in the adiabatic basis.
    PseudoPure { eta: f64, psi: CVector },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Exact,
    Reduced,
    Mixed,
    Compare,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Exact => "exact",
            RunMode::Reduced => "reduced",
            RunMode::Mixed => "mixed",
            RunMode::Compare => "compare",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorSettings {
    pub rtol: f64,
    pub atol: f64,
    /// Fixed slow-time step of the reduced and mixed integrators.
    pub step: f64,
    /// Fast-time spacing of recorded exact samples.
    pub sample_stride: f64,
    /// Slow-time averaging window; derived from ε and the gap when absent.
    pub tau_f: Option<f64>,
    pub min_step: f64,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        IntegratorSettings {
            rtol: 1e-9,
            atol: 1e-12,
            step: 1e-3,
            sample_stride: 0.125,
            tau_f: None,
            min_step: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub dim: usize,
    pub model: ModelSpec,
    pub observable: ObservableSpec,
    pub form: FeedbackForm,
    pub epsilon: f64,
    pub r0: f64,
    pub initial: InitialData,
    pub mode: RunMode,
    pub t_max: Option<f64>,
    pub tau_max: Option<f64>,
    /// R interval sampled by the validator; r0 ± 1 when absent.
    pub r_range: Option<(f64, f64)>,
    pub integrator: IntegratorSettings,
    pub gap_tol: f64,
}

// ---------------------------------------------------------------- parsing

fn parse_err(field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        field: field.to_string(),
        message: message.into(),
    }
}

fn lookup<'a>(table: &'a Table, path: &str) -> Option<&'a Value> {
    let mut parts = path.split('.');
    let mut value = table.get(parts.next()?)?;
    for part in parts {
        value = value.as_table()?.get(part)?;
    }
    Some(value)
}

fn required<'a>(table: &'a Table, path: &str) -> Result<&'a Value> {
    lookup(table, path).ok_or_else(|| Error::Schema(path.to_string()))
}

fn to_f64(v: &Value, field: &str) -> Result<f64> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(parse_err(field, format!("expected a number, found {}", other.type_str()))),
    }
}

fn to_complex(v: &Value, field: &str) -> Result<Complex64> {
    match v {
        Value::Float(_) | Value::Integer(_) => Ok(Complex64::new(to_f64(v, field)?, 0.0)),
        Value::Array(pair) if pair.len() == 2 => Ok(Complex64::new(
            to_f64(&pair[0], field)?,
            to_f64(&pair[1], field)?,
        )),
        _ => Err(parse_err(field, format!("malformed complex literal `{v}`, expected [re, im]"))),
    }
}

fn to_array<'a>(v: &'a Value, field: &str, len: usize) -> Result<&'a Vec<Value>> {
    let arr = v
        .as_array()
        .ok_or_else(|| parse_err(field, format!("expected an array, found {}", v.type_str())))?;
    if arr.len() != len {
        return Err(parse_err(field, format!("expected {len} entries, found {}", arr.len())));
    }
    Ok(arr)
}

fn to_real_vector(v: &Value, field: &str, len: usize) -> Result<Vec<f64>> {
    to_array(v, field, len)?.iter().map(|x| to_f64(x, field)).collect()
}

fn to_complex_vector(v: &Value, field: &str, len: usize) -> Result<CVector> {
    let entries: Result<Vec<Complex64>> = to_array(v, field, len)?
        .iter()
        .map(|x| to_complex(x, field))
        .collect();
    Ok(CVector::from_vec(entries?))
}

fn to_matrix(v: &Value, field: &str, d: usize) -> Result<CMatrix> {
    let rows = to_array(v, field, d)?;
    let mut m = CMatrix::zeros(d, d);
    for (i, row) in rows.iter().enumerate() {
        for (j, x) in to_array(row, field, d)?.iter().enumerate() {
            m[(i, j)] = to_complex(x, field)?;
        }
    }
    Ok(m)
}

fn hermitian_field(m: CMatrix, what: &str) -> Result<CMatrix> {
    let deviation = hermitian_deviation(&m);
    if deviation > MATRIX_TOL || !deviation.is_finite() {
        return Err(Error::Value(format!("{what} not Hermitian (max deviation {deviation:e})")));
    }
    Ok(m)
}

fn to_str<'a>(v: &'a Value, field: &str) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| parse_err(field, format!("expected a string, found {}", v.type_str())))
}

fn optional_f64(table: &Table, path: &str) -> Result<Option<f64>> {
    lookup(table, path).map(|v| to_f64(v, path)).transpose()
}

/// Sets `key` (dotted path) to `value`, read as a TOML literal when possible
/// and as a bare string otherwise.
pub fn apply_override(table: &mut Table, key: &str, value: &str) -> Result<()> {
    let parsed = format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| parse_err(key, "empty override key"))?;
    let mut cursor = table;
    for part in parts {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| parse_err(key, format!("`{part}` is not a section")))?;
    }
    cursor.insert(last.to_string(), parsed);
    Ok(())
}

pub fn parse_scenario(text: &str) -> Result<ScenarioConfig> {
    parse_scenario_with_overrides(text, &[])
}

/// Parses after applying `key=value` overrides to the raw document.
pub fn parse_scenario_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<ScenarioConfig> {
    let mut table: Table = text.parse().map_err(|e: toml::de::Error| {
        let message = e.message().to_string();
        let location = e
            .span()
            .map(|span| {
                let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                format!("line {line}: ")
            })
            .unwrap_or_default();
        parse_err("document", format!("{location}{message}"))
    })?;
    for (key, value) in overrides {
        apply_override(&mut table, key, value)?;
    }
    from_table(&table)
}

fn from_table(t: &Table) -> Result<ScenarioConfig> {
    let name = to_str(required(t, "name")?, "name")?.to_string();
    let dim_value = required(t, "dim")?;
    let dim = match dim_value.as_integer() {
        Some(d) if d >= 1 => d as usize,
        _ => return Err(parse_err("dim", "expected a positive integer")),
    };
    let epsilon = to_f64(required(t, "epsilon")?, "epsilon")?;
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Value(format!("epsilon must lie in [0, 1), got {epsilon}")));
    }
    let r0 = optional_f64(t, "r0")?.unwrap_or(0.0);
    let gap_tol = optional_f64(t, "gap_tol")?.unwrap_or(DEFAULT_GAP_TOL);

    let model = match to_str(required(t, "model.kind")?, "model.kind")? {
        "linear" => {
            let h0 = hermitian_field(to_matrix(required(t, "model.h0")?, "model.h0", dim)?, "h0")?;
            let v = hermitian_field(to_matrix(required(t, "model.v")?, "model.v", dim)?, "v")?;
            ModelSpec::Linear(linear_model(h0, v)?)
        }
        "abstract" => {
            let raw = to_matrix(required(t, "model.connection")?, "model.connection", dim)?;
            let connection = ConnectionMatrix::new(raw).map_err(|e| Error::Value(e.to_string()))?;
            let energies = lookup(t, "model.energies")
                .map(|v| to_real_vector(v, "model.energies", dim))
                .transpose()?;
            let energy_slopes = lookup(t, "model.energy_slopes")
                .map(|v| to_real_vector(v, "model.energy_slopes", dim))
                .transpose()?;
            ModelSpec::AbstractFrame {
                connection,
                energies,
                energy_slopes,
            }
        }
        other => return Err(parse_err("model.kind", format!("unknown model kind `{other}`"))),
    };

    let observable = match required(t, "feedback.observable")? {
        Value::String(s) if s == "hybrid" => ObservableSpec::Hybrid,
        v => ObservableSpec::Matrix(hermitian_field(
            to_matrix(v, "feedback.observable", dim)?,
            "observable",
        )?),
    };
    let form = match lookup(t, "feedback.form").map(|v| to_str(v, "feedback.form")).transpose()? {
        None | Some("linear") => FeedbackForm::LinearInExpectation,
        Some("open_loop") => {
            let coeffs = required(t, "feedback.coefficients")?;
            let arr = coeffs
                .as_array()
                .ok_or_else(|| parse_err("feedback.coefficients", "expected an array"))?;
            FeedbackForm::OpenLoop(
                arr.iter()
                    .map(|x| to_f64(x, "feedback.coefficients"))
                    .collect::<Result<_>>()?,
            )
        }
        Some(other) => return Err(parse_err("feedback.form", format!("unknown form `{other}`"))),
    };

    let initial = if let Some(v) = lookup(t, "initial.cbar") {
        InitialData::Mixed(hermitian_field(to_matrix(v, "initial.cbar", dim)?, "initial.cbar")?)
    } else if let Some(v) = lookup(t, "initial.eta") {
        let eta = to_f64(v, "initial.eta")?;
        let psi = to_complex_vector(required(t, "initial.psi")?, "initial.psi", dim)?;
        InitialData::PseudoPure { eta, psi }
    } else if let Some(v) = lookup(t, "initial.psi") {
        InitialData::Pure(to_complex_vector(v, "initial.psi", dim)?)
    } else if let Some(v) = lookup(t, "initial.p") {
        let p = to_real_vector(v, "initial.p", dim)?;
        let phases = lookup(t, "initial.phases")
            .map(|v| to_real_vector(v, "initial.phases", dim))
            .transpose()?
            .unwrap_or_else(|| vec![0.0; dim]);
        InitialData::Simplex { p, phases }
    } else {
        return Err(Error::Schema("initial".into()));
    };

    let mode = match to_str(required(t, "run.mode")?, "run.mode")? {
        "exact" => RunMode::Exact,
        "reduced" => RunMode::Reduced,
        "mixed" => RunMode::Mixed,
        "compare" => RunMode::Compare,
        other => return Err(parse_err("run.mode", format!("unknown mode `{other}`"))),
    };
    let t_max = optional_f64(t, "run.t_max")?;
    let tau_max = optional_f64(t, "run.tau_max")?;
    if t_max.is_none() && tau_max.is_none() {
        return Err(Error::Schema("run.tau_max".into()));
    }
    let r_range = match lookup(t, "run.r_range") {
        Some(v) => {
            let r = to_real_vector(v, "run.r_range", 2)?;
            if !(r[0] < r[1]) {
                return Err(parse_err("run.r_range", "expected [low, high] with low < high"));
            }
            Some((r[0], r[1]))
        }
        None => None,
    };

    let defaults = IntegratorSettings::default();
    let integrator = IntegratorSettings {
        rtol: optional_f64(t, "integrator.rtol")?.unwrap_or(defaults.rtol),
        atol: optional_f64(t, "integrator.atol")?.unwrap_or(defaults.atol),
        step: optional_f64(t, "integrator.step")?.unwrap_or(defaults.step),
        sample_stride: optional_f64(t, "integrator.sample_stride")?.unwrap_or(defaults.sample_stride),
        tau_f: optional_f64(t, "integrator.tau_f")?,
        min_step: optional_f64(t, "integrator.min_step")?.unwrap_or(defaults.min_step),
    };

    let cfg = ScenarioConfig {
        name,
        dim,
        model,
        observable,
        form,
        epsilon,
        r0,
        initial,
        mode,
        t_max,
        tau_max,
        r_range,
        integrator,
        gap_tol,
    };
    cfg.check_consistency()?;
    Ok(cfg)
}

impl ScenarioConfig {
    fn check_consistency(&self) -> Result<()> {
        let linear = matches!(self.model, ModelSpec::Linear(_));
        let schema = |msg: &str| Err(Error::Value(format!("{}: {msg}", self.mode.as_str())));
        match self.mode {
            RunMode::Exact | RunMode::Compare if !linear => {
                return schema("exact dynamics need a linear model")
            }
            RunMode::Mixed if linear => return schema("mixed dynamics need an abstract model"),
            _ => {}
        }
        if self.mode != RunMode::Exact && !matches!(self.form, FeedbackForm::LinearInExpectation) {
            return schema("the reduced equations need linear feedback");
        }
        match (&self.initial, self.mode) {
            (InitialData::Mixed(_) | InitialData::PseudoPure { .. }, m) if m != RunMode::Mixed => {
                return schema("mixed initial data only apply to mixed runs")
            }
            (InitialData::Simplex { p, .. }, _) => {
                SimplexState::new(p.clone(), vec![0.0; p.len()], 0.0)
                    .map_err(|e| Error::Value(format!("initial.p: {e}")))?;
            }
            (InitialData::Pure(psi), _) if (psi.norm() - 1.0).abs() > 1e-10 => {
                return Err(Error::Value(format!("initial.psi not normalized (norm {})", psi.norm())))
            }
            _ => {}
        }
        if let ModelSpec::AbstractFrame { energies, .. } = &self.model {
            if self.observable == ObservableSpec::Hybrid && energies.is_none() {
                return Err(Error::Schema("model.energies".into()));
            }
        }
        let s = &self.integrator;
        if !(s.rtol > 0.0 && s.atol >= 0.0 && s.step > 0.0 && s.sample_stride > 0.0 && s.min_step > 0.0) {
            return Err(Error::Value("integrator settings must be positive".into()));
        }
        if let Some(tau_f) = s.tau_f {
            if !(tau_f > 0.0) {
                return Err(Error::Value("integrator.tau_f must be positive".into()));
            }
        }
        if !(self.gap_tol > 0.0) {
            return Err(Error::Value("gap_tol must be positive".into()));
        }
        if self.epsilon == 0.0 && self.mode != RunMode::Exact && self.tau_max.is_none() {
            return Err(Error::Schema("run.tau_max".into()));
        }
        Ok(())
    }

    pub fn linear(&self) -> Option<&LinearModel> {
        match &self.model {
            ModelSpec::Linear(m) => Some(m),
            ModelSpec::AbstractFrame { .. } => None,
        }
    }

    fn require_linear(&self) -> Result<&LinearModel> {
        self.linear()
            .ok_or_else(|| Error::Value("operation needs a linear model".into()))
    }

    /// Fast-time horizon: t_max, or tau_max/ε.
    pub fn fast_horizon(&self) -> Result<f64> {
        match (self.t_max, self.tau_max) {
            (Some(t), _) => Ok(t),
            (None, Some(tau)) if self.epsilon > 0.0 => Ok(tau / self.epsilon),
            _ => Err(Error::Schema("run.t_max".into())),
        }
    }

    /// Slow-time horizon: tau_max, or ε·t_max.
    pub fn slow_horizon(&self) -> Result<f64> {
        match (self.tau_max, self.t_max) {
            (Some(tau), _) => Ok(tau),
            (None, Some(t)) if self.epsilon > 0.0 => Ok(self.epsilon * t),
            _ => Err(Error::Schema("run.tau_max".into())),
        }
    }

    /// Observable in the lab basis (linear models).
    pub fn lab_observable(&self) -> Result<CMatrix> {
        let model = self.require_linear()?;
        Ok(match &self.observable {
            ObservableSpec::Matrix(m) => m.clone(),
            ObservableSpec::Hybrid => -model.v.clone(),
        })
    }

    /// Observable in the adiabatic basis at r0.
    pub fn adiabatic_observable(&self) -> Result<CMatrix> {
        match &self.model {
            ModelSpec::Linear(model) => {
                let frame = eigenframe(&model.hamiltonian(self.r0), self.r0, self.gap_tol)?;
                adiabatic_matrix(&self.lab_observable()?, &frame)
            }
            ModelSpec::AbstractFrame {
                connection,
                energies,
                energy_slopes,
            } => match &self.observable {
                ObservableSpec::Matrix(m) => Ok(m.clone()),
                ObservableSpec::Hybrid => hybrid_observable(
                    energies.as_deref().ok_or_else(|| Error::Schema("model.energies".into()))?,
                    &energy_slopes.clone().unwrap_or_else(|| vec![0.0; self.dim]),
                    connection,
                ),
            },
        }
    }

    pub fn feedback(&self) -> Result<FeedbackSpec> {
        FeedbackSpec::new(self.lab_observable()?, self.epsilon, self.form.clone())
    }

    pub fn exact_options(&self) -> IntegratorOptions {
        IntegratorOptions {
            rtol: self.integrator.rtol,
            atol: self.integrator.atol,
            min_step: self.integrator.min_step,
            sample_stride: self.integrator.sample_stride,
            ..IntegratorOptions::default()
        }
    }

    /// Initial lab state; populations and phases refer to the raw-gauge frame at r0.
    pub fn initial_lab_state(&self) -> Result<CVector> {
        let model = self.require_linear()?;
        match &self.initial {
            InitialData::Pure(psi) => Ok(psi.clone()),
            InitialData::Simplex { p, phases } => {
                let frame = eigenframe(&model.hamiltonian(self.r0), self.r0, self.gap_tol)?;
                let amps = CVector::from_fn(self.dim, |n, _| Complex64::from_polar(p[n].sqrt(), phases[n]));
                Ok(&frame.vectors * amps)
            }
            _ => Err(Error::Value("initial data are not a pure state".into())),
        }
    }

    /// Adiabatic amplitudes at r0.
    pub fn initial_amplitudes(&self) -> Result<CVector> {
        match (&self.model, &self.initial) {
            (_, InitialData::Simplex { p, phases }) => Ok(CVector::from_fn(self.dim, |n, _| {
                Complex64::from_polar(p[n].sqrt(), phases[n])
            })),
            (ModelSpec::Linear(model), InitialData::Pure(psi)) => {
                let frame = eigenframe(&model.hamiltonian(self.r0), self.r0, self.gap_tol)?;
                Ok(frame.project(psi))
            }
            (ModelSpec::AbstractFrame { .. }, InitialData::Pure(psi)) => Ok(psi.clone()),
            _ => Err(Error::Value("initial data are not a pure state".into())),
        }
    }

    pub fn initial_simplex(&self) -> Result<SimplexState> {
        let amps = self.initial_amplitudes()?;
        let norm2: f64 = amps.iter().map(|z| z.norm_sqr()).sum();
        let p = amps.iter().map(|z| z.norm_sqr() / norm2).collect();
        let phi = amps.iter().map(|z| z.arg()).collect();
        SimplexState::new(p, phi, self.r0)
    }

    pub fn initial_mixed(&self) -> Result<MixedAmplitudes> {
        match &self.initial {
            InitialData::Mixed(c) => MixedAmplitudes::new(c.clone(), self.r0),
            InitialData::PseudoPure { eta, psi } => MixedAmplitudes::pseudo_pure(*eta, psi, self.r0),
            _ => MixedAmplitudes::pure(&self.initial_amplitudes()?, self.r0),
        }
    }

    /// Coefficient source for the reduced integrator.
    pub fn payoff_source(&self) -> Result<PayoffSource<'_>> {
        match &self.model {
            ModelSpec::Linear(model) => Ok(PayoffSource::FrameDependent {
                model,
                observable: self.lab_observable()?,
                gap_tol: self.gap_tol,
            }),
            ModelSpec::AbstractFrame { connection, .. } => {
                let a_ad = self.adiabatic_observable()?;
                let a_diag = (0..self.dim).map(|l| a_ad[(l, l)].re).collect();
                PayoffSource::constant(payoff_matrices(connection, &a_ad)?, a_diag)
            }
        }
    }

    pub fn mixed_scenario(&self) -> Result<MixedScenario> {
        match &self.model {
            ModelSpec::AbstractFrame {
                connection,
                energies,
                energy_slopes,
            } => {
                let mut s = MixedScenario::new(connection.clone(), self.adiabatic_observable()?)?;
                s.energies = energies.clone();
                s.energy_slopes = energy_slopes.clone();
                Ok(s)
            }
            ModelSpec::Linear(_) => Err(Error::Value("mixed dynamics need an abstract model".into())),
        }
    }
}

// -------------------------------------------------------------- rendering

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_complex(z: Complex64) -> String {
    format!("[{}, {}]", fmt_f64(z.re), fmt_f64(z.im))
}

fn fmt_real_vector(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|&x| fmt_f64(x)).collect();
    format!("[{}]", items.join(", "))
}

fn fmt_complex_vector(v: &CVector) -> String {
    let items: Vec<String> = v.iter().map(|&z| fmt_complex(z)).collect();
    format!("[{}]", items.join(", "))
}

fn fmt_matrix(m: &CMatrix) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| {
            let items: Vec<String> = (0..m.ncols()).map(|j| fmt_complex(m[(i, j)])).collect();
            format!("  [{}]", items.join(", "))
        })
        .collect();
    format!("[\n{},\n]", rows.join(",\n"))
}

/// Serializes a config so that [`parse_scenario`] reproduces it exactly;
/// numbers carry 17 significant digits.
pub fn render(cfg: &ScenarioConfig) -> String {
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "name = {}", Value::String(cfg.name.clone()));
    let _ = writeln!(w, "dim = {}", cfg.dim);
    let _ = writeln!(w, "epsilon = {}", fmt_f64(cfg.epsilon));
    let _ = writeln!(w, "r0 = {}", fmt_f64(cfg.r0));
    let _ = writeln!(w, "gap_tol = {}", fmt_f64(cfg.gap_tol));

    let _ = writeln!(w, "\n[model]");
    match &cfg.model {
        ModelSpec::Linear(m) => {
            let _ = writeln!(w, "kind = \"linear\"");
            let _ = writeln!(w, "h0 = {}", fmt_matrix(&m.h0));
            let _ = writeln!(w, "v = {}", fmt_matrix(&m.v));
        }
        ModelSpec::AbstractFrame {
            connection,
            energies,
            energy_slopes,
        } => {
            let _ = writeln!(w, "kind = \"abstract\"");
            let _ = writeln!(w, "connection = {}", fmt_matrix(connection.entries()));
            if let Some(e) = energies {
                let _ = writeln!(w, "energies = {}", fmt_real_vector(e));
            }
            if let Some(s) = energy_slopes {
                let _ = writeln!(w, "energy_slopes = {}", fmt_real_vector(s));
            }
        }
    }

    let _ = writeln!(w, "\n[feedback]");
    match &cfg.form {
        FeedbackForm::LinearInExpectation => {
            let _ = writeln!(w, "form = \"linear\"");
        }
        FeedbackForm::OpenLoop(c) => {
            let _ = writeln!(w, "form = \"open_loop\"");
            let _ = writeln!(w, "coefficients = {}", fmt_real_vector(c));
        }
    }
    match &cfg.observable {
        ObservableSpec::Hybrid => {
            let _ = writeln!(w, "observable = \"hybrid\"");
        }
        ObservableSpec::Matrix(m) => {
            let _ = writeln!(w, "observable = {}", fmt_matrix(m));
        }
    }

    let _ = writeln!(w, "\n[initial]");
    match &cfg.initial {
        InitialData::Pure(psi) => {
            let _ = writeln!(w, "psi = {}", fmt_complex_vector(psi));
        }
        InitialData::Simplex { p, phases } => {
            let _ = writeln!(w, "p = {}", fmt_real_vector(p));
            let _ = writeln!(w, "phases = {}", fmt_real_vector(phases));
        }
        InitialData::Mixed(c) => {
            let _ = writeln!(w, "cbar = {}", fmt_matrix(c));
        }
        InitialData::PseudoPure { eta, psi } => {
            let _ = writeln!(w, "eta = {}", fmt_f64(*eta));
            let _ = writeln!(w, "psi = {}", fmt_complex_vector(psi));
        }
    }

    let _ = writeln!(w, "\n[run]");
    let _ = writeln!(w, "mode = \"{}\"", cfg.mode.as_str());
    if let Some(t) = cfg.t_max {
        let _ = writeln!(w, "t_max = {}", fmt_f64(t));
    }
    if let Some(t) = cfg.tau_max {
        let _ = writeln!(w, "tau_max = {}", fmt_f64(t));
    }
    if let Some((lo, hi)) = cfg.r_range {
        let _ = writeln!(w, "r_range = {}", fmt_real_vector(&[lo, hi]));
    }

    let s = &cfg.integrator;
    let _ = writeln!(w, "\n[integrator]");
    let _ = writeln!(w, "rtol = {}", fmt_f64(s.rtol));
    let _ = writeln!(w, "atol = {}", fmt_f64(s.atol));
    let _ = writeln!(w, "step = {}", fmt_f64(s.step));
    let _ = writeln!(w, "sample_stride = {}", fmt_f64(s.sample_stride));
    let _ = writeln!(w, "min_step = {}", fmt_f64(s.min_step));
    if let Some(tau_f) = s.tau_f {
        let _ = writeln!(w, "tau_f = {}", fmt_f64(tau_f));
    }
    out
}

// ------------------------------------------------------------- validation

/// Two disjoint level pairs whose energy sums (equivalently, level
/// differences) coincide: E_a + E_b ≈ E_c + E_d.
#[derive(Debug, Clone, PartialEq)]
pub struct Resonance {
    pub r: f64,
    pub left: (usize, usize),
    pub right: (usize, usize),
    pub mismatch: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    /// Smallest neighbouring-level gap over the sampled R values.
    pub min_gap: Option<f64>,
    pub min_gap_at: Option<f64>,
    pub resonances: Vec<Resonance>,
    /// ε·max‖∂_R H‖/gap² (Frobenius norm).
    pub adiabaticity: Option<f64>,
    /// max_n |A_nn| in the initial frame.
    pub max_frame_expectation: f64,
    pub warnings: Vec<String>,
}

fn level_pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|a| (a..d).map(move |b| (a, b))).collect()
}

fn find_resonances(energies: &[f64], r: f64, threshold: f64, out: &mut Vec<Resonance>) {
    let pairs = level_pairs(energies.len());
    for (i, &(a, b)) in pairs.iter().enumerate() {
        for &(c, d) in &pairs[i + 1..] {
            if a == c || a == d || b == c || b == d {
                continue;
            }
            let mismatch = ((energies[a] + energies[b]) - (energies[c] + energies[d])).abs();
            if mismatch < threshold {
                match out.iter_mut().find(|x| x.left == (a, b) && x.right == (c, d)) {
                    Some(existing) if existing.mismatch > mismatch => {
                        existing.mismatch = mismatch;
                        existing.r = r;
                    }
                    Some(_) => {}
                    None => out.push(Resonance {
                        r,
                        left: (a, b),
                        right: (c, d),
                        mismatch,
                    }),
                }
            }
        }
    }
}

fn min_neighbour_gap(energies: &[f64]) -> f64 {
    energies
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min)
}

/// Gap, resonance and adiabaticity checks. Only a degenerate initial frame
/// is an error; everything else is reported as a warning.
pub fn validate_scenario(cfg: &ScenarioConfig) -> Result<ValidationReport> {
    let threshold = 10.0 * cfg.gap_tol;
    let mut warnings = Vec::new();
    let mut resonances = Vec::new();
    let (min_gap, min_gap_at, norm_dh);

    match &cfg.model {
        ModelSpec::Linear(model) => {
            eigenframe(&model.hamiltonian(cfg.r0), cfg.r0, cfg.gap_tol)?;
            let (lo, hi) = cfg.r_range.unwrap_or((cfg.r0 - 1.0, cfg.r0 + 1.0));
            let mut best = (f64::INFINITY, cfg.r0);
            for k in 0..RESONANCE_SAMPLES {
                let r = lo + (hi - lo) * k as f64 / (RESONANCE_SAMPLES - 1) as f64;
                let h = model.hamiltonian(r);
                let energies: Vec<f64> = {
                    let mut e: Vec<f64> = h.symmetric_eigenvalues().iter().cloned().collect();
                    e.sort_by(|a, b| a.total_cmp(b));
                    e
                };
                let gap = min_neighbour_gap(&energies);
                if gap < best.0 {
                    best = (gap, r);
                }
                find_resonances(&energies, r, threshold, &mut resonances);
            }
            if best.0 <= cfg.gap_tol {
                warnings.push(format!(
                    "spectrum nearly degenerate at R = {} (gap {:e})",
                    best.1, best.0
                ));
            }
            min_gap = Some(best.0);
            min_gap_at = Some(best.1);
            norm_dh = Some(model.v.norm());
        }
        ModelSpec::AbstractFrame {
            connection,
            energies,
            energy_slopes,
        } => match energies {
            Some(e) => {
                let mut sorted = e.clone();
                sorted.sort_by(|a, b| a.total_cmp(b));
                let gap = min_neighbour_gap(&sorted);
                if gap <= cfg.gap_tol {
                    let lower = e.iter().position(|&x| x == sorted[0]).unwrap_or(0);
                    return Err(Error::DegenerateSpectrum {
                        lower,
                        upper: lower + 1,
                        gap,
                        gap_tol: cfg.gap_tol,
                    });
                }
                find_resonances(e, cfg.r0, threshold, &mut resonances);
                let slopes = energy_slopes.clone().unwrap_or_else(|| vec![0.0; cfg.dim]);
                min_gap = Some(gap);
                min_gap_at = Some(cfg.r0);
                norm_dh = Some(hybrid_observable(e, &slopes, connection)?.norm());
            }
            None => {
                min_gap = None;
                min_gap_at = None;
                norm_dh = None;
            }
        },
    }

    for res in &resonances {
        warnings.push(format!(
            "resonance at R = {}: E{} + E{} ≈ E{} + E{} (mismatch {:e})",
            res.r,
            res.left.0 + 1,
            res.left.1 + 1,
            res.right.0 + 1,
            res.right.1 + 1,
            res.mismatch
        ));
    }
    let adiabaticity = match (norm_dh, min_gap) {
        (Some(n), Some(g)) if g > 0.0 => Some(cfg.epsilon * n / (g * g)),
        _ => None,
    };
    if let Some(x) = adiabaticity {
        if x > 0.1 {
            warnings.push(format!("adiabaticity parameter {x:e} is not small"));
        }
    }
    if cfg.epsilon > 0.1 {
        warnings.push(format!("epsilon = {} is not small", cfg.epsilon));
    }
    let a_ad = cfg.adiabatic_observable()?;
    let max_frame_expectation = (0..cfg.dim).map(|n| a_ad[(n, n)].re.abs()).fold(0.0, f64::max);

    Ok(ValidationReport {
        min_gap,
        min_gap_at,
        resonances,
        adiabaticity,
        max_frame_expectation,
        warnings,
    })
}
