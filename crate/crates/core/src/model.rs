//! Two-population competitive model of wild (`n1`) and Wolbachia-infected
//! (`n2`) mosquitoes with a release term on the infected equation.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::OdeSystem;

/// Real parts within this band are labelled [`Stability::Marginal`].
pub const MARGINAL_BAND: f64 = 1e-9;

/// Biological constants of the full system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Birth rate of the wild population.
    pub b1: f64,
    /// Birth rate of the infected population.
    pub b2: f64,
    pub d1: f64,
    pub d2: f64,
    /// Cytoplasmic incompatibility level in `[0, 1]`.
    pub s_h: f64,
    /// Carrying capacity.
    pub k: f64,
}

impl ModelParams {
    pub fn new(b1: f64, b2: f64, d1: f64, d2: f64, s_h: f64, k: f64) -> Result<Self> {
        let p = ModelParams { b1, b2, d1, d2, s_h, k };
        p.validate()?;
        Ok(p)
    }

    /// Phase-portrait parameter set (`b1 = 0.8, b2 = 0.6, d1 = 0.27, d2 = 0.3, s_h = 0.8, K = 1`).
    pub fn phase_portrait() -> Self {
        ModelParams {
            b1: 0.8,
            b2: 0.6,
            d1: 0.27,
            d2: 0.3,
            s_h: 0.8,
            k: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let violations = self.violations();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(violations.join("; ")))
        }
    }

    /// Every violated invariant, for diagnostics.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("b1", self.b1),
            ("b2", self.b2),
            ("d1", self.d1),
            ("d2", self.d2),
            ("K", self.k),
        ] {
            if !(v.is_finite() && v > 0.0) {
                out.push(format!("{name} must be finite and > 0 (got {v})"));
            }
        }
        if !(self.s_h.is_finite() && (0.0..=1.0).contains(&self.s_h)) {
            out.push(format!("s_h must lie in [0, 1] (got {})", self.s_h));
        }
        out
    }

    /// `b1 > d1` and `b2 > d2`: each population sustains itself alone.
    pub fn is_viable(&self) -> bool {
        self.b1 > self.d1 && self.b2 > self.d2
    }

    /// `(d1 b2) / (d2 b1)`.
    pub fn fitness_ratio(&self) -> f64 {
        (self.d1 * self.b2) / (self.d2 * self.b1)
    }

    /// `1 - s_h < (d1 b2)/(d2 b1) < 1`: a fourth, positive steady state exists.
    pub fn has_coexistence(&self) -> bool {
        let r = self.fitness_ratio();
        1.0 - self.s_h < r && r < 1.0
    }

    /// `n_i* = K (1 - d_i / b_i)`, or `None` when `b_i <= d_i`.
    pub fn wild_equilibrium(&self) -> Option<f64> {
        (self.b1 > self.d1).then(|| self.k * (1.0 - self.d1 / self.b1))
    }

    pub fn infected_equilibrium(&self) -> Option<f64> {
        (self.b2 > self.d2).then(|| self.k * (1.0 - self.d2 / self.b2))
    }

    /// Target level used by the objective; `K (1 - d2/b2)` without the viability guard.
    pub(crate) fn n2_target(&self) -> f64 {
        self.k * (1.0 - self.d2 / self.b2)
    }

    /// Uncontrolled field plus the release `u` on the second component.
    /// No input validation; see [`rhs_full`].
    #[inline]
    pub(crate) fn field(&self, n1: f64, n2: f64, u: f64) -> [f64; 2] {
        let total = n1 + n2;
        let ci = if total == 0.0 { 0.0 } else { n2 / total };
        let crowding = 1.0 - total / self.k;
        [
            self.b1 * n1 * (1.0 - self.s_h * ci) * crowding - self.d1 * n1,
            self.b2 * n2 * crowding - self.d2 * n2 + u,
        ]
    }

    /// Jacobian in `N = (n1+n2)/K`, `p = n2/(n1+n2)` form. Requires `n1 + n2 != 0`.
    #[inline]
    pub(crate) fn jacobian_unchecked(&self, n1: f64, n2: f64) -> [[f64; 2]; 2] {
        let total = n1 + n2;
        let big_n = total / self.k;
        let p = n2 / total;
        let s = self.s_h;
        [
            [
                self.b1 * ((1.0 - s * p) * (1.0 - (2.0 - p) * big_n) + s * p * (1.0 - p) * (1.0 - big_n))
                    - self.d1,
                -self.b1 * (1.0 - p) * (s * (1.0 - p) + big_n * (1.0 - s)),
            ],
            [
                -self.b2 * p * big_n,
                self.b2 * (1.0 - (1.0 + p) * big_n) - self.d2,
            ],
        ]
    }
}

impl OdeSystem<2> for ModelParams {
    fn rhs(&self, x: &[f64; 2], u: f64, _t: f64) -> [f64; 2] {
        self.field(x[0], x[1], u)
    }

    fn jacobian(&self, x: &[f64; 2], _u: f64, _t: f64) -> [[f64; 2]; 2] {
        if x[0] + x[1] == 0.0 {
            // axis growth rates; the field is only directionally differentiable here
            [[self.b1 - self.d1, 0.0], [0.0, self.b2 - self.d2]]
        } else {
            self.jacobian_unchecked(x[0], x[1])
        }
    }

    fn control_jacobian(&self, _x: &[f64; 2], _u: f64, _t: f64) -> [f64; 2] {
        [0.0, 1.0]
    }
}

/// Wild and infected densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationState {
    pub n1: f64,
    pub n2: f64,
}

impl PopulationState {
    pub const EXTINCT: PopulationState = PopulationState { n1: 0.0, n2: 0.0 };

    pub fn new(n1: f64, n2: f64) -> Self {
        PopulationState { n1, n2 }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.n1, self.n2]
    }

    pub fn total(&self) -> f64 {
        self.n1 + self.n2
    }

    /// Infected frequency `n2 / (n1 + n2)`, 0 at total extinction.
    pub fn infected_fraction(&self) -> f64 {
        let t = self.total();
        if t == 0.0 {
            0.0
        } else {
            self.n2 / t
        }
    }
}

impl From<[f64; 2]> for PopulationState {
    fn from(x: [f64; 2]) -> Self {
        PopulationState { n1: x[0], n2: x[1] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteadyStates {
    pub extinction: PopulationState,
    pub wild_only: Option<PopulationState>,
    pub infected_only: Option<PopulationState>,
    pub coexistence: Option<PopulationState>,
}

impl SteadyStates {
    /// Present states, labelled.
    pub fn labelled(&self) -> Vec<(&'static str, PopulationState)> {
        let mut v = vec![("extinction", self.extinction)];
        if let Some(s) = self.wild_only {
            v.push(("wild_only", s));
        }
        if let Some(s) = self.infected_only {
            v.push(("infected_only", s));
        }
        if let Some(s) = self.coexistence {
            v.push(("coexistence", s));
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Unstable,
    Marginal,
}

impl Stability {
    pub fn from_eigenvalues(eig: &[Complex64; 2]) -> Self {
        let max_re = eig[0].re.max(eig[1].re);
        if max_re > MARGINAL_BAND {
            Stability::Unstable
        } else if max_re < -MARGINAL_BAND {
            Stability::Stable
        } else {
            Stability::Marginal
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Stability::Stable => "stable",
            Stability::Unstable => "unstable",
            Stability::Marginal => "marginal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateStability {
    pub label: &'static str,
    pub state: PopulationState,
    #[serde(serialize_with = "serialize_eigs")]
    pub eigenvalues: [Complex64; 2],
    pub stability: Stability,
}

fn serialize_eigs<S: serde::Serializer>(eig: &[Complex64; 2], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(2))?;
    for e in eig {
        seq.serialize_element(&[e.re, e.im])?;
    }
    seq.end()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub entries: Vec<StateStability>,
}

impl StabilityReport {
    pub fn get(&self, label: &str) -> Option<&StateStability> {
        self.entries.iter().find(|e| e.label == label)
    }
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Time derivative of `(n1, n2)` under release rate `u`.
pub fn rhs_full(state: PopulationState, u: f64, params: &ModelParams) -> Result<[f64; 2]> {
    check_finite(&[state.n1, state.n2, u], "rhs_full input")?;
    if state.n1 < 0.0 || state.n2 < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "state must be componentwise non-negative, got ({}, {})",
            state.n1, state.n2
        )));
    }
    if u < 0.0 {
        return Err(Error::InvalidParameter(format!("release rate must be >= 0, got {u}")));
    }
    Ok(params.field(state.n1, state.n2, u))
}

pub fn check_viability(params: &ModelParams) -> bool {
    params.is_viable()
}

pub fn check_coexistence(params: &ModelParams) -> bool {
    params.has_coexistence()
}

/// Closed-form steady states of the uncontrolled system.
pub fn steady_states(params: &ModelParams) -> SteadyStates {
    let wild_only = params.wild_equilibrium().map(|n| PopulationState::new(n, 0.0));
    let infected_only = params.infected_equilibrium().map(|n| PopulationState::new(0.0, n));
    let coexistence = (params.is_viable() && params.has_coexistence()).then(|| {
        let theta = (1.0 - params.fitness_ratio()) / params.s_h;
        let scale = params.k * (1.0 - params.d2 / params.b2);
        PopulationState::new((1.0 - theta) * scale, theta * scale)
    });
    SteadyStates {
        extinction: PopulationState::EXTINCT,
        wild_only,
        infected_only,
        coexistence,
    }
}

/// Jacobian of the uncontrolled field. Off-diagonal entries are non-positive.
pub fn jacobian(state: PopulationState, params: &ModelParams) -> Result<[[f64; 2]; 2]> {
    check_finite(&[state.n1, state.n2], "jacobian state")?;
    if state.total() <= 0.0 {
        return Err(Error::ExtinctionState(state.as_array()));
    }
    Ok(params.jacobian_unchecked(state.n1, state.n2))
}

/// Eigenvalues of a real 2x2 matrix by the quadratic formula.
pub fn eigenvalues_2x2(m: &[[f64; 2]; 2]) -> [Complex64; 2] {
    let half_tr = 0.5 * (m[0][0] + m[1][1]);
    // (a - d)^2/4 + bc avoids cancellation in tr^2/4 - det
    let half_gap = 0.5 * (m[0][0] - m[1][1]);
    let disc = half_gap * half_gap + m[0][1] * m[1][0];
    if disc >= 0.0 {
        let r = disc.sqrt();
        [Complex64::new(half_tr + r, 0.0), Complex64::new(half_tr - r, 0.0)]
    } else {
        let r = (-disc).sqrt();
        [Complex64::new(half_tr, r), Complex64::new(half_tr, -r)]
    }
}

/// Linear stability of every steady state.
///
/// At the origin the field is only directionally differentiable; the growth
/// rates along the two axes, `b1 - d1` and `b2 - d2`, stand in for the
/// eigenvalues.
pub fn classify_stability(params: &ModelParams) -> StabilityReport {
    let ss = steady_states(params);
    let mut entries = Vec::with_capacity(4);

    let axis = [
        Complex64::new(params.b1 - params.d1, 0.0),
        Complex64::new(params.b2 - params.d2, 0.0),
    ];
    entries.push(StateStability {
        label: "extinction",
        state: ss.extinction,
        eigenvalues: axis,
        stability: Stability::from_eigenvalues(&axis),
    });

    for (label, state) in [
        ("wild_only", ss.wild_only),
        ("infected_only", ss.infected_only),
        ("coexistence", ss.coexistence),
    ] {
        if let Some(state) = state {
            let jac = params.jacobian_unchecked(state.n1, state.n2);
            let eig = eigenvalues_2x2(&jac);
            entries.push(StateStability {
                label,
                state,
                eigenvalues: eig,
                stability: Stability::from_eigenvalues(&eig),
            });
        }
    }
    StabilityReport { entries }
}

/// Terminal least-squares cost `½ n1(T)² + ½ [(n2* - n2(T))₊]²`.
pub fn objective_j(final_state: PopulationState, params: &ModelParams) -> f64 {
    let shortfall = (params.n2_target() - final_state.n2).max(0.0);
    0.5 * final_state.n1 * final_state.n1 + 0.5 * shortfall * shortfall
}

/// Gradient of [`objective_j`] with respect to `(n1(T), n2(T))`.
/// The one-sided derivative 0 is used at the kink `n2(T) = n2*`.
pub fn objective_j_gradient(final_state: PopulationState, params: &ModelParams) -> [f64; 2] {
    let shortfall = (params.n2_target() - final_state.n2).max(0.0);
    [final_state.n1, -shortfall]
}
