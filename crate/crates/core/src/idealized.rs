//! Scalar model of population gradient descent.
//!
//! Under the block-symmetric reduction the attention matrix is described by
//! three numbers (fixed diagonal `beta`, in-set value `gamma`, cross-set
//! value `rho`) and the value vector by its feature coefficient `alpha`.
//! The recursions below keep the unspecified order-one constants explicit in
//! [`DynHyper`].
//!
//! The run moves through four phases:
//!
//! 1. `SignalGrowth`: `alpha` grows until it reaches `alpha_event_threshold`
//!    (time `T0`).
//! 2. `AttentionGrowth`: the signal and feature-noise parts of the `alpha`
//!    gradient cancel, so `alpha` is held while `gamma` grows until
//!    `C * Gamma >= gamma_event_threshold` (time `T1`).
//! 3. `Refinement`: `alpha` grows again until `alpha_final`.
//! 4. `Converged`: the loss is negligible and every increment is zero.

use serde::Serialize;

use crate::distribution::Partition;
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;

pub use crate::analysis::AttentionReduction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    SignalGrowth,
    AttentionGrowth,
    Refinement,
    Converged,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScalarState {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub rho: f64,
    pub t: usize,
    pub phase: Phase,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregates {
    /// Diagonal softmax mass.
    pub lambda: f64,
    /// Mass of one in-set off-diagonal entry.
    pub gamma: f64,
    /// Mass of one cross-set entry.
    pub xi: f64,
    /// `D (Lambda + (C-1) Gamma)`
    pub g: f64,
}

impl Aggregates {
    /// `Lambda + (C-1) Gamma + (D-C) Xi`, which is 1 up to rounding.
    pub fn total_mass(&self, set_size: usize, num_patches: usize) -> f64 {
        self.lambda + (set_size - 1) as f64 * self.gamma + (num_patches - set_size) as f64 * self.xi
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DynHyper {
    pub eta: f64,
    pub set_size: usize,
    pub num_patches: usize,
    pub p: u32,
    pub c_gamma: f64,
    pub c_alpha: f64,
    pub c_rho: f64,
    /// Scale constant of the event thresholds; `D^0.01` by default.
    pub lambda0: f64,
    /// Stand-in for the polylogarithmic factors; `ln D` by default.
    pub polylog: f64,
    /// `T0` fires at `alpha >= alpha_event_const / (C^2 lambda0)`.
    pub alpha_event_const: f64,
    /// `T1` fires at `C Gamma >= gamma_event_const * lambda0 / D`.
    pub gamma_event_const: f64,
}

impl DynHyper {
    pub fn new(eta: f64, set_size: usize, num_patches: usize, p: u32) -> Self {
        Self {
            eta,
            set_size,
            num_patches,
            p,
            c_gamma: 1.0,
            c_alpha: 1.0,
            c_rho: 1.0,
            lambda0: (num_patches as f64).powf(0.01),
            polylog: (num_patches as f64).ln(),
            alpha_event_const: 1.0,
            gamma_event_const: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eta", self.eta),
            ("c_gamma", self.c_gamma),
            ("c_alpha", self.c_alpha),
            ("c_rho", self.c_rho),
            ("lambda0", self.lambda0),
            ("polylog", self.polylog),
            ("alpha_event_const", self.alpha_event_const),
            ("gamma_event_const", self.gamma_event_const),
        ];
        for (name, v) in positive {
            // eta = 0 is allowed so a run can be frozen
            if !(v >= 0.0 && v.is_finite()) || (name != "eta" && v == 0.0) {
                return Err(invalid(format!("{name} = {v} must be positive")));
            }
        }
        if self.set_size == 0 || self.set_size > self.num_patches {
            return Err(invalid("need 1 <= C <= D"));
        }
        if self.p < 3 || self.p.is_multiple_of(2) {
            return Err(invalid("p must be odd and >= 3"));
        }
        Ok(())
    }

    fn c2_lambda0(&self) -> f64 {
        (self.set_size * self.set_size) as f64 * self.lambda0
    }

    pub fn alpha_event_threshold(&self) -> f64 {
        self.alpha_event_const / self.c2_lambda0()
    }

    pub fn gamma_event_threshold(&self) -> f64 {
        self.gamma_event_const * self.lambda0 / self.num_patches as f64
    }

    /// Value of `alpha` at which the population loss is taken to be negligible.
    pub fn alpha_final(&self) -> f64 {
        self.polylog * self.alpha_event_threshold()
    }
}

/// `alpha = nu^(1/(p-1))`, `gamma = rho = 0`, `beta = sigma_A`.
pub fn init_scalar_state(p: u32, nu: f64, sigma_a: f64) -> Result<ScalarState> {
    if p < 3 || p.is_multiple_of(2) {
        return Err(invalid("p must be odd and >= 3"));
    }
    if nu.is_nan() || nu <= 0.0 {
        return Err(invalid("nu must be positive"));
    }
    Ok(ScalarState {
        alpha: nu.powf(1.0 / f64::from(p - 1)),
        beta: sigma_a,
        gamma: 0.0,
        rho: 0.0,
        t: 0,
        phase: Phase::SignalGrowth,
    })
}

/// Softmax masses of the block-symmetric score matrix, with a shared max shift.
pub fn softmax_aggregates(state: &ScalarState, set_size: usize, num_patches: usize) -> Result<Aggregates> {
    if set_size == 0 || set_size > num_patches {
        return Err(invalid("need 1 <= C <= D"));
    }
    let m = state.beta.max(state.gamma).max(state.rho);
    let eb = (state.beta - m).exp();
    let eg = (state.gamma - m).exp();
    let er = (state.rho - m).exp();
    let denom = eb + (set_size - 1) as f64 * eg + (num_patches - set_size) as f64 * er;
    let lambda = eb / denom;
    let gamma = eg / denom;
    let xi = er / denom;
    Ok(Aggregates {
        lambda,
        gamma,
        xi,
        g: num_patches as f64 * (lambda + (set_size - 1) as f64 * gamma),
    })
}

/// Raw increments `(d_alpha, d_gamma, d_rho)` before phase gating.
pub fn increments(state: &ScalarState, agg: &Aggregates, hyper: &DynHyper) -> (f64, f64, f64) {
    let p = hyper.p as i32;
    let c = hyper.set_size as f64;
    let dn = hyper.num_patches as f64;
    let a_p = state.alpha.powi(p);
    let gamma_drive = agg.gamma * agg.g.powi(p - 1);
    let d_gamma = hyper.c_gamma * c * hyper.eta * a_p * gamma_drive;
    let d_rho = hyper.c_rho * hyper.eta * hyper.polylog * a_p * (1.0 / dn + gamma_drive / dn);
    let d_alpha = hyper.c_alpha * c * hyper.eta * agg.g.powi(p) * state.alpha.powi(p - 1);
    (d_alpha, d_gamma, d_rho)
}

fn advance_phase(state: &mut ScalarState, agg: &Aggregates, hyper: &DynHyper) {
    loop {
        let next = match state.phase {
            Phase::SignalGrowth if state.alpha >= hyper.alpha_event_threshold() => Phase::AttentionGrowth,
            Phase::AttentionGrowth if hyper.set_size as f64 * agg.gamma >= hyper.gamma_event_threshold() => {
                Phase::Refinement
            }
            Phase::Refinement if state.alpha >= hyper.alpha_final() => Phase::Converged,
            _ => return,
        };
        state.phase = next;
    }
}

/// One synchronous update of `alpha`, `gamma`, `rho`.
pub fn step_scalar(state: &ScalarState, hyper: &DynHyper) -> Result<ScalarState> {
    let mut cur = *state;
    let agg = softmax_aggregates(&cur, hyper.set_size, hyper.num_patches)?;
    advance_phase(&mut cur, &agg, hyper);
    let (d_alpha, d_gamma, d_rho) = increments(&cur, &agg, hyper);
    let mut next = cur;
    match cur.phase {
        Phase::SignalGrowth | Phase::Refinement => {
            next.alpha += d_alpha;
            next.gamma += d_gamma;
            next.rho += d_rho;
        }
        Phase::AttentionGrowth => {
            next.gamma += d_gamma;
            next.rho += d_rho;
        }
        Phase::Converged => {}
    }
    next.t += 1;
    if !(next.alpha.is_finite() && next.gamma.is_finite() && next.rho.is_finite()) {
        return Err(Error::NonFinite(format!("scalar state at step {}", next.t)));
    }
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub rho: f64,
    #[serde(rename = "Lambda")]
    pub lambda: f64,
    #[serde(rename = "Gamma")]
    pub gamma_mass: f64,
    #[serde(rename = "Xi")]
    pub xi: f64,
    #[serde(rename = "G")]
    pub g: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventTimes {
    pub t0: Option<usize>,
    pub t1: Option<usize>,
    pub converged: Option<usize>,
    pub alpha_threshold: f64,
    pub gamma_threshold: f64,
    pub alpha_final: f64,
    pub lambda0: f64,
}

/// Summary statistics gathered at every step, including unrecorded ones.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryChecks {
    pub max_normalization_error: f64,
    pub gamma_non_decreasing: bool,
    pub alpha_non_decreasing: bool,
    pub gamma_dominates_rho: bool,
    /// Extremes of `D * Xi` over the run.
    pub min_xi_scaled: f64,
    pub max_xi_scaled: f64,
}

#[derive(Clone, Debug)]
pub struct ScalarRun {
    /// States sampled every `record_every` steps plus every phase change and the last step.
    pub trajectory: Vec<TrajectoryPoint>,
    pub events: EventTimes,
    pub checks: TrajectoryChecks,
    pub final_state: ScalarState,
}

fn point(state: &ScalarState, agg: &Aggregates) -> TrajectoryPoint {
    TrajectoryPoint {
        t: state.t,
        alpha: state.alpha,
        gamma: state.gamma,
        rho: state.rho,
        lambda: agg.lambda,
        gamma_mass: agg.gamma,
        xi: agg.xi,
        g: agg.g,
    }
}

/// Iterates up to `steps` times, stopping early once converged.
pub fn run_scalar(init: ScalarState, hyper: &DynHyper, steps: usize, record_every: usize) -> Result<ScalarRun> {
    hyper.validate()?;
    if steps == 0 {
        return Err(invalid("need at least one step"));
    }
    let record_every = record_every.max(1);
    let (c, n) = (hyper.set_size, hyper.num_patches);
    let mut state = init;
    let mut trajectory = Vec::new();
    let mut events = EventTimes {
        t0: None,
        t1: None,
        converged: None,
        alpha_threshold: hyper.alpha_event_threshold(),
        gamma_threshold: hyper.gamma_event_threshold(),
        alpha_final: hyper.alpha_final(),
        lambda0: hyper.lambda0,
    };
    let mut checks = TrajectoryChecks {
        max_normalization_error: 0.0,
        gamma_non_decreasing: true,
        alpha_non_decreasing: true,
        gamma_dominates_rho: true,
        min_xi_scaled: f64::INFINITY,
        max_xi_scaled: 0.0,
    };
    let observe = |s: &ScalarState, checks: &mut TrajectoryChecks| -> Result<Aggregates> {
        let agg = softmax_aggregates(s, c, n)?;
        checks.max_normalization_error = checks.max_normalization_error.max((agg.total_mass(c, n) - 1.0).abs());
        checks.gamma_dominates_rho &= s.gamma >= s.rho;
        let xs = agg.xi * n as f64;
        checks.min_xi_scaled = checks.min_xi_scaled.min(xs);
        checks.max_xi_scaled = checks.max_xi_scaled.max(xs);
        Ok(agg)
    };
    let agg = observe(&state, &mut checks)?;
    trajectory.push(point(&state, &agg));
    for _ in 0..steps {
        let prev = state;
        state = step_scalar(&state, hyper)?;
        checks.gamma_non_decreasing &= state.gamma >= prev.gamma;
        checks.alpha_non_decreasing &= state.alpha >= prev.alpha;
        // phase reached at the start of step t is attributed to time t
        let phase_time = prev.t;
        let mut phase_changed = false;
        if state.phase != Phase::SignalGrowth && events.t0.is_none() {
            events.t0 = Some(phase_time);
            phase_changed = true;
        }
        if matches!(state.phase, Phase::Refinement | Phase::Converged) && events.t1.is_none() {
            events.t1 = Some(phase_time);
            phase_changed = true;
        }
        let agg = observe(&state, &mut checks)?;
        let done = state.phase == Phase::Converged;
        if done && events.converged.is_none() {
            events.converged = Some(phase_time);
        }
        if phase_changed || done || state.t.is_multiple_of(record_every) || state.t == init.t + steps {
            trajectory.push(point(&state, &agg));
        }
        if done {
            break;
        }
    }
    Ok(ScalarRun {
        trajectory,
        events,
        checks,
        final_state: state,
    })
}

/// Means and spreads of the in-set and cross-set off-diagonal entries of `a`.
pub fn reduce_attention(a: &Matrix, partition: &Partition) -> Result<AttentionReduction> {
    crate::analysis::reduce_attention(a, partition)
}
