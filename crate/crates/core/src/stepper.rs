//! Time marching: `p_{n+1} = H(p_n, δt)`, with the flow map `φ` and its
//! inverse carried along by composition.

use std::sync::Arc;

use rayon::prelude::*;

use crate::config::{initial_certificate, RunConfig};
use crate::coriolis::CoriolisContext;
use crate::error::{Result, SgError};
use crate::field::{PeriodicField, SpectralBundle};
use crate::implicit_map::{solve_forward, StepContext};
use crate::ma_step::{convexity, ma_solve, nu_field, stability_matrix, MAStepParams, Model};
use crate::map::{compose, PeriodicMap};

/// Per-step health indicators.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Monitors {
    /// `sup|ν(p_{n+1}) − ν(p_n)∘F⁻¹|`.
    pub nu_sup: f64,
    /// `min λ_min(S(p_n))`.
    pub convexity_min: f64,
    /// `max_{|α|≤3} sup|∂ᵅ(p_{n+1} − p_n)|`.
    pub step_increment: f64,
    /// SG `sup|det Dφ − 1|`; SGSW `sup|det Dφ − h₀/(h∘φ)|`.
    pub det_err: f64,
    pub mass: f64,
}

impl Monitors {
    pub fn to_array(&self) -> [f64; 5] {
        [self.nu_sup, self.convexity_min, self.step_increment, self.det_err, self.mass]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Monitors {
            nu_sup: a[0],
            convexity_min: a[1],
            step_increment: a[2],
            det_err: a[3],
            mass: a[4],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepState {
    pub model: Model,
    pub step: usize,
    pub t: f64,
    /// `p_n` (SG) or `h_n` (SGSW).
    pub field: PeriodicField,
    pub flow: PeriodicMap,
    pub flow_inv: PeriodicMap,
    pub monitors: Monitors,
}

impl StepState {
    /// The field that `det Dφ` is compared against: `1` or `h₀/(h∘φ)`.
    pub fn det_target(&self, initial: &PeriodicField) -> PeriodicField {
        match self.model {
            Model::Sg => PeriodicField::constant(self.field.grid(), 1.0),
            Model::Sgsw => {
                let bundle = SpectralBundle::new(&[&self.field]);
                let h_phi: Vec<f64> = self
                    .flow
                    .node_images()
                    .par_iter()
                    .map(|&y| {
                        let mut v = [0.0];
                        bundle.eval_into(y, &mut v);
                        v[0]
                    })
                    .collect();
                let h_phi = PeriodicField::new(self.field.grid(), h_phi).expect("finite samples");
                initial.zip_map(&h_phi, |a, b| a / b)
            }
        }
    }
}

/// Everything a single step records beyond the state itself.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub monitors: Monitors,
    pub newton_iterations: usize,
    /// `sup|φ_n − φ_{n−1}|`.
    pub flow_increment: f64,
    /// `sup|φ∘φ⁻¹ − id|`.
    pub round_trip: f64,
    pub certificate_min: f64,
    pub max_mean_defect: f64,
}

/// Fixed data of a run: model, Coriolis field, solver parameters.
#[derive(Clone, Debug)]
pub struct Stepper {
    pub model: Model,
    pub coriolis: Arc<CoriolisContext>,
    pub params: MAStepParams,
    pub lip_cap: f64,
    pub initial: PeriodicField,
    /// Allowed `sup|φ∘φ⁻¹ − id|`.
    pub round_trip_tol: f64,
}

impl Stepper {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let cert = initial_certificate(cfg)?;
        Ok(Stepper {
            model: cfg.model,
            coriolis: Arc::new(cfg.coriolis()?),
            params: cfg.step_params(cert.c0),
            lip_cap: cfg.lip_cap,
            initial: cfg.initial_field()?,
            round_trip_tol: 10.0 * cfg.tolerances.map_tol,
        })
    }

    pub fn initial_state(&self) -> Result<StepState> {
        let grid = self.initial.grid();
        let (convexity_min, _) = convexity(&stability_matrix(&self.initial, &self.coriolis)?);
        Ok(StepState {
            model: self.model,
            step: 0,
            t: 0.0,
            field: self.initial.clone(),
            flow: PeriodicMap::identity(grid),
            flow_inv: PeriodicMap::identity(grid),
            monitors: Monitors {
                convexity_min,
                mass: self.initial.mean(),
                ..Monitors::default()
            },
        })
    }

    /// Advances `state` by `dt`; `dt = 0` returns the state unchanged.
    pub fn step(&self, state: &StepState, dt: f64) -> Result<(StepState, StepRecord)> {
        if dt == 0.0 {
            let record = StepRecord {
                step: state.step,
                t: state.t,
                monitors: state.monitors,
                ..StepRecord::default()
            };
            return Ok((state.clone(), record));
        }
        if !(dt > 0.0) {
            return Err(SgError::ConfigInvalid(vec![format!("dt must be positive, got {dt}")]));
        }
        let cor = &self.coriolis;
        let p = &state.field;
        let solved = ma_solve(p, dt, self.model, cor, &self.params)?;
        let q = solved.q;
        let ctx = StepContext::new(cor.clone(), p.clone(), q.clone(), dt)?;
        let forward = solve_forward(&ctx, &self.params.map)?;
        let flow = compose(&forward, &state.flow)?;
        let flow_inv = compose(&state.flow_inv, &solved.zmap)?;
        let round_trip = compose(&flow, &flow_inv)?.displacement_sup();
        if round_trip > self.round_trip_tol {
            return Err(SgError::FlowRoundTripFailed {
                error: round_trip,
                tol: self.round_trip_tol,
            });
        }
        let step_increment = increment(&q.sub(p))?;
        if step_increment > self.lip_cap * dt {
            return Err(SgError::LipschitzCapExceeded {
                increment: step_increment,
                cap: self.lip_cap * dt,
            });
        }
        let nu_p = nu_field(p, self.model, cor)?;
        let nu_q = nu_field(&q, self.model, cor)?;
        let bundle = SpectralBundle::new(&[&nu_p]);
        let nu_sup = (0..q.grid().len())
            .into_par_iter()
            .map(|idx| {
                let mut v = [0.0];
                bundle.eval_into(solved.zmap.node_image(idx), &mut v);
                (nu_q.samples()[idx] - v[0]).abs()
            })
            .reduce(|| 0.0, f64::max);
        let mut next = StepState {
            model: self.model,
            step: state.step + 1,
            t: (state.step + 1) as f64 * dt,
            field: q,
            flow,
            flow_inv,
            monitors: Monitors {
                nu_sup,
                convexity_min: solved.convexity_min,
                step_increment,
                det_err: 0.0,
                mass: 0.0,
            },
        };
        next.monitors.mass = next.field.mean();
        let det = next.flow.det_jacobian()?;
        next.monitors.det_err = det.sub(&next.det_target(&self.initial)).sup_norm();
        let record = StepRecord {
            step: next.step,
            t: next.t,
            monitors: next.monitors,
            newton_iterations: solved.newton_iterations,
            flow_increment: next.flow.distance(&state.flow),
            round_trip,
            certificate_min: solved.certificate_min,
            max_mean_defect: solved.max_mean_defect,
        };
        Ok((next, record))
    }
}

/// `max_{|α|≤3} sup|∂ᵅd|`.
pub fn increment(d: &PeriodicField) -> Result<f64> {
    let mut out: f64 = 0.0;
    for total in 0..=3 {
        for a in 0..=total {
            out = out.max(d.derivative([a, total - a])?.sup_norm());
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub max_det_err: f64,
    pub min_convexity: f64,
    /// `Σ_n nu_sup`.
    pub nu_drift: f64,
    pub max_increment_ratio: f64,
    pub max_round_trip: f64,
    /// `max_n |mass_n − mass_0|`.
    pub max_mass_drift: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub dt: f64,
    /// States at steps `0, k, 2k, …` and the final step.
    pub snapshots: Vec<StepState>,
    /// One record per step, starting with the initial state.
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
}

/// Runs `cfg` to completion. `observe` sees every recorded snapshot as it is
/// produced, so callers can persist output before a later step fails.
pub fn run_observed(
    cfg: &RunConfig,
    mut observe: impl FnMut(&StepState, &StepRecord) -> Result<()>,
) -> Result<Trajectory> {
    let stepper = Stepper::new(cfg)?;
    let mut state = stepper.initial_state()?;
    let first = StepRecord {
        monitors: state.monitors,
        ..StepRecord::default()
    };
    observe(&state, &first)?;
    let mut traj = Trajectory {
        dt: cfg.dt,
        snapshots: vec![state.clone()],
        records: vec![first],
        summary: RunSummary {
            min_convexity: state.monitors.convexity_min,
            ..RunSummary::default()
        },
    };
    let steps = cfg.steps();
    for n in 1..=steps {
        let (next, record) = stepper.step(&state, cfg.dt).map_err(|e| e.at_step(n, n as f64 * cfg.dt))?;
        state = next;
        let s = &mut traj.summary;
        s.steps = n;
        s.max_det_err = s.max_det_err.max(record.monitors.det_err);
        s.min_convexity = s.min_convexity.min(record.monitors.convexity_min);
        s.nu_drift += record.monitors.nu_sup;
        s.max_increment_ratio = s.max_increment_ratio.max(record.monitors.step_increment / cfg.dt);
        s.max_round_trip = s.max_round_trip.max(record.round_trip);
        s.max_mass_drift = s.max_mass_drift.max((record.monitors.mass - first.monitors.mass).abs());
        traj.records.push(record);
        if n % cfg.snapshot_every == 0 || n == steps {
            observe(&state, &record)?;
            traj.snapshots.push(state.clone());
        }
    }
    Ok(traj)
}

pub fn run(cfg: &RunConfig) -> Result<Trajectory> {
    run_observed(cfg, |_, _| Ok(()))
}

/// Thresholds for the monitors a run asserts once it has finished.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonitorLimits {
    pub det_err: f64,
    /// Fraction of the initial `λ_min(S)` the run must keep.
    pub convexity_fraction: f64,
    pub mass_drift: f64,
}

impl Default for MonitorLimits {
    fn default() -> Self {
        MonitorLimits {
            det_err: 1e-6,
            convexity_fraction: 0.9,
            mass_drift: 1e-10,
        }
    }
}

impl Trajectory {
    /// Human-readable descriptions of every monitor outside `limits`.
    pub fn violations(&self, limits: &MonitorLimits) -> Vec<String> {
        let s = &self.summary;
        let lambda0 = self.records.first().map_or(0.0, |r| r.monitors.convexity_min);
        let mut out = Vec::new();
        if !(s.max_det_err <= limits.det_err) {
            out.push(format!("det_err {:e} above {:e}", s.max_det_err, limits.det_err));
        }
        if !(s.min_convexity >= limits.convexity_fraction * lambda0) {
            out.push(format!(
                "convexity {:e} below {} of initial {:e}",
                s.min_convexity, limits.convexity_fraction, lambda0
            ));
        }
        if !(s.max_mass_drift <= limits.mass_drift) {
            out.push(format!("mass drift {:e} above {:e}", s.max_mass_drift, limits.mass_drift));
        }
        out
    }
}

/// Time-step self-convergence: `errors[i] = sup|p^{dt_i}(T) − p^{dt_i/2}(T)|`
/// with `dt_i = dt·2^{−i}`, and `ratios[i] = errors[i] / errors[i+1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfConvergence {
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl SelfConvergence {
    /// `log₂` of each ratio.
    pub fn orders(&self) -> Vec<f64> {
        self.ratios.iter().map(|r| r.log2()).collect()
    }
}

/// Runs `cfg` at `halvings + 1` successively halved time steps.
pub fn self_convergence(cfg: &RunConfig, halvings: usize) -> Result<SelfConvergence> {
    if halvings == 0 {
        return Err(SgError::ConfigInvalid(vec!["convergence needs at least one halving".to_string()]));
    }
    let dts: Vec<f64> = (0..=halvings).map(|i| cfg.dt / (1u64 << i) as f64).collect();
    let finals = dts
        .iter()
        .map(|&dt| {
            let mut c = cfg.clone();
            c.dt = dt;
            c.snapshot_every = usize::MAX;
            let traj = run(&c)?;
            Ok(traj.snapshots.last().expect("final snapshot").field.clone())
        })
        .collect::<Result<Vec<PeriodicField>>>()?;
    let errors: Vec<f64> = finals.windows(2).map(|w| w[0].sub(&w[1]).sup_norm()).collect();
    let ratios = errors.windows(2).map(|w| w[0] / w[1]).collect();
    Ok(SelfConvergence {
        dts: dts[..halvings].to_vec(),
        errors,
        ratios,
    })
}
