//! Time propagation of protocol states.
//!
//! Linear kinds are propagated exactly through the eigendecomposition of the
//! symmetric coupling matrix, so any sample time is evaluated directly.
//! Sign-coupled kinds are stepped with explicit Euler under a chatter
//! budget; in the combined dynamics the linear x/y blocks are advanced with
//! the exact zero-order-hold map over each step while z is stepped.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{NetworkTimeline, Segment};
use crate::protocol::{lock_signature, sgn, solve_spd, ProtocolKind, ProtocolSystem};

/// Default stability window for lock detection, in seconds.
pub const DEFAULT_WINDOW: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySegment {
    /// Index of the first sample belonging to this segment.
    pub first_sample: usize,
    pub start: f64,
    /// Potential-node indices of the component of interest.
    pub nodes: Vec<usize>,
}

/// Sampled states of one protocol run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub kind: ProtocolKind,
    pub n_bar: usize,
    pub times: Vec<f64>,
    /// `n_bar × dim` state at each sample time.
    pub states: Vec<DMatrix<f64>>,
    pub segments: Vec<TrajectorySegment>,
}

impl Trajectory {
    pub fn new(kind: ProtocolKind, n_bar: usize) -> Self {
        Self {
            kind,
            n_bar,
            times: Vec::new(),
            states: Vec::new(),
            segments: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn begin_segment(&mut self, start: f64, nodes: Vec<usize>) {
        self.segments.push(TrajectorySegment {
            first_sample: self.times.len(),
            start,
            nodes,
        });
    }

    /// Append a sample. A sample at the time of the previous one replaces
    /// it; at an event this keeps the post-event state, which agrees with
    /// the pre-event one on every surviving agent.
    fn push(&mut self, t: f64, state: DMatrix<f64>) {
        if let Some(&last) = self.times.last() {
            if t <= last {
                let n = self.times.len();
                if let Some(seg) = self.segments.last_mut() {
                    if seg.first_sample == n {
                        seg.first_sample = n - 1;
                    }
                }
                *self.states.last_mut().unwrap() = state;
                return;
            }
        }
        self.times.push(t);
        self.states.push(state);
    }

    /// Segment that sample `i` belongs to.
    pub fn segment_of(&self, i: usize) -> usize {
        self.segments
            .iter()
            .rposition(|s| s.first_sample <= i)
            .unwrap_or(0)
    }

    /// Sample index range of segment `s`.
    pub fn segment_range(&self, s: usize) -> std::ops::Range<usize> {
        let start = self.segments[s].first_sample;
        let end = self
            .segments
            .get(s + 1)
            .map(|n| n.first_sample)
            .unwrap_or(self.times.len());
        start..end
    }

    /// The shared lock signature at sample `i`, when all active agents agree.
    pub fn uniform_signature(&self, i: usize) -> Option<Vec<i64>> {
        let nodes = &self.segments[self.segment_of(i)].nodes;
        uniform_signature(&self.kind, self.n_bar, &self.states[i], nodes)
    }

    pub fn final_state(&self) -> Option<&DMatrix<f64>> {
        self.states.last()
    }
}

pub fn uniform_signature(kind: &ProtocolKind, n_bar: usize, state: &DMatrix<f64>, nodes: &[usize]) -> Option<Vec<i64>> {
    let mut first: Option<Vec<i64>> = None;
    for &v in nodes {
        let row: Vec<f64> = state.row(v).iter().copied().collect();
        let sig = lock_signature(kind, n_bar, &row);
        match &first {
            None => first = Some(sig),
            Some(f) if *f != sig => return None,
            _ => {}
        }
    }
    first
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LockReport {
    pub lock_time: Option<f64>,
    pub locked_values: Vec<i64>,
    pub stability_window: f64,
    pub bound_used: Option<f64>,
}

impl LockReport {
    pub fn locked(&self) -> bool {
        self.lock_time.is_some()
    }

    pub fn within_bound(&self) -> bool {
        match (self.lock_time, self.bound_used) {
            (Some(t), Some(b)) => t <= b,
            (Some(_), None) => true,
            _ => false,
        }
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound_used = Some(bound);
        self
    }
}

/// Lock over samples `range`: the start of the final run of identical,
/// agent-uniform rounded states, provided that run lasts at least `window`.
fn lock_in_range(traj: &Trajectory, range: std::ops::Range<usize>, window: f64) -> LockReport {
    let mut report = LockReport {
        lock_time: None,
        locked_values: Vec::new(),
        stability_window: window,
        bound_used: None,
    };
    if range.is_empty() {
        return report;
    }
    let last = range.end - 1;
    let Some(sig) = traj.uniform_signature(last) else {
        return report;
    };
    let mut start = last;
    while start > range.start {
        match traj.uniform_signature(start - 1) {
            Some(s) if s == sig => start -= 1,
            _ => break,
        }
    }
    if traj.times[last] - traj.times[start] >= window {
        report.lock_time = Some(traj.times[start]);
        report.locked_values = sig;
    }
    report
}

/// Lock time of a whole trajectory.
pub fn detect_lock(traj: &Trajectory, window: f64) -> LockReport {
    lock_in_range(traj, 0..traj.len(), window)
}

/// Lock time within each segment of a trajectory.
pub fn detect_segment_locks(traj: &Trajectory, window: f64) -> Vec<LockReport> {
    (0..traj.segments.len())
        .map(|s| lock_in_range(traj, traj.segment_range(s), window))
        .collect()
}

/// Streaming lock detector used to stop sign-coupled integrations early.
///
/// A lock is confirmed once the uniform signature has held for `window`
/// seconds and, when `sliding` is set, every order-statistic residual has
/// taken both signs during that run. Outside the target the residual keeps
/// one sign, so a slow drift across an integer cannot pass for a lock.
#[derive(Debug, Clone)]
pub struct LockDetector {
    window: f64,
    sliding: bool,
    start: Option<f64>,
    sig: Option<Vec<i64>>,
    signs: Vec<(bool, bool)>,
}

impl LockDetector {
    pub fn new(window: f64, sliding: bool) -> Self {
        Self {
            window,
            sliding,
            start: None,
            sig: None,
            signs: Vec::new(),
        }
    }

    pub fn note_residuals(&mut self, residuals: &[f64]) {
        if self.signs.len() != residuals.len() {
            self.signs = vec![(false, false); residuals.len()];
        }
        for (seen, &r) in self.signs.iter_mut().zip(residuals) {
            seen.0 |= r >= 0.0;
            seen.1 |= r <= 0.0;
        }
    }

    /// Feed one sample; returns true once the lock is confirmed.
    pub fn observe(&mut self, t: f64, sig: Option<Vec<i64>>) -> bool {
        match sig {
            Some(s) if self.sig.as_ref() == Some(&s) => {}
            Some(s) => {
                self.start = Some(t);
                self.sig = Some(s);
                self.signs.iter_mut().for_each(|v| *v = (false, false));
            }
            None => {
                self.start = None;
                self.sig = None;
                self.signs.iter_mut().for_each(|v| *v = (false, false));
                return false;
            }
        }
        let held = self.start.is_some_and(|s0| t - s0 >= self.window);
        let sliding_ok = !self.sliding || self.signs.iter().all(|&(p, n)| p && n);
        held && sliding_ok
    }

    pub fn lock_time(&self) -> Option<f64> {
        self.start
    }
}

/// Exact propagator of a linear kind on one segment.
#[derive(Debug, Clone)]
pub struct LinearPropagator {
    nodes: Vec<usize>,
    q: DMatrix<f64>,
    lambda: DVector<f64>,
    h: f64,
    y_star: DMatrix<f64>,
}

impl LinearPropagator {
    pub fn new(system: &ProtocolSystem) -> Result<Self> {
        let (h, gamma) = system
            .linear_gains()
            .ok_or_else(|| Error::InvalidArgument(format!("{} is not linear", system.kind.tag())))?;
        let a = system.coupling_matrix(gamma);
        Self::from_matrix(system.nodes.clone(), a, h, &system.b)
    }

    /// Propagator of `ẏ = -h·A·y + h·b` for symmetric positive definite `A`.
    pub fn from_matrix(nodes: Vec<usize>, a: DMatrix<f64>, h: f64, b: &DMatrix<f64>) -> Result<Self> {
        let asym = (&a - a.transpose()).abs().max();
        if asym > 1e-12 * a.abs().max().max(1.0) {
            return Err(Error::Numerical(format!("drift matrix is not symmetric (|A - Aᵀ| = {asym:e})")));
        }
        let eig = SymmetricEigen::new(a.clone());
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::Numerical("coupling matrix is singular".into()));
        }
        let q = eig.eigenvectors;
        let lambda = eig.eigenvalues;
        let y_star = solve_spd(a, b)?;
        Ok(Self {
            nodes,
            q,
            lambda,
            h,
            y_star,
        })
    }

    pub fn equilibrium(&self) -> &DMatrix<f64> {
        &self.y_star
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda.min()
    }

    fn component(&self, full: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.nodes.len(), full.ncols(), |r, c| full[(self.nodes[r], c)])
    }

    fn scatter(&self, full: &mut DMatrix<f64>, comp: &DMatrix<f64>) {
        for (r, &v) in self.nodes.iter().enumerate() {
            for c in 0..comp.ncols() {
                full[(v, c)] = comp[(r, c)];
            }
        }
    }

    /// Modal coordinates Qᵀ(y₀ − y*) of a full state.
    fn modal(&self, y0: &DMatrix<f64>) -> DMatrix<f64> {
        self.q.transpose() * (self.component(y0) - &self.y_star)
    }

    fn at_modal(&self, base: &DMatrix<f64>, modal: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        if t == 0.0 {
            return base.clone();
        }
        let decayed = DMatrix::from_fn(modal.nrows(), modal.ncols(), |r, c| {
            modal[(r, c)] * (-self.h * self.lambda[r] * t).exp()
        });
        let comp = &self.y_star + &self.q * decayed;
        let mut out = base.clone();
        self.scatter(&mut out, &comp);
        out
    }

    /// y* + Q e^{-hΛt} Qᵀ (y₀ − y*), on component rows; other rows unchanged.
    pub fn propagate(&self, y0: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        self.at_modal(y0, &self.modal(y0), t)
    }

    /// States at every `t` in `times` (relative to the start of propagation).
    pub fn sample(&self, y0: &DMatrix<f64>, times: &[f64]) -> Vec<DMatrix<f64>> {
        let modal = self.modal(y0);
        times.iter().map(|&t| self.at_modal(y0, &modal, t)).collect()
    }

    /// Zero-order-hold maps `(E, G)` over a step `dt`:
    /// `y(t+dt) = E·y(t) + G·b` for input `b` held constant over the step.
    pub fn zoh(&self, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.lambda.len();
        let decay = DVector::from_fn(n, |r, _| (-self.h * self.lambda[r] * dt).exp());
        let gain = DVector::from_fn(n, |r, _| (1.0 - decay[r]) / self.lambda[r]);
        let qt = self.q.transpose();
        let e = &self.q * DMatrix::from_diagonal(&decay) * &qt;
        let g = &self.q * DMatrix::from_diagonal(&gain) * &qt;
        (e, g)
    }
}

/// Exact state of a linear system after time `t`.
pub fn propagate_linear_exact(system: &ProtocolSystem, y0: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if t < 0.0 {
        return Err(Error::InvalidArgument(format!("negative time {t}")));
    }
    Ok(LinearPropagator::new(system)?.propagate(y0, t))
}

/// Dense-early sample offsets in `[0, span]`: geometric spacing from `first`
/// up to one uniform step, then uniform steps of `step`, always ending at `span`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingGrid {
    pub first: f64,
    pub per_decade: usize,
    pub step: f64,
}

impl Default for SamplingGrid {
    fn default() -> Self {
        Self {
            first: 1e-6,
            per_decade: 12,
            step: 1e-3,
        }
    }
}

impl SamplingGrid {
    pub fn with_step(step: f64) -> Self {
        Self {
            step,
            ..Self::default()
        }
    }

    pub fn offsets(&self, span: f64) -> Vec<f64> {
        let mut out = vec![0.0];
        if span <= 0.0 {
            return out;
        }
        let switch = self.step.min(span);
        let ratio = 10f64.powf(1.0 / self.per_decade.max(1) as f64);
        let mut t = self.first;
        while t < switch {
            out.push(t);
            t *= ratio;
        }
        let mut k = (switch / self.step).ceil() as u64;
        loop {
            let t = k as f64 * self.step;
            if t >= span {
                break;
            }
            if t > *out.last().unwrap() {
                out.push(t);
            }
            k += 1;
        }
        if span > *out.last().unwrap() {
            out.push(span);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub dt: f64,
    pub sample_interval: f64,
    /// Stop once a lock has held for this long.
    pub early_stop: Option<f64>,
}

/// Outcome of stepping one segment.
struct SteppedSegment {
    final_state: DMatrix<f64>,
    final_time: f64,
    stopped: bool,
}

fn gather(full: &DMatrix<f64>, nodes: &[usize], cols: std::ops::Range<usize>) -> DMatrix<f64> {
    DMatrix::from_fn(nodes.len(), cols.len(), |r, c| full[(nodes[r], cols.start + c)])
}

fn scatter(full: &mut DMatrix<f64>, nodes: &[usize], col0: usize, comp: &DMatrix<f64>) {
    for (r, &v) in nodes.iter().enumerate() {
        for c in 0..comp.ncols() {
            full[(v, col0 + c)] = comp[(r, c)];
        }
    }
}

/// Explicit-Euler stability limit for linear kinds, from a Gershgorin bound
/// on the largest eigenvalue of h(γL + e₁e₁ᵀ).
fn linear_step_limit(system: &ProtocolSystem) -> Option<f64> {
    let (h, gamma) = system.linear_gains()?;
    Some(2.0 / (h * (2.0 * gamma * system.max_degree() as f64 + 1.0)))
}

/// Fraction of the chatter budget used when no step is given. At the full
/// budget the sign coupling lets agents wander by more than half a unit
/// around their consensus value, which defeats rounding.
pub const DEFAULT_STEP_FRACTION: f64 = 0.1;

/// Step used for sign-coupled kinds when none is configured.
pub fn default_step(system: &ProtocolSystem) -> Option<f64> {
    system.chatter_budget().map(|b| b * DEFAULT_STEP_FRACTION)
}

/// Largest admissible step for `system`.
pub fn step_limit(system: &ProtocolSystem) -> f64 {
    system
        .chatter_budget()
        .or_else(|| linear_step_limit(system))
        .unwrap_or(f64::INFINITY)
}

fn check_step(system: &ProtocolSystem, dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let limit = step_limit(system);
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::StepTooLarge { dt, required: limit });
    }
    Ok(())
}

/// Step `system` from `state` over `[t0, t1]`, appending samples to `traj`.
fn step_segment(
    system: &ProtocolSystem,
    state: &DMatrix<f64>,
    t0: f64,
    t1: f64,
    opts: &StepOptions,
    traj: &mut Trajectory,
    mut detector: Option<&mut LockDetector>,
) -> Result<SteppedSegment> {
    check_step(system, opts.dt)?;
    let dt = opts.dt;
    let nodes = &system.nodes;
    let n_c = nodes.len();
    let mut full = state.clone();
    traj.push(t0, full.clone());
    let mut next_sample = t0 + opts.sample_interval;
    let n_steps = (((t1 - t0) / dt) - 1e-9).ceil().max(0.0) as u64;

    // Component-row working state per kind.
    enum Work {
        Generic,
        Kth { z: Vec<f64>, dz: Vec<f64> },
        Combined {
            x: DMatrix<f64>,
            z: DMatrix<f64>,
            y: DMatrix<f64>,
            ex: DMatrix<f64>,
            gx1: DMatrix<f64>,
            ey: DMatrix<f64>,
            gy: DMatrix<f64>,
        },
    }
    let k_param = match system.kind {
        ProtocolKind::Combined { k } => k,
        _ => 0,
    };
    let mut work = match &system.kind {
        ProtocolKind::Kth { .. } => Work::Kth {
            z: nodes.iter().map(|&v| full[(v, 0)]).collect(),
            dz: vec![0.0; n_c],
        },
        ProtocolKind::Combined { k } => {
            let g = &system.gains;
            let ones = DMatrix::from_element(n_c, 1, 1.0);
            let px = LinearPropagator::from_matrix(nodes.clone(), system.coupling_matrix(g.gamma_x), g.h_x, &ones)?;
            let py = LinearPropagator::from_matrix(nodes.clone(), system.coupling_matrix(g.gamma_y), g.h_y, &ones)?;
            let (ex, gx) = px.zoh(dt);
            let (ey, gy) = py.zoh(dt);
            Work::Combined {
                x: gather(&full, nodes, 0..1),
                z: gather(&full, nodes, 1..k + 1),
                y: gather(&full, nodes, k + 1..2 * k + 1),
                gx1: gx * ones,
                ex,
                ey,
                gy,
            }
        }
        _ => Work::Generic,
    };

    let g = system.gains;
    let mut t_prev = t0;
    let mut stopped = false;
    for step in 1..=n_steps {
        let t = (t0 + step as f64 * dt).min(t1);
        let h = t - t_prev;
        match &mut work {
            Work::Generic => {
                let d = system.rhs(&full);
                full += d * h;
            }
            Work::Kth { z, dz } => {
                let ProtocolKind::Kth { k, n } = system.kind else { unreachable!() };
                let mut residual = 0.0;
                for r in 0..n_c {
                    let phi = crate::protocol::phi_k(z[r], system.l[r] as f64, n, k, g.beta, g.g);
                    residual += phi;
                    let coupling: f64 = system.adj[r].iter().map(|&q| sgn(z[q] - z[r])).sum();
                    dz[r] = -phi + g.gamma_z * coupling;
                }
                if let Some(det) = detector.as_deref_mut() {
                    det.note_residuals(&[residual]);
                }
                for r in 0..n_c {
                    z[r] += h * dz[r];
                }
            }
            Work::Combined { x, z, y, ex, gx1, ey, gy } => {
                // Everything below reads the pre-step state.
                let mut cur = full.clone();
                scatter(&mut cur, nodes, 0, x);
                scatter(&mut cur, nodes, 1, z);
                let mut dz = DMatrix::zeros(full.nrows(), full.ncols());
                system.combined_sign_part(&cur, k_param, &mut dz);
                let inputs = system.combined_inputs(&cur, k_param);
                if let Some(det) = detector.as_deref_mut() {
                    det.note_residuals(&system.sliding_residuals(&cur));
                }
                let (ex, gx1, ey, gy) = if (h - dt).abs() > 1e-15 {
                    // Shortened final step: rebuild the maps for this length.
                    let ones = DMatrix::from_element(n_c, 1, 1.0);
                    let px = LinearPropagator::from_matrix(nodes.clone(), system.coupling_matrix(g.gamma_x), g.h_x, &ones)?;
                    let py = LinearPropagator::from_matrix(nodes.clone(), system.coupling_matrix(g.gamma_y), g.h_y, &ones)?;
                    let (ex2, gx2) = px.zoh(h);
                    let (ey2, gy2) = py.zoh(h);
                    (ex2, gx2 * ones, ey2, gy2)
                } else {
                    (ex.clone(), gx1.clone(), ey.clone(), gy.clone())
                };
                *x = &ex * &*x + gx1;
                *y = &ey * &*y + gy * inputs;
                for (r, &v) in nodes.iter().enumerate() {
                    for j in 0..k_param {
                        z[(r, j)] += h * dz[(v, j + 1)];
                    }
                }
            }
        }
        t_prev = t;

        let last = step == n_steps;
        if t + 1e-12 >= next_sample || last {
            match &work {
                Work::Generic => {}
                Work::Kth { z, .. } => {
                    for (r, &v) in nodes.iter().enumerate() {
                        full[(v, 0)] = z[r];
                    }
                }
                Work::Combined { x, z, y, .. } => {
                    scatter(&mut full, nodes, 0, x);
                    scatter(&mut full, nodes, 1, z);
                    scatter(&mut full, nodes, k_param + 1, y);
                }
            }
            traj.push(t, full.clone());
            while next_sample <= t + 1e-12 {
                next_sample += opts.sample_interval;
            }
            if let Some(det) = detector.as_deref_mut() {
                if matches!(system.kind, ProtocolKind::Size | ProtocolKind::Frequency { .. } | ProtocolKind::Counter) {
                    // Linear kinds have no sliding residual.
                }
                let sig = uniform_signature(&system.kind, system.n_bar, &full, nodes);
                if det.observe(t, sig) {
                    stopped = true;
                    break;
                }
            }
        }
    }
    Ok(SteppedSegment {
        final_state: full,
        final_time: t_prev,
        stopped,
    })
}

/// Fixed-step integration of a single-segment system from `y0` over
/// `[0, horizon]`, optionally stopping early on a confirmed lock.
pub fn integrate_fixed_step(
    system: &ProtocolSystem,
    y0: &DMatrix<f64>,
    horizon: f64,
    opts: &StepOptions,
) -> Result<Trajectory> {
    if horizon < 0.0 {
        return Err(Error::InvalidArgument(format!("negative horizon {horizon}")));
    }
    let mut traj = Trajectory::new(system.kind.clone(), system.n_bar);
    traj.begin_segment(0.0, system.nodes.clone());
    let mut detector = opts
        .early_stop
        .map(|w| LockDetector::new(w, system.kind.is_sign_coupled()));
    step_segment(system, y0, 0.0, horizon, opts, &mut traj, detector.as_mut())?;
    Ok(traj)
}

/// Settings for [`run_piecewise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub horizon: f64,
    /// Step size for sign-coupled kinds.
    pub dt: f64,
    /// Uniform sample spacing.
    pub sample_step: f64,
    pub window: f64,
    /// Stop sign-coupled runs early once the last segment has locked.
    pub early_stop: bool,
}

/// Admissible-box check of the states at one event time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxCheck {
    pub time: f64,
    pub pass: bool,
    /// `(agent id, column, value)` of every state outside its box.
    pub violations: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct PiecewiseRun {
    pub trajectory: Trajectory,
    /// One lock report per segment.
    pub locks: Vec<LockReport>,
    /// States just before each event, checked against the admissible boxes.
    pub event_boxes: Vec<BoxCheck>,
    pub stopped_early: bool,
}

fn box_check(system: &ProtocolSystem, state: &DMatrix<f64>, time: f64) -> BoxCheck {
    let mut violations = Vec::new();
    for &v in &system.nodes {
        for c in 0..system.dim() {
            let (lo, hi) = system.column_box(c);
            let x = state[(v, c)];
            if !(lo..=hi).contains(&x) {
                violations.push((v + 1, c, x));
            }
        }
    }
    BoxCheck {
        time,
        pass: violations.is_empty(),
        violations,
    }
}

/// Propagate over every segment of `timeline`, carrying state across events.
///
/// `build` instantiates the protocol on a segment. Joining nodes take their
/// local initial value (which must lie in every column's admissible box);
/// nodes outside the component of interest keep their last state.
pub fn run_piecewise<F>(timeline: &NetworkTimeline, mut build: F, y0: &DMatrix<f64>, opts: &RunOptions) -> Result<PiecewiseRun>
where
    F: FnMut(&Segment) -> Result<ProtocolSystem>,
{
    let mut state = y0.clone();
    let mut traj: Option<Trajectory> = None;
    let mut event_boxes = Vec::new();
    let mut stopped_early = false;
    let n_seg = timeline.segments.len();

    for (i, seg) in timeline.segments.iter().enumerate() {
        if seg.start > opts.horizon {
            break;
        }
        let system = build(seg)?;
        let traj = traj.get_or_insert_with(|| Trajectory::new(system.kind.clone(), system.n_bar));
        for &(node, init) in &seg.joins {
            let value = init.ok_or_else(|| {
                Error::LocalInit(format!("node {} joined at t={} without an initial value", node + 1, seg.start))
            })?;
            for c in 0..system.dim() {
                let (lo, hi) = system.column_box(c);
                if !(lo..=hi).contains(&value) {
                    return Err(Error::LocalInit(format!(
                        "node {} initial value {value} outside [{lo}, {hi}]",
                        node + 1
                    )));
                }
                state[(node, c)] = value;
            }
        }
        let end = timeline.segment_end(i).unwrap_or(opts.horizon).min(opts.horizon);
        traj.begin_segment(seg.start, system.nodes.clone());

        if system.kind.is_linear() {
            let prop = LinearPropagator::new(&system)?;
            let offsets = SamplingGrid::with_step(opts.sample_step).offsets(end - seg.start);
            let samples = prop.sample(&state, &offsets);
            for (dt, s) in offsets.iter().zip(samples) {
                traj.push(seg.start + dt, s);
            }
            state = traj.final_state().cloned().unwrap_or(state);
        } else {
            let step_opts = StepOptions {
                dt: opts.dt,
                sample_interval: opts.sample_step,
                early_stop: None,
            };
            let last = i + 1 == n_seg || timeline.segment_end(i).is_some_and(|e| e >= opts.horizon);
            let mut detector = (opts.early_stop && last).then(|| LockDetector::new(opts.window, true));
            let out = step_segment(&system, &state, seg.start, end, &step_opts, traj, detector.as_mut())?;
            state = out.final_state;
            if out.stopped {
                stopped_early = true;
                break;
            }
            let _ = out.final_time;
        }
        if i + 1 < n_seg && timeline.segments[i + 1].start <= opts.horizon {
            event_boxes.push(box_check(&system, &state, end));
        }
    }
    let trajectory = traj.ok_or_else(|| Error::InvalidArgument("timeline has no segment before the horizon".into()))?;
    let locks = detect_segment_locks(&trajectory, opts.window);
    Ok(PiecewiseRun {
        trajectory,
        locks,
        event_boxes,
        stopped_early,
    })
}
