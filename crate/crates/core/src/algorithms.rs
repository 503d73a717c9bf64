//! The three mode-consensus algorithms, their centralized oracles, and the
//! state-variable accounting used to compare them.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{time_bound_x, time_bound_y, time_bound_z};
use crate::error::{Error, Result};
use crate::integrate::{default_step, run_piecewise, uniform_signature, BoxCheck, LockReport, RunOptions, Trajectory};
use crate::network::{AttributeTable, NetworkTimeline, Segment};
use crate::protocol::{admissible_box, column_roles, GainSet, ProtocolKind, ProtocolSystem};

/// Labels attaining the largest multiplicity, sorted, and that multiplicity.
pub fn oracle_mode<T: Ord + Clone>(values: &[T]) -> Result<(Vec<T>, usize)> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("mode of an empty multiset".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort();
    let mut best = 0;
    let mut modes = Vec::new();
    for run in sorted.chunk_by(|a, b| a == b) {
        if run.len() > best {
            best = run.len();
            modes.clear();
        }
        if run.len() == best {
            modes.push(run[0].clone());
        }
    }
    Ok((modes, best))
}

/// k-th smallest element (1-based).
pub fn oracle_kth<T: Ord + Clone>(values: &[T], k: usize) -> Result<T> {
    if k == 0 || k > values.len() {
        return Err(Error::InvalidArgument(format!("k={k} outside 1..={}", values.len())));
    }
    let mut sorted = values.to_vec();
    sorted.sort();
    Ok(sorted[k - 1].clone())
}

/// Order-statistic positions j·⌈N/K⌉ that must contain every attribute of
/// frequency at least ⌈N/K⌉. The last one is dropped when ⌈N/K⌉ > N/K.
pub fn candidate_positions(n: usize, k: usize) -> Vec<usize> {
    if k == 0 || n == 0 {
        return Vec::new();
    }
    let step = n.div_ceil(k);
    let count = if n.is_multiple_of(k) { k } else { k - 1 };
    (1..=count).map(|j| j * step).filter(|&p| p <= n).collect()
}

/// Smallest K ≥ 1 with f* ≥ ⌈N/K⌉.
pub fn kstar(f_star: usize, n: usize) -> usize {
    (1..=n.max(1)).find(|&k| f_star >= n.div_ceil(k)).unwrap_or(n.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmKind {
    /// Frequency of every attribute.
    Direct,
    /// Known lower bound f* on the mode frequency.
    AprioriK,
    /// K grown until the best frequency certifies itself.
    AdaptiveK,
}

/// State variables per agent. `truncated` selects the count when only K−1
/// candidate positions are needed.
pub fn state_count(algorithm: AlgorithmKind, k: usize, truncated: bool, omega: usize) -> usize {
    match algorithm {
        AlgorithmKind::Direct => omega,
        AlgorithmKind::AprioriK if truncated && k > 1 => 2 * k - 1,
        AlgorithmKind::AprioriK => 2 * k + 1,
        AlgorithmKind::AdaptiveK => k * (k + 1) + 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    #[default]
    LowestIndex,
    HighestIndex,
}

impl TieBreak {
    /// Winner among `(l-value, frequency)` pairs.
    pub fn select(self, entries: &[(usize, usize)]) -> Option<(usize, usize)> {
        entries.iter().copied().reduce(|best, e| {
            let better = e.1 > best.1
                || (e.1 == best.1
                    && match self {
                        TieBreak::LowestIndex => e.0 < best.0,
                        TieBreak::HighestIndex => e.0 > best.0,
                    });
            if better {
                e
            } else {
                best
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Execution {
    /// One protocol after another, each read out on lock.
    #[default]
    Sequential,
    /// All of size, order statistics and frequencies in one coupled system.
    Combined,
}

/// When the adaptive loop reads its sub-protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cadence {
    /// Each round waits for every sub-protocol to lock.
    #[default]
    LockGated,
    /// Sub-protocols are read after a fixed interval.
    PaperCadence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    /// Step for sign-coupled kinds; the chatter budget when absent.
    pub dt: Option<f64>,
    /// Simulated time per protocol run; derived from the bounds when absent.
    pub horizon: Option<f64>,
    pub window: f64,
    pub sample_step: Option<f64>,
    pub tie_break: TieBreak,
    pub cadence: Cadence,
    pub cadence_interval: f64,
    pub verify: bool,
    pub strict: bool,
    /// Keep sampled trajectories in the result (needed for CSV output).
    pub keep_trajectories: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            dt: None,
            horizon: None,
            window: crate::integrate::DEFAULT_WINDOW,
            sample_step: None,
            tie_break: TieBreak::default(),
            cadence: Cadence::default(),
            cadence_interval: 0.6,
            verify: true,
            strict: false,
            keep_trajectories: false,
        }
    }
}

/// Everything an algorithm needs: network, attribute bijection and gains.
#[derive(Debug, Clone)]
pub struct Problem {
    pub timeline: NetworkTimeline,
    pub table: AttributeTable,
    pub gains: GainSet,
    pub settings: Settings,
}

impl Problem {
    pub fn new(timeline: NetworkTimeline, table: AttributeTable, gains: GainSet) -> Self {
        Self {
            timeline,
            table,
            gains,
            settings: Settings::default(),
        }
    }

    pub fn with_settings(mut self, settings: Settings) -> Self {
        self.settings = settings;
        self
    }

    pub fn n_bar(&self) -> usize {
        self.timeline.n_bar
    }

    pub fn omega(&self) -> usize {
        self.table.len()
    }

    fn has_events(&self) -> bool {
        self.timeline.segments.len() > 1
    }

    /// l-values of the active agents in the final segment.
    pub fn final_l_values(&self) -> Result<Vec<usize>> {
        segment_l_values(self.timeline.last(), &self.table)
    }

    fn bound_for(&self, kind: &ProtocolKind) -> f64 {
        let (nb, g) = (self.n_bar(), &self.gains);
        match kind {
            ProtocolKind::Size => time_bound_x(nb, g.h_x),
            ProtocolKind::Frequency { .. } | ProtocolKind::Counter => time_bound_y(nb, g.h_y),
            ProtocolKind::Kth { .. } => time_bound_z(g.beta, nb, self.omega()),
            ProtocolKind::Combined { .. } => {
                time_bound_x(nb, g.h_x) + time_bound_y(nb, g.h_y) + time_bound_z(g.beta, nb, self.omega())
            }
        }
    }
}

pub fn segment_l_values(seg: &Segment, table: &AttributeTable) -> Result<Vec<usize>> {
    seg.active_labels().iter().map(|a| table.index_of(a)).collect()
}

/// Lock outcome of one protocol run.
#[derive(Debug, Clone, Serialize)]
pub struct ProtocolLock {
    pub name: String,
    /// Lock time measured from the start of the segment it occurred in.
    pub lock_time: Option<f64>,
    pub bound: f64,
    pub within_bound: bool,
    pub locked_values: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub position: usize,
    pub attribute: String,
    pub l: usize,
    pub frequency: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Round {
    pub k: usize,
    pub candidates: Vec<Candidate>,
    /// Best frequency seen so far after this round.
    pub best_frequency: usize,
    /// ⌈N/K⌉ that the best frequency is tested against.
    pub threshold: usize,
}

/// Post-change outcome on one network segment.
#[derive(Debug, Clone, Serialize)]
pub struct SegmentOutcome {
    pub start: f64,
    pub mode: Option<String>,
    pub oracle_modes: Vec<String>,
    pub lock_time: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AgentMode {
    pub agent_id: usize,
    pub mode: Option<String>,
}

#[derive(Debug, Clone)]
pub struct NamedTrajectory {
    pub name: String,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlgorithmRun {
    pub algorithm: AlgorithmKind,
    pub execution: Option<Execution>,
    pub k_trace: Vec<usize>,
    pub size_estimate: Option<usize>,
    /// Candidates of the final round.
    pub candidates: Vec<Candidate>,
    pub rounds: Vec<Round>,
    /// Frequencies of every attribute (direct algorithm only).
    pub frequencies: Vec<usize>,
    pub mode: String,
    pub mode_frequency: usize,
    pub mode_per_agent: Vec<AgentMode>,
    /// Simulated time until the result is available.
    pub elapsed: f64,
    pub state_var_count: usize,
    pub locks: Vec<ProtocolLock>,
    pub segments: Vec<SegmentOutcome>,
    pub event_boxes: Vec<BoxCheck>,
    pub warnings: Vec<String>,
    pub mismatches: Vec<String>,
    #[serde(skip)]
    pub trajectories: Vec<NamedTrajectory>,
}

impl AlgorithmRun {
    fn new(algorithm: AlgorithmKind) -> Self {
        Self {
            algorithm,
            execution: None,
            k_trace: Vec::new(),
            size_estimate: None,
            candidates: Vec::new(),
            rounds: Vec::new(),
            frequencies: Vec::new(),
            mode: String::new(),
            mode_frequency: 0,
            mode_per_agent: Vec::new(),
            elapsed: 0.0,
            state_var_count: 0,
            locks: Vec::new(),
            segments: Vec::new(),
            event_boxes: Vec::new(),
            warnings: Vec::new(),
            mismatches: Vec::new(),
            trajectories: Vec::new(),
        }
    }

    fn absorb(&mut self, sub: &SubRun) {
        self.locks.push(sub.lock.clone());
        self.event_boxes.extend(sub.event_boxes.iter().cloned());
    }

    fn keep(&mut self, sub: SubRun, keep: bool) {
        if keep {
            self.trajectories.push(NamedTrajectory {
                name: sub.lock.name,
                trajectory: sub.trajectory,
            });
        }
    }
}

/// One protocol run and its readout.
struct SubRun {
    lock: ProtocolLock,
    /// Lock time relative to the run start, or the read-out time.
    ready_at: f64,
    /// Rounded signature per final-segment agent `(node, signature)`.
    agents: Vec<(usize, Vec<i64>)>,
    /// Consensus values at the end of the run.
    consensus: Vec<i64>,
    segment_locks: Vec<LockReport>,
    event_boxes: Vec<BoxCheck>,
    trajectory: Trajectory,
}

/// Initial states uniform in each column's admissible box, from stream
/// `stream` of the scenario seed.
pub fn random_initial_state(kind: &ProtocolKind, n_bar: usize, omega: usize, seed: u64, stream: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let roles = column_roles(kind, omega);
    let mut m = DMatrix::zeros(n_bar, roles.len());
    for v in 0..n_bar {
        for (c, &role) in roles.iter().enumerate() {
            let (lo, hi) = admissible_box(role, n_bar);
            m[(v, c)] = rng.random_range(lo..hi);
        }
    }
    m
}

fn run_protocol(problem: &Problem, kind: ProtocolKind, name: String, stream: u64) -> Result<SubRun> {
    let s = &problem.settings;
    let n_bar = problem.n_bar();
    let bound = problem.bound_for(&kind);
    let horizon_from_last = s.horizon.unwrap_or(if kind.is_sign_coupled() {
        bound + 2.0 * s.window
    } else {
        2.0 * bound + 2.0 * s.window
    });
    let last_start = problem.timeline.last().start;
    let sample_step = s.sample_step.unwrap_or_else(|| (horizon_from_last / 500.0).min(s.window / 5.0));
    let build = |seg: &Segment| ProtocolSystem::build(kind.clone(), seg, &problem.table, problem.gains, n_bar, s.strict);
    let dt = match s.dt {
        Some(dt) => dt,
        None if kind.is_sign_coupled() => problem
            .timeline
            .segments
            .iter()
            .map(|seg| build(seg).map(|sys| default_step(&sys).unwrap_or(f64::INFINITY)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min),
        None => 1.0,
    };
    let opts = RunOptions {
        horizon: last_start + horizon_from_last,
        dt,
        sample_step,
        window: s.window,
        early_stop: true,
    };
    let y0 = random_initial_state(&kind, n_bar, problem.omega(), s.seed, stream);
    let run = run_piecewise(&problem.timeline, build, &y0, &opts)?;
    finish_subrun(problem, kind, name, bound, run.trajectory, run.locks, run.event_boxes)
}

/// Run for a fixed interval and read the state out, without waiting for a lock.
fn run_protocol_for(problem: &Problem, kind: ProtocolKind, name: String, stream: u64, interval: f64) -> Result<SubRun> {
    let mut p = problem.clone();
    p.settings.horizon = Some(interval);
    let mut sub = run_protocol(&p, kind, name, stream)?;
    sub.ready_at = interval;
    Ok(sub)
}

fn finish_subrun(
    problem: &Problem,
    kind: ProtocolKind,
    name: String,
    bound: f64,
    trajectory: Trajectory,
    segment_locks: Vec<LockReport>,
    event_boxes: Vec<BoxCheck>,
) -> Result<SubRun> {
    let n_bar = problem.n_bar();
    let state = trajectory
        .final_state()
        .ok_or_else(|| Error::Numerical(format!("{name}: empty trajectory")))?;
    let seg = trajectory.segments.last().expect("trajectory has a segment");
    let agents: Vec<(usize, Vec<i64>)> = seg
        .nodes
        .iter()
        .map(|&v| {
            let row: Vec<f64> = state.row(v).iter().copied().collect();
            (v, crate::protocol::lock_signature(&kind, n_bar, &row))
        })
        .collect();
    let last = segment_locks.last().cloned().unwrap_or(LockReport {
        lock_time: None,
        locked_values: Vec::new(),
        stability_window: problem.settings.window,
        bound_used: None,
    });
    let rel = last.lock_time.map(|t| t - seg.start);
    let consensus = if last.locked() {
        last.locked_values.clone()
    } else {
        uniform_signature(&kind, n_bar, state, &seg.nodes).unwrap_or_else(|| {
            let leader = problem.timeline.last().leader;
            agents.iter().find(|(v, _)| *v == leader).map(|(_, s)| s.clone()).unwrap_or_default()
        })
    };
    Ok(SubRun {
        lock: ProtocolLock {
            name,
            lock_time: rel,
            bound,
            within_bound: rel.is_some_and(|t| t <= bound),
            locked_values: last.locked_values,
        },
        ready_at: rel.unwrap_or(f64::NAN),
        agents,
        consensus,
        segment_locks,
        event_boxes,
        trajectory,
    })
}

fn require_lock(sub: &SubRun) -> Result<()> {
    if sub.lock.lock_time.is_none() {
        return Err(Error::LockFailure(format!(
            "{} did not lock within its horizon (bound {:.6} s)",
            sub.lock.name, sub.lock.bound
        )));
    }
    Ok(())
}

fn label(problem: &Problem, l: i64) -> Result<String> {
    if l < 1 {
        return Err(Error::LockFailure(format!("locked l-value {l} is outside the universe")));
    }
    problem.table.label_of(l as usize).map(str::to_string).map_err(|_| {
        Error::LockFailure(format!("locked l-value {l} is outside the universe"))
    })
}

fn as_count(v: i64) -> usize {
    v.max(0) as usize
}

/// Direct algorithm: count every attribute with the vector counter and take the argmax.
pub fn run_direct(problem: &Problem) -> Result<AlgorithmRun> {
    let s = &problem.settings;
    let mut out = AlgorithmRun::new(AlgorithmKind::Direct);
    out.state_var_count = state_count(AlgorithmKind::Direct, 0, false, problem.omega());
    let sub = run_protocol(problem, ProtocolKind::Counter, "counter".into(), 1)?;
    out.absorb(&sub);
    require_lock(&sub)?;

    out.frequencies = sub.consensus.iter().map(|&v| as_count(v)).collect();
    let entries: Vec<(usize, usize)> = out.frequencies.iter().enumerate().map(|(i, &f)| (i + 1, f)).collect();
    let (l, f) = s.tie_break.select(&entries).expect("non-empty universe");
    out.mode = problem.table.label_of(l)?.to_string();
    out.mode_frequency = f;
    out.mode_per_agent = sub
        .agents
        .iter()
        .map(|(v, sig)| {
            let e: Vec<(usize, usize)> = sig.iter().enumerate().map(|(i, &c)| (i + 1, as_count(c))).collect();
            AgentMode {
                agent_id: v + 1,
                mode: s.tie_break.select(&e).and_then(|(l, _)| problem.table.label_of(l).ok()).map(String::from),
            }
        })
        .collect();
    out.elapsed = problem.timeline.last().start + sub.ready_at;

    for (seg, lock) in problem.timeline.segments.iter().zip(&sub.segment_locks) {
        let ls = segment_l_values(seg, &problem.table)?;
        let (modes, max_f) = oracle_mode(&ls)?;
        let mode = lock.locked().then(|| {
            let e: Vec<(usize, usize)> = lock
                .locked_values
                .iter()
                .enumerate()
                .map(|(i, &c)| (i + 1, as_count(c)))
                .collect();
            s.tie_break.select(&e).expect("non-empty universe")
        });
        let pass = mode.is_some_and(|(_, f)| f == max_f)
            && lock.lock_time.is_some_and(|t| t - seg.start <= sub.lock.bound);
        out.segments.push(SegmentOutcome {
            start: seg.start,
            mode: mode.and_then(|(l, _)| problem.table.label_of(l).ok()).map(String::from),
            oracle_modes: modes.iter().map(|&l| problem.table.label_of(l).unwrap().to_string()).collect(),
            lock_time: lock.lock_time,
            pass,
        });
    }
    if s.verify {
        let ls = problem.final_l_values()?;
        for (i, &f) in out.frequencies.iter().enumerate() {
            let truth = ls.iter().filter(|&&l| l == i + 1).count();
            if f != truth {
                out.mismatches
                    .push(format!("frequency of {} locked to {f}, oracle {truth}", problem.table.labels()[i]));
            }
        }
    }
    out.keep(sub, s.keep_trajectories);
    Ok(out)
}

/// Estimate N with the size protocol.
fn estimate_size(problem: &Problem, out: &mut AlgorithmRun) -> Result<(usize, f64)> {
    let sub = run_protocol(problem, ProtocolKind::Size, "size".into(), 2)?;
    out.absorb(&sub);
    require_lock(&sub)?;
    let n_hat = as_count(sub.consensus[0]).clamp(1, problem.n_bar());
    if problem.settings.verify {
        let truth = problem.timeline.last().n();
        if n_hat != truth {
            out.mismatches.push(format!("size locked to {n_hat}, oracle {truth}"));
        }
    }
    let t = sub.ready_at;
    out.keep(sub, problem.settings.keep_trajectories);
    out.size_estimate = Some(n_hat);
    Ok((n_hat, t))
}

/// One round: order statistics at the candidate positions, then the
/// frequencies of whatever they locked to. Returns the round and its duration.
fn candidate_round(problem: &Problem, n_hat: usize, k: usize, out: &mut AlgorithmRun) -> Result<(Vec<Candidate>, f64)> {
    let s = &problem.settings;
    let positions = candidate_positions(n_hat, k);
    let stream_base = 1000 * k as u64;
    let read = |kind: ProtocolKind, name: String, stream: u64| match s.cadence {
        Cadence::LockGated => run_protocol(problem, kind, name, stream),
        Cadence::PaperCadence => run_protocol_for(problem, kind, name, stream, s.cadence_interval),
    };

    let kth_runs: Vec<SubRun> = positions
        .par_iter()
        .enumerate()
        .map(|(j, &p)| read(ProtocolKind::Kth { k: p, n: n_hat }, format!("K{k}-kth[{p}]"), stream_base + j as u64))
        .collect::<Result<_>>()?;
    let mut stage1: f64 = 0.0;
    let mut attrs = Vec::with_capacity(kth_runs.len());
    for sub in &kth_runs {
        out.absorb(sub);
        if s.cadence == Cadence::LockGated {
            require_lock(sub)?;
        }
        stage1 = stage1.max(sub.ready_at);
        attrs.push(label(problem, sub.consensus[0])?);
    }

    let freq_runs: Vec<SubRun> = attrs
        .par_iter()
        .enumerate()
        .map(|(j, a)| {
            let kind = ProtocolKind::Frequency {
                attributes: vec![a.clone()],
            };
            read(kind, format!("K{k}-frequency[{a}]"), stream_base + 500 + j as u64)
        })
        .collect::<Result<_>>()?;
    let mut stage2: f64 = 0.0;
    let mut candidates = Vec::with_capacity(positions.len());
    for ((sub, a), &p) in freq_runs.iter().zip(&attrs).zip(&positions) {
        out.absorb(sub);
        if s.cadence == Cadence::LockGated {
            require_lock(sub)?;
        }
        stage2 = stage2.max(sub.ready_at);
        candidates.push(Candidate {
            position: p,
            attribute: a.clone(),
            l: problem.table.index_of(a)?,
            frequency: as_count(sub.consensus[0]),
        });
    }

    if s.verify {
        let ls = problem.final_l_values()?;
        for c in &candidates {
            if c.position <= ls.len() {
                let truth = oracle_kth(&ls, c.position)?;
                if truth != c.l {
                    out.mismatches
                        .push(format!("K={k}: position {} locked to l={}, oracle l={truth}", c.position, c.l));
                }
            }
            let f = ls.iter().filter(|&&l| l == c.l).count();
            if f != c.frequency {
                out.mismatches
                    .push(format!("K={k}: frequency of {} locked to {}, oracle {f}", c.attribute, c.frequency));
            }
        }
    }
    // Per-agent view: each agent's own readout of each candidate and its count.
    out.mode_per_agent = agent_modes(problem, &kth_runs, &freq_runs);
    for sub in kth_runs.into_iter().chain(freq_runs) {
        out.keep(sub, s.keep_trajectories);
    }
    Ok((candidates, stage1 + stage2))
}

fn agent_modes(problem: &Problem, kth: &[SubRun], freq: &[SubRun]) -> Vec<AgentMode> {
    let Some(first) = kth.first() else {
        return Vec::new();
    };
    first
        .agents
        .iter()
        .map(|(v, _)| {
            let entries: Vec<(usize, usize)> = kth
                .iter()
                .zip(freq)
                .filter_map(|(k, f)| {
                    let l = k.agents.iter().find(|(w, _)| w == v)?.1[0];
                    let c = f.agents.iter().find(|(w, _)| w == v)?.1[0];
                    (l >= 1).then_some((l as usize, as_count(c)))
                })
                .collect();
            AgentMode {
                agent_id: v + 1,
                mode: problem
                    .settings
                    .tie_break
                    .select(&entries)
                    .and_then(|(l, _)| problem.table.label_of(l).ok())
                    .map(String::from),
            }
        })
        .collect()
}

fn pick_mode(problem: &Problem, candidates: &[Candidate], out: &mut AlgorithmRun) -> Result<()> {
    let entries: Vec<(usize, usize)> = candidates.iter().map(|c| (c.l, c.frequency)).collect();
    let (l, f) = problem
        .settings
        .tie_break
        .select(&entries)
        .ok_or_else(|| Error::LockFailure("no candidate positions".into()))?;
    out.mode = problem.table.label_of(l)?.to_string();
    out.mode_frequency = f;
    Ok(())
}

fn check_f_star(problem: &Problem, f_star: usize, n: usize, k: usize, out: &mut AlgorithmRun) -> Result<()> {
    let threshold = n.div_ceil(k);
    if f_star < threshold {
        out.warnings.push(format!(
            "f*={f_star} is below ⌈N/K⌉={threshold}; the result is not guaranteed to be a mode"
        ));
    }
    if problem.settings.verify {
        let (_, truth) = oracle_mode(&problem.final_l_values()?)?;
        if truth < f_star {
            out.warnings
                .push(format!("supplied f*={f_star} exceeds the true mode frequency {truth}"));
        }
        if truth < threshold {
            out.warnings.push(format!(
                "true mode frequency {truth} is below ⌈N/K⌉={threshold}; candidates may miss the mode"
            ));
        }
    }
    Ok(())
}

/// A-priori-K algorithm: K from the lower bound f* (or given directly), candidates at
/// the pigeonhole positions, then their frequencies.
pub fn run_apriori_k(problem: &Problem, f_star: Option<usize>, k: Option<usize>, execution: Execution) -> Result<AlgorithmRun> {
    if f_star.is_none() && k.is_none() {
        return Err(Error::InvalidArgument("the a-priori-K algorithm needs f_star or k".into()));
    }
    let mut out = AlgorithmRun::new(AlgorithmKind::AprioriK);
    out.execution = Some(execution);
    match execution {
        Execution::Sequential => {
            if problem.has_events() {
                return Err(Error::InvalidArgument(
                    "network changes are supported only by the direct algorithm and combined execution".into(),
                ));
            }
            let (n_hat, t_size) = estimate_size(problem, &mut out)?;
            let k = k.unwrap_or_else(|| kstar(f_star.unwrap_or(1).min(n_hat), n_hat));
            if k == 0 || k > n_hat {
                return Err(Error::InvalidArgument(format!("K={k} outside 1..={n_hat}")));
            }
            if let Some(f) = f_star {
                check_f_star(problem, f, n_hat, k, &mut out)?;
            }
            out.k_trace = vec![k];
            let (candidates, t_round) = candidate_round(problem, n_hat, k, &mut out)?;
            pick_mode(problem, &candidates, &mut out)?;
            out.rounds.push(Round {
                k,
                candidates: candidates.clone(),
                best_frequency: out.mode_frequency,
                threshold: n_hat.div_ceil(k),
            });
            out.candidates = candidates;
            out.elapsed = t_size + t_round;
            out.state_var_count = state_count(AlgorithmKind::AprioriK, k, false, problem.omega());
        }
        Execution::Combined => run_combined(problem, f_star, k, &mut out)?,
    }
    Ok(out)
}

fn run_combined(problem: &Problem, f_star: Option<usize>, k: Option<usize>, out: &mut AlgorithmRun) -> Result<()> {
    let s = &problem.settings;
    let n_bar = problem.n_bar();
    let k = match k {
        Some(k) => k,
        None => kstar(f_star.unwrap_or(1).min(n_bar), n_bar),
    };
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    if let Some(f) = f_star {
        check_f_star(problem, f, problem.timeline.last().n(), k, out)?;
    }
    out.k_trace = vec![k];
    out.state_var_count = state_count(AlgorithmKind::AprioriK, k, false, problem.omega());
    let kind = ProtocolKind::Combined { k };
    let sub = run_protocol(problem, kind, format!("combined[K={k}]"), 3)?;
    out.absorb(&sub);
    require_lock(&sub)?;

    let sig = &sub.consensus;
    let n_hat = as_count(sig[0]).clamp(1, n_bar);
    let slots = (sig.len() - 2) / 2;
    let step = n_hat.div_ceil(k);
    let mut candidates = Vec::with_capacity(slots);
    for j in 0..slots {
        let l = sig[1 + j];
        candidates.push(Candidate {
            position: (j + 1) * step,
            attribute: label(problem, l)?,
            l: l as usize,
            frequency: as_count(sig[1 + slots + j]),
        });
    }
    out.size_estimate = Some(n_hat);
    pick_mode(problem, &candidates, out)?;
    out.rounds.push(Round {
        k,
        candidates: candidates.clone(),
        best_frequency: out.mode_frequency,
        threshold: n_hat.div_ceil(k),
    });
    out.candidates = candidates;
    out.mode_per_agent = sub
        .agents
        .iter()
        .map(|(v, sig)| AgentMode {
            agent_id: v + 1,
            mode: sig
                .last()
                .and_then(|&m| (m >= 1).then(|| problem.table.label_of(m as usize).ok()).flatten())
                .map(String::from),
        })
        .collect();
    out.elapsed = problem.timeline.last().start + sub.ready_at;

    for (seg, lock) in problem.timeline.segments.iter().zip(&sub.segment_locks) {
        let ls = segment_l_values(seg, &problem.table)?;
        let (modes, max_f) = oracle_mode(&ls)?;
        let m = lock.locked_values.last().copied().filter(|&m| m >= 1);
        let pass = m.is_some_and(|m| ls.iter().filter(|&&l| l as i64 == m).count() == max_f)
            && lock.lock_time.is_some_and(|t| t - seg.start <= sub.lock.bound);
        out.segments.push(SegmentOutcome {
            start: seg.start,
            mode: m.and_then(|m| problem.table.label_of(m as usize).ok()).map(String::from),
            oracle_modes: modes.iter().map(|&l| problem.table.label_of(l).unwrap().to_string()).collect(),
            lock_time: lock.lock_time,
            pass,
        });
    }
    if s.verify {
        let ls = problem.final_l_values()?;
        if n_hat != ls.len() {
            out.mismatches.push(format!("size locked to {n_hat}, oracle {}", ls.len()));
        }
        for c in &out.candidates {
            if c.position <= ls.len() && oracle_kth(&ls, c.position)? != c.l {
                out.mismatches.push(format!("position {} locked to l={}", c.position, c.l));
            }
            let f = ls.iter().filter(|&&l| l == c.l).count();
            if f != c.frequency {
                out.mismatches
                    .push(format!("frequency of {} locked to {}, oracle {f}", c.attribute, c.frequency));
            }
        }
    }
    out.keep(sub, s.keep_trajectories);
    Ok(())
}

/// Adaptive-K algorithm: grow K until the best frequency found reaches ⌈N/K⌉.
pub fn run_adaptive_k(problem: &Problem) -> Result<AlgorithmRun> {
    if problem.has_events() {
        return Err(Error::InvalidArgument(
            "network changes are supported only by the direct algorithm and combined execution".into(),
        ));
    }
    let mut out = AlgorithmRun::new(AlgorithmKind::AdaptiveK);
    let (n_hat, t_size) = estimate_size(problem, &mut out)?;
    out.elapsed = t_size;
    let mut k = 1;
    let mut best_f = 1;
    let mut best: Option<Candidate> = None;
    out.k_trace.push(k);
    if n_hat == 1 {
        let seg = problem.timeline.last();
        let a = seg.active_labels()[0].to_string();
        out.mode = a.clone();
        out.mode_frequency = 1;
        out.mode_per_agent = vec![AgentMode {
            agent_id: seg.leader + 1,
            mode: Some(a),
        }];
        out.state_var_count = state_count(AlgorithmKind::AdaptiveK, 1, false, problem.omega());
        return Ok(out);
    }
    while best_f < n_hat.div_ceil(k) {
        k += 1;
        if k > problem.omega().max(2) {
            return Err(Error::LockFailure(format!(
                "internal inconsistency: K={k} exceeds |Ω|={} without termination",
                problem.omega()
            )));
        }
        out.k_trace.push(k);
        let (candidates, t_round) = candidate_round(problem, n_hat, k, &mut out)?;
        out.elapsed += t_round;
        for c in &candidates {
            let better = match &best {
                None => true,
                Some(b) => problem.settings.tie_break.select(&[(b.l, b.frequency), (c.l, c.frequency)]) == Some((c.l, c.frequency)) && c.l != b.l,
            };
            if better {
                best = Some(c.clone());
            }
            best_f = best_f.max(c.frequency);
        }
        out.rounds.push(Round {
            k,
            candidates: candidates.clone(),
            best_frequency: best_f,
            threshold: n_hat.div_ceil(k),
        });
        out.candidates = candidates;
    }
    let b = best.ok_or_else(|| Error::LockFailure("adaptive loop ended without a candidate".into()))?;
    out.mode = b.attribute;
    out.mode_frequency = b.frequency;
    out.state_var_count = state_count(AlgorithmKind::AdaptiveK, k, false, problem.omega());
    Ok(out)
}
