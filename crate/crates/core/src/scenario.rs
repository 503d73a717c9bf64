//! Scenario configuration, end-to-end runs, and output artifacts.
//!
//! A scenario is one TOML document; see the README for the schema. Node ids
//! in configs and CSV output are 1-based.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algorithms::{
    kstar, oracle_mode, run_direct, run_apriori_k, run_adaptive_k, AgentMode, AlgorithmKind, AlgorithmRun,
    Cadence, Candidate, Execution, NamedTrajectory, Problem, ProtocolLock, SegmentOutcome, Settings, TieBreak,
};
use crate::bounds::{select_gains, BoundReport, GainPreset};
use crate::error::{Error, Result};
use crate::integrate::{BoxCheck, DEFAULT_WINDOW};
use crate::network::{check_dwell, AttributeTable, DwellReport, EventKind, LeaderPolicy, NetworkTimeline, ScenarioEvent};
use crate::protocol::{combined_mode_estimate, GainSet, ProtocolKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    pub network: NetworkConfig,
    pub attributes: AttributeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<GainConfig>,
    pub algorithm: AlgorithmConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<EventConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkKind {
    Ring,
    Path,
    Complete,
    EdgeList,
    RandomConnected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub kind: NetworkKind,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_bar: Option<usize>,
    /// 1-based node pairs, for `edge-list`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[usize; 2]>>,
    /// Extra-edge probability, for `random-connected`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_probability: Option<f64>,
    /// Graph seed, for `random-connected`; the scenario seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub leader_policy: LeaderPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assignment {
    /// Histogram entries go to consecutive agent ids.
    #[default]
    Contiguous,
    /// Histogram entries are shuffled with the scenario seed.
    Shuffled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeConfig {
    /// Ordered universe; its order defines the l-values. Defaults to
    /// "1".."m" for a histogram and to first appearance for labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub universe: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<Vec<usize>>,
    /// Attribute of each agent, by id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default)]
    pub assignment: Assignment,
    #[serde(default)]
    pub tie_break: TieBreak,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainConfig {
    #[serde(default)]
    pub preset: GainPreset,
    /// Refuse gains that fail their inequality checks.
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub overrides: GainOverrides,
}

impl GainConfig {
    pub fn resolve(&self, n_bar: usize, omega: usize) -> GainSet {
        let mut g = select_gains(n_bar, omega, self.preset);
        let o = &self.overrides;
        for (slot, v) in [
            (&mut g.h_x, o.h_x),
            (&mut g.gamma_x, o.gamma_x),
            (&mut g.h_y, o.h_y),
            (&mut g.gamma_y, o.gamma_y),
            (&mut g.beta, o.beta),
            (&mut g.g, o.g),
            (&mut g.gamma_z, o.gamma_z),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        g
    }
}

fn yes() -> bool {
    true
}

fn is_true(v: &bool) -> bool {
    *v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub kind: AlgorithmKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_star: Option<usize>,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default)]
    pub cadence: Cadence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cadence_interval: Option<f64>,
    /// Cross-check every locked value against the centralized oracle.
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub verify: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability_window: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_step: Option<f64>,
}

/// A scheduled network change; node ids are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventConfig {
    EdgeAdd {
        time: f64,
        a: usize,
        b: usize,
    },
    EdgeRemove {
        time: f64,
        a: usize,
        b: usize,
    },
    NodeJoin {
        time: f64,
        node: usize,
        neighbors: Vec<usize>,
        attribute: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        init: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        init_box: Option<[f64; 2]>,
    },
    NodeLeave {
        time: f64,
        node: usize,
    },
    AttributeChange {
        time: f64,
        node: usize,
        attribute: String,
    },
}

impl EventConfig {
    pub fn time(&self) -> f64 {
        match self {
            Self::EdgeAdd { time, .. }
            | Self::EdgeRemove { time, .. }
            | Self::NodeJoin { time, .. }
            | Self::NodeLeave { time, .. }
            | Self::AttributeChange { time, .. } => *time,
        }
    }

    fn to_event(&self, path: &str) -> Result<ScenarioEvent> {
        let id = |v: usize, field: &str| {
            v.checked_sub(1)
                .ok_or_else(|| Error::config(format!("{path}.{field}"), "node ids start at 1"))
        };
        let time = self.time();
        Ok(match self {
            Self::EdgeAdd { a, b, .. } => ScenarioEvent::new(time, EventKind::EdgeAdd { a: id(*a, "a")?, b: id(*b, "b")? }),
            Self::EdgeRemove { a, b, .. } => {
                ScenarioEvent::new(time, EventKind::EdgeRemove { a: id(*a, "a")?, b: id(*b, "b")? })
            }
            Self::NodeJoin {
                node,
                neighbors,
                attribute,
                init,
                init_box,
                ..
            } => {
                let ev = ScenarioEvent::new(
                    time,
                    EventKind::NodeJoin {
                        node: id(*node, "node")?,
                        neighbors: neighbors.iter().map(|&v| id(v, "neighbors")).collect::<Result<_>>()?,
                        attribute: attribute.clone(),
                        init: *init,
                    },
                );
                match init_box {
                    Some([lo, hi]) => ev.with_init_box(*lo, *hi),
                    None => ev,
                }
            }
            Self::NodeLeave { node, .. } => ScenarioEvent::new(time, EventKind::NodeLeave { node: id(*node, "node")? }),
            Self::AttributeChange { node, attribute, .. } => ScenarioEvent::new(
                time,
                EventKind::AttributeChange {
                    node: id(*node, "node")?,
                    attribute: attribute.clone(),
                },
            ),
        })
    }
}

/// Parse and validate a scenario document.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.to_string().trim()))?;
    let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { "<document>".into() } else { path }, e.inner().to_string().trim())
    })?;
    cfg.build()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    parse_config(&text)
}

/// A validated scenario ready to run.
#[derive(Debug, Clone)]
pub struct BuiltScenario {
    pub problem: Problem,
    pub notes: Vec<String>,
}

impl ScenarioConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario configs always serialize")
    }

    fn agent_labels(&self, table: &AttributeTable) -> Result<Vec<String>> {
        let a = &self.attributes;
        let n = self.network.n;
        match (&a.histogram, &a.labels) {
            (Some(_), Some(_)) => Err(Error::config("attributes", "give either histogram or labels, not both")),
            (None, None) => Err(Error::config("attributes", "missing histogram or labels")),
            (None, Some(labels)) => {
                if labels.len() != n {
                    return Err(Error::config(
                        "attributes.labels",
                        format!("{} labels for {n} agents", labels.len()),
                    ));
                }
                for (i, l) in labels.iter().enumerate() {
                    if !table.contains(l) {
                        return Err(Error::config(format!("attributes.labels[{i}]"), format!("`{l}` is not in the universe")));
                    }
                }
                Ok(labels.clone())
            }
            (Some(h), None) => {
                if h.len() != table.len() {
                    return Err(Error::config(
                        "attributes.histogram",
                        format!("{} entries for a universe of {}", h.len(), table.len()),
                    ));
                }
                let total: usize = h.iter().sum();
                if total != n {
                    return Err(Error::config(
                        "attributes.histogram",
                        format!("histogram totals {total} but the network has {n} agents"),
                    ));
                }
                let mut labels: Vec<String> = h
                    .iter()
                    .zip(table.labels())
                    .flat_map(|(&c, l)| std::iter::repeat_n(l.clone(), c))
                    .collect();
                if a.assignment == Assignment::Shuffled {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                    labels.shuffle(&mut rng);
                }
                Ok(labels)
            }
        }
    }

    fn table(&self) -> Result<AttributeTable> {
        let a = &self.attributes;
        let err = |e: Error| Error::config("attributes.universe", e.to_string());
        match (&a.universe, &a.histogram, &a.labels) {
            (Some(u), _, _) => AttributeTable::new(u.clone()).map_err(err),
            (None, Some(h), _) => AttributeTable::numeric(h.len()).map_err(err),
            (None, None, Some(l)) => AttributeTable::from_labels(l).map_err(err),
            (None, None, None) => Err(Error::config("attributes", "missing histogram or labels")),
        }
    }

    /// Validate everything and assemble the runnable problem.
    pub fn build(&self) -> Result<BuiltScenario> {
        let mut notes = Vec::new();
        let net = &self.network;
        if net.n == 0 {
            return Err(Error::config("network.n", "must be at least 1"));
        }
        let table = self.table()?;
        let labels = self.agent_labels(&table)?;
        let wrap = |path: &str| {
            let path = path.to_string();
            move |e: Error| Error::config(path.clone(), e.to_string())
        };
        let tl = match net.kind {
            NetworkKind::Ring => NetworkTimeline::ring(net.n, &labels),
            NetworkKind::Path => NetworkTimeline::path(net.n, &labels),
            NetworkKind::Complete => NetworkTimeline::complete(net.n, &labels),
            NetworkKind::EdgeList => {
                let edges = net
                    .edges
                    .as_ref()
                    .ok_or_else(|| Error::config("network.edges", "required for edge-list networks"))?;
                let mut pairs = Vec::with_capacity(edges.len());
                for (i, &[a, b]) in edges.iter().enumerate() {
                    if a == 0 || b == 0 {
                        return Err(Error::config(format!("network.edges[{i}]"), "node ids start at 1"));
                    }
                    pairs.push((a - 1, b - 1));
                }
                NetworkTimeline::from_edges(net.n, &pairs, &labels)
            }
            NetworkKind::RandomConnected => {
                let p = net.edge_probability.unwrap_or(0.0);
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::config("network.edge_probability", "must lie in [0, 1]"));
                }
                NetworkTimeline::random_connected(net.n, p, net.seed.unwrap_or(self.seed), &labels)
            }
        }
        .map_err(wrap("network"))?;
        let n_bar = net.n_bar.unwrap_or(net.n);
        let tl = tl.with_n_bar(n_bar).map_err(wrap("network.n_bar"))?.with_leader_policy(net.leader_policy);

        let mut events = Vec::with_capacity(self.events.len());
        for (i, e) in self.events.iter().enumerate() {
            events.push(e.to_event(&format!("events[{i}]"))?);
        }
        let mut timeline = tl;
        for (i, ev) in events.iter().enumerate() {
            timeline = timeline.apply_event(ev, &table).map_err(wrap(&format!("events[{i}]")))?;
        }

        let gains = match &self.gains {
            Some(g) => g.resolve(n_bar, table.len()),
            None => {
                notes.push("no [gains] section; the desk preset was selected".into());
                GainConfig::default().resolve(n_bar, table.len())
            }
        };
        gains.validate().map_err(wrap("gains.overrides"))?;

        let alg = &self.algorithm;
        match alg.kind {
            AlgorithmKind::AprioriK if alg.f_star.is_none() && alg.k.is_none() => {
                return Err(Error::config("algorithm", "apriori-k needs f_star or k"));
            }
            _ => {}
        }
        if let Some(k) = alg.k {
            if k == 0 || k > net.n.max(n_bar) {
                return Err(Error::config("algorithm.k", format!("K={k} outside 1..={n_bar}")));
            }
        }
        if let Some(f) = alg.f_star {
            if f == 0 || f > n_bar {
                return Err(Error::config("algorithm.f_star", format!("f*={f} outside 1..={n_bar}")));
            }
        }
        let sequential_only = alg.kind == AlgorithmKind::AdaptiveK
            || (alg.kind == AlgorithmKind::AprioriK && alg.execution == Execution::Sequential);
        if !events.is_empty() && sequential_only {
            return Err(Error::config(
                "events",
                "network changes need the direct algorithm or apriori-k with combined execution",
            ));
        }
        if alg.execution == Execution::Combined && alg.kind != AlgorithmKind::AprioriK {
            return Err(Error::config("algorithm.execution", "combined execution applies to apriori-k only"));
        }

        let integ = &self.integrator;
        for (name, v) in [
            ("dt", integ.dt),
            ("horizon", integ.horizon),
            ("stability_window", integ.stability_window),
            ("sample_step", integ.sample_step),
            ("cadence_interval", alg.cadence_interval),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::config(format!("integrator.{name}"), "must be positive"));
                }
            }
        }

        let settings = Settings {
            seed: self.seed,
            dt: integ.dt,
            horizon: integ.horizon,
            window: integ.stability_window.unwrap_or(DEFAULT_WINDOW),
            sample_step: integ.sample_step,
            tie_break: self.attributes.tie_break,
            cadence: alg.cadence,
            cadence_interval: alg.cadence_interval.unwrap_or(0.6),
            verify: alg.verify,
            strict: self.gains.as_ref().is_some_and(|g| g.strict),
            keep_trajectories: true,
        };
        Ok(BuiltScenario {
            problem: Problem::new(timeline, table, gains).with_settings(settings),
            notes,
        })
    }
}

/// Command-line overrides applied on top of a config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub preset: Option<GainPreset>,
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ScenarioConfig) {
        if let Some(d) = &self.out_dir {
            cfg.out_dir = Some(d.display().to_string());
        }
        if let Some(p) = self.preset {
            cfg.gains.get_or_insert_with(GainConfig::default).preset = p;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(dt) = self.dt {
            cfg.integrator.dt = Some(dt);
        }
        if let Some(h) = self.horizon {
            cfg.integrator.horizon = Some(h);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub check: String,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(check: &str, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            check: check.into(),
            pass,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub algorithm: AlgorithmKind,
    pub execution: Option<Execution>,
    pub mode: String,
    pub mode_frequency: usize,
    /// `(attribute, frequency)` of every attribute whose frequency was computed.
    pub frequencies: Vec<(String, usize)>,
    pub candidates: Vec<Candidate>,
    pub size_estimate: Option<usize>,
    pub k_trace: Vec<usize>,
    pub state_var_count: usize,
    pub elapsed_simulated_s: f64,
    pub wall_clock_s: f64,
    pub gains: GainSet,
    pub bounds: BoundReport,
    pub locks: Vec<ProtocolLock>,
    pub segments: Vec<SegmentOutcome>,
    pub event_boxes: Vec<BoxCheck>,
    pub dwell: Option<DwellReport>,
    pub mode_per_agent: Vec<AgentMode>,
    pub verdicts: Vec<Verdict>,
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
    pub mismatches: Vec<String>,
}

impl RunSummary {
    pub fn pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn exit_code(&self) -> i32 {
        if self.pass() {
            0
        } else {
            1
        }
    }
}

/// Exit code for an error that aborted a run.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::StepTooLarge { .. } | Error::Numerical(_) | Error::GainViolation(_) => 3,
        Error::LockFailure(_) => 1,
        _ => 2,
    }
}

/// Simulated-time budget the algorithm needs after each change.
pub fn dwell_bound(problem: &Problem, alg: &AlgorithmConfig) -> f64 {
    let b = BoundReport::new(&problem.gains, problem.n_bar(), problem.omega(), None);
    let base = match alg.kind {
        AlgorithmKind::Direct => b.t_y,
        _ => b.t_apriori,
    };
    base + problem.settings.window
}

pub fn bound_report(problem: &Problem, k_star: Option<usize>) -> BoundReport {
    let seg = problem.timeline.initial();
    BoundReport::new(&problem.gains, problem.n_bar(), problem.omega(), k_star).with_spectral(
        &seg.laplacian(),
        seg.leader_row(),
        problem.gains.gamma_y,
    )
}

fn execute(cfg: &ScenarioConfig, problem: &Problem) -> Result<AlgorithmRun> {
    let alg = &cfg.algorithm;
    match alg.kind {
        AlgorithmKind::Direct => run_direct(problem),
        AlgorithmKind::AprioriK => run_apriori_k(problem, alg.f_star, alg.k, alg.execution),
        AlgorithmKind::AdaptiveK => run_adaptive_k(problem),
    }
}

fn verdicts(problem: &Problem, run: &AlgorithmRun, dwell: Option<&DwellReport>) -> Result<Vec<Verdict>> {
    let mut v = Vec::new();
    let ls = problem.final_l_values()?;
    let (modes, max_f) = oracle_mode(&ls)?;
    let l = problem.table.index_of(&run.mode)?;
    let f = ls.iter().filter(|&&x| x == l).count();
    let oracle: Vec<&str> = modes.iter().map(|&m| problem.table.label_of(m).unwrap()).collect();
    v.push(Verdict::new(
        "mode-matches-oracle",
        f == max_f,
        format!("returned {} (frequency {f}); oracle modes {oracle:?} with frequency {max_f}", run.mode),
    ));
    let late: Vec<&str> = run
        .locks
        .iter()
        .filter(|l| !l.within_bound)
        .map(|l| l.name.as_str())
        .collect();
    v.push(Verdict::new(
        "locks-within-bound",
        late.is_empty(),
        if late.is_empty() {
            format!("{} protocol runs locked within their bounds", run.locks.len())
        } else {
            format!("late or unlocked: {late:?}")
        },
    ));
    if problem.settings.verify {
        v.push(Verdict::new(
            "locked-values-match-oracle",
            run.mismatches.is_empty(),
            if run.mismatches.is_empty() {
                "all locked values agree with the oracle".to_string()
            } else {
                run.mismatches.join("; ")
            },
        ));
    }
    if problem.timeline.segments.len() > 1 {
        let bad: Vec<f64> = run.segments.iter().filter(|s| !s.pass).map(|s| s.start).collect();
        v.push(Verdict::new(
            "post-change-mode",
            bad.is_empty(),
            format!("{} segments, failing starts {bad:?}", run.segments.len()),
        ));
        let out: Vec<f64> = run.event_boxes.iter().filter(|b| !b.pass).map(|b| b.time).collect();
        v.push(Verdict::new(
            "event-states-in-box",
            out.is_empty(),
            format!("{} event checks, failing times {out:?}", run.event_boxes.len()),
        ));
        if let Some(d) = dwell {
            v.push(Verdict::new(
                "dwell-time",
                d.pass(),
                format!("required gap {:.6} s", d.required),
            ));
        }
    }
    Ok(v)
}

/// Execute a scenario and write its artifacts to `out_dir`.
pub fn run(cfg: &ScenarioConfig, out_dir: &Path) -> Result<RunSummary> {
    let started = Instant::now();
    let built = cfg.build()?;
    let problem = &built.problem;
    let run = execute(cfg, problem)?;
    let dwell = (!problem.timeline.events.is_empty())
        .then(|| check_dwell(&problem.timeline.events, dwell_bound(problem, &cfg.algorithm)));
    let k_star = (run.algorithm == AlgorithmKind::AdaptiveK).then(|| *run.k_trace.last().unwrap_or(&1));
    let frequencies = if run.algorithm == AlgorithmKind::Direct {
        problem
            .table
            .labels()
            .iter()
            .cloned()
            .zip(run.frequencies.iter().copied())
            .collect()
    } else {
        let mut seen: Vec<(String, usize)> = Vec::new();
        for r in &run.rounds {
            for c in &r.candidates {
                if !seen.iter().any(|(a, _)| *a == c.attribute) {
                    seen.push((c.attribute.clone(), c.frequency));
                }
            }
        }
        seen
    };
    let mut warnings = run.warnings.clone();
    if cfg.algorithm.kind == AlgorithmKind::AprioriK {
        if let (Some(f), None) = (cfg.algorithm.f_star, cfg.algorithm.k) {
            if problem.settings.verify {
                let (_, truth) = oracle_mode(&problem.final_l_values()?)?;
                if kstar(f, problem.timeline.last().n()) != kstar(truth, problem.timeline.last().n()) {
                    warnings.push(format!("f*={f} gives a different K than the true frequency {truth}"));
                }
            }
        }
    }
    let summary = RunSummary {
        algorithm: run.algorithm,
        execution: run.execution,
        mode: run.mode.clone(),
        mode_frequency: run.mode_frequency,
        frequencies,
        candidates: run.candidates.clone(),
        size_estimate: run.size_estimate,
        k_trace: run.k_trace.clone(),
        state_var_count: run.state_var_count,
        elapsed_simulated_s: run.elapsed,
        wall_clock_s: 0.0,
        gains: problem.gains,
        bounds: bound_report(problem, k_star),
        locks: run.locks.clone(),
        segments: run.segments.clone(),
        event_boxes: run.event_boxes.clone(),
        verdicts: verdicts(problem, &run, dwell.as_ref())?,
        dwell,
        mode_per_agent: run.mode_per_agent.clone(),
        notes: built.notes.clone(),
        warnings,
        mismatches: run.mismatches.clone(),
    };

    fs::create_dir_all(out_dir)?;
    let mut manifest = Vec::new();
    for nt in &run.trajectories {
        manifest.push(emit_timeseries(nt, problem, out_dir)?);
    }
    if run.algorithm == AlgorithmKind::AdaptiveK {
        let file = "k_trace.csv";
        let mut w = csv::Writer::from_path(out_dir.join(file))?;
        w.write_record(["round", "k"])?;
        for (i, k) in run.k_trace.iter().enumerate() {
            w.write_record([i.to_string(), k.to_string()])?;
        }
        w.flush()?;
        manifest.push(ManifestEntry {
            file: file.into(),
            protocol: "adaptive-k".into(),
            variables: vec!["k".into()],
            plot: "value of K in each round of the adaptive loop".into(),
        });
    }
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    let mut summary = summary;
    summary.wall_clock_s = started.elapsed().as_secs_f64();
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub file: String,
    pub protocol: String,
    pub variables: Vec<String>,
    pub plot: String,
}

fn file_stem(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    s.trim_end_matches('_').to_string()
}

fn plot_caption(kind: &ProtocolKind) -> String {
    match kind {
        ProtocolKind::Size => "network size estimate of every agent over time".into(),
        ProtocolKind::Frequency { attributes } => {
            format!("frequency estimate of attribute {} at every agent over time", attributes.join(","))
        }
        ProtocolKind::Counter => "estimated count of every attribute at every agent over time".into(),
        ProtocolKind::Kth { k, .. } => format!("estimate of the {k}-th smallest l-value at every agent over time"),
        ProtocolKind::Combined { .. } => {
            "size, order-statistic, frequency and mode estimates of the coupled system over time".into()
        }
    }
}

/// Write one trajectory as tidy CSV: `time_s, agent_id, variable, value`.
pub fn emit_timeseries(nt: &NamedTrajectory, problem: &Problem, out_dir: &Path) -> Result<ManifestEntry> {
    let traj = &nt.trajectory;
    if traj.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: empty trajectory", nt.name)));
    }
    let file = format!("{}.csv", file_stem(&nt.name));
    let dim = traj.states[0].ncols();
    let mut variables: Vec<String> = (0..dim).map(|c| traj.kind.column_name(c, &problem.table)).collect();
    let combined_k = match traj.kind {
        ProtocolKind::Combined { k } => Some(k),
        _ => None,
    };
    if combined_k.is_some() {
        variables.push("mhat".into());
    }
    let mut w = csv::Writer::from_path(out_dir.join(&file))?;
    w.write_record(["time_s", "agent_id", "variable", "value"])?;
    for (i, (t, state)) in traj.times.iter().zip(&traj.states).enumerate() {
        let t = format!("{t:.16e}");
        for &v in &traj.segments[traj.segment_of(i)].nodes {
            let id = (v + 1).to_string();
            for c in 0..dim {
                w.write_record([t.as_str(), id.as_str(), variables[c].as_str(), &format!("{:.16e}", state[(v, c)])])?;
            }
            if let Some(k) = combined_k {
                let row: Vec<f64> = state.row(v).iter().copied().collect();
                let m = combined_mode_estimate(&row, k, traj.n_bar);
                w.write_record([t.as_str(), id.as_str(), "mhat", &format!("{:.16e}", m as f64)])?;
            }
        }
    }
    w.flush()?;
    Ok(ManifestEntry {
        file,
        protocol: traj.kind.tag(),
        variables,
        plot: plot_caption(&traj.kind),
    })
}

/// Bounds, gain checks and spectral checks for a config, without running it.
pub fn bounds_only(cfg: &ScenarioConfig) -> Result<BoundReport> {
    let built = cfg.build()?;
    let p = &built.problem;
    let k_star = match cfg.algorithm.kind {
        AlgorithmKind::Direct => None,
        _ => {
            let (_, f) = oracle_mode(&p.final_l_values()?)?;
            Some(cfg.algorithm.k.unwrap_or_else(|| kstar(cfg.algorithm.f_star.unwrap_or(f), p.timeline.last().n())))
        }
    };
    Ok(bound_report(p, k_star))
}

/// Config validation plus the dwell check of its event schedule.
pub fn validate(cfg: &ScenarioConfig) -> Result<DwellReport> {
    let built = cfg.build()?;
    let p = &built.problem;
    Ok(check_dwell(&p.timeline.events, dwell_bound(p, &cfg.algorithm)))
}
