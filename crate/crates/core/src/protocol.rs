//! Protocol vector fields over the component of interest of one segment.
//!
//! Linear kinds (size estimation, frequency counting, the vector counter)
//! share the drift `-h (γL + e₁e₁ᵀ)` and a constant input `h·b`; the
//! k-th-smallest protocol and the combined single-ODE realization are
//! sign-coupled and discontinuous.
//!
//! States are `n_bar × dim` matrices indexed by potential node. Rows of
//! nodes outside the component of interest have zero derivative.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bounds;
use crate::error::{Error, Result};
use crate::network::{AttributeTable, Segment};

/// Speed, coupling and order-statistic gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainSet {
    pub h_x: f64,
    pub gamma_x: f64,
    pub h_y: f64,
    pub gamma_y: f64,
    pub beta: f64,
    pub g: f64,
    pub gamma_z: f64,
}

impl GainSet {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("h_x", self.h_x),
            ("gamma_x", self.gamma_x),
            ("h_y", self.h_y),
            ("gamma_y", self.gamma_y),
            ("beta", self.beta),
            ("g", self.g),
            ("gamma_z", self.gamma_z),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("gain {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProtocolKind {
    /// Network size estimation; converges to N.
    Size,
    /// Frequency counting, one column per listed attribute.
    Frequency { attributes: Vec<String> },
    /// Vector counter over the whole universe in bijection order.
    Counter,
    /// k-th smallest l-value among `n` agents.
    Kth { k: usize, n: usize },
    /// Size, K order statistics and K frequencies integrated together.
    Combined { k: usize },
}

impl ProtocolKind {
    pub fn is_linear(&self) -> bool {
        matches!(self, Self::Size | Self::Frequency { .. } | Self::Counter)
    }

    pub fn is_sign_coupled(&self) -> bool {
        matches!(self, Self::Kth { .. } | Self::Combined { .. })
    }

    pub fn dim(&self, omega: usize) -> usize {
        match self {
            Self::Size | Self::Kth { .. } => 1,
            Self::Frequency { attributes } => attributes.len(),
            Self::Counter => omega,
            Self::Combined { k } => 2 * k + 1,
        }
    }

    /// Short name used in file names and reports.
    pub fn tag(&self) -> String {
        match self {
            Self::Size => "size".into(),
            Self::Frequency { attributes } => format!("frequency[{}]", attributes.join(",")),
            Self::Counter => "counter".into(),
            Self::Kth { k, .. } => format!("kth[{k}]"),
            Self::Combined { k } => format!("combined[K={k}]"),
        }
    }

    /// Variable name of state column `col`, as used in the CSV schema.
    pub fn column_name(&self, col: usize, table: &AttributeTable) -> String {
        match self {
            Self::Size => "x".into(),
            Self::Frequency { attributes } => format!("y[{}]", attributes[col]),
            Self::Counter => format!("xi[{}]", table.labels()[col]),
            Self::Kth { k, .. } => format!("z[{k}]"),
            Self::Combined { k } => {
                if col == 0 {
                    "x".into()
                } else if col <= *k {
                    format!("z[{col}]")
                } else {
                    format!("y[{}]", col - k)
                }
            }
        }
    }
}

/// I(a, aᵢ): 1 when the two labels agree.
pub fn indicator(table: &AttributeTable, a: &str, a_i: &str) -> Result<u8> {
    table.index_of(a)?;
    table.index_of(a_i)?;
    Ok(u8::from(a == a_i))
}

/// Order-statistic drift φ_k(z, a, N) with `la = l(a)`.
pub fn phi_k(z: f64, la: f64, n: usize, k: usize, beta: f64, g: f64) -> f64 {
    if z < la {
        beta * (z - la) - g * k as f64
    } else if z > la {
        beta * (z - la) + g * (n as f64 + 1.0 - k as f64)
    } else {
        0.0
    }
}

/// ⟨·⟩
pub fn round_state(v: f64) -> i64 {
    v.round() as i64
}

/// Live network-size estimate ⟨x⟩ clamped to `[1, n_bar]`.
pub fn size_estimate(x: f64, n_bar: usize) -> usize {
    let r = x.round();
    if r.is_nan() || r < 1.0 {
        1
    } else if r > n_bar as f64 {
        n_bar
    } else {
        r as usize
    }
}

/// Number of order-statistic slots in use for size `n` and parameter `k`:
/// `k - 1` when `⌈n/k⌉ > n/k`, otherwise `k`.
pub fn effective_slots(n: usize, k: usize) -> usize {
    if k > 1 && !n.is_multiple_of(k) {
        k - 1
    } else {
        k
    }
}

/// φ_j^K(z, a, x) of the combined dynamics: the order-statistic drift for
/// position `j·⌈⟨x⟩/K⌉` using the live size estimate.
pub fn phi_combined(z: f64, la: f64, x: f64, j: usize, k_param: usize, n_bar: usize, beta: f64, g: f64) -> f64 {
    let n_hat = size_estimate(x, n_bar);
    let pos = j * n_hat.div_ceil(k_param);
    phi_k(z, la, n_hat, pos, beta, g)
}

/// 𝓘(z, a): 1 when ⟨z⟩ = l(a).
pub fn rounding_indicator(z: f64, la: usize) -> f64 {
    if round_state(z) == la as i64 {
        1.0
    } else {
        0.0
    }
}

/// Per-agent mode estimate of the combined dynamics from one state row:
/// the rounded order statistic whose frequency estimate is largest.
/// Ties go to the smaller index.
pub fn combined_mode_estimate(row: &[f64], k_param: usize, n_bar: usize) -> i64 {
    let slots = effective_slots(size_estimate(row[0], n_bar), k_param);
    let mut best: Option<(f64, i64)> = None;
    for j in 1..=slots {
        let y = row[k_param + j];
        let m = round_state(row[j]);
        best = match best {
            None => Some((y, m)),
            Some((by, bm)) if y > by || (y == by && m < bm) => Some((y, m)),
            keep => keep,
        };
    }
    best.map(|(_, m)| m).unwrap_or(0)
}

/// Integer signature whose agent-uniform constancy defines a lock.
pub fn lock_signature(kind: &ProtocolKind, n_bar: usize, row: &[f64]) -> Vec<i64> {
    match kind {
        ProtocolKind::Combined { k } => {
            let n_hat = size_estimate(row[0], n_bar);
            let slots = effective_slots(n_hat, *k);
            let mut sig = Vec::with_capacity(2 * slots + 2);
            sig.push(round_state(row[0]));
            sig.extend((1..=slots).map(|j| round_state(row[j])));
            sig.extend((1..=slots).map(|j| round_state(row[k + j])));
            sig.push(combined_mode_estimate(row, *k, n_bar));
            sig
        }
        _ => row.iter().map(|&v| round_state(v)).collect(),
    }
}

/// Admissible initialization interval for a given state role.
pub fn admissible_box(role: StateRole, n_bar: usize) -> (f64, f64) {
    let top = n_bar as f64 + 0.5;
    match role {
        StateRole::X | StateRole::Z => (0.5, top),
        StateRole::Y => (-0.5, top),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateRole {
    X,
    Y,
    Z,
}

/// Role of every state column of `kind`.
pub fn column_roles(kind: &ProtocolKind, omega: usize) -> Vec<StateRole> {
    match kind {
        ProtocolKind::Size => vec![StateRole::X],
        ProtocolKind::Kth { .. } => vec![StateRole::Z],
        ProtocolKind::Frequency { .. } | ProtocolKind::Counter => vec![StateRole::Y; kind.dim(omega)],
        ProtocolKind::Combined { k } => {
            let mut r = vec![StateRole::X];
            r.extend(std::iter::repeat_n(StateRole::Z, *k));
            r.extend(std::iter::repeat_n(StateRole::Y, *k));
            r
        }
    }
}

/// A protocol instantiated on one network segment.
#[derive(Debug, Clone)]
pub struct ProtocolSystem {
    pub kind: ProtocolKind,
    pub gains: GainSet,
    pub n_bar: usize,
    pub omega: usize,
    /// Potential-node index of each component row.
    pub nodes: Vec<usize>,
    /// Neighbor rows of each component row.
    pub adj: Vec<Vec<usize>>,
    pub leader_row: usize,
    /// l(aᵢ) of each component row.
    pub l: Vec<usize>,
    /// Constant input per component row (linear kinds only).
    pub b: DMatrix<f64>,
    laplacian: DMatrix<f64>,
}

impl ProtocolSystem {
    /// Instantiate `kind` on `segment`. With `strict`, gains that violate the
    /// convergence hypotheses for this kind are rejected.
    pub fn build(
        kind: ProtocolKind,
        segment: &Segment,
        table: &AttributeTable,
        gains: GainSet,
        n_bar: usize,
        strict: bool,
    ) -> Result<Self> {
        gains.validate()?;
        if !segment.active.contains(&segment.leader) {
            return Err(Error::InvalidNetwork("leader is not in the component of interest".into()));
        }
        let nodes = segment.nodes();
        let row_of = |v: usize| nodes.binary_search(&v).ok();
        let adj: Vec<Vec<usize>> = nodes
            .iter()
            .map(|&v| segment.neighbors(v).into_iter().filter_map(row_of).collect())
            .collect();
        let l = segment
            .active_labels()
            .into_iter()
            .map(|a| table.index_of(a))
            .collect::<Result<Vec<_>>>()?;
        let omega = table.len();
        let n = nodes.len();

        let b = match &kind {
            ProtocolKind::Size => DMatrix::from_element(n, 1, 1.0),
            ProtocolKind::Frequency { attributes } => {
                let cols = attributes
                    .iter()
                    .map(|a| table.index_of(a))
                    .collect::<Result<Vec<_>>>()?;
                DMatrix::from_fn(n, cols.len(), |r, c| f64::from(l[r] == cols[c]))
            }
            ProtocolKind::Counter => DMatrix::from_fn(n, omega, |r, c| f64::from(l[r] == c + 1)),
            ProtocolKind::Kth { k, n: count } => {
                if *k == 0 || k > count {
                    return Err(Error::InvalidArgument(format!("k = {k} outside 1..={count}")));
                }
                DMatrix::zeros(n, 0)
            }
            ProtocolKind::Combined { k } => {
                if *k == 0 {
                    return Err(Error::InvalidArgument("K must be positive".into()));
                }
                DMatrix::zeros(n, 0)
            }
        };

        if strict {
            let failed: Vec<_> = bounds::gain_checks_for(&kind, &gains, n_bar, omega, &l)
                .into_iter()
                .filter(|c| !c.pass)
                .map(|c| format!("{} requires {} but got {}", c.name, c.required, c.actual))
                .collect();
            if !failed.is_empty() {
                return Err(Error::GainViolation(failed.join("; ")));
            }
        }

        Ok(Self {
            kind,
            gains,
            n_bar,
            omega,
            leader_row: segment.leader_row(),
            laplacian: segment.laplacian(),
            nodes,
            adj,
            l,
            b,
        })
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn dim(&self) -> usize {
        self.kind.dim(self.omega)
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    pub fn max_degree(&self) -> usize {
        self.adj.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// `(h, γ)` driving a linear kind.
    pub fn linear_gains(&self) -> Option<(f64, f64)> {
        match self.kind {
            ProtocolKind::Size => Some((self.gains.h_x, self.gains.gamma_x)),
            ProtocolKind::Frequency { .. } | ProtocolKind::Counter => Some((self.gains.h_y, self.gains.gamma_y)),
            _ => None,
        }
    }

    /// γL + e₁e₁ᵀ over the component, with the leader in place of e₁.
    pub fn coupling_matrix(&self, gamma: f64) -> DMatrix<f64> {
        let mut a = &self.laplacian * gamma;
        a[(self.leader_row, self.leader_row)] += 1.0;
        a
    }

    /// `(drift, input)` with `ẏ = drift·y + input` on component rows.
    pub fn linear_form(&self) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let (h, gamma) = self.linear_gains()?;
        Some((self.coupling_matrix(gamma) * -h, &self.b * h))
    }

    /// Solution of (γL + e₁e₁ᵀ) y* = b in component-row order.
    pub fn equilibrium(&self) -> Result<DMatrix<f64>> {
        let (_, gamma) = self
            .linear_gains()
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no linear equilibrium", self.kind.tag())))?;
        solve_spd(self.coupling_matrix(gamma), &self.b)
    }

    pub fn column_roles(&self) -> Vec<StateRole> {
        column_roles(&self.kind, self.omega)
    }

    pub fn column_box(&self, col: usize) -> (f64, f64) {
        admissible_box(self.column_roles()[col], self.n_bar)
    }

    /// Time derivative of the full `n_bar × dim` state.
    pub fn rhs(&self, state: &DMatrix<f64>) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(state.nrows(), state.ncols());
        let g = &self.gains;
        match &self.kind {
            ProtocolKind::Size | ProtocolKind::Frequency { .. } | ProtocolKind::Counter => {
                let (h, gamma) = self.linear_gains().expect("linear kind");
                for (r, &v) in self.nodes.iter().enumerate() {
                    for c in 0..state.ncols() {
                        let own = state[(v, c)];
                        let coupling: f64 = self.adj[r].iter().map(|&q| state[(self.nodes[q], c)] - own).sum();
                        let damp = if r == self.leader_row { -own } else { 0.0 };
                        d[(v, c)] = h * (damp + self.b[(r, c)] + gamma * coupling);
                    }
                }
            }
            ProtocolKind::Kth { k, n } => {
                for (r, &v) in self.nodes.iter().enumerate() {
                    let z = state[(v, 0)];
                    let coupling: f64 = self.adj[r].iter().map(|&q| sgn(state[(self.nodes[q], 0)] - z)).sum();
                    d[(v, 0)] = -phi_k(z, self.l[r] as f64, *n, *k, g.beta, g.g) + g.gamma_z * coupling;
                }
            }
            ProtocolKind::Combined { k } => {
                self.combined_sign_part(state, *k, &mut d);
                let (dx, dy) = self.combined_linear_part(state, *k);
                for (r, &v) in self.nodes.iter().enumerate() {
                    d[(v, 0)] = dx[r];
                    for j in 1..=*k {
                        d[(v, k + j)] = dy[(r, j - 1)];
                    }
                }
            }
        }
        d
    }

    /// z-derivatives of the combined dynamics written into `d`. Slots beyond
    /// the agent's effective count stay frozen.
    pub(crate) fn combined_sign_part(&self, state: &DMatrix<f64>, k: usize, d: &mut DMatrix<f64>) {
        let g = &self.gains;
        for (r, &v) in self.nodes.iter().enumerate() {
            let x = state[(v, 0)];
            let slots = effective_slots(size_estimate(x, self.n_bar), k);
            for j in 1..=slots {
                let z = state[(v, j)];
                let coupling: f64 = self.adj[r].iter().map(|&q| sgn(state[(self.nodes[q], j)] - z)).sum();
                d[(v, j)] = -phi_combined(z, self.l[r] as f64, x, j, k, self.n_bar, g.beta, g.g) + g.gamma_z * coupling;
            }
        }
    }

    /// Inputs of the combined linear blocks: `1` for x and 𝓘(z_j, aᵢ) for y_j,
    /// in component-row order. The y input of an unused slot is zero.
    pub(crate) fn combined_inputs(&self, state: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), k, |r, c| {
            let v = self.nodes[r];
            let slots = effective_slots(size_estimate(state[(v, 0)], self.n_bar), k);
            if c < slots {
                rounding_indicator(state[(v, c + 1)], self.l[r])
            } else {
                0.0
            }
        })
    }

    fn combined_linear_part(&self, state: &DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
        let g = &self.gains;
        let inputs = self.combined_inputs(state, k);
        let mut dx = vec![0.0; self.n()];
        let mut dy = DMatrix::zeros(self.n(), k);
        for (r, &v) in self.nodes.iter().enumerate() {
            let leader = r == self.leader_row;
            let x = state[(v, 0)];
            let cx: f64 = self.adj[r].iter().map(|&q| state[(self.nodes[q], 0)] - x).sum();
            dx[r] = g.h_x * (if leader { -x } else { 0.0 } + 1.0 + g.gamma_x * cx);
            for j in 1..=k {
                let y = state[(v, k + j)];
                let cy: f64 = self.adj[r].iter().map(|&q| state[(self.nodes[q], k + j)] - y).sum();
                dy[(r, j - 1)] = g.h_y * (if leader { -y } else { 0.0 } + inputs[(r, j - 1)] + g.gamma_y * cy);
            }
        }
        (dx, dy)
    }

    /// Σᵢ φ over the component, per order-statistic slot. A sign change of a
    /// residual over time means the slot is sliding on its target.
    pub fn sliding_residuals(&self, state: &DMatrix<f64>) -> Vec<f64> {
        let g = &self.gains;
        match &self.kind {
            ProtocolKind::Kth { k, n } => {
                let s = self
                    .nodes
                    .iter()
                    .zip(&self.l)
                    .map(|(&v, &la)| phi_k(state[(v, 0)], la as f64, *n, *k, g.beta, g.g))
                    .sum();
                vec![s]
            }
            ProtocolKind::Combined { k } => {
                let n_hat = size_estimate(state[(self.nodes[self.leader_row], 0)], self.n_bar);
                (1..=effective_slots(n_hat, *k))
                    .map(|j| {
                        self.nodes
                            .iter()
                            .zip(&self.l)
                            .map(|(&v, &la)| {
                                phi_combined(state[(v, j)], la as f64, state[(v, 0)], j, *k, self.n_bar, g.beta, g.g)
                            })
                            .sum()
                    })
                    .collect()
            }
            _ => Vec::new(),
        }
    }

    /// Largest step keeping per-step motion of sign-coupled states below a
    /// quarter unit: `dt·(γ_z·deg_max + g(N̄+1)) ≤ 0.25`.
    pub fn chatter_budget(&self) -> Option<f64> {
        self.kind
            .is_sign_coupled()
            .then(|| chatter_budget(self.gains.gamma_z, self.gains.g, self.max_degree(), self.n_bar))
    }
}

/// Cholesky solve with two rounds of iterative refinement; the coupling
/// matrices at γ = N̄³ have condition numbers near 1e9.
pub(crate) fn solve_spd(a: DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("coupling matrix is not positive definite".into()))?;
    let mut y = chol.solve(b);
    for _ in 0..2 {
        let r = b - &a * &y;
        y += chol.solve(&r);
    }
    Ok(y)
}

pub fn chatter_budget(gamma_z: f64, g: f64, max_degree: usize, n_bar: usize) -> f64 {
    0.25 / (gamma_z * max_degree as f64 + g * (n_bar as f64 + 1.0))
}

/// sgn with sgn(0) = 0.
pub fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{EventKind, NetworkTimeline, ScenarioEvent};

    fn ring40_labels() -> Vec<String> {
        let hist = [5, 6, 7, 16, 1, 1, 1, 1, 1, 1];
        hist.iter()
            .enumerate()
            .flat_map(|(i, &c)| std::iter::repeat_n((i + 1).to_string(), c))
            .collect()
    }

    fn gains() -> GainSet {
        GainSet {
            h_x: 10.0,
            gamma_x: 64.0,
            h_y: 10.0,
            gamma_y: 64.0,
            beta: 0.1,
            g: 5.0,
            gamma_z: 200.0,
        }
    }

    #[test]
    fn indicator_cases() {
        let t = AttributeTable::numeric(10).unwrap();
        assert_eq!(indicator(&t, "4", "4").unwrap(), 1);
        assert_eq!(indicator(&t, "4", "7").unwrap(), 0);
        assert!(indicator(&t, "4", "11").is_err());
        let total: u32 = ring40_labels()
            .iter()
            .map(|a| u32::from(indicator(&t, "4", a).unwrap()))
            .sum();
        assert_eq!(total, 16);
    }

    #[test]
    fn phi_branches() {
        assert_eq!(phi_k(5.0, 5.0, 40, 14, 0.02, 10.0), 0.0);
        assert!((phi_k(2.0, 5.0, 40, 14, 0.02, 10.0) - (-140.06)).abs() < 1e-12);
        assert!((phi_k(9.0, 5.0, 40, 28, 0.02, 10.0) - 130.08).abs() < 1e-12);
    }

    #[test]
    fn phi_jump_is_g_times_n_plus_one() {
        let (la, n, k, beta, g) = (4.0, 12, 5, 0.3, 7.0);
        let eps = 1e-9;
        let jump = phi_k(la + eps, la, n, k, beta, g) - phi_k(la - eps, la, n, k, beta, g);
        assert!((jump - g * (n as f64 + 1.0)).abs() < 1e-6);
    }

    #[test]
    fn size_system_has_all_ones_input_and_damped_leader() {
        let tl = NetworkTimeline::ring(5, &["a"; 5]).unwrap();
        let table = AttributeTable::new(vec!["a".into()]).unwrap();
        let sys = ProtocolSystem::build(ProtocolKind::Size, tl.initial(), &table, gains(), 5, false).unwrap();
        assert!(sys.b.iter().all(|&v| v == 1.0));
        let (drift, input) = sys.linear_form().unwrap();
        assert_eq!(drift[(0, 0)], -10.0 * (64.0 * 2.0 + 1.0));
        assert_eq!(drift[(1, 1)], -10.0 * (64.0 * 2.0));
        assert!(input.iter().all(|&v| v == 10.0));
    }

    #[test]
    fn frequency_of_absent_attribute_has_zero_equilibrium() {
        let tl = NetworkTimeline::ring(4, &["1"; 4]).unwrap();
        let table = AttributeTable::numeric(3).unwrap();
        let kind = ProtocolKind::Frequency {
            attributes: vec!["2".into()],
        };
        let sys = ProtocolSystem::build(kind, tl.initial(), &table, gains(), 4, false).unwrap();
        assert!(sys.b.iter().all(|&v| v == 0.0));
        assert!(sys.equilibrium().unwrap().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn counter_inputs_are_unit_vectors() {
        let labels = ring40_labels();
        let tl = NetworkTimeline::ring(40, &labels).unwrap();
        let table = AttributeTable::numeric(10).unwrap();
        let sys = ProtocolSystem::build(ProtocolKind::Counter, tl.initial(), &table, gains(), 50, false).unwrap();
        assert_eq!(sys.b.ncols(), 10);
        for r in 0..40 {
            let row: Vec<f64> = sys.b.row(r).iter().copied().collect();
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert_eq!(row[sys.l[r] - 1], 1.0);
        }
    }

    #[test]
    fn two_node_path_equilibrium_by_hand() {
        // [[9,-8],[-8,8]] y = [1,1]  =>  y = (2, 17/8)
        let tl = NetworkTimeline::path(2, &["a", "a"]).unwrap();
        let table = AttributeTable::new(vec!["a".into()]).unwrap();
        let mut gs = gains();
        gs.gamma_y = 8.0;
        let kind = ProtocolKind::Frequency {
            attributes: vec!["a".into()],
        };
        let sys = ProtocolSystem::build(kind, tl.initial(), &table, gs, 2, false).unwrap();
        let y = sys.equilibrium().unwrap();
        assert!((y[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((y[(1, 0)] - 17.0 / 8.0).abs() < 1e-12);
        assert!((y[(1, 0)] - y[(0, 0)]).abs() <= bounds::deviation_bound(2, 8.0));
    }

    #[test]
    fn ring40_frequency_equilibrium_leader_is_sixteen() {
        let labels = ring40_labels();
        let tl = NetworkTimeline::ring(40, &labels).unwrap();
        let table = AttributeTable::numeric(10).unwrap();
        let mut gs = gains();
        gs.gamma_y = 64000.0;
        let kind = ProtocolKind::Frequency {
            attributes: vec!["4".into()],
        };
        let sys = ProtocolSystem::build(kind, tl.initial(), &table, gs, 50, false).unwrap();
        let y = sys.equilibrium().unwrap();
        assert!((y[(0, 0)] - 16.0).abs() < 1e-9, "{}", y[(0, 0)]);
        assert!(y.iter().all(|&v| (v - 16.0).abs() < 2f64.sqrt() / 4.0));
    }

    #[test]
    fn orphans_have_zero_derivative_for_every_kind() {
        let table = AttributeTable::numeric(3).unwrap();
        let labels = ["1", "2", "3", "1", "2", "3"];
        let tl = NetworkTimeline::ring(6, &labels).unwrap();
        let tl = tl
            .apply_events(
                &[
                    ScenarioEvent::new(1.0, EventKind::EdgeRemove { a: 2, b: 3 }),
                    ScenarioEvent::new(2.0, EventKind::EdgeRemove { a: 3, b: 4 }),
                ],
                &table,
            )
            .unwrap();
        let seg = tl.last();
        let kinds = [
            ProtocolKind::Size,
            ProtocolKind::Counter,
            ProtocolKind::Frequency {
                attributes: vec!["1".into()],
            },
            ProtocolKind::Kth { k: 2, n: 5 },
            ProtocolKind::Combined { k: 2 },
        ];
        for kind in kinds {
            let sys = ProtocolSystem::build(kind, seg, &table, gains(), 6, false).unwrap();
            let state = DMatrix::from_fn(6, sys.dim(), |r, c| 1.3 + r as f64 * 0.7 + c as f64 * 0.1);
            let d = sys.rhs(&state);
            assert!(d.row(3).iter().all(|&v| v == 0.0), "{}", sys.kind.tag());
            assert!(d.row(0).iter().any(|&v| v != 0.0), "{}", sys.kind.tag());
        }
    }

    #[test]
    fn strict_mode_rejects_weak_gains() {
        let tl = NetworkTimeline::ring(4, &["1"; 4]).unwrap();
        let table = AttributeTable::numeric(2).unwrap();
        let err = ProtocolSystem::build(ProtocolKind::Size, tl.initial(), &table, gains(), 10, true).unwrap_err();
        assert!(matches!(err, Error::GainViolation(_)));
    }

    #[test]
    fn combined_drift_vanishes_on_target_manifold() {
        // Path 1-2-3-4 with l = [1,2,2,3]; K = 2, N = 4: positions 2 and 4.
        let table = AttributeTable::numeric(3).unwrap();
        let tl = NetworkTimeline::path(4, &["1", "2", "2", "3"]).unwrap();
        let sys = ProtocolSystem::build(ProtocolKind::Combined { k: 2 }, tl.initial(), &table, gains(), 4, false).unwrap();
        let mut state = DMatrix::zeros(4, 5);
        for r in 0..4 {
            state[(r, 0)] = 4.0;
            state[(r, 1)] = 2.0;
            state[(r, 2)] = 3.0;
        }
        let d = sys.rhs(&state);
        for r in 0..4 {
            // Agents holding the target have φ = 0 and equal neighbors give sgn(0) = 0.
            if sys.l[r] == 2 {
                assert_eq!(d[(r, 1)], 0.0);
            }
            if sys.l[r] == 3 {
                assert_eq!(d[(r, 2)], 0.0);
            }
        }
        assert_eq!(rounding_indicator(2.2, 2), 1.0);
        assert_eq!(rounding_indicator(2.6, 2), 0.0);
    }

    #[test]
    fn slots_shrink_when_k_does_not_divide_n() {
        assert_eq!(effective_slots(40, 3), 2);
        assert_eq!(effective_slots(40, 2), 2);
        assert_eq!(effective_slots(10, 5), 5);
        assert_eq!(effective_slots(7, 1), 1);
    }

    #[test]
    fn size_estimate_clamps() {
        assert_eq!(size_estimate(-3.0, 10), 1);
        assert_eq!(size_estimate(4.4, 10), 4);
        assert_eq!(size_estimate(99.0, 10), 10);
    }

    #[test]
    fn chatter_budget_ring40() {
        let dt = chatter_budget(2.5e4, 10.0, 2, 50);
        assert!((dt - 0.25 / 50510.0).abs() < 1e-18);
        assert!((dt - 4.95e-6).abs() < 1e-8);
    }
}
