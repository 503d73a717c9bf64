//! Closed-form convergence-time bounds, gain selection rules, and numerical
//! checks of the Laplacian spectral inequalities the bounds rest on.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::protocol::{GainSet, ProtocolKind};

/// Margin absorbing eigensolver rounding when checking inequalities.
pub const SPECTRAL_MARGIN: f64 = 1e-7;

fn log_factor(m: f64, n_bar: f64) -> f64 {
    (4.0 * m * n_bar.sqrt() / (2.0 - 2f64.sqrt())).ln()
}

/// Size-estimation bound; the box [0.5, N̄+0.5] has size N̄.
pub fn time_bound_x(n_bar: usize, h_x: f64) -> f64 {
    let nb = n_bar as f64;
    4.0 * nb / h_x * log_factor(nb, nb)
}

/// Frequency-counting bound; the box [-0.5, N̄+0.5] has size N̄+1.
pub fn time_bound_y(n_bar: usize, h_y: f64) -> f64 {
    let nb = n_bar as f64;
    4.0 * nb / h_y * log_factor(nb + 1.0, nb)
}

/// k-th-smallest bound (1/β)·ln(2N̄|Ω|).
pub fn time_bound_z(beta: f64, n_bar: usize, omega: usize) -> f64 {
    (2.0 * n_bar as f64 * omega as f64).ln() / beta
}

/// √2·n³/(4γ): bound on |yᵢ* − y₁*|.
pub fn deviation_bound(n: usize, gamma: f64) -> f64 {
    2f64.sqrt() * (n as f64).powi(3) / (4.0 * gamma)
}

/// sup over τ ∈ [0.5, N̄+0.5] of |φ_k(τ, a, N)| for an agent with l(a) = `la`.
pub fn phi_sup(la: usize, n: usize, k: usize, beta: f64, g: f64, n_bar: usize) -> f64 {
    let (lo, hi) = (0.5, n_bar as f64 + 0.5);
    let la = la as f64;
    let mut sup: f64 = 0.0;
    if lo < la {
        sup = sup.max(beta * (la - lo) + g * k as f64);
    }
    if hi > la {
        sup = sup.max(beta * (hi - la) + g * (n as f64 + 1.0 - k as f64));
    }
    sup
}

/// [`phi_sup`] maximized over every agent, position and size N ≤ N̄.
pub fn phi_sup_worst(n_bar: usize, omega: usize, beta: f64, g: f64) -> f64 {
    g * n_bar as f64 + beta * (n_bar.max(omega) as f64 - 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainPreset {
    /// Fixed reference gains; some strict inequalities hold only with equality.
    PaperExact,
    /// Reference gains with every inequality made strict.
    PaperStrict,
    /// Strict rules with speed gains proportional to N̄, for small networks.
    #[default]
    Desk,
}

/// Relative margin by which γ_z exceeds its lower bound.
pub const GAMMA_Z_MARGIN_STRICT: f64 = 1.01;
pub const GAMMA_Z_MARGIN_DESK: f64 = 1.05;

pub fn select_gains(n_bar: usize, omega: usize, preset: GainPreset) -> GainSet {
    let nb = n_bar as f64;
    let om = omega as f64;
    let cube = nb.powi(3);
    let beta = 1.0 / nb;
    match preset {
        GainPreset::PaperExact => GainSet {
            h_x: 1e3,
            gamma_x: cube,
            h_y: 1e3,
            gamma_y: cube,
            beta,
            g: om,
            gamma_z: om * nb * nb,
        },
        GainPreset::PaperStrict | GainPreset::Desk => {
            let g = beta * nb * om + 1.0;
            let (h, margin) = if preset == GainPreset::Desk {
                (100.0 * nb, GAMMA_Z_MARGIN_DESK)
            } else {
                (1e3, GAMMA_Z_MARGIN_STRICT)
            };
            GainSet {
                h_x: h,
                gamma_x: cube,
                h_y: h,
                gamma_y: cube,
                beta,
                g,
                gamma_z: margin * nb * phi_sup_worst(n_bar, omega, beta, g),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainCheck {
    pub name: String,
    pub required: String,
    pub actual: f64,
    pub pass: bool,
}

fn at_least(name: &str, bound: f64, actual: f64) -> GainCheck {
    GainCheck {
        name: name.into(),
        required: format!(">= {bound}"),
        actual,
        pass: actual >= bound,
    }
}

fn above(name: &str, bound: f64, actual: f64) -> GainCheck {
    GainCheck {
        name: name.into(),
        required: format!("> {bound}"),
        actual,
        pass: actual > bound,
    }
}

/// Every convergence hypothesis on the gains, using worst-case φ bounds.
pub fn gain_checks(gains: &GainSet, n_bar: usize, omega: usize) -> Vec<GainCheck> {
    let cube = (n_bar as f64).powi(3);
    vec![
        at_least("gamma_x", cube, gains.gamma_x),
        at_least("gamma_y", cube, gains.gamma_y),
        above("g", gains.beta * n_bar as f64 * omega as f64, gains.g),
        above(
            "gamma_z",
            n_bar as f64 * phi_sup_worst(n_bar, omega, gains.beta, gains.g),
            gains.gamma_z,
        ),
    ]
}

/// The hypotheses relevant to one protocol kind; `l` holds the l-values of
/// the participating agents.
pub fn gain_checks_for(kind: &ProtocolKind, gains: &GainSet, n_bar: usize, omega: usize, l: &[usize]) -> Vec<GainCheck> {
    let all = gain_checks(gains, n_bar, omega);
    let pick = |names: &[&str]| -> Vec<GainCheck> {
        all.iter().filter(|c| names.contains(&c.name.as_str())).cloned().collect()
    };
    match kind {
        ProtocolKind::Size => pick(&["gamma_x"]),
        ProtocolKind::Frequency { .. } | ProtocolKind::Counter => pick(&["gamma_y"]),
        ProtocolKind::Kth { k, n } => {
            let sup = l
                .iter()
                .map(|&la| phi_sup(la, *n, *k, gains.beta, gains.g, n_bar))
                .fold(0.0, f64::max);
            let mut v = pick(&["g"]);
            v.push(above("gamma_z", n_bar as f64 * sup, gains.gamma_z));
            v
        }
        ProtocolKind::Combined { .. } => all,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralCheck {
    pub inequality: String,
    pub lhs: f64,
    pub rhs: f64,
    /// False when the hypothesis of a conditional inequality does not hold.
    pub applicable: bool,
    pub pass: bool,
}

pub fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// λ₂ of a Laplacian (0 for a single node).
pub fn algebraic_connectivity(laplacian: &DMatrix<f64>) -> f64 {
    sorted_eigenvalues(laplacian).get(1).copied().unwrap_or(0.0)
}

/// Checks (i) λ₂(L) ≥ 4/N², (ii) γ ≥ N/λ₂ ⇒ λ_min(γL + e₁e₁ᵀ) ≥ 1/(4N),
/// and (iii) γL + e₁e₁ᵀ ≻ 0. A disconnected graph reports λ₂ = 0 and a
/// failed connectivity precondition.
pub fn spectral_checks(laplacian: &DMatrix<f64>, leader_row: usize, gamma: f64) -> Vec<SpectralCheck> {
    let n = laplacian.nrows();
    let nf = n as f64;
    let mut lam2 = algebraic_connectivity(laplacian);
    let connected = n <= 1 || lam2 > 1e-9;
    if !connected {
        lam2 = 0.0;
    }
    let mut a = laplacian * gamma;
    a[(leader_row, leader_row)] += 1.0;
    let lam_min = sorted_eigenvalues(&a)[0];

    let mut out = vec![SpectralCheck {
        inequality: "connected: lambda2(L) > 0".into(),
        lhs: lam2,
        rhs: 0.0,
        applicable: n > 1,
        pass: connected,
    }];
    let mohar = 4.0 / (nf * nf);
    out.push(SpectralCheck {
        inequality: "lambda2(L) >= 4/N^2".into(),
        lhs: lam2,
        rhs: mohar,
        applicable: n > 1 && connected,
        pass: n <= 1 || (connected && lam2 + SPECTRAL_MARGIN >= mohar),
    });
    let applicable = connected && n > 1 && gamma >= nf / lam2;
    let floor = 1.0 / (4.0 * nf);
    out.push(SpectralCheck {
        inequality: "gamma >= N/lambda2 => lambda_min(gamma L + e1 e1^T) >= 1/(4N)".into(),
        lhs: lam_min,
        rhs: floor,
        applicable,
        pass: !applicable || lam_min + SPECTRAL_MARGIN >= floor,
    });
    out.push(SpectralCheck {
        inequality: "gamma L + e1 e1^T positive definite".into(),
        lhs: lam_min,
        rhs: 0.0,
        applicable: connected && gamma > 0.0,
        pass: !connected || lam_min > 0.0,
    });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub t_x: f64,
    pub t_y: f64,
    pub t_z: f64,
    /// T_x + T_y + T_z.
    pub t_apriori: f64,
    /// T_x + K*(T_y + T_z), when K* is known.
    pub t_adaptive: Option<f64>,
    pub gain_checks: Vec<GainCheck>,
    pub spectral_checks: Vec<SpectralCheck>,
}

pub fn apriori_bound(t_x: f64, t_y: f64, t_z: f64) -> f64 {
    t_x + t_y + t_z
}

pub fn adaptive_bound(t_x: f64, t_y: f64, t_z: f64, k_star: usize) -> f64 {
    t_x + k_star as f64 * (t_y + t_z)
}

impl BoundReport {
    pub fn new(gains: &GainSet, n_bar: usize, omega: usize, k_star: Option<usize>) -> Self {
        let t_x = time_bound_x(n_bar, gains.h_x);
        let t_y = time_bound_y(n_bar, gains.h_y);
        let t_z = time_bound_z(gains.beta, n_bar, omega);
        Self {
            t_x,
            t_y,
            t_z,
            t_apriori: apriori_bound(t_x, t_y, t_z),
            t_adaptive: k_star.map(|k| adaptive_bound(t_x, t_y, t_z, k)),
            gain_checks: gain_checks(gains, n_bar, omega),
            spectral_checks: Vec::new(),
        }
    }

    pub fn with_spectral(mut self, laplacian: &DMatrix<f64>, leader_row: usize, gamma: f64) -> Self {
        self.spectral_checks = spectral_checks(laplacian, leader_row, gamma);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkTimeline;

    // Frozen with 50-digit arithmetic (mpmath):
    //   0.2*ln(4*51*sqrt(50)/(2-sqrt(2)))  = 1.56178629865957195806...
    //   0.2*ln(4*50*sqrt(50)/(2-sqrt(2)))  = 1.55782577320033601545...
    //   50*ln(1000)                        = 345.387763949106852602...
    const T_Y_RING40: f64 = 1.561_786_298_659_572;
    const T_X_RING40: f64 = 1.557_825_773_200_336;
    const T_Z_RING40: f64 = 345.387_763_949_106_85;

    #[test]
    fn time_bounds_match_frozen_values() {
        assert!((time_bound_y(50, 1e3) - T_Y_RING40).abs() < 1e-12);
        assert!((time_bound_x(50, 1e3) - T_X_RING40).abs() < 1e-12);
        assert!((time_bound_z(0.02, 50, 10) - T_Z_RING40).abs() < 1e-9);
        let ratio = time_bound_y(50, 1e3) / time_bound_y(50, 2e3);
        assert!((ratio - 2.0).abs() < 1e-12);
        assert!(time_bound_x(50, 1e3) < time_bound_y(50, 1e3));
    }

    #[test]
    fn deviation_bound_cases() {
        assert!((deviation_bound(40, 6.4e4) - 2f64.sqrt() / 4.0).abs() < 1e-12);
        assert!((deviation_bound(7, 343.0) - 0.353_553_390_593_273_8).abs() < 1e-12);
        assert!((deviation_bound(5, 10.0) / deviation_bound(5, 20.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn paper_exact_preset_reproduces_reference_gains() {
        let g = select_gains(50, 10, GainPreset::PaperExact);
        assert_eq!(g.gamma_x, 1.25e5);
        assert_eq!(g.h_x, 1e3);
        assert_eq!(g.h_y, 1e3);
        assert!((g.beta - 0.02).abs() < 1e-15);
        assert_eq!(g.g, 10.0);
        assert!((g.gamma_z - 2.5e4).abs() < 1e-9);
        // g = β N̄ |Ω| sits on the boundary of the strict inequality.
        let checks = gain_checks(&g, 50, 10);
        assert!(!checks.iter().find(|c| c.name == "g").unwrap().pass);
    }

    #[test]
    fn strict_and_desk_presets_pass_every_check() {
        for preset in [GainPreset::PaperStrict, GainPreset::Desk] {
            for (nb, om) in [(8, 4), (50, 10), (3, 7), (12, 2)] {
                let g = select_gains(nb, om, preset);
                assert!(gain_checks(&g, nb, om).iter().all(|c| c.pass), "{preset:?} {nb} {om}");
            }
        }
        let g = select_gains(50, 10, GainPreset::PaperStrict);
        assert!((g.g - 11.0).abs() < 1e-12);
    }

    #[test]
    fn phi_sup_worst_dominates_agentwise_sup() {
        for la in 1..=6 {
            for n in 1..=9 {
                for k in 1..=n {
                    assert!(phi_sup(la, n, k, 0.1, 2.0, 9) <= phi_sup_worst(9, 6, 0.1, 2.0) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn cycle_and_complete_spectra() {
        // C_n spectrum is {2 - 2cos(2πj/n)}; K_n spectrum is {0, n, ..., n}.
        let c4 = NetworkTimeline::ring(4, &["a"; 4]).unwrap();
        let ev = sorted_eigenvalues(&c4.initial().laplacian());
        let mut oracle: Vec<f64> = (0..4)
            .map(|j| 2.0 - 2.0 * (2.0 * std::f64::consts::PI * j as f64 / 4.0).cos())
            .collect();
        oracle.sort_by(f64::total_cmp);
        for (a, b) in ev.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((algebraic_connectivity(&c4.initial().laplacian()) - 2.0).abs() < 1e-9);
        let k3 = NetworkTimeline::complete(3, &["a"; 3]).unwrap();
        assert!((algebraic_connectivity(&k3.initial().laplacian()) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn spectral_checks_hold_on_small_graphs() {
        let c4 = NetworkTimeline::ring(4, &["a"; 4]).unwrap();
        let checks = spectral_checks(&c4.initial().laplacian(), 0, 64.0);
        assert!(checks.iter().all(|c| c.pass));
        assert!((checks[1].lhs - 2.0).abs() < 1e-9);
        assert!((checks[1].rhs - 0.25).abs() < 1e-15);
    }

    #[test]
    fn disconnected_laplacian_reports_zero_connectivity() {
        let mut l = DMatrix::zeros(4, 4);
        for (a, b) in [(0usize, 1usize), (2, 3)] {
            l[(a, a)] += 1.0;
            l[(b, b)] += 1.0;
            l[(a, b)] -= 1.0;
            l[(b, a)] -= 1.0;
        }
        let checks = spectral_checks(&l, 0, 64.0);
        assert_eq!(checks[0].lhs, 0.0);
        assert!(!checks[0].pass);
    }

    #[test]
    fn bound_totals() {
        let g = select_gains(50, 10, GainPreset::PaperExact);
        let r = BoundReport::new(&g, 50, 10, Some(3));
        assert!((r.t_apriori - (r.t_x + r.t_y + r.t_z)).abs() < 1e-12);
        assert!((r.t_adaptive.unwrap() - (r.t_x + 3.0 * (r.t_y + r.t_z))).abs() < 1e-9);
        assert!(r.t_x > 0.0 && r.t_y > 0.0 && r.t_z > 0.0);
    }
}
