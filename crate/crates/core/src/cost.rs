//! Computational cost model in scalar products of length `n` (SPs) per node
//! per outer iteration.

use serde::{Deserialize, Serialize};

use crate::objectives::ProblemKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Jacobi overrelaxation on the diagonal splitting.
    Indo,
    /// Block-diagonal Taylor splitting with dense local inverses.
    Esom,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Indo => "INDO",
            Variant::Esom => "ESOM",
        }
    }
}

/// SP cost of one outer iteration with `inner` inner iterations at one node
/// holding `samples` data points (ignored for quadratics).
///
/// Common part: derivative evaluation, one consensus product for `g`,
/// `inner` local matrix-vector products and `inner` neighbor sums. INDO adds
/// `n * inner` for its diagonal scalings; ESOM adds `n^2 / 6` for a dense
/// factorization, which quadratics pay only on the first iteration.
pub fn sp_cost(
    variant: Variant,
    kind: ProblemKind,
    samples: f64,
    dim: usize,
    nodes: usize,
    inner: usize,
    first_iteration: bool,
) -> f64 {
    let n = dim as f64;
    let big_n = nodes as f64;
    let ell = inner as f64;
    let derivatives = match kind {
        ProblemKind::Logistic => samples * (2.0 + n / 2.0),
        ProblemKind::Quadratic => n,
    };
    let common = derivatives + big_n + n * ell + big_n * ell / n;
    let specific = match (variant, kind) {
        (Variant::Indo, _) => n * ell,
        (Variant::Esom, ProblemKind::Logistic) => n * n / 6.0,
        (Variant::Esom, ProblemKind::Quadratic) => {
            if first_iteration {
                n * n / 6.0
            } else {
                0.0
            }
        }
    };
    common + specific
}

/// SPs of `steps` extra JOR iterations (diagonal scaling, local product and
/// neighbor sum each), charged when an initial direction solve runs.
pub fn jor_step_cost(dim: usize, nodes: usize, steps: usize) -> f64 {
    let n = dim as f64;
    steps as f64 * (2.0 * n + nodes as f64 / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_reference_values() {
        let indo = sp_cost(Variant::Indo, ProblemKind::Logistic, 100.0, 100, 30, 1, false);
        let esom = sp_cost(Variant::Esom, ProblemKind::Logistic, 100.0, 100, 30, 1, false);
        assert!((indo - 5430.3).abs() < 1e-9);
        assert!((esom - (5330.3 + 10000.0 / 6.0)).abs() < 1e-9);
        assert!((esom - 6997.0).abs() < 0.05);
    }

    #[test]
    fn second_inner_iteration_increment() {
        let one = sp_cost(Variant::Indo, ProblemKind::Logistic, 100.0, 100, 30, 1, false);
        let two = sp_cost(Variant::Indo, ProblemKind::Logistic, 100.0, 100, 30, 2, false);
        assert!((two - one - 200.3).abs() < 1e-9);
    }

    #[test]
    fn gap_is_quadratic_minus_linear() {
        for (n, ell) in [(5, 1), (6, 1), (100, 2), (754, 3)] {
            let indo = sp_cost(Variant::Indo, ProblemKind::Logistic, 37.0, n, 30, ell, false);
            let esom = sp_cost(Variant::Esom, ProblemKind::Logistic, 37.0, n, 30, ell, false);
            let gap = (n * n) as f64 / 6.0 - (n * ell) as f64;
            assert!((esom - indo - gap).abs() < 1e-9 * esom);
            assert_eq!(esom > indo, n > 6 * ell);
        }
    }

    #[test]
    fn quadratic_esom_pays_factorization_once() {
        let first = sp_cost(Variant::Esom, ProblemKind::Quadratic, 0.0, 100, 30, 1, true);
        let later = sp_cost(Variant::Esom, ProblemKind::Quadratic, 0.0, 100, 30, 1, false);
        assert!((first - later - 10000.0 / 6.0).abs() < 1e-9);
        let indo = sp_cost(Variant::Indo, ProblemKind::Quadratic, 0.0, 100, 30, 1, false);
        assert!((indo - (100.0 + 30.0 + 100.0 + 0.3 + 100.0)).abs() < 1e-9);
    }
}
