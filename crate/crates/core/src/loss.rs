//! Mean/variance pairwise similarity loss.
//!
//! `total = var+ + var- + lambda * max(0, m - (u+ - u-))` over the scores of
//! matching (`+`) and non-matching (`-`) pairs, using population statistics.

use serde::{Deserialize, Serialize};

use crate::error::{GinError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda: f64,
    pub l2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.6,
            lambda: 0.35,
            l2: 0.005,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("margin", self.margin),
            ("lambda", self.lambda),
            ("l2", self.l2),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(GinError::Config(format!(
                    "loss.{name} must be >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub u_plus: f64,
    pub u_minus: f64,
    pub var_plus: f64,
    pub var_minus: f64,
    pub hinge: f64,
    /// Weight penalty; zero unless added by the caller that owns the weights.
    pub l2_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn with_l2(mut self, l2_term: f64) -> Self {
        self.l2_term = l2_term;
        self.total += l2_term;
        self
    }

    pub fn is_finite(&self) -> bool {
        [
            self.u_plus,
            self.u_minus,
            self.var_plus,
            self.var_minus,
            self.hinge,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn check_scores(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.len() < 2 || neg.len() < 2 {
        return Err(GinError::InvalidArgument(format!(
            "need at least 2 matching and 2 non-matching scores, got {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    if pos.iter().chain(neg).any(|s| !s.is_finite()) {
        return Err(GinError::Numeric("non-finite score".into()));
    }
    Ok(())
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let q = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / q;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / q;
    (mean, var)
}

pub fn pairwise_loss(
    pos_scores: &[f64],
    neg_scores: &[f64],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    check_scores(pos_scores, neg_scores)?;
    let (u_plus, var_plus) = mean_var(pos_scores);
    let (u_minus, var_minus) = mean_var(neg_scores);
    let hinge = (cfg.margin - (u_plus - u_minus)).max(0.0);
    Ok(LossBreakdown {
        u_plus,
        u_minus,
        var_plus,
        var_minus,
        hinge,
        l2_term: 0.0,
        total: var_plus + var_minus + cfg.lambda * hinge,
    })
}

/// Gradient of the (unregularized) total with respect to each score.
/// At the hinge kink the hinge contributes 0.
pub fn loss_gradient(
    pos_scores: &[f64],
    neg_scores: &[f64],
    cfg: &LossConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_scores(pos_scores, neg_scores)?;
    let (u_plus, _) = mean_var(pos_scores);
    let (u_minus, _) = mean_var(neg_scores);
    let q1 = pos_scores.len() as f64;
    let q2 = neg_scores.len() as f64;
    let active = cfg.margin - (u_plus - u_minus) > 0.0;
    let h = if active { cfg.lambda } else { 0.0 };
    // d var / d s_i = 2 (s_i - u) / Q (the mean's own dependence cancels).
    let gpos = pos_scores
        .iter()
        .map(|s| 2.0 * (s - u_plus) / q1 - h / q1)
        .collect();
    let gneg = neg_scores
        .iter()
        .map(|s| 2.0 * (s - u_minus) / q2 + h / q2)
        .collect();
    Ok((gpos, gneg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn standard_cfg() -> LossConfig {
        LossConfig {
            margin: 0.6,
            lambda: 0.35,
            l2: 0.0,
        }
    }

    #[test]
    fn separated_constant_scores_cost_nothing() {
        let b = pairwise_loss(&[1.0, 1.0], &[0.0, 0.0], &standard_cfg()).unwrap();
        assert_eq!(b.total, 0.0);
        assert_eq!(b.hinge, 0.0);
    }

    #[test]
    fn hinge_only_example() {
        let b = pairwise_loss(&[0.5, 0.5], &[0.3, 0.3], &standard_cfg()).unwrap();
        assert!((b.hinge - 0.4).abs() < 1e-12);
        assert!((b.total - 0.14).abs() < 1e-12);
    }

    #[test]
    fn variance_only_example() {
        let cfg = LossConfig {
            margin: 0.0,
            lambda: 1.0,
            l2: 0.0,
        };
        let b = pairwise_loss(&[1.0, 0.0], &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(b.u_plus, 0.5);
        assert_eq!(b.var_plus, 0.25);
        assert_eq!(b.u_minus, 0.0);
        assert_eq!(b.var_minus, 0.0);
        assert_eq!(b.hinge, 0.0);
        assert_eq!(b.total, 0.25);
    }

    #[test]
    fn too_few_scores() {
        assert!(pairwise_loss(&[1.0], &[0.0, 0.0], &standard_cfg()).is_err());
        assert!(loss_gradient(&[1.0, 2.0], &[0.0], &standard_cfg()).is_err());
        assert!(pairwise_loss(&[1.0, f64::NAN], &[0.0, 0.0], &standard_cfg()).is_err());
    }

    #[test]
    fn satisfied_constant_scores_have_zero_gradient() {
        let (gp, gn) = loss_gradient(&[2.0; 4], &[-1.0; 3], &standard_cfg()).unwrap();
        assert!(gp.iter().chain(&gn).all(|&g| g == 0.0));
    }

    #[test]
    fn kink_uses_zero_subgradient() {
        let cfg = LossConfig {
            margin: 0.5,
            lambda: 1.0,
            l2: 0.0,
        };
        let (gp, gn) = loss_gradient(&[0.5, 0.5], &[0.0, 0.0], &cfg).unwrap();
        assert!(gp.iter().chain(&gn).all(|&g| g == 0.0));
    }

    #[test]
    fn doubling_lambda_doubles_hinge_part() {
        let pos = [0.1, 0.3, -0.2];
        let neg = [0.2, 0.0, 0.4, 0.1];
        let mut cfg = standard_cfg();
        let no_hinge = LossConfig { lambda: 0.0, ..cfg };
        let (p0, n0) = loss_gradient(&pos, &neg, &no_hinge).unwrap();
        let (p1, n1) = loss_gradient(&pos, &neg, &cfg).unwrap();
        cfg.lambda *= 2.0;
        let (p2, n2) = loss_gradient(&pos, &neg, &cfg).unwrap();
        for i in 0..pos.len() {
            assert!(((p2[i] - p0[i]) - 2.0 * (p1[i] - p0[i])).abs() < 1e-15);
        }
        for i in 0..neg.len() {
            assert!(((n2[i] - n0[i]) - 2.0 * (n1[i] - n0[i])).abs() < 1e-15);
        }
    }

    fn fd_check(pos: &[f64], neg: &[f64], cfg: &LossConfig) {
        let (gp, gn) = loss_gradient(pos, neg, cfg).unwrap();
        let h = 1e-6;
        let f = |p: &[f64], n: &[f64]| pairwise_loss(p, n, cfg).unwrap().total;
        for i in 0..pos.len() {
            let mut a = pos.to_vec();
            let mut b = pos.to_vec();
            a[i] += h;
            b[i] -= h;
            let fd = (f(&a, neg) - f(&b, neg)) / (2.0 * h);
            let rel = (fd - gp[i]).abs() / fd.abs().max(gp[i].abs()).max(1e-3);
            assert!(rel < 1e-6, "pos {i}: fd {fd} analytic {}", gp[i]);
        }
        for i in 0..neg.len() {
            let mut a = neg.to_vec();
            let mut b = neg.to_vec();
            a[i] += h;
            b[i] -= h;
            let fd = (f(pos, &a) - f(pos, &b)) / (2.0 * h);
            let rel = (fd - gn[i]).abs() / fd.abs().max(gn[i].abs()).max(1e-3);
            assert!(rel < 1e-6, "neg {i}: fd {fd} analytic {}", gn[i]);
        }
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(
            pos in proptest::collection::vec(-2.0f64..2.0, 2..10),
            neg in proptest::collection::vec(-2.0f64..2.0, 2..10),
            margin in 0.0f64..2.0,
            lambda in 0.0f64..2.0,
        ) {
            let cfg = LossConfig { margin, lambda, l2: 0.0 };
            let up = pos.iter().sum::<f64>() / pos.len() as f64;
            let un = neg.iter().sum::<f64>() / neg.len() as f64;
            prop_assume!((margin - (up - un)).abs() > 1e-4);
            fd_check(&pos, &neg, &cfg);
        }

        #[test]
        fn translation_permutation_duplication_invariance(
            pos in proptest::collection::vec(-2.0f64..2.0, 2..10),
            neg in proptest::collection::vec(-2.0f64..2.0, 2..10),
            shift in -5.0f64..5.0,
        ) {
            let cfg = standard_cfg();
            let base = pairwise_loss(&pos, &neg, &cfg).unwrap().total;

            let sp: Vec<f64> = pos.iter().map(|s| s + shift).collect();
            let sn: Vec<f64> = neg.iter().map(|s| s + shift).collect();
            let shifted = pairwise_loss(&sp, &sn, &cfg).unwrap().total;
            prop_assert!((base - shifted).abs() < 1e-9);

            let mut rp = pos.clone();
            rp.reverse();
            let mut rn = neg.clone();
            rn.rotate_left(1);
            let permuted = pairwise_loss(&rp, &rn, &cfg).unwrap().total;
            prop_assert!((base - permuted).abs() < 1e-12);

            let dp: Vec<f64> = pos.iter().chain(&pos).copied().collect();
            let duplicated = pairwise_loss(&dp, &neg, &cfg).unwrap().total;
            prop_assert!((base - duplicated).abs() < 1e-12);
        }

        #[test]
        fn zero_total_iff_constant_and_separated(
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
            jitter in 0.0f64..0.1,
        ) {
            let cfg = standard_cfg();
            let t = pairwise_loss(&[a, a + jitter], &[b, b], &cfg).unwrap().total;
            let expect_zero = jitter == 0.0 && (a - b) >= cfg.margin;
            prop_assert_eq!(t == 0.0, expect_zero);
        }
    }
}
