//! Cross-sample dispersion: the posterior variance function and its
//! coefficient-of-variation standardization.
//!
//! The variance of a new sample's density at `x`, given the common structure
//! and averaged over it, is a difference of two products over the nodes
//! containing `x`:
//!
//! ```text
//! v(x) = q0(x)^2 * ( E[ prod ||A||^2 E(theta (theta tau + 1) / (tau + 1)) / ||A_child||^2 ]
//!                  - E[ prod ||A||^2 E(theta^2) / ||A_child||^2 ] )
//! ```
//!
//! with the right-child analogues on right steps. Both products are evaluated
//! through the fitted state recursion sharing one upward pass of reusable
//! messages; the per-node inner expectations are the `vL/vR/m2` moment
//! columns carried by the node tables.

use serde::{Deserialize, Serialize};

use crate::error::{HaptError, Result};
use crate::node_posterior::MomentLevel;
use crate::tree_hmm::HaptFit;

/// Dispersion summaries on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionGrid {
    pub points: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub cv: Vec<f64>,
}

fn require_moments(fit: &HaptFit) -> Result<()> {
    if fit.options().quad.moments == MomentLevel::EvidenceOnly {
        return Err(HaptError::invalid("fit was built without moment tables".into()));
    }
    Ok(())
}

/// `E_q[Var(q_star(x) | q)]`, the pointwise cross-sample variance of a new
/// sample's density.
pub fn variance_function(fit: &HaptFit, x: f64) -> Result<f64> {
    require_moments(fit)?;
    let path = fit.tree().path_to_leaf(x)?;
    let q0 = fit.tree().base_density(x)?;

    let second_moment = fit.expect_on_path(&path, |pos, s| {
        let (node, left) = path[pos];
        let table = fit.node_table(node);
        let theta0 = fit.tree().theta0(node);
        if left {
            table.v_left[s].ln() - 2.0 * theta0.ln()
        } else {
            table.v_right[s].ln() - 2.0 * (1.0 - theta0).ln()
        }
    });
    let mean_square = fit.expect_on_path(&path, |pos, s| {
        let (node, left) = path[pos];
        let table = fit.node_table(node);
        let theta0 = fit.tree().theta0(node);
        if left {
            table.m2[s].ln() - 2.0 * theta0.ln()
        } else {
            (1.0 - 2.0 * table.m1[s] + table.m2[s]).ln() - 2.0 * (1.0 - theta0).ln()
        }
    });

    let v = q0 * q0 * (second_moment - mean_square);
    if v < 0.0 {
        // The difference of products is cancellation prone under strong
        // shrinkage; clamp losses below the noise floor and count them.
        let floor = 1e-12 * q0 * q0 * second_moment.max(1.0);
        if v > -floor {
            fit.bump_clamp_count();
            return Ok(0.0);
        }
        return Err(HaptError::NonFinite {
            context: format!("variance function returned {v} at x = {x}"),
        });
    }
    Ok(v)
}

/// Coefficient of variation: `sqrt(v(x)) / E[q(x)]`.
pub fn cv_function(fit: &HaptFit, x: f64) -> Result<f64> {
    let v = variance_function(fit, x)?;
    if v == 0.0 {
        return Ok(0.0);
    }
    let mean = fit.mean_density(x)?;
    if mean < 1e-300 {
        return Err(HaptError::NonFinite {
            context: format!("mean density underflow at x = {x}"),
        });
    }
    Ok(v.sqrt() / mean)
}

/// Evaluates mean density, variance, and CV on a uniform grid over the
/// domain. The left endpoint is nudged inside the half-open domain.
pub fn dispersion_grid(fit: &HaptFit, n_points: usize) -> Result<DispersionGrid> {
    if n_points < 2 {
        return Err(HaptError::invalid(format!("need at least 2 grid points, got {n_points}")));
    }
    let (lo, hi) = fit.tree().domain();
    let span = hi - lo;
    let points: Vec<f64> = (0..n_points)
        .map(|j| {
            let t = j as f64 / (n_points - 1) as f64;
            (lo + t * span).max(lo + span * 1e-12)
        })
        .collect();
    let mut mean = Vec::with_capacity(n_points);
    let mut variance = Vec::with_capacity(n_points);
    let mut cv = Vec::with_capacity(n_points);
    for &x in &points {
        mean.push(fit.mean_density(x)?);
        variance.push(variance_function(fit, x)?);
        cv.push(cv_function(fit, x)?);
    }
    Ok(DispersionGrid { points, mean, variance, cv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{BaseMeasure, CountTable, PartitionTree};
    use crate::sis::SisConfig;
    use crate::tree_hmm::{fit, FitOptions};

    #[test]
    fn complete_shrinkage_kills_dispersion() {
        let tree = PartitionTree::build(3, (0.0, 1.0), BaseMeasure::Uniform).unwrap();
        let counts = CountTable::from_samples(&tree, &[vec![0.2, 0.6], vec![0.4, 0.9]]).unwrap();
        let tau = SisConfig::default_config(2).unwrap().with_root_dist(vec![0.0, 1.0]).unwrap();
        let nu = SisConfig::default_config(4).unwrap();
        let f = fit(&tree, &counts, &tau, &nu, &FitOptions::default()).unwrap();
        for x in [0.1, 0.5, 0.96] {
            assert!(variance_function(&f, x).unwrap().abs() < 1e-12);
            assert_eq!(cv_function(&f, x).unwrap(), 0.0);
        }
    }

    #[test]
    fn depth_one_point_tau_prior_variance() {
        // theta pinned at 1/2 by complete nu shrinkage, tau a point mass at
        // 2, no data: theta_star ~ Beta(1, 1), so Var(theta_star) = 1/12 and
        // v(x) = 4 * (E[theta_star^2] - E[theta]^2) = 4 * 1/12 = 1/3.
        let tree = PartitionTree::build(1, (0.0, 1.0), BaseMeasure::Uniform).unwrap();
        let counts = CountTable::from_samples(&tree, &[vec![]]).unwrap();
        let tau = SisConfig::single_point(2.0).unwrap();
        let nu = SisConfig::fully_shrunk();
        let f = fit(&tree, &counts, &tau, &nu, &FitOptions::default()).unwrap();
        for x in [0.3, 0.8] {
            let v = variance_function(&f, x).unwrap();
            assert!((v - 1.0 / 3.0).abs() < 1e-10, "v {v}");
            let cv = cv_function(&f, x).unwrap();
            assert!((cv - (1.0f64 / 3.0).sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn variance_nonnegative_and_grid_matches_pointwise() {
        let tree = PartitionTree::build(4, (0.0, 1.0), BaseMeasure::Uniform).unwrap();
        let counts = CountTable::from_samples(
            &tree,
            &[vec![0.05, 0.1, 0.2, 0.9, 0.95], vec![0.4, 0.5, 0.6, 0.85]],
        )
        .unwrap();
        let tau = SisConfig::default_config(4).unwrap();
        let nu = SisConfig::default_config(4).unwrap();
        let f = fit(&tree, &counts, &tau, &nu, &FitOptions::default()).unwrap();
        let grid = dispersion_grid(&f, 33).unwrap();
        for (j, &x) in grid.points.iter().enumerate() {
            assert!(grid.variance[j] >= 0.0);
            assert_eq!(grid.variance[j], variance_function(&f, x).unwrap());
            assert_eq!(grid.cv[j], cv_function(&f, x).unwrap());
            assert_eq!(grid.mean[j], f.mean_density(x).unwrap());
        }
        assert!(dispersion_grid(&f, 1).is_err());
    }
}
