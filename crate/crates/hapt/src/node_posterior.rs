//! Per-node posterior integration.
//!
//! For one node of the partition tree, conditional on a shrinkage-state pair,
//! the joint posterior of the split probability `theta`, the cross-sample
//! concentration `tau`, and the smoothness concentration `nu` is
//!
//! ```text
//! pi(theta, tau, nu | s_tau, s_nu, X) proportional to
//!     theta^(theta0 nu - 1) (1 - theta)^((1 - theta0) nu - 1)
//!   * prod_i B(theta tau + n_i(L), (1 - theta) tau + n_i(R)) / B(theta tau, (1 - theta) tau)
//!   * pi(tau | s_tau) pi(nu | s_nu).
//! ```
//!
//! The integrand factors as `g(theta, tau) * h(theta, nu)`, so the local
//! evidence and every posterior moment needed downstream reduce to one
//! adaptive pass over `theta` with nested one-dimensional integrals in
//! `log(tau)` and `log(nu)` on shared abscissae. Complete-shrinkage states
//! are handled analytically: `s_nu = I` pins `theta = theta0`, and
//! `s_tau = I` collapses the sample-level likelihood to
//! `theta^n(L) (1 - theta)^n(R)`.

use serde::{Deserialize, Serialize};

use crate::error::{HaptError, Result};
use crate::quad::{integrate_log_vec, QuadResult};
use crate::sis::{SisConfig, StateSupport};
use crate::special::lbeta;

const FRAC_PI_2: f64 = std::f64::consts::FRAC_PI_2;

/// Which posterior expectations to carry alongside the evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MomentLevel {
    /// Only `log Z`; cheapest, used by marginal-likelihood sweeps.
    EvidenceOnly,
    /// Evidence plus the shared moments `m1, m2, vL, vR`.
    Common,
    /// Everything, including per-sample predictive split means.
    PerSample,
}

/// Quadrature controls for the node integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadOptions {
    /// Relative tolerance per node integral.
    pub rel_tol: f64,
    /// Panel budget for the outer `theta` integral.
    pub max_outer_panels: usize,
    /// Panel budget for each inner `tau`/`nu` integral.
    pub max_inner_panels: usize,
    pub moments: MomentLevel,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions {
            rel_tol: 1e-8,
            max_outer_panels: 400,
            max_inner_panels: 64,
            moments: MomentLevel::PerSample,
        }
    }
}

impl QuadOptions {
    pub fn with_moments(mut self, moments: MomentLevel) -> Self {
        self.moments = moments;
        self
    }

    pub fn with_rel_tol(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }
}

/// Inputs of a single node: the base split and per-sample child counts.
#[derive(Debug, Clone, Copy)]
pub struct NodeInput<'a> {
    pub theta0: f64,
    /// Per-sample `(n_i(left), n_i(right))`.
    pub counts: &'a [(u64, u64)],
}

impl<'a> NodeInput<'a> {
    fn validate(&self) -> Result<()> {
        if !(self.theta0 > 0.0 && self.theta0 < 1.0) {
            return Err(HaptError::invalid(format!("theta0 must lie in (0, 1), got {}", self.theta0)));
        }
        if self.counts.is_empty() {
            return Err(HaptError::invalid("need at least one sample".into()));
        }
        Ok(())
    }
}

/// Local evidence and posterior moments for one state pair.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEvidence {
    pub log_evidence: f64,
    /// `E[theta | s, X]`.
    pub m1: f64,
    /// `E[theta^2 | s, X]`.
    pub m2: f64,
    /// `E[theta (theta tau + 1) / (tau + 1) | s, X]`: the left-child factor of
    /// the dispersion variance product.
    pub v_left: f64,
    /// Right-child counterpart of `v_left`.
    pub v_right: f64,
    /// Per-sample `E[(theta tau + n_i(L)) / (tau + n_i) | s, X]`: conjugate
    /// posterior split means of the sample-level trees.
    pub split_means: Vec<f64>,
}

/// Evidence and moments for every joint state pair of one node, laid out as
/// `[s_tau * n_nu + s_nu]` over 0-based state indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTable {
    pub n_tau: usize,
    pub n_nu: usize,
    pub k: usize,
    pub moments: MomentLevel,
    pub log_z: Vec<f64>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub v_left: Vec<f64>,
    pub v_right: Vec<f64>,
    /// `[(s_tau * n_nu + s_nu) * k + i]`; empty unless `PerSample`.
    pub split_means: Vec<f64>,
}

impl NodeTable {
    #[inline]
    pub fn idx(&self, s_tau: usize, s_nu: usize) -> usize {
        s_tau * self.n_nu + s_nu
    }

    pub fn evidence(&self, s_tau: usize, s_nu: usize) -> NodeEvidence {
        let j = self.idx(s_tau, s_nu);
        let split_means = if self.split_means.is_empty() {
            Vec::new()
        } else {
            self.split_means[j * self.k..(j + 1) * self.k].to_vec()
        };
        NodeEvidence {
            log_evidence: self.log_z[j],
            m1: self.m1.get(j).copied().unwrap_or(f64::NAN),
            m2: self.m2.get(j).copied().unwrap_or(f64::NAN),
            v_left: self.v_left.get(j).copied().unwrap_or(f64::NAN),
            v_right: self.v_right.get(j).copied().unwrap_or(f64::NAN),
            split_means,
        }
    }
}

/// Evidence for a single `(s_tau, s_nu)` pair, 1-based state labels.
pub fn local_evidence(
    input: NodeInput<'_>,
    s_tau: usize,
    s_nu: usize,
    sis_tau: &SisConfig,
    sis_nu: &SisConfig,
    opts: &QuadOptions,
) -> Result<NodeEvidence> {
    if s_tau == 0 || s_tau > sis_tau.state_count() || s_nu == 0 || s_nu > sis_nu.state_count() {
        return Err(HaptError::invalid(format!("state pair ({s_tau}, {s_nu}) out of range")));
    }
    let table = evidence_table(input, sis_tau, sis_nu, opts)?;
    Ok(table.evidence(s_tau - 1, s_nu - 1))
}

struct Accum {
    max_rel_err: f64,
    converged: bool,
}

impl Accum {
    fn absorb(&mut self, r: &QuadResult) {
        if r.rel_err > self.max_rel_err {
            self.max_rel_err = r.rel_err;
        }
        self.converged &= r.converged;
    }
}

/// Length of a finite-tau inner component vector.
fn inner_len(moments: MomentLevel, n_data: usize) -> usize {
    match moments {
        MomentLevel::EvidenceOnly => 1,
        MomentLevel::Common => 3,
        MomentLevel::PerSample => 3 + n_data,
    }
}

/// Length of one finite-(tau, nu) outer block.
fn block_len(moments: MomentLevel, n_data: usize) -> usize {
    match moments {
        MomentLevel::EvidenceOnly => 1,
        MomentLevel::Common => 5,
        MomentLevel::PerSample => 5 + n_data,
    }
}

/// Length of one (absorbed-tau, finite-nu) outer block.
fn abs_block_len(moments: MomentLevel) -> usize {
    match moments {
        MomentLevel::EvidenceOnly => 1,
        MomentLevel::Common | MomentLevel::PerSample => 3,
    }
}

/// Computes evidence and moments for all joint state pairs of one node in a
/// single factorized quadrature pass.
pub fn evidence_table(
    input: NodeInput<'_>,
    sis_tau: &SisConfig,
    sis_nu: &SisConfig,
    opts: &QuadOptions,
) -> Result<NodeTable> {
    input.validate()?;
    let k = input.counts.len();
    let theta0 = input.theta0;
    let n_tau = sis_tau.state_count();
    let n_nu = sis_nu.state_count();
    let moments = opts.moments;

    let nl_tot: u64 = input.counts.iter().map(|c| c.0).sum();
    let nr_tot: u64 = input.counts.iter().map(|c| c.1).sum();
    let n_tot = nl_tot + nr_tot;

    // Samples with data, and count pairs deduplicated with multiplicities;
    // empty samples contribute a unit likelihood factor and a split mean
    // equal to E[theta].
    let mut data_samples: Vec<(usize, f64, f64)> = Vec::new(); // (index, nl, n)
    let mut distinct: Vec<(f64, f64, f64)> = Vec::new(); // (nl, nr, multiplicity)
    for (i, &(nl, nr)) in input.counts.iter().enumerate() {
        if nl + nr == 0 {
            continue;
        }
        data_samples.push((i, nl as f64, (nl + nr) as f64));
        let key = (nl as f64, nr as f64);
        match distinct.iter_mut().find(|d| d.0 == key.0 && d.1 == key.1) {
            Some(d) => d.2 += 1.0,
            None => distinct.push((key.0, key.1, 1.0)),
        }
    }
    let n_data = data_samples.len();

    let mut table = NodeTable {
        n_tau,
        n_nu,
        k,
        moments,
        log_z: vec![f64::NAN; n_tau * n_nu],
        m1: vec![f64::NAN; n_tau * n_nu],
        m2: vec![f64::NAN; n_tau * n_nu],
        v_left: vec![f64::NAN; n_tau * n_nu],
        v_right: vec![f64::NAN; n_tau * n_nu],
        split_means: if moments == MomentLevel::PerSample {
            vec![f64::NAN; n_tau * n_nu * k]
        } else {
            Vec::new()
        },
    };

    // With no data every state pair has unit evidence; moments still need the
    // prior integrals below.
    if n_tot == 0 && moments == MomentLevel::EvidenceOnly {
        table.log_z.fill(0.0);
        return Ok(table);
    }

    let mut acc = Accum { max_rel_err: 0.0, converged: true };
    let inner_tol = (opts.rel_tol * 0.05).max(1e-14);

    // log m(theta, tau): pooled likelihood ratio of Beta functions. `omt` is
    // 1 - theta computed exactly from the substitution, so right-heavy nodes
    // keep full precision when theta approaches one.
    let log_m = |theta: f64, omt: f64, tau: f64| -> f64 {
        if distinct.is_empty() {
            return 0.0;
        }
        let at = theta * tau;
        let bt = omt * tau;
        let lb0 = lbeta(at, bt);
        let mut s = 0.0;
        for &(nl, nr, mult) in &distinct {
            s += mult * (lbeta(at + nl, bt + nr) - lb0);
        }
        s
    };

    // Inner tau integrals for each finite tau state: fills `out` with
    // [g0, gvl, gvr, gp_1..gp_D] (truncated per moment level) in log space.
    let tau_inner = |support: StateSupport,
                     theta: f64,
                     omt: f64,
                     out: &mut [f64],
                     acc: &mut Accum|
     -> Result<()> {
        let fill = |tau: f64, ln_prior: f64, out: &mut [f64]| {
            let lm = log_m(theta, omt, tau) + ln_prior;
            out[0] = lm;
            if out.len() > 1 {
                out[1] = lm + ((theta * tau + 1.0) / (tau + 1.0)).ln();
                out[2] = lm + ((omt * tau + 1.0) / (tau + 1.0)).ln();
                for (slot, &(_, nl, n)) in out[3..].iter_mut().zip(data_samples.iter()) {
                    *slot = lm + ((theta * tau + nl) / (tau + n)).ln();
                }
            }
        };
        match support {
            StateSupport::Point(v) => {
                fill(v, 0.0, out);
                Ok(())
            }
            StateSupport::Interval { lo, hi } => {
                let (tl, th) = (lo.ln(), hi.ln());
                let ln_norm = -((th - tl).ln());
                let r = integrate_log_vec(
                    |t, buf| fill(t.exp(), ln_norm, buf),
                    &[tl, 0.5 * (tl + th), th],
                    out.len(),
                    inner_tol,
                    opts.max_inner_panels,
                    "tau integral",
                )?;
                acc.absorb(&r);
                out.copy_from_slice(&r.log_values);
                Ok(())
            }
            StateSupport::Infinite => unreachable!("absorbing tau handled analytically"),
        }
    };

    // Marginal prior density of theta given a finite nu state, in log space.
    let nu_marginal = |support: StateSupport,
                       ln_theta: f64,
                       ln_1m: f64,
                       acc: &mut Accum|
     -> Result<f64> {
        let kernel = |nu: f64| {
            (theta0 * nu - 1.0) * ln_theta + ((1.0 - theta0) * nu - 1.0) * ln_1m
                - lbeta(theta0 * nu, (1.0 - theta0) * nu)
        };
        match support {
            StateSupport::Point(v) => Ok(kernel(v)),
            StateSupport::Interval { lo, hi } => {
                let (tl, th) = (lo.ln(), hi.ln());
                let ln_norm = -((th - tl).ln());
                let r = integrate_log_vec(
                    |t, buf| buf[0] = kernel(t.exp()) + ln_norm,
                    &[tl, 0.5 * (tl + th), th],
                    1,
                    inner_tol,
                    opts.max_inner_panels,
                    "nu integral",
                )?;
                acc.absorb(&r);
                Ok(r.log_values[0])
            }
            StateSupport::Infinite => unreachable!("absorbing nu handled analytically"),
        }
    };

    let finite_tau: Vec<(usize, StateSupport)> = (0..n_tau)
        .filter(|&s| !sis_tau.is_absorbing(s + 1))
        .map(|s| (s, sis_tau.support(s + 1).unwrap()))
        .collect();
    let finite_nu: Vec<(usize, StateSupport)> = (0..n_nu)
        .filter(|&s| !sis_nu.is_absorbing(s + 1))
        .map(|s| (s, sis_nu.support(s + 1).unwrap()))
        .collect();
    let has_abs_tau = finite_tau.len() < n_tau;
    let has_abs_nu = finite_nu.len() < n_nu;

    let ilen = inner_len(moments, n_data);
    let blen = block_len(moments, n_data);
    let ablen = abs_block_len(moments);

    // Outer pass over theta, substituted as theta = sin^2(pi u / 2) so that
    // prior-type endpoint singularities (theta0 * nu < 1) stay integrable
    // under panel bisection.
    if !finite_nu.is_empty() {
        let n_comp = finite_nu.len() * (finite_tau.len() * blen + usize::from(has_abs_tau) * ablen);
        let mut failure: Option<HaptError> = None;
        let theta_hat = (nl_tot as f64 + 1.0) / (n_tot as f64 + 2.0);
        let spread = (theta_hat * (1.0 - theta_hat) / (n_tot as f64 + 3.0)).sqrt();
        let mut breaks = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        for c in [-30.0, -8.0, 0.0, 8.0, 30.0] {
            let t = (theta_hat + c * spread).clamp(1e-15, 1.0 - 1e-15);
            breaks.push((t.sqrt().asin()) / FRAC_PI_2);
        }
        breaks.sort_by(f64::total_cmp);
        breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

        let outer = integrate_log_vec(
            |u, out| {
                let s = (FRAC_PI_2 * u).sin();
                let c = (FRAC_PI_2 * u).cos();
                let theta = (s * s).clamp(f64::MIN_POSITIVE, 1.0 - 1e-16);
                let ln_theta = 2.0 * s.ln();
                let ln_1m = 2.0 * c.ln();
                let lw = (FRAC_PI_2 * (std::f64::consts::PI * u).sin().max(f64::MIN_POSITIVE)).ln();
                if failure.is_some() {
                    out.fill(f64::NEG_INFINITY);
                    return;
                }
                let omt = (c * c).clamp(f64::MIN_POSITIVE, 1.0 - 1e-16);
                let mut g = vec![f64::NEG_INFINITY; finite_tau.len() * ilen];
                for (bi, &(_, sup)) in finite_tau.iter().enumerate() {
                    if let Err(e) = tau_inner(
                        sup,
                        theta,
                        omt,
                        &mut g[bi * ilen..(bi + 1) * ilen],
                        &mut acc,
                    ) {
                        failure = Some(e);
                        out.fill(f64::NEG_INFINITY);
                        return;
                    }
                }
                let g0_abs = nl_tot as f64 * ln_theta + nr_tot as f64 * ln_1m;
                let mut pos = 0;
                for &(_, nu_sup) in &finite_nu {
                    let lh = match nu_marginal(nu_sup, ln_theta, ln_1m, &mut acc) {
                        Ok(v) => v + lw,
                        Err(e) => {
                            failure = Some(e);
                            out.fill(f64::NEG_INFINITY);
                            return;
                        }
                    };
                    for (bi, _) in finite_tau.iter().enumerate() {
                        let gb = &g[bi * ilen..(bi + 1) * ilen];
                        out[pos] = lh + gb[0];
                        if blen > 1 {
                            out[pos + 1] = lh + gb[0] + ln_theta;
                            out[pos + 2] = lh + gb[0] + 2.0 * ln_theta;
                            out[pos + 3] = lh + gb[1] + ln_theta;
                            out[pos + 4] = lh + gb[2] + ln_1m;
                            for d in 0..blen - 5 {
                                out[pos + 5 + d] = lh + gb[3 + d];
                            }
                        }
                        pos += blen;
                    }
                    if has_abs_tau {
                        out[pos] = lh + g0_abs;
                        if ablen > 1 {
                            out[pos + 1] = lh + g0_abs + ln_theta;
                            out[pos + 2] = lh + g0_abs + 2.0 * ln_theta;
                        }
                        pos += ablen;
                    }
                }
            },
            &breaks,
            n_comp,
            opts.rel_tol,
            opts.max_outer_panels,
            "theta integral",
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        acc.absorb(&outer);

        // Unpack blocks into the table.
        let vals = &outer.log_values;
        let mut pos = 0;
        for &(snu, _) in &finite_nu {
            for &(stau, _) in &finite_tau {
                let j = stau * n_nu + snu;
                let lz = vals[pos];
                table.log_z[j] = lz;
                if blen > 1 {
                    let m1 = (vals[pos + 1] - lz).exp();
                    let m2 = (vals[pos + 2] - lz).exp();
                    table.m1[j] = m1;
                    table.m2[j] = m2;
                    table.v_left[j] = (vals[pos + 3] - lz).exp();
                    table.v_right[j] = (vals[pos + 4] - lz).exp();
                    if moments == MomentLevel::PerSample {
                        for p in table.split_means[j * k..(j + 1) * k].iter_mut() {
                            *p = m1;
                        }
                        for (d, &(i, _, _)) in data_samples.iter().enumerate() {
                            table.split_means[j * k + i] = (vals[pos + 5 + d] - lz).exp();
                        }
                    }
                }
                pos += blen;
            }
            if has_abs_tau {
                let j = (n_tau - 1) * n_nu + snu;
                let lz = vals[pos];
                table.log_z[j] = lz;
                if ablen > 1 {
                    let m1 = (vals[pos + 1] - lz).exp();
                    let m2 = (vals[pos + 2] - lz).exp();
                    table.m1[j] = m1;
                    table.m2[j] = m2;
                    table.v_left[j] = m2;
                    table.v_right[j] = 1.0 - 2.0 * m1 + m2;
                    if moments == MomentLevel::PerSample {
                        for p in table.split_means[j * k..(j + 1) * k].iter_mut() {
                            *p = m1;
                        }
                    }
                }
                pos += ablen;
            }
        }
    }

    // Absorbing nu pins theta at theta0: finite tau states need only the
    // inner tau integrals evaluated at theta0.
    if has_abs_nu {
        let snu = n_nu - 1;
        let ln_theta = theta0.ln();
        let ln_1m = (1.0 - theta0).ln();
        for &(stau, sup) in &finite_tau {
            let mut g = vec![f64::NEG_INFINITY; ilen];
            tau_inner(sup, theta0, 1.0 - theta0, &mut g, &mut acc)?;
            let j = stau * n_nu + snu;
            table.log_z[j] = g[0];
            if moments != MomentLevel::EvidenceOnly {
                table.m1[j] = theta0;
                table.m2[j] = theta0 * theta0;
                table.v_left[j] = theta0 * (g[1] - g[0]).exp();
                table.v_right[j] = (1.0 - theta0) * (g[2] - g[0]).exp();
                if moments == MomentLevel::PerSample {
                    for p in table.split_means[j * k..(j + 1) * k].iter_mut() {
                        *p = theta0;
                    }
                    for (d, &(i, _, _)) in data_samples.iter().enumerate() {
                        table.split_means[j * k + i] = (g[3 + d] - g[0]).exp();
                    }
                }
            }
        }
        if has_abs_tau {
            let j = (n_tau - 1) * n_nu + snu;
            table.log_z[j] = nl_tot as f64 * ln_theta + nr_tot as f64 * ln_1m;
            if moments != MomentLevel::EvidenceOnly {
                table.m1[j] = theta0;
                table.m2[j] = theta0 * theta0;
                table.v_left[j] = theta0 * theta0;
                table.v_right[j] = (1.0 - theta0) * (1.0 - theta0);
                if moments == MomentLevel::PerSample {
                    for p in table.split_means[j * k..(j + 1) * k].iter_mut() {
                        *p = theta0;
                    }
                }
            }
        }
    }

    if !acc.converged && acc.max_rel_err > opts.rel_tol {
        return Err(HaptError::Quadrature {
            requested: opts.rel_tol,
            achieved: acc.max_rel_err,
            node: None,
        });
    }
    if table.log_z.iter().any(|v| v.is_nan()) {
        return Err(HaptError::NonFinite { context: "node evidence".into() });
    }
    Ok(table)
}
