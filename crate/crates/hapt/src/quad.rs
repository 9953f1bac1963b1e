//! Log-domain adaptive Gauss–Kronrod quadrature.
//!
//! All posterior integrands in this crate are positive but can span hundreds
//! of orders of magnitude across a node, so every integrand is evaluated and
//! accumulated in log space. The integrator is vector-valued: one adaptive
//! pass integrates many related integrands (evidence plus moment numerators)
//! on shared abscissae, refining until every component meets the relative
//! tolerance.
//!
//! Exposed publicly so verification harnesses can integrate reference
//! integrands with the same machinery but different factorizations.

use crate::error::{HaptError, Result};

/// 15-point Kronrod abscissae (positive half), QUADPACK `qk15`.
const XGK: [f64; 8] = [
    0.991_455_371_120_813,
    0.949_107_912_342_759,
    0.864_864_423_359_769,
    0.741_531_185_599_394,
    0.586_087_235_467_691,
    0.405_845_151_377_397,
    0.207_784_955_007_898,
    0.000_000_000_000_000,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529,
    0.063_092_092_629_979,
    0.104_790_010_322_250,
    0.140_653_259_715_525,
    0.169_004_726_639_267,
    0.190_350_578_064_785,
    0.204_432_940_075_298,
    0.209_482_141_084_728,
];

/// 7-point Gauss weights, paired with `XGK[1], XGK[3], XGK[5], XGK[7]`.
const WG: [f64; 4] = [
    0.129_484_966_168_870,
    0.279_705_391_489_277,
    0.381_830_050_505_119,
    0.417_959_183_673_469,
];

/// `log(sum(exp(v)))` over a slice; `-inf` entries are inert.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

struct Panel {
    a: f64,
    b: f64,
    /// Per-component log of the panel's Kronrod estimate.
    log_val: Vec<f64>,
    /// Per-component log of |Kronrod - Gauss|.
    log_err: Vec<f64>,
}

/// Result of a vector-valued adaptive integration.
#[derive(Debug, Clone)]
pub struct QuadResult {
    /// Per-component `log` of the integral.
    pub log_values: Vec<f64>,
    /// Worst achieved relative error estimate across components.
    pub rel_err: f64,
    /// Number of integrand evaluations.
    pub evals: usize,
    pub converged: bool,
}

/// Integrates `n` positive integrands given in log space over `[breaks[0],
/// breaks[last]]`, bisecting panels until every component's error estimate
/// falls below `rel_tol` times its value, or `max_panels` is reached.
///
/// `f(x, out)` must fill `out` (length `n`) with the log integrand values at
/// `x`; `-inf` is a legal value, NaN and `+inf` abort with an error.
pub fn integrate_log_vec<F>(
    mut f: F,
    breaks: &[f64],
    n: usize,
    rel_tol: f64,
    max_panels: usize,
    context: &str,
) -> Result<QuadResult>
where
    F: FnMut(f64, &mut [f64]),
{
    assert!(breaks.len() >= 2 && n > 0);
    let mut evals = 0usize;
    let mut eval_panel = |a: f64, b: f64| -> Result<Panel> {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let mut logs = vec![f64::NEG_INFINITY; 15 * n];
        let mut buf = vec![f64::NEG_INFINITY; n];
        for (j, &xi) in XGK.iter().enumerate() {
            for &sign in &[-1.0, 1.0] {
                if j == 7 && sign > 0.0 {
                    continue;
                }
                let x = c + sign * h * xi;
                f(x, &mut buf);
                evals += 1;
                let row = if sign < 0.0 { j } else { 14 - j };
                for (comp, &lv) in buf.iter().enumerate() {
                    if lv.is_nan() || lv == f64::INFINITY {
                        return Err(HaptError::NonFinite { context: context.to_string() });
                    }
                    logs[15 * comp + row] = lv;
                }
            }
        }
        let mut log_val = Vec::with_capacity(n);
        let mut log_err = Vec::with_capacity(n);
        for comp in 0..n {
            let row = &logs[15 * comp..15 * (comp + 1)];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                log_val.push(f64::NEG_INFINITY);
                log_err.push(f64::NEG_INFINITY);
                continue;
            }
            let mut s15 = 0.0;
            let mut s7 = 0.0;
            for (j, &lv) in row.iter().enumerate() {
                let e = (lv - m).exp();
                let node = if j <= 7 { j } else { 14 - j };
                s15 += WGK[node] * e;
                if node % 2 == 1 || node == 7 {
                    s7 += WG[node / 2] * e;
                }
            }
            log_val.push(m + (s15 * h).ln());
            let diff = (s15 - s7).abs();
            log_err.push(if diff > 0.0 { m + (diff * h).ln() } else { f64::NEG_INFINITY });
        }
        Ok(Panel { a, b, log_val, log_err })
    };

    let mut panels: Vec<Panel> = Vec::new();
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            panels.push(eval_panel(w[0], w[1])?);
        }
    }
    if panels.is_empty() {
        return Err(HaptError::invalid(format!("empty integration range in {context}")));
    }

    let width_floor = 1e-14 * (breaks[breaks.len() - 1] - breaks[0]);
    let log_tol = rel_tol.ln();
    loop {
        // Current totals and the worst relative error across components.
        let mut totals = vec![f64::NEG_INFINITY; n];
        let mut errors = vec![f64::NEG_INFINITY; n];
        for p in &panels {
            for c in 0..n {
                totals[c] = log_add(totals[c], p.log_val[c]);
                errors[c] = log_add(errors[c], p.log_err[c]);
            }
        }
        let worst_rel = (0..n)
            .map(|c| {
                if errors[c] == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    errors[c] - totals[c]
                }
            })
            .fold(f64::NEG_INFINITY, f64::max);
        if worst_rel <= log_tol || panels.len() >= max_panels {
            let converged = worst_rel <= log_tol;
            // Deterministic final summation: panels in interval order.
            let mut order: Vec<usize> = (0..panels.len()).collect();
            order.sort_by(|&i, &j| panels[i].a.total_cmp(&panels[j].a));
            let mut log_values = vec![f64::NEG_INFINITY; n];
            for c in 0..n {
                let vals: Vec<f64> = order.iter().map(|&i| panels[i].log_val[c]).collect();
                log_values[c] = log_sum_exp(&vals);
            }
            return Ok(QuadResult {
                log_values,
                rel_err: worst_rel.exp(),
                evals,
                converged,
            });
        }
        // Split the panel contributing the largest relative error.
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (idx, p) in panels.iter().enumerate() {
            let score = (0..n)
                .map(|c| p.log_err[c] - totals[c].max(errors[c]))
                .fold(f64::NEG_INFINITY, f64::max);
            if score > best_score && (p.b - p.a) > width_floor {
                best_score = score;
                best = idx;
            }
        }
        if best_score == f64::NEG_INFINITY {
            // Nothing splittable; report what we achieved.
            let mut order: Vec<usize> = (0..panels.len()).collect();
            order.sort_by(|&i, &j| panels[i].a.total_cmp(&panels[j].a));
            let mut log_values = vec![f64::NEG_INFINITY; n];
            for c in 0..n {
                let vals: Vec<f64> = order.iter().map(|&i| panels[i].log_val[c]).collect();
                log_values[c] = log_sum_exp(&vals);
            }
            return Ok(QuadResult {
                log_values,
                rel_err: worst_rel.exp(),
                evals,
                converged: false,
            });
        }
        let Panel { a, b, .. } = panels[best];
        let mid = 0.5 * (a + b);
        let left = eval_panel(a, mid)?;
        let right = eval_panel(mid, b)?;
        panels[best] = left;
        panels.push(right);
    }
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        b
    } else if b == f64::NEG_INFINITY {
        a
    } else if a >= b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Scalar convenience wrapper around [`integrate_log_vec`].
pub fn integrate_log<F>(
    mut f: F,
    breaks: &[f64],
    rel_tol: f64,
    max_panels: usize,
    context: &str,
) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> f64,
{
    let r = integrate_log_vec(
        |x, out| out[0] = f(x),
        breaks,
        1,
        rel_tol,
        max_panels,
        context,
    )?;
    Ok((r.log_values[0], r.rel_err))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_exponential_exactly_enough() {
        // int_0^1 e^x dx = e - 1
        let (lv, _) = integrate_log(|x| x, &[0.0, 1.0], 1e-12, 64, "exp").unwrap();
        assert!((lv.exp() - (1f64.exp() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn handles_wide_dynamic_range() {
        // int_0^1 exp(-1000 (x - 0.3)^2) dx, sharply peaked.
        let f = |x: f64| -1000.0 * (x - 0.3) * (x - 0.3);
        let (lv, _) = integrate_log(f, &[0.0, 0.3, 1.0], 1e-10, 256, "peak").unwrap();
        let exact = (std::f64::consts::PI / 1000.0).sqrt(); // erf terms ~ 1
        assert!((lv.exp() - exact).abs() / exact < 1e-9);
    }

    #[test]
    fn vector_components_share_abscissae() {
        let r = integrate_log_vec(
            |x, out| {
                out[0] = 0.0; // constant 1
                out[1] = x.ln(); // integrand x
            },
            &[0.0, 1.0],
            2,
            1e-10,
            128,
            "vec",
        )
        .unwrap();
        assert!((r.log_values[0].exp() - 1.0).abs() < 1e-10);
        assert!((r.log_values[1].exp() - 0.5).abs() < 1e-10);
    }

    #[test]
    fn integrable_endpoint_singularity() {
        // int_0^1 x^(-1/2) dx = 2, integrated through the sin^2 map used by
        // the theta integrals: substitute x = sin^2(pi u / 2).
        let f = |u: f64| {
            let s = (std::f64::consts::FRAC_PI_2 * u).sin();
            let x = s * s;
            -0.5 * x.ln() + (std::f64::consts::FRAC_PI_2 * (std::f64::consts::PI * u).sin()).ln()
        };
        let (lv, _) = integrate_log(f, &[0.0, 0.5, 1.0], 1e-10, 128, "sqrt").unwrap();
        assert!((lv.exp() - 2.0).abs() < 1e-9, "got {}", lv.exp());
    }

    #[test]
    fn reports_nonconvergence() {
        // x^(-0.9) in the raw variable cannot meet 1e-10 with four panels.
        let r = integrate_log_vec(
            |x, out| out[0] = -0.9 * x.ln(),
            &[0.0, 1.0],
            1,
            1e-10,
            4,
            "singular",
        )
        .unwrap();
        assert!(!r.converged);
        assert!(r.rel_err > 1e-10);
    }

    #[test]
    fn rejects_nan() {
        let err = integrate_log(|_| f64::NAN, &[0.0, 1.0], 1e-8, 16, "nan-test");
        assert!(err.is_err());
    }
}
