//! Seeded generators for the simulation studies, plus L1 scoring.
//!
//! Every generator is deterministic given its seed: sample `i` draws from an
//! independent counter-based stream (`ChaCha8`, stream id `i + 1`), so
//! generation parallelized over samples produces byte-identical output.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta as BetaDist, Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{HaptError, Result};
use crate::special::log_beta_pdf;

/// Identifier of a simulation setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioId {
    /// Smooth two-mode Beta mixture.
    S1,
    /// Diffuse base plus three narrow spikes.
    S2,
    /// Mixed smooth component and narrow spike.
    S3,
    /// Heterogeneous cross-sample dispersion (low center, high edges).
    Disp,
    /// Three latent clusters of samples.
    Clust,
    /// Three clusters with right-half heavy within-cluster dispersion.
    ClustHet,
}

impl FromStr for ScenarioId {
    type Err = HaptError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s1" => Ok(ScenarioId::S1),
            "s2" => Ok(ScenarioId::S2),
            "s3" => Ok(ScenarioId::S3),
            "disp" => Ok(ScenarioId::Disp),
            "clust" => Ok(ScenarioId::Clust),
            "clust_het" => Ok(ScenarioId::ClustHet),
            other => Err(HaptError::invalid(format!("unknown scenario id '{other}'"))),
        }
    }
}

impl std::fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ScenarioId::S1 => "s1",
            ScenarioId::S2 => "s2",
            ScenarioId::S3 => "s3",
            ScenarioId::Disp => "disp",
            ScenarioId::Clust => "clust",
            ScenarioId::ClustHet => "clust_het",
        };
        f.write_str(s)
    }
}

/// One simulation setting with its randomization controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: ScenarioId,
    /// Concentration total of the Dirichlet weight randomization (s1-s3).
    pub dirichlet_total: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn new(id: ScenarioId, seed: u64) -> Self {
        Scenario { id, dirichlet_total: 10.0, seed }
    }

    pub fn with_total(mut self, total: f64) -> Self {
        self.dirichlet_total = total;
        self
    }
}

/// A mixture component on `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Component {
    Uniform { lo: f64, hi: f64 },
    Beta { a: f64, b: f64 },
    /// `Beta(a, b)` affinely rescaled onto `[lo, hi]`.
    ScaledBeta { a: f64, b: f64, lo: f64, hi: f64 },
}

impl Component {
    fn pdf(&self, x: f64) -> f64 {
        match *self {
            Component::Uniform { lo, hi } => {
                if x >= lo && x <= hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            Component::Beta { a, b } => {
                if x <= 0.0 || x >= 1.0 {
                    0.0
                } else {
                    log_beta_pdf(x, a, b).exp()
                }
            }
            Component::ScaledBeta { a, b, lo, hi } => {
                if x <= lo || x >= hi {
                    0.0
                } else {
                    (log_beta_pdf((x - lo) / (hi - lo), a, b) - (hi - lo).ln()).exp()
                }
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let x = match *self {
            // hi - u * (hi - lo) keeps draws inside the half-open cell.
            Component::Uniform { lo, hi } => hi - rng.random::<f64>() * (hi - lo),
            Component::Beta { a, b } => {
                BetaDist::new(a, b).expect("valid Beta parameters").sample(rng)
            }
            Component::ScaledBeta { a, b, lo, hi } => {
                lo + BetaDist::new(a, b).expect("valid Beta parameters").sample(rng) * (hi - lo)
            }
        };
        x.clamp(1e-15, 1.0)
    }
}

/// A finite mixture with frozen weights; the closed-form truth against which
/// estimates are scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureDensity {
    pub components: Vec<Component>,
    pub weights: Vec<f64>,
}

impl MixtureDensity {
    pub fn pdf(&self, x: f64) -> f64 {
        self.components.iter().zip(&self.weights).map(|(c, w)| w * c.pdf(x)).sum()
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        for (c, &w) in self.components.iter().zip(&self.weights) {
            cum += w;
            if u < cum {
                return c.sample(rng);
            }
        }
        self.components[self.components.len() - 1].sample(rng)
    }
}

/// Output of [`generate`]: observations, per-sample true densities, and
/// cluster labels where the scenario has latent clusters.
#[derive(Debug, Clone)]
pub struct Generated {
    pub samples: Vec<Vec<f64>>,
    pub densities: Vec<MixtureDensity>,
    pub cluster_labels: Option<Vec<usize>>,
}

fn scenario_components(id: ScenarioId) -> Vec<Component> {
    match id {
        ScenarioId::S1 => vec![
            Component::Uniform { lo: 0.0, hi: 1.0 },
            Component::Beta { a: 2.0, b: 2.0 },
            Component::Beta { a: 30.0, b: 10.0 },
            Component::Beta { a: 10.0, b: 30.0 },
        ],
        ScenarioId::S2 => vec![
            Component::Uniform { lo: 0.0, hi: 1.0 },
            Component::Uniform { lo: 0.18, hi: 0.20 },
            Component::Uniform { lo: 0.49, hi: 0.51 },
            Component::Uniform { lo: 0.80, hi: 0.82 },
        ],
        ScenarioId::S3 => vec![
            Component::Uniform { lo: 0.0, hi: 1.0 },
            Component::Uniform { lo: 0.25, hi: 0.5 },
            Component::ScaledBeta { a: 2.0, b: 2.0, lo: 0.25, hi: 0.5 },
            Component::Beta { a: 4000.0, b: 6000.0 },
        ],
        ScenarioId::Disp => vec![
            Component::Beta { a: 2.0, b: 2.0 },
            Component::Beta { a: 1.0, b: 12.0 },
            Component::Beta { a: 12.0, b: 1.0 },
        ],
        ScenarioId::Clust | ScenarioId::ClustHet => unreachable!("cluster scenarios build per cluster"),
    }
}

/// Expected mixture weights of the Dirichlet-randomized scenarios.
pub fn expected_weights(id: ScenarioId) -> Option<[f64; 4]> {
    match id {
        ScenarioId::S1 => Some([0.1, 0.1, 0.4, 0.4]),
        ScenarioId::S2 => Some([0.1, 0.3, 0.3, 0.3]),
        ScenarioId::S3 => Some([0.1, 0.3, 0.4, 0.2]),
        _ => None,
    }
}

fn dirichlet<R: Rng>(alphas: &[f64], rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = alphas
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("valid Gamma shape").sample(rng).max(1e-300))
        .collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|g| g / total).collect()
}

fn beta_draw<R: Rng>(a: f64, b: f64, rng: &mut R) -> f64 {
    BetaDist::new(a, b).expect("valid Beta parameters").sample(rng)
}

/// Splits `n_samples` into the 15:10:5 cluster-size pattern by largest
/// remainder.
pub fn cluster_sizes(n_samples: usize) -> [usize; 3] {
    let ratios = [15.0, 10.0, 5.0];
    let raw: Vec<f64> = ratios.iter().map(|r| n_samples as f64 * r / 30.0).collect();
    let mut sizes = [raw[0] as usize, raw[1] as usize, raw[2] as usize];
    let mut rest: usize = n_samples - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| (raw[j] - raw[j].floor()).total_cmp(&(raw[i] - raw[i].floor())));
    for &i in order.iter().cycle().take(rest.min(3 * n_samples)) {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    sizes
}

/// Draws the mixture density for one sample of a scenario, using its own RNG.
fn sample_density<R: Rng>(scenario: &Scenario, cluster: usize, rng: &mut R) -> MixtureDensity {
    match scenario.id {
        ScenarioId::S1 | ScenarioId::S2 | ScenarioId::S3 => {
            let components = scenario_components(scenario.id);
            let means = expected_weights(scenario.id).expect("dirichlet scenario");
            let alphas: Vec<f64> =
                means.iter().map(|m| m * scenario.dirichlet_total).collect();
            MixtureDensity { components, weights: dirichlet(&alphas, rng) }
        }
        ScenarioId::Disp => {
            let w1 = beta_draw(80.0, 20.0, rng);
            let v = beta_draw(1.0, 1.0, rng);
            MixtureDensity {
                components: scenario_components(ScenarioId::Disp),
                weights: vec![w1, v * (1.0 - w1), (1.0 - v) * (1.0 - w1)],
            }
        }
        ScenarioId::Clust => {
            let betas = [(1.0, 5.0), (3.0, 3.0), (5.0, 1.0)][cluster];
            let w_beta = beta_draw(10.0, 10.0, rng);
            MixtureDensity {
                components: vec![
                    Component::Uniform { lo: 0.0, hi: 1.0 },
                    Component::Beta { a: betas.0, b: betas.1 },
                ],
                weights: vec![1.0 - w_beta, w_beta],
            }
        }
        ScenarioId::ClustHet => {
            // v1 locates the left/right mass balance and separates the
            // clusters; v3 is near-uniform, producing the heavy right-half
            // within-cluster dispersion.
            let v1_params = [(1000.0, 1000.0), (1500.0, 500.0), (500.0, 1500.0)][cluster];
            let v1 = beta_draw(v1_params.0, v1_params.1, rng);
            let v2 = beta_draw(200.0, 200.0, rng);
            let v3 = beta_draw(1.0, 1.0, rng);
            MixtureDensity {
                components: vec![
                    Component::Beta { a: 1.0, b: 6.0 },
                    Component::Beta { a: 2.0, b: 5.0 },
                    Component::Beta { a: 5.0, b: 2.0 },
                    Component::Beta { a: 6.0, b: 1.0 },
                ],
                weights: vec![
                    v1 * v2,
                    v1 * (1.0 - v2),
                    (1.0 - v1) * v3,
                    (1.0 - v1) * (1.0 - v3),
                ],
            }
        }
    }
}

/// Generates `n_samples` samples of `n_obs` observations each, with their
/// true densities; reproducible given the scenario seed.
pub fn generate(scenario: &Scenario, n_samples: usize, n_obs: usize) -> Result<Generated> {
    if n_samples == 0 || n_obs == 0 {
        return Err(HaptError::invalid("need at least one sample and one observation".into()));
    }
    if !(scenario.dirichlet_total.is_finite() && scenario.dirichlet_total > 0.0) {
        return Err(HaptError::invalid(format!(
            "dirichlet_total must be positive, got {}",
            scenario.dirichlet_total
        )));
    }
    let labels: Option<Vec<usize>> = match scenario.id {
        ScenarioId::Clust | ScenarioId::ClustHet => {
            let sizes = cluster_sizes(n_samples);
            let mut labels = Vec::with_capacity(n_samples);
            for (c, &size) in sizes.iter().enumerate() {
                labels.extend(std::iter::repeat(c).take(size));
            }
            Some(labels)
        }
        _ => None,
    };
    let mut samples = Vec::with_capacity(n_samples);
    let mut densities = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        rng.set_stream(i as u64 + 1);
        let cluster = labels.as_ref().map_or(0, |l| l[i]);
        let density = sample_density(scenario, cluster, &mut rng);
        let obs: Vec<f64> = (0..n_obs).map(|_| density.sample(&mut rng)).collect();
        samples.push(obs);
        densities.push(density);
    }
    Ok(Generated { samples, densities, cluster_labels: labels })
}

/// Trapezoid approximation of the L1 distance between two densities on
/// `(0, 1]`.
pub fn l1_error<F, G>(f: F, g: G, grid_size: usize) -> f64
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    assert!(grid_size >= 2, "grid too small");
    let h = 1.0 / (grid_size - 1) as f64;
    let eval = |j: usize| {
        let x = (j as f64 * h).max(1e-9);
        (f(x) - g(x)).abs()
    };
    let mut total = 0.5 * (eval(0) + eval(grid_size - 1));
    for j in 1..grid_size - 1 {
        total += eval(j);
    }
    total * h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_in_domain() {
        let sc = Scenario::new(ScenarioId::S2, 42);
        let a = generate(&sc, 5, 200).unwrap();
        let b = generate(&sc, 5, 200).unwrap();
        assert_eq!(a.samples, b.samples);
        for s in &a.samples {
            for &x in s {
                assert!(x > 0.0 && x <= 1.0, "observation {x} outside (0, 1]");
            }
        }
        // Distinct seeds decorrelate.
        let c = generate(&Scenario::new(ScenarioId::S2, 43), 5, 200).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn s2_density_at_center_under_mean_weights() {
        let d = MixtureDensity {
            components: scenario_components(ScenarioId::S2),
            weights: expected_weights(ScenarioId::S2).unwrap().to_vec(),
        };
        assert!((d.pdf(0.5) - 15.1).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_weights_have_stated_means() {
        let sc = Scenario::new(ScenarioId::S1, 9).with_total(50.0);
        let n = 10_000;
        let gen = generate(&sc, n, 1).unwrap();
        let mut mean = [0.0; 4];
        for d in &gen.densities {
            for (m, w) in mean.iter_mut().zip(&d.weights) {
                *m += w / n as f64;
            }
        }
        // Dirichlet(5, 5, 20, 20): sd of each weight over 1e4 draws.
        for (m, want) in mean.iter().zip([0.1, 0.1, 0.4, 0.4]) {
            let sd = (want * (1.0 - want) / 51.0f64).sqrt() / (n as f64).sqrt();
            assert!((m - want).abs() < 3.0 * sd, "mean {m} vs {want}");
        }
    }

    #[test]
    fn narrow_components_respect_their_support() {
        let gen = generate(&Scenario::new(ScenarioId::S3, 3), 20, 400).unwrap();
        for (s, d) in gen.samples.iter().zip(&gen.densities) {
            for &x in s {
                assert!(d.pdf(x) > 0.0 || x <= 1e-12, "drew {x} where pdf is zero");
            }
        }
    }

    #[test]
    fn cluster_sizes_follow_the_pattern() {
        assert_eq!(cluster_sizes(30), [15, 10, 5]);
        assert_eq!(cluster_sizes(12), [6, 4, 2]);
        assert_eq!(cluster_sizes(5), [2, 2, 1]);
    }

    #[test]
    fn cluster_proportions_vary_more_than_their_beta_weights() {
        // Observed component proportions add binomial noise on top of the
        // Beta(10, 10) weight draw.
        let n_obs = 60;
        let reps = 200;
        let mut props = Vec::with_capacity(reps);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..reps {
            let w = beta_draw(10.0, 10.0, &mut rng);
            let mut hits = 0;
            for _ in 0..n_obs {
                if rng.random::<f64>() < w {
                    hits += 1;
                }
            }
            props.push(hits as f64 / n_obs as f64);
        }
        let mean: f64 = props.iter().sum::<f64>() / reps as f64;
        let var: f64 =
            props.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (reps - 1) as f64;
        let beta_var = 0.25 / 21.0;
        assert!(var > beta_var, "observed {var} vs weight-only {beta_var}");
    }

    #[test]
    fn l1_reference_values() {
        assert!(l1_error(|_| 1.0, |_| 1.0, 512) < 1e-12);
        let step = |x: f64| if x <= 0.5 { 2.0 } else { 0.0 };
        let l1 = l1_error(|_| 1.0, step, 4097);
        assert!((l1 - 1.0).abs() < 1e-3, "l1 {l1}");
        // Grid refinement stability on a smooth density.
        let d = MixtureDensity {
            components: scenario_components(ScenarioId::S1),
            weights: expected_weights(ScenarioId::S1).unwrap().to_vec(),
        };
        let coarse = l1_error(|x| d.pdf(x), |_| 1.0, 2048);
        let fine = l1_error(|x| d.pdf(x), |_| 1.0, 4096);
        assert!((coarse - fine).abs() < 1e-3);
    }

    #[test]
    fn unknown_scenario_is_an_error() {
        assert!("s9".parse::<ScenarioId>().is_err());
        assert_eq!("clust_het".parse::<ScenarioId>().unwrap(), ScenarioId::ClustHet);
    }
}
