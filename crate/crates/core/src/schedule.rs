//! Signal-retention schedules, sampling time grids and training-time laws.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

/// Retention schedule `alpha(t)`, strictly decreasing from `1 - eps0` at
/// `t = 0` to `eps1` at `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    eps0: f64,
    eps1: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            kind: ScheduleKind::Linear,
            eps0: 1e-4,
            eps1: 1e-4,
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("time {t} outside [0, 1]")))
    }
}

impl Schedule {
    pub fn new(kind: ScheduleKind, eps0: f64, eps1: f64) -> Result<Self> {
        if !(eps0 > 0.0 && eps1 > 0.0 && eps0 + eps1 < 1.0) {
            return Err(Error::Config(format!(
                "schedule clipping must satisfy eps0, eps1 > 0 and eps0 + eps1 < 1 (got {eps0}, {eps1})"
            )));
        }
        Ok(Schedule { kind, eps0, eps1 })
    }

    pub fn linear() -> Self {
        Self::default()
    }

    pub fn cosine() -> Self {
        Schedule {
            kind: ScheduleKind::Cosine,
            ..Self::default()
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn eps0(&self) -> f64 {
        self.eps0
    }

    pub fn eps1(&self) -> f64 {
        self.eps1
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.alpha_unchecked(t))
    }

    pub fn alpha_prime(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.alpha_prime_unchecked(t))
    }

    pub(crate) fn alpha_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => (1.0 - self.eps0) * (1.0 - t) + self.eps1 * t,
            ScheduleKind::Cosine => {
                self.eps1 + (1.0 - self.eps0 - self.eps1) * (FRAC_PI_2 * t).cos()
            }
        }
    }

    pub(crate) fn alpha_prime_unchecked(&self, t: f64) -> f64 {
        let span = 1.0 - self.eps0 - self.eps1;
        match self.kind {
            ScheduleKind::Linear => -span,
            ScheduleKind::Cosine => -span * FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
        }
    }
}

/// Law of the diffusion time drawn during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeDistribution {
    Uniform,
    LogitNormal { mu: f64, sigma: f64 },
    Beta { a: f64, b: f64 },
}

impl Default for TimeDistribution {
    fn default() -> Self {
        TimeDistribution::Beta { a: 3.0, b: 1.0 }
    }
}

impl TimeDistribution {
    pub fn logit_normal(mu: f64, sigma: f64) -> Result<Self> {
        let d = TimeDistribution::LogitNormal { mu, sigma };
        d.validate()?;
        Ok(d)
    }

    pub fn beta(a: f64, b: f64) -> Result<Self> {
        let d = TimeDistribution::Beta { a, b };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TimeDistribution::Uniform => Ok(()),
            TimeDistribution::LogitNormal { mu, sigma } => {
                if sigma > 0.0 && mu.is_finite() && sigma.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "logit-normal needs finite mu and sigma > 0 (got {mu}, {sigma})"
                    )))
                }
            }
            TimeDistribution::Beta { a, b } => {
                if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "beta needs a, b > 0 (got {a}, {b})"
                    )))
                }
            }
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, TimeDistribution::Uniform)
    }

    /// Draw `t` in the open interval (0, 1).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        self.validate()?;
        let t = match *self {
            TimeDistribution::Uniform => rng.random::<f64>(),
            TimeDistribution::LogitNormal { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                1.0 / (1.0 + (-(mu + sigma * z)).exp())
            }
            TimeDistribution::Beta { a, b } => Beta::new(a, b)
                .map_err(|e| Error::Config(e.to_string()))?
                .sample(rng),
        };
        Ok(t.clamp(f64::EPSILON, 1.0 - f64::EPSILON))
    }

    pub fn pdf(&self, t: f64) -> f64 {
        if !(t > 0.0 && t < 1.0) {
            return 0.0;
        }
        match *self {
            TimeDistribution::Uniform => 1.0,
            TimeDistribution::LogitNormal { mu, sigma } => {
                let n = Normal::new(mu, sigma).expect("validated");
                n.pdf((t / (1.0 - t)).ln()) / (t * (1.0 - t))
            }
            TimeDistribution::Beta { a, b } => statrs::distribution::Beta::new(a, b)
                .expect("validated")
                .pdf(t),
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t >= 1.0 {
            return 1.0;
        }
        match *self {
            TimeDistribution::Uniform => t,
            TimeDistribution::LogitNormal { mu, sigma } => Normal::new(mu, sigma)
                .expect("validated")
                .cdf((t / (1.0 - t)).ln()),
            TimeDistribution::Beta { a, b } => statrs::distribution::Beta::new(a, b)
                .expect("validated")
                .cdf(t),
        }
    }
}

/// Spacing of the sampling grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Linear,
    #[default]
    Cosine,
}

/// Decreasing sampling times `1 = t_0 > t_1 > ... > t_T = t_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    values: Vec<f64>,
}

impl TimeGrid {
    pub fn new(steps: usize, kind: GridKind, t_min: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&t_min) {
            return Err(Error::Config(format!("t_min {t_min} outside [0, 1)")));
        }
        let span = 1.0 - t_min;
        let values = (0..=steps)
            .map(|k| {
                if k == 0 {
                    1.0
                } else if k == steps {
                    t_min
                } else {
                    match kind {
                        GridKind::Linear => 1.0 - k as f64 * span / steps as f64,
                        GridKind::Cosine => {
                            t_min + span * (k as f64 * PI / (2.0 * steps as f64)).cos()
                        }
                    }
                }
            })
            .collect();
        Ok(TimeGrid { values })
    }

    /// Grid from explicit values; must start at 1 and strictly decrease.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 || values[0] != 1.0 {
            return Err(Error::Config("time grid must start at 1 and have >= 2 points".into()));
        }
        if values.windows(2).any(|w| !(w[1] < w[0]) || w[1] < 0.0) {
            return Err(Error::Config("time grid must strictly decrease within [0, 1]".into()));
        }
        Ok(TimeGrid { values })
    }

    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}
