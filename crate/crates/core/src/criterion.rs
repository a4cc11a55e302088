//! Integrand `j` of the generalised criterion `J(m) = ∫ j(θ)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A C² scalar function together with its first two derivatives.
pub trait Criterion: Send + Sync {
    fn value(&self, t: f64) -> f64;
    fn d1(&self, t: f64) -> f64;
    fn d2(&self, t: f64) -> f64;
    fn name(&self) -> String;

    fn is_identity(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `j(t) = t`: total population size.
    Identity,
    /// `j(t) = t - t²/4`.
    Quadratic,
    /// `j(t) = log(1 + t)`.
    Log1p,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "quadratic" | "t-t^2/4" => Ok(Self::Quadratic),
            "log1p" | "log(1+t)" => Ok(Self::Log1p),
            other => Err(Error::InvalidArgument(format!(
                "unknown criterion preset `{other}` (expected identity, quadratic or log1p)"
            ))),
        }
    }
}

impl Criterion for Preset {
    fn value(&self, t: f64) -> f64 {
        match self {
            Self::Identity => t,
            Self::Quadratic => t - 0.25 * t * t,
            Self::Log1p => t.ln_1p(),
        }
    }

    fn d1(&self, t: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Quadratic => 1.0 - 0.5 * t,
            Self::Log1p => 1.0 / (1.0 + t),
        }
    }

    fn d2(&self, t: f64) -> f64 {
        match self {
            Self::Identity => 0.0,
            Self::Quadratic => -0.5,
            Self::Log1p => -1.0 / ((1.0 + t) * (1.0 + t)),
        }
    }

    fn name(&self) -> String {
        match self {
            Self::Identity => "identity",
            Self::Quadratic => "quadratic",
            Self::Log1p => "log1p",
        }
        .to_string()
    }

    fn is_identity(&self) -> bool {
        matches!(self, Self::Identity)
    }
}

/// Piecewise-linear interpolation of tabulated `(t, j, j', j'')` rows.
/// Values outside the table are clamped to the end rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Tabulated {
    t: Vec<f64>,
    j: Vec<f64>,
    dj: Vec<f64>,
    ddj: Vec<f64>,
}

impl Tabulated {
    pub fn new(rows: Vec<[f64; 4]>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InvalidArgument(
                "tabulated criterion needs at least two rows".into(),
            ));
        }
        if rows.windows(2).any(|w| w[1][0] <= w[0][0]) {
            return Err(Error::InvalidArgument(
                "tabulated criterion abscissae must be strictly increasing".into(),
            ));
        }
        let col = |c: usize| rows.iter().map(|r| r[c]).collect::<Vec<_>>();
        Ok(Self {
            t: col(0),
            j: col(1),
            dj: col(2),
            ddj: col(3),
        })
    }

    fn interp(&self, ys: &[f64], t: f64) -> f64 {
        let last = self.t.len() - 1;
        if t <= self.t[0] {
            return ys[0];
        }
        if t >= self.t[last] {
            return ys[last];
        }
        let k = self.t.partition_point(|&x| x <= t) - 1;
        let s = (t - self.t[k]) / (self.t[k + 1] - self.t[k]);
        ys[k] + s * (ys[k + 1] - ys[k])
    }
}

impl Criterion for Tabulated {
    fn value(&self, t: f64) -> f64 {
        self.interp(&self.j, t)
    }

    fn d1(&self, t: f64) -> f64 {
        self.interp(&self.dj, t)
    }

    fn d2(&self, t: f64) -> f64 {
        self.interp(&self.ddj, t)
    }

    fn name(&self) -> String {
        "tabulated".into()
    }
}

/// Checks `j' > 0` at the given points and on a uniform sampling of their range.
pub fn check_increasing(j: &dyn Criterion, points: &[f64]) -> Result<()> {
    let lo = points.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = points.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let samples = (0..=100).map(|k| lo + (hi - lo) * k as f64 / 100.0);
    for t in points.iter().copied().chain(samples) {
        let d = j.d1(t);
        if !(d > 0.0) {
            return Err(Error::CriterionHypothesis(format!(
                "j'({t}) = {d} is not positive"
            )));
        }
    }
    Ok(())
}
