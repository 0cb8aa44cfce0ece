//! I.i.d. random environments of branching rates.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng;

pub const ENV_FILE_VERSION: u32 = 1;

/// Law of a single site rate ξ(0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvDistribution {
    /// `hi` with probability `p`, `lo` otherwise.
    TwoPoint { p: f64, lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
    Discrete { values: Vec<f64>, weights: Vec<f64> },
}

impl Default for EnvDistribution {
    fn default() -> Self {
        EnvDistribution::TwoPoint {
            p: 0.5,
            lo: 0.1,
            hi: 0.2,
        }
    }
}

fn positive_finite(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

impl EnvDistribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            EnvDistribution::TwoPoint { p, lo, hi } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::param(format!("two_point weight p = {p} outside [0, 1]")));
                }
                check_interval(*lo, *hi)
            }
            EnvDistribution::Uniform { lo, hi } => check_interval(*lo, *hi),
            EnvDistribution::Discrete { values, weights } => {
                if values.is_empty() || values.len() != weights.len() {
                    return Err(Error::param(format!(
                        "discrete law needs matching non-empty values/weights ({} vs {})",
                        values.len(),
                        weights.len()
                    )));
                }
                if let Some(v) = values.iter().find(|v| !positive_finite(**v)) {
                    return Err(Error::param(format!("discrete rate {v} is not positive")));
                }
                if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return Err(Error::param("discrete weights must be nonnegative"));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::param(format!("discrete weights sum to {total}, not 1")));
                }
                Ok(())
            }
        }
    }

    /// Atoms `(rate, weight)` with positive weight, for laws with finite support.
    pub fn atoms(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            EnvDistribution::TwoPoint { p, lo, hi } => Some(
                [(*lo, 1.0 - p), (*hi, *p)]
                    .into_iter()
                    .filter(|(_, w)| *w > 0.0)
                    .collect(),
            ),
            EnvDistribution::Uniform { .. } => None,
            EnvDistribution::Discrete { values, weights } => Some(
                values
                    .iter()
                    .zip(weights)
                    .filter(|(_, w)| **w > 0.0)
                    .map(|(v, w)| (*v, *w))
                    .collect(),
            ),
        }
    }

    /// Essential infimum and supremum `(ei, es)` of the law.
    pub fn support(&self) -> (f64, f64) {
        match self {
            EnvDistribution::Uniform { lo, hi } => (*lo, *hi),
            _ => {
                let atoms = self.atoms().unwrap_or_default();
                let lo = atoms.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
                let hi = atoms.iter().map(|a| a.0).fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
        }
    }

    pub fn is_degenerate(&self) -> bool {
        let (lo, hi) = self.support();
        lo == hi
    }

    pub fn mean(&self) -> f64 {
        match self {
            EnvDistribution::Uniform { lo, hi } => 0.5 * (lo + hi),
            _ => self
                .atoms()
                .unwrap_or_default()
                .iter()
                .map(|(v, w)| v * w)
                .sum(),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            EnvDistribution::Uniform { lo, hi } => (hi - lo).powi(2) / 12.0,
            _ => {
                let m = self.mean();
                self.atoms()
                    .unwrap_or_default()
                    .iter()
                    .map(|(v, w)| w * (v - m).powi(2))
                    .sum()
            }
        }
    }

    /// Maps a uniform variate in `[0, 1)` to a rate.
    pub fn quantile_map(&self, u: f64) -> f64 {
        match self {
            EnvDistribution::TwoPoint { p, lo, hi } => {
                if u < *p {
                    *hi
                } else {
                    *lo
                }
            }
            EnvDistribution::Uniform { lo, hi } => (lo + (hi - lo) * u).min(*hi),
            EnvDistribution::Discrete { values, weights } => {
                let mut acc = 0.0;
                let mut last = values[0];
                for (v, w) in values.iter().zip(weights) {
                    if *w <= 0.0 {
                        continue;
                    }
                    acc += w;
                    last = *v;
                    if u < acc {
                        return *v;
                    }
                }
                last
            }
        }
    }
}

fn check_interval(lo: f64, hi: f64) -> Result<()> {
    if !positive_finite(lo) || !positive_finite(hi) {
        return Err(Error::param(format!("rates must be positive and finite (lo = {lo}, hi = {hi})")));
    }
    if lo >= hi {
        return Err(Error::param(format!("need lo < hi, got lo = {lo}, hi = {hi}")));
    }
    Ok(())
}

impl fmt::Display for EnvDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvDistribution::TwoPoint { p, lo, hi } => write!(f, "two_point:{p},{lo},{hi}"),
            EnvDistribution::Uniform { lo, hi } => write!(f, "uniform:{lo},{hi}"),
            EnvDistribution::Discrete { values, weights } => {
                let join = |xs: &[f64]| xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
                write!(f, "discrete:{};{}", join(values), join(weights))
            }
        }
    }
}

/// Parses `two_point:p,lo,hi`, `uniform:lo,hi` or `discrete:v1,v2,..;w1,w2,..`.
impl FromStr for EnvDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, args) = s
            .split_once(':')
            .ok_or_else(|| Error::param(format!("distribution `{s}` lacks `kind:` prefix")))?;
        let nums = |part: &str| -> Result<Vec<f64>> {
            part.split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::param(format!("bad number `{t}` in `{s}`: {e}")))
                })
                .collect()
        };
        let dist = match kind.trim() {
            "two_point" => match nums(args)?.as_slice() {
                [p, lo, hi] => EnvDistribution::TwoPoint { p: *p, lo: *lo, hi: *hi },
                _ => return Err(Error::param("two_point takes p,lo,hi")),
            },
            "uniform" => match nums(args)?.as_slice() {
                [lo, hi] => EnvDistribution::Uniform { lo: *lo, hi: *hi },
                _ => return Err(Error::param("uniform takes lo,hi")),
            },
            "discrete" => {
                let (v, w) = args
                    .split_once(';')
                    .ok_or_else(|| Error::param("discrete takes values;weights"))?;
                EnvDistribution::Discrete {
                    values: nums(v)?,
                    weights: nums(w)?,
                }
            }
            other => return Err(Error::param(format!("unknown distribution kind `{other}`"))),
        };
        dist.validate()?;
        Ok(dist)
    }
}

/// Branching rates on a finite window of sites.
///
/// `ei` and `es` are the bounds of the law the rates were drawn from, not the
/// sample extremes. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    dist: Option<EnvDistribution>,
    x_min: i64,
    x_max: i64,
    rates: Vec<f64>,
    ei: f64,
    es: f64,
    seed: u64,
}

impl Environment {
    /// Builds an environment from explicit rates on `[x_min, x_min + len)`.
    pub fn from_rates(x_min: i64, rates: Vec<f64>, ei: f64, es: f64) -> Result<Self> {
        let env = Self::from_rates_unchecked(x_min, rates, ei, es);
        env.validate()?;
        Ok(env)
    }

    /// Skips every invariant check; only for test harnesses that need
    /// degenerate rates such as ξ ≡ 0.
    #[doc(hidden)]
    pub fn from_rates_unchecked(x_min: i64, rates: Vec<f64>, ei: f64, es: f64) -> Self {
        let x_max = x_min + rates.len() as i64 - 1;
        Environment {
            dist: None,
            x_min,
            x_max,
            rates,
            ei,
            es,
            seed: 0,
        }
    }

    /// Constant rate `rate` on `[x_min, x_max]`, with `ei = es = rate`.
    pub fn homogeneous(rate: f64, x_min: i64, x_max: i64) -> Result<Self> {
        if x_min > x_max {
            return Err(Error::param(format!("empty window [{x_min}, {x_max}]")));
        }
        Self::from_rates(x_min, vec![rate; (x_max - x_min + 1) as usize], rate, rate)
    }

    fn validate(&self) -> Result<()> {
        if !positive_finite(self.ei) || !positive_finite(self.es) || self.ei > self.es {
            return Err(Error::param(format!(
                "need 0 < ei <= es < inf, got ei = {}, es = {}",
                self.ei, self.es
            )));
        }
        if self.rates.is_empty() {
            return Err(Error::param("environment has no sites"));
        }
        for (i, r) in self.rates.iter().enumerate() {
            if !positive_finite(*r) {
                return Err(Error::param(format!(
                    "rate at site {} is {r}, not positive",
                    self.x_min + i as i64
                )));
            }
            if *r < self.ei || *r > self.es {
                return Err(Error::param(format!(
                    "rate {r} at site {} outside [ei, es] = [{}, {}]",
                    self.x_min + i as i64,
                    self.ei,
                    self.es
                )));
            }
        }
        Ok(())
    }

    pub fn x_min(&self) -> i64 {
        self.x_min
    }

    pub fn x_max(&self) -> i64 {
        self.x_max
    }

    pub fn ei(&self) -> f64 {
        self.ei
    }

    pub fn es(&self) -> f64 {
        self.es
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn distribution(&self) -> Option<&EnvDistribution> {
        self.dist.as_ref()
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn contains(&self, x: i64) -> bool {
        (self.x_min..=self.x_max).contains(&x)
    }

    /// ξ(x). Panics outside the stored window.
    #[inline]
    pub fn rate(&self, x: i64) -> f64 {
        debug_assert!(self.contains(x), "site {x} outside [{}, {}]", self.x_min, self.x_max);
        self.rates[(x - self.x_min) as usize]
    }

    pub fn get(&self, x: i64) -> Option<f64> {
        self.contains(x).then(|| self.rates[(x - self.x_min) as usize])
    }

    /// ζ(x) = ξ(x) − es ≤ 0.
    #[inline]
    pub fn zeta(&self, x: i64) -> f64 {
        self.rate(x) - self.es
    }

    /// Fails unless `[lo, hi]` lies inside the stored window.
    pub fn require(&self, lo: i64, hi: i64) -> Result<()> {
        if lo < self.x_min || hi > self.x_max {
            return Err(Error::Window {
                need_lo: lo,
                need_hi: hi,
                have_lo: self.x_min,
                have_hi: self.x_max,
            });
        }
        Ok(())
    }

    /// ζ^{(k)}(·) = ζ(k + ·): the environment seen from site `k`.
    ///
    /// The result keeps every stored site; the shifted window must still
    /// contain the origin.
    pub fn shift(&self, k: i64) -> Result<Environment> {
        if !self.contains(k) {
            return Err(Error::Window {
                need_lo: k,
                need_hi: k,
                have_lo: self.x_min,
                have_hi: self.x_max,
            });
        }
        let mut out = self.clone();
        out.x_min -= k;
        out.x_max -= k;
        Ok(out)
    }

    /// Shifted environment restricted to `[lo, hi]`.
    pub fn shift_window(&self, k: i64, lo: i64, hi: i64) -> Result<Environment> {
        if lo > hi {
            return Err(Error::param(format!("empty window [{lo}, {hi}]")));
        }
        self.require(lo + k, hi + k)?;
        let start = (lo + k - self.x_min) as usize;
        let end = (hi + k - self.x_min) as usize;
        Ok(Environment {
            x_min: lo,
            x_max: hi,
            rates: self.rates[start..=end].to_vec(),
            ..self.clone()
        })
    }
}

/// Draws an environment on `[x_min, x_max]`; site `x` uses its own stream,
/// so growing the window never changes existing sites.
pub fn sample_environment(
    dist: &EnvDistribution,
    x_min: i64,
    x_max: i64,
    seed: u64,
) -> Result<Environment> {
    dist.validate()?;
    if !(x_min <= 0 && 0 <= x_max) {
        return Err(Error::param(format!("window [{x_min}, {x_max}] must contain the origin")));
    }
    let rates = (x_min..=x_max)
        .map(|x| dist.quantile_map(rng::site_stream(seed, x).random::<f64>()))
        .collect();
    let (ei, es) = dist.support();
    let mut env = Environment::from_rates(x_min, rates, ei, es)?;
    env.dist = Some(dist.clone());
    env.seed = seed;
    Ok(env)
}

#[derive(Serialize, Deserialize)]
struct EnvFile {
    version: u32,
    dist: Option<EnvDistribution>,
    x_min: i64,
    x_max: i64,
    seed: u64,
    ei: f64,
    es: f64,
    #[serde(serialize_with = "ser_17_digits")]
    rates: Vec<f64>,
}

fn ser_17_digits<S: Serializer>(xs: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::Error as _;
    let raw: std::result::Result<Vec<_>, _> = xs
        .iter()
        .map(|x| serde_json::value::RawValue::from_string(format!("{x:.16e}")))
        .collect();
    s.collect_seq(raw.map_err(S::Error::custom)?)
}

pub fn to_json(env: &Environment) -> Result<String> {
    let file = EnvFile {
        version: ENV_FILE_VERSION,
        dist: env.dist.clone(),
        x_min: env.x_min,
        x_max: env.x_max,
        seed: env.seed,
        ei: env.ei,
        es: env.es,
        rates: env.rates.clone(),
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::Internal(e.to_string()))
}

pub fn from_json(text: &str, context: &str) -> Result<Environment> {
    let format = |message: String| Error::Format {
        context: context.to_string(),
        message,
    };
    let file: EnvFile = serde_json::from_str(text).map_err(|e| format(e.to_string()))?;
    if file.version != ENV_FILE_VERSION {
        return Err(format(format!("unsupported version {}", file.version)));
    }
    if file.x_max < file.x_min {
        return Err(format(format!("x_max = {} < x_min = {}", file.x_max, file.x_min)));
    }
    let expected = (file.x_max - file.x_min + 1) as usize;
    if file.rates.len() != expected {
        return Err(format(format!(
            "field `rates` has {} entries, window needs {expected}",
            file.rates.len()
        )));
    }
    if let Some((i, r)) = file.rates.iter().enumerate().find(|(_, r)| !positive_finite(**r)) {
        return Err(format(format!("field `rates[{i}]` = {r} is not positive")));
    }
    if let Some(d) = &file.dist {
        d.validate().map_err(|e| format(format!("field `dist`: {e}")))?;
    }
    let mut env = Environment::from_rates(file.x_min, file.rates, file.ei, file.es)
        .map_err(|e| format(e.to_string()))?;
    env.dist = file.dist;
    env.seed = file.seed;
    Ok(env)
}

pub fn save_environment(env: &Environment, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(env)?).map_err(|e| Error::io(path, e))
}

pub fn load_environment(path: &Path) -> Result<Environment> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text, &path.display().to_string())
}
