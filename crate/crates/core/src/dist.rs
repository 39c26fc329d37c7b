//! Truncated Gaussian and categorical distributions with score functions.

use rand::Rng as _;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use statrs::function::erf::{erf, erfc};
use std::f64::consts::SQRT_2;

use crate::error::{domain, numeric, Result};
use crate::rng::Rng;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

fn std_normal() -> Normal {
    Normal::standard()
}

fn phi(z: f64) -> f64 {
    if z.is_infinite() {
        0.0
    } else {
        std_normal().pdf(z)
    }
}

fn cdf(z: f64) -> f64 {
    std_normal().cdf(z)
}

fn sf(z: f64) -> f64 {
    std_normal().sf(z)
}

/// `z * phi(z)` with the limit 0 at infinity.
fn zphi(z: f64) -> f64 {
    if z.is_infinite() {
        0.0
    } else {
        z * phi(z)
    }
}

/// Normal(mu, sigma) restricted to [lo, hi]; either bound may be infinite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncGauss {
    pub mu: f64,
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Partial derivatives of the log-density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncGaussGrad {
    pub d_mu: f64,
    pub d_sigma: f64,
}

impl TruncGauss {
    pub fn new(mu: f64, sigma: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(domain(format!(
                "sigma must be positive and finite, got {sigma}"
            )));
        }
        if !mu.is_finite() {
            return Err(domain(format!("mu must be finite, got {mu}")));
        }
        if lo.is_nan() || hi.is_nan() || !(lo < hi) {
            return Err(domain(format!(
                "bounds must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { mu, sigma, lo, hi })
    }

    fn alpha(&self) -> f64 {
        (self.lo - self.mu) / self.sigma
    }

    fn beta(&self) -> f64 {
        (self.hi - self.mu) / self.sigma
    }

    /// Normalizer `Phi(beta) - Phi(alpha)`, formed without cancellation:
    /// erfc differences in either tail, an erf difference when the
    /// interval straddles the mean.
    pub fn mass(&self) -> f64 {
        let (a, b) = (self.alpha() / SQRT_2, self.beta() / SQRT_2);
        0.5 * if a >= 0.0 {
            erfc(a) - erfc(b)
        } else if b <= 0.0 {
            erfc(-b) - erfc(-a)
        } else {
            erf(b) - erf(a)
        }
    }

    fn checked_mass(&self) -> Result<f64> {
        let z = self.mass();
        if z > 0.0 {
            Ok(z)
        } else {
            Err(numeric(format!(
                "truncation mass underflows for mu={}, sigma={} on [{}, {}]; widen sigma",
                self.mu, self.sigma, self.lo, self.hi
            )))
        }
    }

    fn check_support(&self, x: f64) -> Result<()> {
        if x.is_nan() || x < self.lo || x > self.hi {
            return Err(domain(format!(
                "{x} outside support [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn logpdf(&self, x: f64) -> Result<f64> {
        self.check_support(x)?;
        let mass = self.checked_mass()?;
        let z = (x - self.mu) / self.sigma;
        Ok(-0.5 * z * z - LN_SQRT_2PI - self.sigma.ln() - mass.ln())
    }

    /// Density; zero outside the support.
    pub fn pdf(&self, x: f64) -> f64 {
        self.logpdf(x).map_or(0.0, f64::exp)
    }

    /// Inverse-CDF sample, clamped to the support.
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let u: f64 = rng.random();
        self.quantile(u)
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let n = std_normal();
        let (a, b) = (self.alpha(), self.beta());
        let z = if a >= 0.0 {
            // Upper tail: survival functions avoid cancellation.
            let (sa, sb) = (sf(a), sf(b));
            let s = sa - u * (sa - sb);
            if s > 0.0 && s < 1.0 {
                Some(-n.inverse_cdf(s))
            } else {
                None
            }
        } else {
            let (ca, cb) = (cdf(a), cdf(b));
            let c = ca + u * (cb - ca);
            if c > 0.0 && c < 1.0 {
                Some(n.inverse_cdf(c))
            } else {
                None
            }
        };
        let x = z
            .map(|z| self.mu + self.sigma * z)
            .filter(|x| x.is_finite());
        // Degenerate mass: all probability sits at the bound nearest mu.
        x.unwrap_or(self.mu).clamp(self.lo, self.hi)
    }

    pub fn grad_logpdf(&self, x: f64) -> Result<TruncGaussGrad> {
        self.check_support(x)?;
        let mass = self.checked_mass()?;
        let (a, b) = (self.alpha(), self.beta());
        let s = self.sigma;
        let z = (x - self.mu) / s;
        Ok(TruncGaussGrad {
            d_mu: z / s + (phi(b) - phi(a)) / (s * mass),
            d_sigma: z * z / s - 1.0 / s + (zphi(b) - zphi(a)) / (s * mass),
        })
    }

    pub fn mean(&self) -> f64 {
        let (a, b) = (self.alpha(), self.beta());
        self.mu + self.sigma * (phi(a) - phi(b)) / self.mass()
    }
}

/// Discrete distribution parameterized by logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Categorical {
    logits: Vec<f64>,
    log_norm: f64,
}

impl Categorical {
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(domain("categorical needs at least one category"));
        }
        if logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(domain("logits must be finite or -inf"));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(domain("categorical has no category with positive mass"));
        }
        let log_norm = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok(Self {
            logits: logits.to_vec(),
            log_norm,
        })
    }

    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(domain("probabilities must be finite and nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(domain(format!("probabilities sum to {total}, not 1")));
        }
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        Self::from_logits(&logits)
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logits
            .iter()
            .map(|l| (l - self.log_norm).exp())
            .collect()
    }

    fn check_index(&self, k: usize) -> Result<()> {
        if k >= self.logits.len() {
            return Err(domain(format!(
                "category {k} outside 0..{}",
                self.logits.len()
            )));
        }
        Ok(())
    }

    pub fn logpmf(&self, k: usize) -> Result<f64> {
        self.check_index(k)?;
        Ok(self.logits[k] - self.log_norm)
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (k, p) in self.probs().into_iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            last = k;
            acc += p;
            if u < acc {
                return k;
            }
        }
        last
    }

    /// Score with respect to the logits: `onehot(k) - p`.
    pub fn grad_logits(&self, k: usize) -> Result<Vec<f64>> {
        self.check_index(k)?;
        let mut g: Vec<f64> = self.probs().into_iter().map(|p| -p).collect();
        g[k] += 1.0;
        Ok(g)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub const SIGMA_FLOOR: f64 = 1e-3;

/// Maps raw head outputs to a truncated Gaussian on `[lo, hi]`.
/// The mean stays strictly inside the bounds and sigma stays above a floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussHead {
    pub lo: f64,
    pub hi: f64,
}

impl GaussHead {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn mu(&self, raw: f64) -> f64 {
        self.lo + (self.hi - self.lo) * sigmoid(raw)
    }

    pub fn d_mu(&self, raw: f64) -> f64 {
        let s = sigmoid(raw);
        (self.hi - self.lo) * s * (1.0 - s)
    }

    pub fn sigma(&self, raw: f64) -> f64 {
        softplus(raw) + SIGMA_FLOOR
    }

    pub fn d_sigma(&self, raw: f64) -> f64 {
        sigmoid(raw)
    }

    pub fn dist(&self, raw_mu: f64, raw_sigma: f64) -> Result<TruncGauss> {
        TruncGauss::new(self.mu(raw_mu), self.sigma(raw_sigma), self.lo, self.hi)
    }

    /// Gradient of the log-density with respect to the two raw outputs.
    pub fn grad_raw(&self, raw_mu: f64, raw_sigma: f64, x: f64) -> Result<[f64; 2]> {
        let g = self.dist(raw_mu, raw_sigma)?.grad_logpdf(x)?;
        Ok([
            g.d_mu * self.d_mu(raw_mu),
            g.d_sigma * self.d_sigma(raw_sigma),
        ])
    }
}
