//! Request generation: fixed-length prompts or synthetic prompts that share
//! prefixes drawn from a pool of stems.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadMode {
    Static,
    Synthetic,
}

/// Unique-length presets. Larger unique lengths mean less shared prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    A,
    B,
    C,
}

impl Preset {
    /// (mean, std) of the unique token count.
    pub fn unique(self) -> (f64, f64) {
        match self {
            Preset::A => (1073.0, 1549.0),
            Preset::B => (1215.0, 1693.0),
            Preset::C => (1631.0, 2027.0),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "A" | "a" => Ok(Preset::A),
            "B" | "b" => Ok(Preset::B),
            "C" | "c" => Ok(Preset::C),
            _ => Err(format!("unknown workload preset {s:?} (expected A, B or C)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub mode: WorkloadMode,
    pub requests: usize,
    /// Mean Poisson arrival rate, requests per second.
    pub qps: f64,
    pub seed: u64,
    /// Static mode prompt and output lengths.
    pub input_len: u32,
    pub output_len: u32,
    /// Synthetic mode length distributions. Means are matched exactly;
    /// the std is the scale of the underlying normal before truncation.
    pub input_mean: f64,
    pub input_std: f64,
    pub output_mean: f64,
    pub output_std: f64,
    pub preset: Preset,
    /// Override the preset's unique-length parameters.
    pub unique_mean: Option<f64>,
    pub unique_std: Option<f64>,
    /// Number of pre-generated prefix stems requests draw their shared part from.
    pub prefix_pool: u32,
    /// Upper bound on sampled prompt length.
    pub max_input: u32,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            mode: WorkloadMode::Synthetic,
            requests: 200,
            qps: 2.0,
            seed: 1,
            input_len: 6000,
            output_len: 3,
            input_mean: 4449.0,
            input_std: 2424.0,
            output_mean: 215.0,
            output_std: 263.0,
            preset: Preset::A,
            unique_mean: None,
            unique_std: None,
            prefix_pool: 50,
            max_input: 32768,
        }
    }
}

impl WorkloadSpec {
    pub fn fixed(input_len: u32, requests: usize, qps: f64, seed: u64) -> Self {
        Self { mode: WorkloadMode::Static, input_len, output_len: 3, requests, qps, seed, ..Self::default() }
    }

    pub fn synthetic(preset: Preset, requests: usize, qps: f64, seed: u64) -> Self {
        Self { mode: WorkloadMode::Synthetic, preset, requests, qps, seed, ..Self::default() }
    }

    pub fn unique_params(&self) -> (f64, f64) {
        let (m, s) = self.preset.unique();
        (self.unique_mean.unwrap_or(m), self.unique_std.unwrap_or(s))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !(self.qps.is_finite() && self.qps > 0.0) {
            return bad("workload.qps must be positive");
        }
        match self.mode {
            WorkloadMode::Static => {
                if self.input_len == 0 || self.output_len == 0 {
                    return bad("workload.input_len and output_len must be at least 1");
                }
            }
            WorkloadMode::Synthetic => {
                let (um, us) = self.unique_params();
                for (name, v) in [
                    ("input_mean", self.input_mean),
                    ("input_std", self.input_std),
                    ("output_mean", self.output_mean),
                    ("output_std", self.output_std),
                    ("unique_mean", um),
                    ("unique_std", us),
                ] {
                    if !(v.is_finite() && v > 0.0) {
                        return bad(&format!("workload.{name} must be positive"));
                    }
                }
                if self.prefix_pool == 0 {
                    return bad("workload.prefix_pool must be at least 1");
                }
                if self.input_mean >= self.max_input as f64 {
                    return bad("workload.input_mean must be below max_input");
                }
                if um >= self.input_mean {
                    return bad("workload.unique_mean must be below input_mean");
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Request {
    pub id: u64,
    /// Arrival time in nanoseconds of virtual time.
    pub arrival_ns: u64,
    pub tokens: Vec<u32>,
    pub output_len: u32,
    /// Leading tokens taken from a prefix stem (0 for static prompts).
    pub shared_len: u32,
}

/// Normal(mu, sigma) restricted to `[lo, hi]`.
#[derive(Clone, Copy, Debug)]
pub struct TruncatedNormal {
    pub mu: f64,
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

impl TruncatedNormal {
    pub fn new(mu: f64, sigma: f64, lo: f64, hi: f64) -> Result<Self, SimError> {
        if !(sigma > 0.0 && lo < hi && mu.is_finite()) {
            return Err(SimError::Config(format!("bad truncated normal ({mu}, {sigma}, [{lo}, {hi}])")));
        }
        Ok(Self { mu, sigma, lo, hi })
    }

    fn bounds(&self) -> (f64, f64) {
        ((self.lo - self.mu) / self.sigma, (self.hi - self.mu) / self.sigma)
    }

    /// Probability mass inside the bounds, computed on the tail side that
    /// keeps precision when the window sits far from the mean.
    fn mass(&self) -> f64 {
        let n = std_normal();
        let (a, b) = self.bounds();
        if a > 0.0 {
            n.sf(a) - n.sf(b)
        } else {
            n.cdf(b) - n.cdf(a)
        }
    }

    pub fn mean(&self) -> f64 {
        let n = std_normal();
        let (a, b) = self.bounds();
        let z = self.mass();
        if z.is_nan() || z <= 1e-300 {
            // All mass effectively at the nearer bound.
            return if a > 0.0 { self.lo } else { self.hi };
        }
        let m = self.mu + self.sigma * (n.pdf(a) - n.pdf(b)) / z;
        m.clamp(self.lo, self.hi)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let n = std_normal();
        let (a, _) = self.bounds();
        let u: f64 = rng.gen();
        let z = if a > 0.0 {
            let p = (n.sf(a) - u * self.mass()).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
            -n.inverse_cdf(p)
        } else {
            let p = (n.cdf(a) + u * self.mass()).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
            n.inverse_cdf(p)
        };
        (self.mu + self.sigma * z).clamp(self.lo, self.hi)
    }

    /// Location parameter whose truncation to `[lo, hi]` has mean `target`.
    pub fn calibrate(target: f64, sigma: f64, lo: f64, hi: f64) -> Result<Self, SimError> {
        Self::calibrate_with(target, sigma, |mu| Ok(TruncatedNormal::new(mu, sigma, lo, hi)?.mean()))
            .and_then(|mu| Self::new(mu, sigma, lo, hi))
    }

    /// Bisection on the location. `mean_of` must be increasing in mu.
    fn calibrate_with(
        target: f64,
        sigma: f64,
        mean_of: impl Fn(f64) -> Result<f64, SimError>,
    ) -> Result<f64, SimError> {
        let (mut lo, mut hi) = (target - 40.0 * sigma, target + 40.0 * sigma);
        if !(mean_of(lo)? <= target && mean_of(hi)? >= target) {
            return Err(SimError::Config(format!("cannot reach mean {target} with std {sigma}")));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mean_of(mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Calibrated length distributions for synthetic mode.
#[derive(Clone, Debug)]
pub struct LengthModel {
    pub input: TruncatedNormal,
    pub output: TruncatedNormal,
    /// Location of the unique-length normal; truncated per request to
    /// `[0.5, input + 0.5]`.
    pub unique_mu: f64,
    pub unique_sigma: f64,
}

const QUADRATURE: usize = 256;

impl LengthModel {
    pub fn calibrate(spec: &WorkloadSpec) -> Result<Self, SimError> {
        let input = TruncatedNormal::calibrate(spec.input_mean, spec.input_std, 0.5, spec.max_input as f64 + 0.5)?;
        let output = TruncatedNormal::calibrate(spec.output_mean, spec.output_std, 0.5, f64::INFINITY)?;
        // Expected unique length averaged over input quantiles, as sampled.
        let inputs: Vec<f64> = (0..QUADRATURE)
            .map(|k| {
                let n = std_normal();
                let (a, b) = input.bounds();
                let u = (k as f64 + 0.5) / QUADRATURE as f64;
                let p = n.cdf(a) + u * (n.cdf(b) - n.cdf(a));
                (input.mu + input.sigma * n.inverse_cdf(p)).clamp(input.lo, input.hi).round()
            })
            .collect();
        let (um, us) = spec.unique_params();
        let mean_unique = |mu: f64| -> Result<f64, SimError> {
            let mut acc = 0.0;
            for &len in &inputs {
                acc += TruncatedNormal::new(mu, us, 0.5, len + 0.5)?.mean();
            }
            Ok(acc / inputs.len() as f64)
        };
        let unique_mu = TruncatedNormal::calibrate_with(um, us, mean_unique)?;
        Ok(Self { input, output, unique_mu, unique_sigma: us })
    }

    /// Draw (input, output, unique) lengths for one request.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (u32, u32, u32) {
        let input = (self.input.sample(rng).round() as u32).max(1);
        let output = (self.output.sample(rng).round() as u32).max(1);
        let unique = TruncatedNormal { mu: self.unique_mu, sigma: self.unique_sigma, lo: 0.5, hi: input as f64 + 0.5 }
            .sample(rng)
            .round() as u32;
        (input, output, unique.clamp(1, input))
    }
}

/// Generate `spec.requests` requests. Deterministic in `spec.seed`.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<Request>, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut token_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    token_rng.set_stream(1);
    let gaps = Exp::new(spec.qps).map_err(|e| SimError::Config(e.to_string()))?;
    let mut t = 0.0f64;
    let mut out = Vec::with_capacity(spec.requests);
    match spec.mode {
        WorkloadMode::Static => {
            for id in 0..spec.requests as u64 {
                t += gaps.sample(&mut rng);
                let tokens = (0..spec.input_len).map(|_| token_rng.gen()).collect();
                out.push(Request {
                    id,
                    arrival_ns: (t * 1e9).round() as u64,
                    tokens,
                    output_len: spec.output_len,
                    shared_len: 0,
                });
            }
        }
        WorkloadMode::Synthetic => {
            let lengths = LengthModel::calibrate(spec)?;
            let stems: Vec<Vec<u32>> = (0..spec.prefix_pool)
                .map(|_| (0..spec.max_input).map(|_| token_rng.gen()).collect())
                .collect();
            for id in 0..spec.requests as u64 {
                t += gaps.sample(&mut rng);
                let (input, output, unique) = lengths.sample(&mut rng);
                let stem = &stems[rng.gen_range(0..stems.len())];
                let shared = input - unique;
                let mut tokens = stem[..shared as usize].to_vec();
                tokens.extend((0..unique).map(|_| token_rng.gen::<u32>()));
                out.push(Request {
                    id,
                    arrival_ns: (t * 1e9).round() as u64,
                    tokens,
                    output_len: output,
                    shared_len: shared,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(xs: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = xs.collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn static_lengths_are_exact() {
        let reqs = generate_workload(&WorkloadSpec::fixed(6000, 50, 1.0, 3)).unwrap();
        assert_eq!(reqs.len(), 50);
        assert!(reqs.iter().all(|r| r.tokens.len() == 6000 && r.output_len == 3));
    }

    #[test]
    fn same_seed_same_tokens() {
        let spec = WorkloadSpec::synthetic(Preset::B, 40, 2.0, 11);
        assert_eq!(generate_workload(&spec).unwrap(), generate_workload(&spec).unwrap());
        let other = WorkloadSpec { seed: 12, ..spec.clone() };
        assert_ne!(generate_workload(&spec).unwrap(), generate_workload(&other).unwrap());
    }

    #[test]
    fn truncated_mean_matches_numeric_integration() {
        // Independent check of the closed form by midpoint integration.
        let d = TruncatedNormal::new(300.0, 1000.0, 0.5, 5000.5).unwrap();
        let n = Normal::new(d.mu, d.sigma).unwrap();
        let steps = 200_000;
        let h = (d.hi - d.lo) / steps as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..steps {
            let x = d.lo + (i as f64 + 0.5) * h;
            num += x * n.pdf(x) * h;
            den += n.pdf(x) * h;
        }
        assert!((d.mean() - num / den).abs() < 1e-3, "{} vs {}", d.mean(), num / den);
    }

    #[test]
    fn far_tail_window_still_samples_inside() {
        let d = TruncatedNormal::new(-20_000.0, 1000.0, 0.5, 100.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x = d.sample(&mut rng);
            assert!((0.5..=100.5).contains(&x));
        }
        assert!(d.mean() > 0.5 && d.mean() < 100.5);
    }

    #[test]
    fn preset_means_within_five_percent() {
        for (preset, unique) in [(Preset::A, 1073.0), (Preset::B, 1215.0), (Preset::C, 1631.0)] {
            let reqs = generate_workload(&WorkloadSpec {
                max_input: 20_000,
                ..WorkloadSpec::synthetic(preset, 10_000, 5.0, 21)
            })
            .unwrap();
            let input = mean(reqs.iter().map(|r| r.tokens.len() as f64));
            let output = mean(reqs.iter().map(|r| r.output_len as f64));
            let uniq = mean(reqs.iter().map(|r| (r.tokens.len() as u32 - r.shared_len) as f64));
            for (got, want) in [(input, 4449.0), (output, 215.0), (uniq, unique)] {
                assert!((got - want).abs() / want < 0.05, "{preset:?}: {got} vs {want}");
            }
            assert!(reqs.iter().all(|r| {
                let u = r.tokens.len() as u32 - r.shared_len;
                !r.tokens.is_empty() && r.output_len >= 1 && u >= 1 && u <= r.tokens.len() as u32
            }));
        }
    }

    #[test]
    fn arrivals_follow_rate() {
        let reqs = generate_workload(&WorkloadSpec::fixed(10, 20_000, 4.0, 5)).unwrap();
        assert!(reqs.windows(2).all(|w| w[0].arrival_ns <= w[1].arrival_ns));
        let rate = reqs.len() as f64 / (reqs.last().unwrap().arrival_ns as f64 * 1e-9);
        assert!((rate - 4.0).abs() < 0.1, "{rate}");
    }

    #[test]
    fn requests_share_stem_prefixes() {
        let reqs = generate_workload(&WorkloadSpec { prefix_pool: 1, ..WorkloadSpec::synthetic(Preset::A, 20, 1.0, 2) })
            .unwrap();
        let (a, b) = (&reqs[0], &reqs[1]);
        let common = a.shared_len.min(b.shared_len) as usize;
        assert_eq!(a.tokens[..common], b.tokens[..common]);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let bad = WorkloadSpec { qps: 0.0, ..WorkloadSpec::default() };
        assert!(generate_workload(&bad).is_err());
        let bad = WorkloadSpec { unique_mean: Some(5000.0), ..WorkloadSpec::default() };
        assert!(generate_workload(&bad).is_err());
        let bad = WorkloadSpec { output_std: -1.0, ..WorkloadSpec::default() };
        assert!(generate_workload(&bad).is_err());
    }
}
