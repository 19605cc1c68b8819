//! Synthetic joint covariate + label shift benchmark.
//!
//! Classes are isotropic Gaussians around scaled orthonormal directions. The
//! source split is long-tailed with an exponential profile; target streams
//! draw labels from a forward, uniform or backward profile and push the
//! features through a fixed rotation, per-dimension scaling and additive
//! noise whose magnitude grows with severity.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::RealMatrix;
use crate::losses::LabelDistribution;

pub const MAX_SEVERITY: u32 = 5;
pub const MAX_ROTATION_DEG: f64 = 25.0;
/// Noise standard deviation at severity 5, in units of the within-class std.
pub const MAX_NOISE_RATIO: f64 = 1.5;
pub const MAX_SCALE_JITTER: f64 = 0.30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Uniform,
    Backward,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Uniform => "uniform",
            Direction::Backward => "backward",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "uniform" => Ok(Direction::Uniform),
            "backward" => Ok(Direction::Backward),
            other => Err(Error::Config(format!("unknown direction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftScenario {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Distance of every class mean from the origin.
    pub class_sep: f64,
    pub within_std: f64,
    pub rho_s: f64,
    /// Size of the most frequent source class.
    pub n_max: usize,
    pub severity: u32,
    pub direction: Direction,
    pub rho_t: f64,
    pub stream_length: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ShiftScenario {
    fn default() -> Self {
        Self {
            num_classes: 10,
            feature_dim: 16,
            class_sep: 3.4,
            within_std: 1.0,
            rho_s: 100.0,
            n_max: 4000,
            severity: 3,
            direction: Direction::Backward,
            rho_t: 50.0,
            stream_length: 6400,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl ShiftScenario {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(self.rho_s >= 1.0) || !(self.rho_t >= 1.0) {
            return Err(Error::Config("imbalance ratios must be >= 1".into()));
        }
        if self.severity > MAX_SEVERITY {
            return Err(Error::Config(format!("severity must be in 0..={MAX_SEVERITY}")));
        }
        if !(self.class_sep > 0.0) || !(self.within_std > 0.0) {
            return Err(Error::Config("class_sep and within_std must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Fixed purposes for independent random streams derived from one seed.
#[derive(Debug, Clone, Copy)]
pub enum StreamId {
    Geometry = 1,
    Source = 2,
    Probe = 3,
    Target = 4,
    ModelInit = 5,
    Pretrain = 6,
    AdapterInit = 7,
    AdapterTrain = 8,
}

pub fn rng_for(seed: u64, stream: StreamId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Counts `round(n_max * rho^(-i/(C-1)))` for classes `0..C`.
pub fn profile_counts(n_max: usize, rho: f64, num_classes: usize) -> Result<Vec<usize>> {
    let denom = (num_classes - 1).max(1) as f64;
    (0..num_classes)
        .map(|i| {
            let raw = n_max as f64 * rho.powf(-(i as f64) / denom);
            let n = raw.round();
            if n < 1.0 {
                Err(Error::Infeasible { class: i, count: raw })
            } else {
                Ok(n as usize)
            }
        })
        .collect()
}

fn normalize_counts(counts: &[usize]) -> LabelDistribution {
    let w: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    LabelDistribution::from_weights(&w).expect("positive counts")
}

/// Splits `total` into integer counts proportional to `p` (largest remainder,
/// ties to the lower class index).
pub fn apportion(p: &LabelDistribution, total: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.probs().iter().map(|q| q * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// The fixed covariate transform for one seed: `x -> S R x + noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateShift {
    /// D×D orthogonal matrix applied as `x R^T`.
    pub rotation: RealMatrix,
    pub scale: Vec<f64>,
    pub noise_std: f64,
}

impl CovariateShift {
    pub fn identity(dim: usize) -> Self {
        Self {
            rotation: RealMatrix::identity(dim),
            scale: vec![1.0; dim],
            noise_std: 0.0,
        }
    }

    /// Applies rotation and scaling (no noise) to every row.
    pub fn apply_deterministic(&self, x: &RealMatrix) -> RealMatrix {
        let rotated = x.matmul(&self.rotation.transpose()).expect("square rotation");
        let mut out = rotated;
        for r in 0..out.rows() {
            for (v, s) in out.row_mut(r).iter_mut().zip(&self.scale) {
                *v *= s;
            }
        }
        out
    }
}

/// Class geometry and covariate transform of one scenario seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub scenario: ShiftScenario,
    /// C×D class means.
    pub means: RealMatrix,
    pub shift: CovariateShift,
}

/// Labelled source data with its empirical label distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceData {
    pub x: RealMatrix,
    pub labels: Vec<usize>,
    pub counts: Vec<usize>,
    pub pi_s: LabelDistribution,
}

/// Unlabelled stream with hidden labels kept for scoring only.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetStream {
    pub x: RealMatrix,
    pub labels: Vec<usize>,
    pub p_t: LabelDistribution,
    pub batch_size: usize,
}

impl TargetStream {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_batches(&self) -> usize {
        self.len().div_ceil(self.batch_size)
    }

    /// Row ranges of consecutive batches; the last one may be short.
    pub fn batch_ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.num_batches()).map(move |b| {
            let start = b * self.batch_size;
            start..(start + self.batch_size).min(self.len())
        })
    }

    pub fn batch(&self, range: std::ops::Range<usize>) -> (RealMatrix, &[usize]) {
        let idx: Vec<usize> = range.clone().collect();
        (self.x.select_rows(&idx), &self.labels[range])
    }
}

/// Orthonormal rows by Gram-Schmidt on Gaussian draws. Falls back to plain
/// unit vectors for rows beyond the dimension.
fn random_directions<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if out.len() < dim {
            for u in &out {
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        out.push(v);
    }
    out
}

/// Rotation by `angle` in D/2 mutually orthogonal random planes, so every
/// vector orthogonal to the fixed axis (odd D) turns by exactly `angle`.
fn plane_rotation<R: Rng>(dim: usize, angle: f64, rng: &mut R) -> RealMatrix {
    let basis = random_directions(dim, dim, rng);
    let q = RealMatrix::from_rows(&basis).expect("square").transpose();
    let mut block = RealMatrix::identity(dim);
    let (c, s) = (angle.cos(), angle.sin());
    for p in 0..dim / 2 {
        let (i, j) = (2 * p, 2 * p + 1);
        block.set(i, i, c);
        block.set(i, j, -s);
        block.set(j, i, s);
        block.set(j, j, c);
    }
    q.matmul(&block)
        .and_then(|m| m.matmul(&q.transpose()))
        .expect("square")
}

impl Generator {
    pub fn new(scenario: &ShiftScenario) -> Result<Self> {
        scenario.validate()?;
        let (c, d) = (scenario.num_classes, scenario.feature_dim);
        let mut rng = rng_for(scenario.seed, StreamId::Geometry);
        let dirs = random_directions(c, d, &mut rng);
        let means = RealMatrix::from_rows(&dirs)?.map(|v| v * scenario.class_sep);

        // Shift directions are drawn once per seed; severity only scales them.
        let t = scenario.severity as f64 / MAX_SEVERITY as f64;
        let angle = (MAX_ROTATION_DEG * t).to_radians();
        let rotation = plane_rotation(d, angle, &mut rng);
        let unit = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
        let scale = (0..d)
            .map(|_| 1.0 + MAX_SCALE_JITTER * t * unit.sample(&mut rng))
            .collect();
        let shift = CovariateShift {
            rotation,
            scale,
            noise_std: MAX_NOISE_RATIO * scenario.within_std * t,
        };
        Ok(Self {
            scenario: scenario.clone(),
            means,
            shift,
        })
    }

    pub fn source_counts(&self) -> Result<Vec<usize>> {
        let s = &self.scenario;
        profile_counts(s.n_max, s.rho_s, s.num_classes)
    }

    pub fn source_prior(&self) -> Result<LabelDistribution> {
        Ok(normalize_counts(&self.source_counts()?))
    }

    /// The target label distribution for the scenario's direction and `rho_t`.
    pub fn target_prior(&self) -> Result<LabelDistribution> {
        let s = &self.scenario;
        let forward = || -> Result<LabelDistribution> {
            Ok(normalize_counts(&profile_counts(s.n_max, s.rho_t, s.num_classes)?))
        };
        Ok(match s.direction {
            Direction::Forward => forward()?,
            Direction::Uniform => LabelDistribution::uniform(s.num_classes),
            Direction::Backward => forward()?.reversed(),
        })
    }

    fn draw<R: Rng>(&self, labels: &[usize], rng: &mut R) -> RealMatrix {
        let d = self.scenario.feature_dim;
        let std = self.scenario.within_std;
        let mut x = RealMatrix::zeros(labels.len(), d);
        for (i, &y) in labels.iter().enumerate() {
            let mean = self.means.row(y);
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *v = mean[j] + std * z;
            }
        }
        x
    }

    /// Long-tailed labelled training set in the source domain.
    pub fn make_source(&self) -> Result<SourceData> {
        let counts = self.source_counts()?;
        let mut rng = rng_for(self.scenario.seed, StreamId::Source);
        let mut labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect();
        labels.shuffle(&mut rng);
        let x = self.draw(&labels, &mut rng);
        let pi_s = normalize_counts(&counts);
        Ok(SourceData {
            x,
            labels,
            counts,
            pi_s,
        })
    }

    /// Class-balanced labelled probe in the source domain.
    pub fn make_probe(&self, per_class: usize) -> Result<(RealMatrix, Vec<usize>)> {
        let mut rng = rng_for(self.scenario.seed, StreamId::Probe);
        let labels: Vec<usize> = (0..self.scenario.num_classes)
            .flat_map(|c| std::iter::repeat_n(c, per_class))
            .collect();
        let x = self.draw(&labels, &mut rng);
        Ok((x, labels))
    }

    /// Shifted target stream. Each (direction, rho_t) pair draws from its
    /// own random stream so cells of a benchmark are independent.
    pub fn make_target_stream(&self) -> Result<TargetStream> {
        let s = &self.scenario;
        let p_t = self.target_prior()?;
        if s.stream_length > 0 {
            for (class, &p) in p_t.probs().iter().enumerate() {
                let expected = p * s.stream_length as f64;
                if expected < 1.0 {
                    return Err(Error::Infeasible {
                        class,
                        count: expected,
                    });
                }
            }
        }
        let counts = apportion(&p_t, s.stream_length);
        let mut rng = rng_for(s.seed, StreamId::Target);
        let dir_code = match s.direction {
            Direction::Forward => 1u64,
            Direction::Uniform => 2,
            Direction::Backward => 3,
        };
        rng.set_stream(((StreamId::Target as u64) << 40) | (dir_code << 32) | (s.rho_t.to_bits() >> 32));
        let mut labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect();
        labels.shuffle(&mut rng);
        let clean = self.draw(&labels, &mut rng);
        let mut x = self.shift.apply_deterministic(&clean);
        if self.shift.noise_std > 0.0 {
            for v in x.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += self.shift.noise_std * z;
            }
        }
        Ok(TargetStream {
            x,
            labels,
            p_t,
            batch_size: s.batch_size,
        })
    }

    /// Exact log-likelihoods `log p(x | y)` (up to a shared constant) of each
    /// row under the shifted class-conditionals.
    pub fn shifted_log_likelihood(&self, x: &RealMatrix) -> RealMatrix {
        let c = self.scenario.num_classes;
        let s2 = self.scenario.within_std.powi(2);
        let n2 = self.shift.noise_std.powi(2);
        let var: Vec<f64> = self.shift.scale.iter().map(|a| s2 * a * a + n2).collect();
        let shifted_means = self.shift.apply_deterministic(&self.means);
        let mut out = RealMatrix::zeros(x.rows(), c);
        for r in 0..x.rows() {
            for k in 0..c {
                let m = shifted_means.row(k);
                let q: f64 = x
                    .row(r)
                    .iter()
                    .zip(m)
                    .zip(&var)
                    .map(|((xv, mv), v)| (xv - mv).powi(2) / v)
                    .sum();
                out.set(r, k, -0.5 * q);
            }
        }
        out
    }

    /// True posterior `p(y | x)` on shifted inputs under `prior`.
    pub fn oracle_posterior(&self, x: &RealMatrix, prior: &LabelDistribution) -> RealMatrix {
        let mut ll = self.shifted_log_likelihood(x);
        let lp = prior.log_floored();
        for r in 0..ll.rows() {
            for (v, l) in ll.row_mut(r).iter_mut().zip(&lp) {
                *v += l;
            }
        }
        ll.softmax_rows()
    }
}
