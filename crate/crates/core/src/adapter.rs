//! The label shift adapter: a label distribution is summarized into one
//! imbalance coordinate by a fixed mapping vector, and two FC-ReLU-FC
//! branches turn that coordinate into classifier corrections.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Graph, RealMatrix, Var};
use crate::losses::{generalized_logit_adjusted, LabelDistribution};
use crate::model::{AdapterOutput, AdapterVars, Binding, Network, ParamGroup, ParamStore, Stage};
use crate::optim::Sgd;

/// Per-class coefficients in `[-1, 1]`, rising with rarity rank: the most
/// frequent training class maps to -1 and the rarest to +1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingVector(Vec<f64>);

/// Rank of each class by descending frequency; ties go to the lower index.
pub fn frequency_ranks(pi: &LabelDistribution) -> Vec<usize> {
    let p = pi.probs();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; p.len()];
    for (rank, &class) in order.iter().enumerate() {
        ranks[class] = rank;
    }
    ranks
}

/// The distribution obtained by assigning the head class's mass to the
/// rarest class, and so on down the frequency ranking.
pub fn inverse_distribution(pi: &LabelDistribution) -> LabelDistribution {
    let ranks = frequency_ranks(pi);
    let c = ranks.len();
    let mut by_rank = vec![0.0; c];
    for (class, &r) in ranks.iter().enumerate() {
        by_rank[r] = pi.probs()[class];
    }
    let inv = ranks.iter().map(|&r| by_rank[c - 1 - r]).collect();
    LabelDistribution::new(inv).expect("permutation of a distribution")
}

impl MappingVector {
    pub fn from_source(pi_s: &LabelDistribution) -> Self {
        let c = pi_s.len();
        let denom = (c - 1).max(1) as f64;
        Self(
            frequency_ranks(pi_s)
                .into_iter()
                .map(|r| 2.0 * r as f64 / denom - 1.0)
                .collect(),
        )
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// `m . pi`.
    pub fn map(&self, pi: &LabelDistribution) -> Result<f64> {
        if pi.len() != self.0.len() {
            return Err(Error::Dimension {
                op: "map_distribution",
                left: (1, self.0.len()),
                right: (1, pi.len()),
            });
        }
        Ok(self.0.iter().zip(pi.probs()).map(|(m, p)| m * p).sum())
    }
}

/// Which generated components reach the classifier. Disabled components
/// are replaced by their neutral values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentMask {
    pub gamma_h: bool,
    pub beta_h: bool,
    pub delta_w: bool,
    pub delta_b: bool,
}

impl ComponentMask {
    pub const ALL: Self = Self {
        gamma_h: true,
        beta_h: true,
        delta_w: true,
        delta_b: true,
    };
    pub const NONE: Self = Self {
        gamma_h: false,
        beta_h: false,
        delta_w: false,
        delta_b: false,
    };

    /// The seven rows of the architecture ablation, all-components last.
    pub fn ablation_masks() -> [Self; 7] {
        let m = |g, b, w, d| Self {
            gamma_h: g,
            beta_h: b,
            delta_w: w,
            delta_b: d,
        };
        [
            m(true, false, false, false),
            m(false, true, false, false),
            m(false, false, true, false),
            m(false, false, false, true),
            m(true, true, false, false),
            m(false, false, true, true),
            m(true, true, true, true),
        ]
    }

    fn branch_a(self) -> bool {
        self.gamma_h || self.beta_h
    }

    fn branch_b(self) -> bool {
        self.delta_w || self.delta_b
    }
}

impl fmt::Display for ComponentMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.gamma_h, "gamma"),
            (self.beta_h, "beta"),
            (self.delta_w, "dw"),
            (self.delta_b, "db"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

impl FromStr for ComponentMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut m = Self::NONE;
        let s = s.trim();
        if s == "none" {
            return Ok(m);
        }
        if s == "all" {
            return Ok(Self::ALL);
        }
        for part in s.split(['+', ',']).map(str::trim) {
            match part {
                "gamma" => m.gamma_h = true,
                "beta" => m.beta_h = true,
                "dw" => m.delta_w = true,
                "db" => m.delta_b = true,
                other => return Err(Error::Config(format!("unknown adapter component `{other}`"))),
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub mask: ComponentMask,
}

impl AdapterSpec {
    pub fn branch_a_out(&self) -> usize {
        2 * self.feature_dim
    }

    pub fn branch_b_out(&self) -> usize {
        self.feature_dim * self.num_classes + self.num_classes
    }
}

pub const A_FC1_W: &str = "adapter.a.fc1.weight";
pub const A_FC1_B: &str = "adapter.a.fc1.bias";
pub const A_FC2_W: &str = "adapter.a.fc2.weight";
pub const A_FC2_B: &str = "adapter.a.fc2.bias";
pub const B_FC1_W: &str = "adapter.b.fc1.weight";
pub const B_FC1_B: &str = "adapter.b.fc1.bias";
pub const B_FC2_W: &str = "adapter.b.fc2.weight";
pub const B_FC2_B: &str = "adapter.b.fc2.bias";

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub spec: AdapterSpec,
    pub params: ParamStore,
    pub mapping: MappingVector,
}

impl Adapter {
    /// First layers draw from `U(-1, 1)` (fan-in 1); final layers start at
    /// zero, so a fresh adapter emits the neutral output.
    pub fn new<R: Rng>(spec: AdapterSpec, mapping: MappingVector, rng: &mut R) -> Result<Self> {
        if mapping.values().len() != spec.num_classes {
            return Err(Error::Input("mapping vector length must equal num_classes".into()));
        }
        let unit = Uniform::new(-1.0, 1.0).expect("valid range");
        let mut draw = |n: usize| -> RealMatrix {
            RealMatrix::row_vector((0..n).map(|_| unit.sample(rng)).collect())
        };
        let h = spec.hidden;
        let mut params = ParamStore::new();
        let t = ParamGroup::Trainable;
        params.insert(A_FC1_W, draw(h), t)?;
        params.insert(A_FC1_B, draw(h), t)?;
        params.insert(A_FC2_W, RealMatrix::zeros(h, spec.branch_a_out()), t)?;
        params.insert(A_FC2_B, RealMatrix::zeros(1, spec.branch_a_out()), t)?;
        params.insert(B_FC1_W, draw(h), t)?;
        params.insert(B_FC1_B, draw(h), t)?;
        params.insert(B_FC2_W, RealMatrix::zeros(h, spec.branch_b_out()), t)?;
        params.insert(B_FC2_B, RealMatrix::zeros(1, spec.branch_b_out()), t)?;
        Ok(Self {
            spec,
            params,
            mapping,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn branch(
        g: &mut Graph,
        b: &Binding,
        input: Var,
        names: [&str; 4],
    ) -> Result<Var> {
        let [w1, b1, w2, b2] = names.map(|n| b.var(n));
        let (w1, b1, w2, b2) = (w1?, b1?, w2?, b2?);
        let h = g.matmul(input, w1)?;
        let ones = g.constant(RealMatrix::ones(1, g.shape(h).1));
        let h = g.rowwise_affine(h, ones, b1)?;
        let h = g.relu(h)?;
        let out = g.matmul(h, w2)?;
        let ones = g.constant(RealMatrix::ones(1, g.shape(out).1));
        g.rowwise_affine(out, ones, b2)
    }

    /// Graph forward on the scalar `m . pi`.
    pub fn forward(&self, g: &mut Graph, binding: &Binding, scalar_input: f64) -> Result<AdapterVars> {
        let (d, c) = (self.spec.feature_dim, self.spec.num_classes);
        let mask = self.spec.mask;
        let input = g.constant(RealMatrix::scalar(scalar_input));
        let neutral = AdapterOutput::neutral(d, c);
        let mut out = neutral.as_constants(g);
        if mask.branch_a() {
            let a = Self::branch(g, binding, input, [A_FC1_W, A_FC1_B, A_FC2_W, A_FC2_B])?;
            if mask.gamma_h {
                let raw = g.slice_cols(a, 0, d)?;
                out.gamma_h = g.add_scalar(raw, 1.0)?;
            }
            if mask.beta_h {
                out.beta_h = g.slice_cols(a, d, d)?;
            }
        }
        if mask.branch_b() {
            let b = Self::branch(g, binding, input, [B_FC1_W, B_FC1_B, B_FC2_W, B_FC2_B])?;
            if mask.delta_w {
                let flat = g.slice_cols(b, 0, d * c)?;
                out.delta_w = g.reshape(flat, d, c)?;
            }
            if mask.delta_b {
                out.delta_b = g.slice_cols(b, d * c, c)?;
            }
        }
        Ok(out)
    }

    /// Output values for a scalar input, no gradient tracking.
    pub fn output(&self, scalar_input: f64) -> Result<AdapterOutput> {
        let mut g = Graph::new();
        let mut frozen = self.params.clone();
        frozen.set_all(ParamGroup::Frozen);
        let b = frozen.bind(&mut g);
        let vars = self.forward(&mut g, &b, scalar_input)?;
        Ok(vars.values(&g))
    }

    /// Output conditioned on a label distribution.
    pub fn output_for(&self, pi: &LabelDistribution) -> Result<AdapterOutput> {
        self.output(self.mapping.map(pi)?)
    }
}

/// The three conditioning distributions and their logit-adjustment strengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauTriple {
    pub source: f64,
    pub uniform: f64,
    pub inverse: f64,
}

impl Default for TauTriple {
    fn default() -> Self {
        Self {
            source: 0.0,
            uniform: 1.0,
            inverse: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterSchedule {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: TauTriple,
}

impl Default for AdapterSchedule {
    fn default() -> Self {
        Self {
            iters: 1000,
            batch_size: 128,
            lr: 0.003,
            momentum: 0.9,
            weight_decay: 0.0,
            tau: TauTriple::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterTrainReport {
    pub iters: usize,
    /// Mean loss over the last quarter of iterations that sampled each
    /// conditioning distribution: `[source, uniform, inverse]`.
    pub final_loss: [f64; 3],
    pub samples: [usize; 3],
}

/// Trains the adapter against a frozen model with the logit-adjusted loss,
/// sampling one of `{pi_s, u, inverse(pi_s)}` with its matching `tau` at
/// every iteration.
pub fn train_adapter<R: Rng>(
    adapter: &mut Adapter,
    model: &mut Network,
    inputs: &RealMatrix,
    labels: &[usize],
    pi_s: &LabelDistribution,
    schedule: &AdapterSchedule,
    rng: &mut R,
) -> Result<AdapterTrainReport> {
    if model.stage() != Stage::AdapterTrain || !model.params.trainable_names().is_empty() {
        return Err(Error::Stage(
            "adapter training needs a model in the adapter_train stage with every parameter frozen"
                .into(),
        ));
    }
    if inputs.rows() != labels.len() || inputs.rows() == 0 {
        return Err(Error::Input("adapter training set is empty or mislabeled".into()));
    }
    let c = pi_s.len();
    let choices = [
        (pi_s.clone(), schedule.tau.source),
        (LabelDistribution::uniform(c), schedule.tau.uniform),
        (inverse_distribution(pi_s), schedule.tau.inverse),
    ];
    let scalars: Vec<f64> = choices
        .iter()
        .map(|(p, _)| adapter.mapping.map(p))
        .collect::<Result<_>>()?;

    // The model is frozen and source statistics make features a pure
    // function of the input, so they are computed once.
    let features = model.features_source(inputs)?;
    let mut binding_params = model.params.clone();
    binding_params.set_all(ParamGroup::Frozen);

    let mut opt = Sgd::new(schedule.lr, schedule.momentum, schedule.weight_decay);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut cursor = order.len();
    let bs = schedule.batch_size.min(labels.len()).max(1);
    let tail_start = schedule.iters - schedule.iters / 4;
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];

    for it in 0..schedule.iters {
        if cursor + bs > order.len() {
            order.shuffle(rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let choice = rng.random_range(0..3);
        let (_, tau) = &choices[choice];

        let mut g = Graph::new();
        let mb = binding_params.bind(&mut g);
        let ab = adapter.params.bind(&mut g);
        let h = g.constant(features.select_rows(idx));
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let av = adapter.forward(&mut g, &ab, scalars[choice])?;
        let logits = model.forward_head(&mut g, &mb, h, Some(&av))?;
        let loss = generalized_logit_adjusted(&mut g, logits, &batch_labels, pi_s, *tau)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("adapter loss at iteration {it}")));
        }
        if it >= tail_start {
            sums[choice] += lv;
            counts[choice] += 1;
        }
        g.backward(loss)?;
        adapter.params.zero_grad();
        adapter.params.accumulate_grads(&g, &ab);
        opt.step(&mut adapter.params)?;
    }

    let mut final_loss = [f64::NAN; 3];
    for k in 0..3 {
        if counts[k] > 0 {
            final_loss[k] = sums[k] / counts[k] as f64;
        }
    }
    Ok(AdapterTrainReport {
        iters: schedule.iters,
        final_loss,
        samples: counts,
    })
}
