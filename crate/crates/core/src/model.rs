//! The classifier: an MLP feature extractor followed by a linear head, plus
//! the adapter-modulated head forward and stage-dependent parameter groups.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Graph, RealMatrix, Var};
use crate::normalization::{NormConfig, NormContext, NormLayer, NormMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Frozen,
    Trainable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: RealMatrix,
    pub grad: RealMatrix,
    pub group: ParamGroup,
}

/// Named parameters with a frozen/trainable tag and a gradient slot each.
/// Iteration order is insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

/// Graph leaves created for every entry of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))
    }

    /// Points `name` at another graph node.
    pub fn set(&mut self, name: &str, var: Var) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))?;
        self.vars[i] = var;
        Ok(())
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: RealMatrix, group: ParamGroup) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Input(format!("duplicate parameter `{name}`")));
        }
        let (r, c) = value.shape();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: RealMatrix::zeros(r, c),
            group,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&RealMatrix> {
        Ok(&self.entry(name)?.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut RealMatrix> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))?;
        Ok(&mut self.entries[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn set_group(&mut self, name: &str, group: ParamGroup) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))?;
        self.entries[i].group = group;
        Ok(())
    }

    pub fn set_all(&mut self, group: ParamGroup) {
        self.entries.iter_mut().for_each(|e| e.group = group);
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.group == ParamGroup::Trainable)
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.grad.fill(0.0));
    }

    /// Trainable entries become differentiable leaves, frozen ones constants.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|e| match e.group {
                ParamGroup::Trainable => g.param(e.value.clone()),
                ParamGroup::Frozen => g.constant(e.value.clone()),
            })
            .collect();
        Binding {
            vars,
            index: self.index.clone(),
        }
    }

    /// Adds graph gradients into the slots of trainable entries.
    pub fn accumulate_grads(&mut self, g: &Graph, binding: &Binding) {
        for (e, &v) in self.entries.iter_mut().zip(&binding.vars) {
            if e.group == ParamGroup::Trainable {
                e.grad.add_assign(g.grad(v));
            }
        }
    }

    /// Hash over the bit patterns of every entry accepted by `filter`.
    pub fn fingerprint(&self, filter: impl Fn(&str) -> bool) -> u64 {
        let mut h = DefaultHasher::new();
        for e in self.entries.iter().filter(|e| filter(&e.name)) {
            e.name.hash(&mut h);
            e.value.shape().hash(&mut h);
            for v in e.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Linear → Norm → ReLU.
    Norm,
    /// Linear (with bias) → ReLU.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub norm: Vec<NormKind>,
}

impl NetworkSpec {
    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        let norm = vec![NormKind::Norm; hidden_dims.len()];
        Self {
            input_dim,
            hidden_dims,
            num_classes,
            norm,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Input("num_classes must be >= 2".into()));
        }
        if self.norm.len() != self.hidden_dims.len() {
            return Err(Error::Input(format!(
                "{} norm kinds for {} hidden blocks",
                self.norm.len(),
                self.hidden_dims.len()
            )));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Input("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.hidden_dims.len()
    }
}

pub fn block_weight(i: usize) -> String {
    format!("block{i}.weight")
}
pub fn block_bias(i: usize) -> String {
    format!("block{i}.bias")
}
pub fn norm_gamma(i: usize) -> String {
    format!("block{i}.norm.gamma")
}
pub fn norm_beta(i: usize) -> String {
    format!("block{i}.norm.beta")
}
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Generated classifier corrections `(gamma_h, beta_h, delta_w, delta_b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterOutput {
    pub gamma_h: RealMatrix,
    pub beta_h: RealMatrix,
    pub delta_w: RealMatrix,
    pub delta_b: RealMatrix,
}

impl AdapterOutput {
    pub fn neutral(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            gamma_h: RealMatrix::ones(1, feature_dim),
            beta_h: RealMatrix::zeros(1, feature_dim),
            delta_w: RealMatrix::zeros(feature_dim, num_classes),
            delta_b: RealMatrix::zeros(1, num_classes),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gamma_h.is_finite()
            && self.beta_h.is_finite()
            && self.delta_w.is_finite()
            && self.delta_b.is_finite()
    }

    /// Inserts the output as graph constants.
    pub fn as_constants(&self, g: &mut Graph) -> AdapterVars {
        AdapterVars {
            gamma_h: g.constant(self.gamma_h.clone()),
            beta_h: g.constant(self.beta_h.clone()),
            delta_w: g.constant(self.delta_w.clone()),
            delta_b: g.constant(self.delta_b.clone()),
        }
    }
}

/// Graph handles of an adapter output.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub gamma_h: Var,
    pub beta_h: Var,
    pub delta_w: Var,
    pub delta_b: Var,
}

impl AdapterVars {
    pub fn values(&self, g: &Graph) -> AdapterOutput {
        AdapterOutput {
            gamma_h: g.value(self.gamma_h).clone(),
            beta_h: g.value(self.beta_h).clone(),
            delta_w: g.value(self.delta_w).clone(),
            delta_b: g.value(self.delta_b).clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    AdapterTrain,
    Tta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub norms: Vec<Option<NormLayer>>,
    stage: Stage,
}

impl Network {
    /// He-normal hidden weights, `N(0, 1/d)` head, unit gamma, zero beta/biases.
    pub fn new<R: Rng>(spec: NetworkSpec, norm_config: NormConfig, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut norms = Vec::with_capacity(spec.num_blocks());
        let mut fan_in = spec.input_dim;
        for (i, (&width, &kind)) in spec.hidden_dims.iter().zip(&spec.norm).enumerate() {
            let w = gaussian(fan_in, width, (2.0 / fan_in as f64).sqrt(), rng);
            params.insert(&block_weight(i), w, ParamGroup::Trainable)?;
            match kind {
                NormKind::Norm => {
                    params.insert(&norm_gamma(i), RealMatrix::ones(1, width), ParamGroup::Trainable)?;
                    params.insert(&norm_beta(i), RealMatrix::zeros(1, width), ParamGroup::Trainable)?;
                    norms.push(Some(NormLayer::new(width, norm_config)));
                }
                NormKind::Identity => {
                    params.insert(&block_bias(i), RealMatrix::zeros(1, width), ParamGroup::Trainable)?;
                    norms.push(None);
                }
            }
            fan_in = width;
        }
        let d = spec.feature_dim();
        let w = gaussian(d, spec.num_classes, (1.0 / d as f64).sqrt(), rng);
        params.insert(HEAD_WEIGHT, w, ParamGroup::Trainable)?;
        params.insert(HEAD_BIAS, RealMatrix::zeros(1, spec.num_classes), ParamGroup::Trainable)?;
        Ok(Self {
            spec,
            params,
            norms,
            stage: Stage::Pretrain,
        })
    }

    /// Rebuilds a network from stored parts (checkpoint loading).
    pub fn from_parts(spec: NetworkSpec, params: ParamStore, norms: Vec<Option<NormLayer>>) -> Result<Self> {
        spec.validate()?;
        let mut net = Self {
            spec,
            params,
            norms,
            stage: Stage::Pretrain,
        };
        net.set_stage(Stage::Pretrain, 0);
        Ok(net)
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn set_norm_config(&mut self, config: NormConfig) {
        for layer in self.norms.iter_mut().flatten() {
            layer.config = config;
        }
    }

    /// Retags parameters for a pipeline stage. During `Tta` only the norm
    /// affine parameters of the lowest `num_blocks - freeze_top` blocks train.
    pub fn set_stage(&mut self, stage: Stage, freeze_top: usize) {
        self.stage = stage;
        match stage {
            Stage::Pretrain => self.params.set_all(ParamGroup::Trainable),
            Stage::AdapterTrain => self.params.set_all(ParamGroup::Frozen),
            Stage::Tta => {
                self.params.set_all(ParamGroup::Frozen);
                let open = self.spec.num_blocks().saturating_sub(freeze_top);
                for i in 0..open {
                    for name in [norm_gamma(i), norm_beta(i)] {
                        if self.params.contains(&name) {
                            self.params
                                .set_group(&name, ParamGroup::Trainable)
                                .expect("checked above");
                        }
                    }
                }
            }
        }
    }

    /// Hash of every entry that is not a normalization affine parameter.
    pub fn non_affine_fingerprint(&self) -> u64 {
        self.params.fingerprint(|n| !is_norm_affine(n))
    }

    pub fn forward_features(
        &mut self,
        g: &mut Graph,
        binding: &Binding,
        x: &RealMatrix,
        ctx: NormContext,
    ) -> Result<Var> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::Dimension {
                op: "forward_features",
                left: x.shape(),
                right: (x.rows(), self.spec.input_dim),
            });
        }
        let mut h = g.constant(x.clone());
        for i in 0..self.spec.num_blocks() {
            let w = binding.var(&block_weight(i))?;
            let z = g.matmul(h, w)?;
            let z = match self.norms[i].as_mut() {
                Some(layer) => {
                    let gamma = binding.var(&norm_gamma(i))?;
                    let beta = binding.var(&norm_beta(i))?;
                    layer.normalize(g, z, gamma, beta, ctx)?
                }
                None => {
                    let width = g.shape(z).1;
                    let ones = g.constant(RealMatrix::ones(1, width));
                    let b = binding.var(&block_bias(i))?;
                    g.rowwise_affine(z, ones, b)?
                }
            };
            h = g.relu(z)?;
        }
        Ok(h)
    }

    /// `(gamma_h h + beta_h)(W + dW) + (b + db)`, or `hW + b` without adapter.
    pub fn forward_head(
        &self,
        g: &mut Graph,
        binding: &Binding,
        h: Var,
        adapt: Option<&AdapterVars>,
    ) -> Result<Var> {
        let (n, d) = g.shape(h);
        if d != self.feature_dim() {
            return Err(Error::Dimension {
                op: "forward_head",
                left: (n, d),
                right: (n, self.feature_dim()),
            });
        }
        let w = binding.var(HEAD_WEIGHT)?;
        let b = binding.var(HEAD_BIAS)?;
        let ones = g.constant(RealMatrix::ones(1, self.num_classes()));
        match adapt {
            None => {
                let z = g.matmul(h, w)?;
                g.rowwise_affine(z, ones, b)
            }
            Some(a) => {
                let hm = g.rowwise_affine(h, a.gamma_h, a.beta_h)?;
                let wm = g.add(w, a.delta_w)?;
                let bm = g.add(b, a.delta_b)?;
                let z = g.matmul(hm, wm)?;
                g.rowwise_affine(z, ones, bm)
            }
        }
    }

    /// Logits for `x` with no parameters marked for gradient.
    pub fn predict_logits(
        &mut self,
        x: &RealMatrix,
        ctx: NormContext,
        adapt: Option<&AdapterOutput>,
    ) -> Result<RealMatrix> {
        let mut g = Graph::new();
        let mut frozen = self.params.clone();
        frozen.set_all(ParamGroup::Frozen);
        let binding = frozen.bind(&mut g);
        let h = self.forward_features(&mut g, &binding, x, ctx)?;
        let av = adapt.map(|a| a.as_constants(&mut g));
        let out = self.forward_head(&mut g, &binding, h, av.as_ref())?;
        Ok(g.value(out).clone())
    }

    /// Features `h` under frozen source statistics.
    pub fn features_source(&mut self, x: &RealMatrix) -> Result<RealMatrix> {
        let mut g = Graph::new();
        let mut frozen = self.params.clone();
        frozen.set_all(ParamGroup::Frozen);
        let binding = frozen.bind(&mut g);
        let h = self.forward_features(&mut g, &binding, x, NormContext::frozen(NormMode::EvalSource))?;
        Ok(g.value(h).clone())
    }
}

pub fn is_norm_affine(name: &str) -> bool {
    name.ends_with(".norm.gamma") || name.ends_with(".norm.beta")
}

fn gaussian<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> RealMatrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    RealMatrix::from_vec(rows, cols, data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::check::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(hidden: Vec<usize>, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::new(NetworkSpec::mlp(4, hidden, 3), NormConfig::default(), &mut rng).unwrap()
    }

    fn batch(n: usize, d: usize, seed: u64) -> RealMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        RealMatrix::from_vec(n, d, data).unwrap()
    }

    #[test]
    fn zero_depth_features_are_input() {
        let mut net = net(vec![], 0);
        let x = batch(5, 4, 1);
        let mut g = Graph::new();
        let b = net.params.bind(&mut g);
        let h = net
            .forward_features(&mut g, &b, &x, NormContext::new(NormMode::Train))
            .unwrap();
        assert_eq!(g.value(h), &x);
    }

    #[test]
    fn features_are_deterministic() {
        let x = batch(8, 4, 2);
        let a = net(vec![6, 5], 3).features_source(&x).unwrap();
        let b = net(vec![6, 5], 3).features_source(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn input_width_mismatch() {
        let mut net = net(vec![6], 0);
        let x = batch(5, 3, 1);
        assert!(matches!(
            net.features_source(&x),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn neutral_adapter_matches_plain_head() {
        let mut net = net(vec![6, 5], 4);
        let x = batch(7, 4, 5);
        let plain = net
            .predict_logits(&x, NormContext::frozen(NormMode::EvalSource), None)
            .unwrap();
        let neutral = AdapterOutput::neutral(5, 3);
        let adapted = net
            .predict_logits(&x, NormContext::frozen(NormMode::EvalSource), Some(&neutral))
            .unwrap();
        assert!(plain.max_abs_diff(&adapted) <= 1e-15);
    }

    #[test]
    fn head_hand_arithmetic() {
        let mut params = ParamStore::new();
        params.insert(HEAD_WEIGHT, RealMatrix::scalar(3.0), ParamGroup::Frozen).unwrap();
        params.insert(HEAD_BIAS, RealMatrix::scalar(1.0), ParamGroup::Frozen).unwrap();
        // num_classes = 1 is outside NetworkSpec's contract; build directly.
        let net = Network {
            spec: NetworkSpec {
                input_dim: 1,
                hidden_dims: vec![],
                num_classes: 1,
                norm: vec![],
            },
            params,
            norms: vec![],
            stage: Stage::Tta,
        };
        let mut g = Graph::new();
        let b = net.params.bind(&mut g);
        let h = g.constant(RealMatrix::scalar(2.0));
        let a = AdapterOutput {
            gamma_h: RealMatrix::scalar(2.0),
            beta_h: RealMatrix::scalar(1.0),
            delta_w: RealMatrix::scalar(1.0),
            delta_b: RealMatrix::scalar(-1.0),
        }
        .as_constants(&mut g);
        let out = net.forward_head(&mut g, &b, h, Some(&a)).unwrap();
        assert_eq!(g.value(out).data(), &[20.0]);
    }

    #[test]
    fn stage_groups() {
        let mut net = net(vec![5, 5, 5], 0);
        net.set_stage(Stage::AdapterTrain, 0);
        assert!(net.params.trainable_names().is_empty());
        net.set_stage(Stage::Tta, 1);
        assert_eq!(
            net.params.trainable_names(),
            vec![norm_gamma(0), norm_beta(0), norm_gamma(1), norm_beta(1)]
        );
        net.set_stage(Stage::Tta, 0);
        assert_eq!(net.params.trainable_names().len(), 6);
        net.set_stage(Stage::Pretrain, 0);
        assert_eq!(net.params.trainable_names().len(), net.params.len());
    }

    #[test]
    fn pretrain_every_parameter_gets_gradient() {
        let mut net = net(vec![6, 5], 7);
        net.set_stage(Stage::Pretrain, 0);
        let x = batch(16, 4, 8);
        let mut g = Graph::new();
        let b = net.params.bind(&mut g);
        let h = net
            .forward_features(&mut g, &b, &x, NormContext::new(NormMode::Train))
            .unwrap();
        let logits = net.forward_head(&mut g, &b, h, None).unwrap();
        let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
        let loss = crate::losses::cross_entropy(&mut g, logits, &labels).unwrap();
        g.backward(loss).unwrap();
        net.params.accumulate_grads(&g, &b);
        for e in net.params.iter() {
            assert!(e.grad.data().iter().any(|&v| v != 0.0), "{} has zero grad", e.name);
        }
    }

    #[test]
    fn feature_mean_gradient_wrt_norm_affine() {
        let net0 = net(vec![6, 5], 9);
        let x = batch(10, 4, 10);
        let inputs = vec![
            net0.params.get(&norm_gamma(0)).unwrap().clone(),
            net0.params.get(&norm_beta(0)).unwrap().map(|_| 0.1),
            net0.params.get(&norm_gamma(1)).unwrap().clone(),
            net0.params.get(&norm_beta(1)).unwrap().map(|_| 0.2),
        ];
        let res = check_gradients(&inputs, 1e-5, |g, v| {
            let mut n = net0.clone();
            n.set_stage(Stage::AdapterTrain, 0);
            let mut b = n.params.bind(g);
            b.vars[b.index[&norm_gamma(0)]] = v[0];
            b.vars[b.index[&norm_beta(0)]] = v[1];
            b.vars[b.index[&norm_gamma(1)]] = v[2];
            b.vars[b.index[&norm_beta(1)]] = v[3];
            let h = n.forward_features(g, &b, &x, NormContext::frozen(NormMode::EvalBatch))?;
            let m = g.row_mean(h)?;
            let s = g.sum(m)?;
            g.scale(s, 1.0 / 5.0)
        })
        .unwrap();
        assert!(res.max_rel_err < 1e-4, "{}", res.max_rel_err);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::new();
        p.insert("a", RealMatrix::zeros(1, 1), ParamGroup::Frozen).unwrap();
        assert!(p.insert("a", RealMatrix::zeros(1, 1), ParamGroup::Frozen).is_err());
    }
}
