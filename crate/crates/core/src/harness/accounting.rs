//! Analytic parameter and multiply-accumulate counts.

use std::fmt;

use serde::Serialize;

use crate::adapter::AdapterSpec;
use crate::model::{NetworkSpec, NormKind};

/// Learnable backbone + head parameters. Running statistics are buffers and
/// are not counted.
pub fn backbone_params(spec: &NetworkSpec) -> usize {
    let mut total = 0;
    let mut fan_in = spec.input_dim;
    for (&w, kind) in spec.hidden_dims.iter().zip(&spec.norm) {
        total += fan_in * w;
        total += match kind {
            NormKind::Norm => 2 * w,
            NormKind::Identity => w,
        };
        fan_in = w;
    }
    total + fan_in * spec.num_classes + spec.num_classes
}

/// Multiply-accumulates of one forward pass for a single sample. Bias,
/// normalization and activation work is not counted.
pub fn backbone_macs(spec: &NetworkSpec) -> usize {
    let mut total = 0;
    let mut fan_in = spec.input_dim;
    for &w in &spec.hidden_dims {
        total += fan_in * w;
        fan_in = w;
    }
    total + fan_in * spec.num_classes
}

fn fc_relu_fc_params(hidden: usize, out: usize) -> usize {
    (hidden + hidden) + (hidden * out + out)
}

/// Parameters of the two FC-ReLU-FC branches as built, scalar input.
pub fn adapter_params(spec: &AdapterSpec) -> usize {
    fc_relu_fc_params(spec.hidden, spec.branch_a_out()) + fc_relu_fc_params(spec.hidden, spec.branch_b_out())
}

/// The closed form `2(h + 2hd) + (h + h(dC + C))` quoted for the adapter.
/// It differs from [`adapter_params`], which counts every weight and bias
/// of both branches.
pub fn adapter_params_quoted(spec: &AdapterSpec) -> usize {
    let (h, d, c) = (spec.hidden, spec.feature_dim, spec.num_classes);
    2 * (h + h * 2 * d) + (h + h * (d * c + c))
}

/// MACs to generate one set of corrections (once per test batch).
pub fn adapter_generation_macs(spec: &AdapterSpec) -> usize {
    let h = spec.hidden;
    (h + h * spec.branch_a_out()) + (h + h * spec.branch_b_out())
}

/// Per-sample MACs added to the head: the feature scale.
pub fn adapter_head_macs(spec: &AdapterSpec) -> usize {
    spec.feature_dim
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub backbone_params: usize,
    pub backbone_macs: usize,
    pub adapter_params: usize,
    pub adapter_params_quoted: usize,
    pub adapter_generation_macs: usize,
    pub adapter_head_macs: usize,
    pub batch_size: usize,
}

impl CostReport {
    pub fn new(net: &NetworkSpec, adapter: &AdapterSpec, batch_size: usize) -> Self {
        Self {
            backbone_params: backbone_params(net),
            backbone_macs: backbone_macs(net),
            adapter_params: adapter_params(adapter),
            adapter_params_quoted: adapter_params_quoted(adapter),
            adapter_generation_macs: adapter_generation_macs(adapter),
            adapter_head_macs: adapter_head_macs(adapter),
            batch_size,
        }
    }

    /// Per-sample MACs with the adapter, generation amortized over a batch.
    pub fn adapted_macs_per_sample(&self) -> f64 {
        (self.backbone_macs + self.adapter_head_macs) as f64
            + self.adapter_generation_macs as f64 / self.batch_size.max(1) as f64
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>14} {:>12}", "model", "MACs/sample", "params")?;
        writeln!(f, "{:<12} {:>14} {:>12}", "backbone", self.backbone_macs, self.backbone_params)?;
        writeln!(
            f,
            "{:<12} {:>14.1} {:>12}",
            "+ adapter",
            self.adapted_macs_per_sample(),
            self.backbone_params + self.adapter_params
        )?;
        write!(
            f,
            "adapter params {} (quoted closed form {}), generation MACs {} per batch of {}",
            self.adapter_params, self.adapter_params_quoted, self.adapter_generation_macs, self.batch_size
        )
    }
}
