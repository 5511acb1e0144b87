//! SDNet backbone: basic blocks arranged as multi-branch fusion modules
//! (MSwt with a trailing fusion block, Mswt-m without) plus small and large
//! jump connections.
//!
//! Wiring: stem block -> MSwt x num_mswt -> Mswt-m -> (+ second MSwt output
//! if the small skip is on) -> tail block -> (+ stem output or raw input if
//! the large skip is on). The output is the predicted derained image,
//! unclamped.

use crate::error::{Error, Result};
use crate::params::{init_from_specs, BoundParams, ParamSpec, ParamStore};
use crate::swin::{basic_block_forward, block_param_specs, BlockConfig};
use crate::tensor::{Element, Tensor};

/// Where the large jump connection taps its features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LargeSkipSource {
    /// The stem block's output (primary features).
    #[default]
    Stem,
    /// The raw network input.
    Input,
}

/// Skip-connection ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// No jump connections.
    R1,
    /// Small jump connection only.
    R2,
    /// Large jump connection only.
    R3,
    /// Both jump connections.
    Sdnet,
}

impl Variant {
    pub fn skips(self) -> (bool, bool) {
        match self {
            Variant::R1 => (false, false),
            Variant::R2 => (true, false),
            Variant::R3 => (false, true),
            Variant::Sdnet => (true, true),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r1" => Ok(Variant::R1),
            "r2" => Ok(Variant::R2),
            "r3" => Ok(Variant::R3),
            "sdnet" => Ok(Variant::Sdnet),
            other => Err(Error::Config(format!("unknown variant {other} (want r1|r2|r3|sdnet)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub block: BlockConfig,
    pub num_branches: usize,
    pub num_mswt: usize,
    pub skip_small: bool,
    pub skip_large: bool,
    pub large_skip_source: LargeSkipSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            block: BlockConfig::default(),
            num_branches: 3,
            num_mswt: 3,
            skip_small: true,
            skip_large: true,
            large_skip_source: LargeSkipSource::Stem,
        }
    }
}

impl ModelConfig {
    /// Test-scale config: 9x9 inputs, 2 branches, 2 MSwt stages.
    pub fn tiny() -> Self {
        ModelConfig {
            block: BlockConfig::tiny(),
            num_branches: 2,
            num_mswt: 2,
            ..ModelConfig::default()
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        let (small, large) = v.skips();
        self.skip_small = small;
        self.skip_large = large;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.num_branches < 2 {
            return Err(Error::Config(format!("num_branches must be >= 2, got {}", self.num_branches)));
        }
        if self.num_mswt < 2 {
            return Err(Error::Config(format!("num_mswt must be >= 2, got {}", self.num_mswt)));
        }
        Ok(())
    }
}

/// All parameter specs, in deterministic order. The names are part of the
/// checkpoint contract.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let b = &cfg.block;
    let mut specs = block_param_specs("stem", b);
    for i in 0..cfg.num_mswt {
        for j in 0..cfg.num_branches {
            specs.extend(block_param_specs(&format!("mswt.{i}.branch.{j}"), b));
        }
        specs.extend(block_param_specs(&format!("mswt.{i}.fuse"), b));
    }
    for j in 0..cfg.num_branches {
        specs.extend(block_param_specs(&format!("mswtm.branch.{j}"), b));
    }
    specs.extend(block_param_specs("tail", b));
    specs
}

/// Initialize all parameters: truncated normal (std 0.02) weights and bias
/// tables, zero biases, unit layer-norm gains. Fully determined by `seed`.
pub fn init_params<E: Element>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<E>> {
    cfg.validate()?;
    Ok(init_from_specs(&param_specs(cfg), seed))
}

/// Exact number of scalar parameters.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// Scalar counts grouped by top-level module, in wiring order.
pub fn param_count_by_module(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for spec in param_specs(cfg) {
        let top = match spec.name.split('.').next().unwrap() {
            "mswt" => {
                let mut it = spec.name.split('.');
                format!("{}.{}", it.next().unwrap(), it.next().unwrap())
            }
            other => other.to_string(),
        };
        match groups.last_mut() {
            Some((name, n)) if *name == top => *n += spec.numel(),
            _ => groups.push((top, spec.numel())),
        }
    }
    groups
}

/// Check a loaded parameter store against a config's expected names and
/// shapes (e.g. a checkpoint against the CLI-provided architecture).
pub fn check_params_match<E: Element>(store: &ParamStore<E>, cfg: &ModelConfig) -> Result<()> {
    let specs = param_specs(cfg);
    if store.len() != specs.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, config expects {}",
            store.len(),
            specs.len()
        )));
    }
    for spec in &specs {
        match store.get(&spec.name) {
            None => return Err(Error::Checkpoint(format!("checkpoint is missing {}", spec.name))),
            Some(t) if t.shape != spec.shape => {
                return Err(Error::Checkpoint(format!(
                    "{}: checkpoint shape {:?} vs config shape {:?}",
                    spec.name, t.shape, spec.shape
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Multi-branch fusion module: sum of branch blocks, then a fusion block.
pub fn mswt_forward<E: Element>(
    x: &Tensor<E>,
    params: &BoundParams<E>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Tensor<E>> {
    let summed = branch_sum(x, params, prefix, cfg)?;
    basic_block_forward(&summed, params, &format!("{prefix}.fuse"), &cfg.block)
}

/// Multi-branch module without the fusion block: sum of branch outputs.
pub fn mswt_m_forward<E: Element>(
    x: &Tensor<E>,
    params: &BoundParams<E>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Tensor<E>> {
    branch_sum(x, params, prefix, cfg)
}

fn branch_sum<E: Element>(
    x: &Tensor<E>,
    params: &BoundParams<E>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Tensor<E>> {
    let mut acc: Option<Tensor<E>> = None;
    for j in 0..cfg.num_branches {
        let y = basic_block_forward(x, params, &format!("{prefix}.branch.{j}"), &cfg.block)?;
        acc = Some(match acc {
            None => y,
            Some(a) => a.add(&y)?,
        });
    }
    Ok(acc.expect("num_branches >= 2"))
}

/// Full backbone forward pass; output shape equals input shape.
pub fn sdnet_forward<E: Element>(
    x: &Tensor<E>,
    params: &BoundParams<E>,
    cfg: &ModelConfig,
) -> Result<Tensor<E>> {
    cfg.validate()?;
    let stem = basic_block_forward(x, params, "stem", &cfg.block)?;
    let mut feat = stem.clone();
    let mut second_mswt: Option<Tensor<E>> = None;
    for i in 0..cfg.num_mswt {
        feat = mswt_forward(&feat, params, &format!("mswt.{i}"), cfg)?;
        if i == 1 {
            second_mswt = Some(feat.clone());
        }
    }
    feat = mswt_m_forward(&feat, params, "mswtm", cfg)?;
    if cfg.skip_small {
        feat = feat.add(&second_mswt.expect("num_mswt >= 2"))?;
    }
    feat = basic_block_forward(&feat, params, "tail", &cfg.block)?;
    if cfg.skip_large {
        let src = match cfg.large_skip_source {
            LargeSkipSource::Stem => &stem,
            LargeSkipSource::Input => x,
        };
        feat = feat.add(src)?;
    }
    Ok(feat)
}

#[cfg(test)]
mod tests;
