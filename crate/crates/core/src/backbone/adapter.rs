//! Low-rank adapters over the attention and feed-forward projections.
//!
//! Each targeted weight `W (in×out)` gains a factorized correction
//! `(alpha/r) * down·up` with `down (in×r)` and `up (r×out)`. `up` starts at
//! zero, so a fresh adapter leaves the forward pass untouched. The RL stage
//! trains only these factors.

use super::{BackboneError, ModelParams};
use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

/// Arrays an adapter attaches to: projection matrices only, never biases,
/// norms, embeddings, or the output head.
pub fn adapter_targets(params: &ModelParams) -> Vec<String> {
    params
        .names()
        .filter(|n| n.contains(".attn.w") || n.contains(".ffn.w"))
        .cloned()
        .collect()
}

/// Factorized low-rank corrections for a fixed parameter set.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub rank: usize,
    pub alpha: f64,
    factors: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

impl AdapterParams {
    /// Fresh adapter: `down` from N(0, 0.02²), `up` at zero, so the initial
    /// correction is exactly zero.
    pub fn init(params: &ModelParams, rank: usize, alpha: f64, seed: u64) -> Self {
        assert!(rank >= 1, "adapter rank must be at least 1");
        let mut rng = crate::seeding::derive_rng(seed, "adapter.init", 0, 0);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut factors = BTreeMap::new();
        for name in adapter_targets(params) {
            let target = params.array(&name);
            let down =
                Array2::from_shape_fn((target.nrows(), rank), |_| normal.sample(&mut rng));
            let up = Array2::zeros((rank, target.ncols()));
            factors.insert(name, (down, up));
        }
        Self {
            rank,
            alpha,
            factors,
        }
    }

    /// Adapter with both factors at zero (useful in tests).
    pub fn zeros(params: &ModelParams, rank: usize, alpha: f64) -> Self {
        let mut adapter = Self::init(params, rank, alpha, 0);
        for (down, _) in adapter.factors.values_mut() {
            down.fill(0.0);
        }
        adapter
    }

    /// Effective scaling of the low-rank product.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn factors(&self, name: &str) -> Option<(&Array2<f64>, &Array2<f64>)> {
        self.factors.get(name).map(|(d, u)| (d, u))
    }

    pub fn factor_names(&self) -> impl Iterator<Item = &String> {
        self.factors.keys()
    }

    /// Mutable access keyed the way gradient maps name the leaves:
    /// `adapter.{target}.down` / `adapter.{target}.up`.
    pub fn factor_mut(&mut self, leaf_name: &str) -> Option<&mut Array2<f64>> {
        let rest = leaf_name.strip_prefix("adapter.")?;
        if let Some(target) = rest.strip_suffix(".down") {
            return self.factors.get_mut(target).map(|(d, _)| d);
        }
        if let Some(target) = rest.strip_suffix(".up") {
            return self.factors.get_mut(target).map(|(_, u)| u);
        }
        None
    }

    /// Leaf names in deterministic order, matching gradient maps.
    pub fn leaf_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.factors.len() * 2);
        for target in self.factors.keys() {
            names.push(format!("adapter.{target}.down"));
            names.push(format!("adapter.{target}.up"));
        }
        names.sort();
        names
    }

    pub fn is_finite(&self) -> bool {
        self.factors
            .values()
            .all(|(d, u)| d.iter().all(|v| v.is_finite()) && u.iter().all(|v| v.is_finite()))
    }
}

fn effective(params: &ModelParams, adapter: &AdapterParams) -> Result<ModelParams, BackboneError> {
    let mut out = params.clone();
    for (name, (down, up)) in &adapter.factors {
        let base = out.array_mut(name);
        if down.nrows() != base.nrows() || up.ncols() != base.ncols() || down.ncols() != up.nrows()
        {
            return Err(BackboneError::ShapeMismatch {
                name: name.clone(),
                expected: (base.nrows(), base.ncols()),
                got: (down.nrows(), up.ncols()),
            });
        }
        let delta = down.dot(up);
        *base = &*base + &(delta * adapter.scale());
    }
    Ok(out)
}

/// Effective parameter snapshot `base + scale*down·up`, used when rollouts
/// or evaluation need the adapted policy as plain parameters.
pub fn apply_adapter(
    params: &ModelParams,
    adapter: &AdapterParams,
) -> Result<ModelParams, BackboneError> {
    effective(params, adapter)
}

/// Fold the adapter into a standalone parameter set. Forward outputs match
/// the adapted view exactly.
pub fn merge_adapter(
    params: &ModelParams,
    adapter: &AdapterParams,
) -> Result<ModelParams, BackboneError> {
    effective(params, adapter)
}
