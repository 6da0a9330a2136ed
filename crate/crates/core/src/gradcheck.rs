//! Central finite differences against the analytic backward pass.
//!
//! The loss is differentiated through [`NetworkModel::forward_probe`], which
//! replaces each spike with its surrogate linearization around a reference
//! trace. Every perturbed evaluation is checked for kink crossings (a
//! normalized potential leaving its region `≤0 / (0,2) / ≥2`, a potential
//! changing sign, a pool argmax moving); a crossing marks the input as
//! ill-conditioned instead of producing a misleading comparison.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::model::{ForwardTrace, LayerCache, NetworkModel, ParamOwner};
use crate::network::{cross_entropy, ArchDescriptor, ModelOptions};
use crate::ops::batchnorm::Phase;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const TINY_ARCH: &str = "vgg-s:1x6x6:c2||10";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub batch: usize,
    pub max_attempts: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            batch: 4,
            max_attempts: 50,
        }
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub tolerance: f64,
    /// Inputs rejected for kink crossings before this one was accepted.
    pub rejected_inputs: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < self.tolerance)
    }

    pub fn failures(&self) -> Vec<&GroupResult> {
        self.groups.iter().filter(|g| !(g.max_rel_err < self.tolerance)).collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

fn group_name(model: &NetworkModel<f64>, owner: ParamOwner, kind: &str) -> String {
    match owner {
        ParamOwner::Layer(i) => format!("layer{i}.{}.{kind}", model.layers()[i].kind_name()),
        ParamOwner::Shortcut(j) => format!("shortcut{j}.projection.{kind}"),
    }
}

fn region(z: f64) -> u8 {
    if z <= 0.0 {
        0
    } else if z < 2.0 {
        1
    } else {
        2
    }
}

/// True when `probe` sits on the same smooth piece as `reference`.
fn same_piece(reference: &ForwardTrace<f64>, probe: &ForwardTrace<f64>) -> bool {
    reference.layers.iter().zip(&probe.layers).all(|(r, p)| match (r, p) {
        (LayerCache::Spike(a), LayerCache::Spike(b)) => {
            a.z.data().iter().zip(b.z.data()).all(|(&x, &y)| region(x) == region(y))
                && a.u.data().iter().zip(b.u.data()).all(|(&x, &y)| (x > 0.0) == (y > 0.0) && (x < 0.0) == (y < 0.0))
        }
        (LayerCache::MaxPool(a), LayerCache::MaxPool(b)) => a.indices == b.indices,
        _ => true,
    })
}

/// Loss `ce_weight·CE + λ_H·ΣH(u_l)` of a probe forward, or `None` on a kink crossing.
fn probe_loss(
    model: &NetworkModel<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    reference: &ForwardTrace<f64>,
    ce_weight: f64,
    lambda_h: f64,
) -> Result<Option<f64>> {
    let (logits, trace) = model.forward_probe(x, reference)?;
    if !same_piece(reference, &trace) {
        return Ok(None);
    }
    let ce = if ce_weight == 0.0 { 0.0 } else { cross_entropy(&logits, labels)? };
    let hoyer: f64 = trace
        .regularized_potentials()
        .into_iter()
        .map(crate::hoyer::hoyer_square)
        .sum();
    Ok(Some(ce_weight * ce + lambda_h * hoyer))
}

/// Compares every parameter gradient with central differences on one batch.
/// Returns `None` when some perturbation crosses a kink.
pub fn check_batch(
    model: &NetworkModel<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    ce_weight: f64,
    lambda_h: f64,
    cfg: &GradcheckConfig,
) -> Result<Option<Vec<GroupResult>>> {
    let mut m = model.clone();
    let (_, reference) = m.forward(x, Phase::Train, None)?;
    let grads = m.backward_with(&reference, labels, ce_weight, lambda_h)?;

    let mut groups: BTreeMap<(usize, String), GroupResult> = BTreeMap::new();
    let owners = grads.owners.clone();
    for (p, (&(owner, kind), g)) in owners.iter().zip(&grads.tensors).enumerate() {
        let name = group_name(model, owner, kind.name());
        let entry = groups.entry((p, name.clone())).or_insert(GroupResult {
            name,
            entries: 0,
            max_rel_err: 0.0,
            max_abs_grad: 0.0,
        });
        for (e, &analytic) in g.data().iter().enumerate() {
            let orig = m.params_mut()[p].data[e];
            m.params_mut()[p].data[e] = orig + cfg.step;
            let plus = probe_loss(&m, x, labels, &reference, ce_weight, lambda_h)?;
            m.params_mut()[p].data[e] = orig - cfg.step;
            let minus = probe_loss(&m, x, labels, &reference, ce_weight, lambda_h)?;
            m.params_mut()[p].data[e] = orig;
            let (Some(plus), Some(minus)) = (plus, minus) else {
                return Ok(None);
            };
            let numeric = (plus - minus) / (2.0 * cfg.step);
            entry.entries += 1;
            entry.max_rel_err = entry.max_rel_err.max(relative_error(analytic, numeric, cfg.floor));
            entry.max_abs_grad = entry.max_abs_grad.max(analytic.abs());
        }
    }
    Ok(Some(groups.into_values().collect()))
}

/// Small network for gradient checks.
pub fn tiny_network(arch: &str, seed: u64) -> Result<NetworkModel<f64>> {
    let desc: ArchDescriptor = arch.parse()?;
    let opts = ModelOptions {
        dropout: 0.0,
        ..ModelOptions::default()
    };
    desc.build(&opts, &mut Rng::new(seed))
}

/// Builds `arch`, draws inputs from `seed` until one is free of kink
/// crossings, and checks the full loss plus the Hoyer term on its own.
pub fn gradcheck(arch: &str, seed: u64, lambda_h: f64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let model = tiny_network(arch, seed)?;
    let [c, h, w] = model.input_shape();
    let classes = model.class_count();
    let mut rng = Rng::new(seed).fork(1);
    for attempt in 0..cfg.max_attempts {
        let x = Tensor::from_vec(
            [cfg.batch, c, h, w],
            (0..cfg.batch * c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )?;
        let labels: Vec<usize> = (0..cfg.batch).map(|_| rng.below(classes)).collect();
        let Some(mut groups) = check_batch(&model, &x, &labels, 1.0, lambda_h, cfg)? else {
            continue;
        };
        let Some(hoyer_only) = check_batch(&model, &x, &labels, 0.0, lambda_h, cfg)? else {
            continue;
        };
        groups.extend(hoyer_only.into_iter().map(|mut g| {
            g.name = format!("hoyer_only.{}", g.name);
            g
        }));
        return Ok(GradcheckReport {
            groups,
            tolerance: cfg.tolerance,
            rejected_inputs: attempt,
        });
    }
    Err(Error::Consistency(format!(
        "no kink-free input found in {} attempts",
        cfg.max_attempts
    )))
}
