use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::hoyer::hoyer_grad;
use crate::network::layer::{Layer, Shortcut};
use crate::ops::batchnorm::{batchnorm_backward, batchnorm_forward, BnCache, Phase, RunningStats};
use crate::ops::conv::{conv2d_backward_with, conv2d_forward};
use crate::ops::matmul::{linear_backward, linear_forward};
use crate::ops::pool::{maxpool2d, maxpool2d_backward, ArgmaxMap};
use crate::quant::QuantConfig;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::spike::{spike_backward, spike_forward_with, SpikeCache, SpikeKind};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamOwner {
    Layer(usize),
    Shortcut(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    Threshold,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
            ParamKind::Threshold => "v_th",
        }
    }
}

const SCALAR_SHAPE: &[usize] = &[1];

pub struct Param<'a, T> {
    pub owner: ParamOwner,
    pub kind: ParamKind,
    pub shape: &'a [usize],
    pub data: &'a [T],
}

pub struct ParamMut<'a, T> {
    pub owner: ParamOwner,
    pub kind: ParamKind,
    pub data: &'a mut [T],
}

/// Gradients aligned with [`NetworkModel::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub owners: Vec<(ParamOwner, ParamKind)>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// `(spike layer index, ∂L/∂v_th)` pairs.
    pub fn threshold_grads(&self) -> Vec<(usize, T)> {
        self.owners
            .iter()
            .zip(&self.tensors)
            .filter_map(|(&(owner, kind), t)| match (owner, kind) {
                (ParamOwner::Layer(i), ParamKind::Threshold) => Some((i, t.data()[0])),
                _ => None,
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub enum LayerCache<T> {
    Conv { input: Tensor<T>, weight_used: Option<Tensor<T>> },
    Linear { input: Tensor<T> },
    BatchNorm(BnCache<T>),
    MaxPool(ArgmaxMap),
    Spike(SpikeCache<T>),
    Flatten { input_shape: Vec<usize> },
    Dropout { mask: Option<Tensor<T>> },
}

#[derive(Clone, Debug)]
pub struct ShortcutCache<T> {
    /// Source activation, kept only when a projection needs it for backward.
    pub input: Option<Tensor<T>>,
    pub weight_used: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub phase: Phase,
    pub layers: Vec<LayerCache<T>>,
    pub shortcuts: Vec<ShortcutCache<T>>,
    pub output_shapes: Vec<Vec<usize>>,
    pub logits: Tensor<T>,
    model_version: u64,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn spike_caches(&self) -> impl Iterator<Item = (usize, &SpikeCache<T>)> {
        self.layers.iter().enumerate().filter_map(|(i, c)| match c {
            LayerCache::Spike(s) => Some((i, s)),
            _ => None,
        })
    }

    /// Spike-layer inputs `u_l`, the tensors entering the Hoyer loss.
    pub fn regularized_potentials(&self) -> Vec<&Tensor<T>> {
        self.spike_caches().map(|(_, c)| &c.u).collect()
    }

    pub fn batch(&self) -> usize {
        self.logits.batch()
    }
}

enum StateUpdate<T> {
    Bn(RunningStats<T>),
    Ema(Option<Vec<T>>),
}

#[derive(Clone, Debug)]
pub struct NetworkModel<T> {
    input_shape: [usize; 3],
    layers: Vec<Layer<T>>,
    shortcuts: Vec<Shortcut<T>>,
    descriptor: String,
    version: u64,
}

/// Structural and parameter equality; the trace-invalidation counter is ignored.
impl<T: PartialEq> PartialEq for NetworkModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape
            && self.layers == other.layers
            && self.shortcuts == other.shortcuts
            && self.descriptor == other.descriptor
    }
}

impl<T: Scalar> NetworkModel<T> {
    /// Validates shapes, shortcut edges and the classifier head.
    pub fn new(
        input_shape: [usize; 3],
        layers: Vec<Layer<T>>,
        shortcuts: Vec<Shortcut<T>>,
        descriptor: impl Into<String>,
    ) -> Result<Self> {
        if !matches!(layers.last(), Some(Layer::Linear(_))) {
            return Err(Error::invalid("the network must end in a linear classifier head"));
        }
        Self::infer_shapes_of(&layers, &shortcuts, &input_shape)?;
        Ok(NetworkModel {
            input_shape,
            layers,
            shortcuts,
            descriptor: descriptor.into(),
            version: 0,
        })
    }

    /// Per-sample output shape of every layer.
    pub(crate) fn infer_shapes_of(
        layers: &[Layer<T>],
        shortcuts: &[Shortcut<T>],
        input: &[usize],
    ) -> Result<Vec<Vec<usize>>> {
        if input.contains(&0) {
            return Err(Error::shape(format!("input shape {input:?} has an empty axis")));
        }
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
        let mut cur = input.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            cur = layer
                .output_shape(&cur)
                .map_err(|e| Error::shape(format!("layer {i} ({}): {e}", layer.kind_name())))?;
            if cur.contains(&0) {
                return Err(Error::shape(format!("layer {i} collapses the activation to {cur:?}")));
            }
            for sc in shortcuts.iter().filter(|s| s.to == i) {
                if sc.from >= sc.to {
                    return Err(Error::invalid(format!(
                        "shortcut {} -> {} must point forward",
                        sc.from, sc.to
                    )));
                }
                let src = &shapes[sc.from];
                let projected = match &sc.projection {
                    Some(p) => p.output_shape(src)?,
                    None => src.clone(),
                };
                if projected != cur {
                    return Err(Error::shape(format!(
                        "shortcut {} -> {} carries {projected:?} into {cur:?}",
                        sc.from, sc.to
                    )));
                }
            }
            shapes.push(cur.clone());
        }
        if let Some(sc) = shortcuts.iter().find(|s| s.to >= layers.len()) {
            return Err(Error::invalid(format!("shortcut target {} out of range", sc.to)));
        }
        Ok(shapes)
    }

    pub fn output_shapes(&self) -> Vec<Vec<usize>> {
        Self::infer_shapes_of(&self.layers, &self.shortcuts, &self.input_shape)
            .expect("validated at construction")
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn shortcuts(&self) -> &[Shortcut<T>] {
        &self.shortcuts
    }

    /// Mutable layer access; invalidates outstanding traces.
    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        self.version += 1;
        &mut self.layers
    }

    pub fn shortcuts_mut(&mut self) -> &mut [Shortcut<T>] {
        self.version += 1;
        &mut self.shortcuts
    }

    /// Drops a shortcut edge (debug switch).
    pub fn remove_shortcut(&mut self, index: usize) -> Shortcut<T> {
        self.version += 1;
        self.shortcuts.remove(index)
    }

    pub fn class_count(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Linear(l)) => l.fan_out(),
            _ => unreachable!("head validated at construction"),
        }
    }

    pub fn spike_layer_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], Layer::Spike(_)))
            .collect()
    }

    pub fn set_spike_kind(&mut self, kind: SpikeKind) {
        for layer in self.layers_mut() {
            if let Layer::Spike(s) = layer {
                s.kind = kind;
            }
        }
    }

    pub fn set_dropout(&mut self, p: T) {
        for layer in self.layers_mut() {
            if let Layer::Dropout { rate } = layer {
                *rate = p;
            }
        }
    }

    /// Enables or disables weight quantization on every conv, projections included.
    pub fn set_quantization(&mut self, quant: Option<QuantConfig>) {
        self.version += 1;
        let convs = self
            .layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c),
                _ => None,
            })
            .chain(self.shortcuts.iter_mut().filter_map(|s| s.projection.as_mut()));
        for c in convs {
            c.quant = quant;
        }
    }

    pub fn params(&self) -> Vec<Param<'_, T>> {
        fn view<T: Scalar>(owner: ParamOwner, kind: ParamKind, t: &Tensor<T>) -> Param<'_, T> {
            Param {
                owner,
                kind,
                shape: t.shape(),
                data: t.data(),
            }
        }
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let o = ParamOwner::Layer(i);
            match layer {
                Layer::Conv(c) => {
                    out.push(view(o, ParamKind::Weight, &c.weight));
                    out.push(view(o, ParamKind::Bias, &c.bias));
                }
                Layer::Linear(l) => {
                    out.push(view(o, ParamKind::Weight, &l.weight));
                    out.push(view(o, ParamKind::Bias, &l.bias));
                }
                Layer::BatchNorm(bn) => {
                    out.push(view(o, ParamKind::Gamma, &bn.gamma));
                    out.push(view(o, ParamKind::Beta, &bn.beta));
                }
                Layer::Spike(s) => out.push(Param {
                    owner: o,
                    kind: ParamKind::Threshold,
                    shape: SCALAR_SHAPE,
                    data: std::slice::from_ref(&s.v_th),
                }),
                _ => {}
            }
        }
        for (j, sc) in self.shortcuts.iter().enumerate() {
            if let Some(p) = &sc.projection {
                out.push(view(ParamOwner::Shortcut(j), ParamKind::Weight, &p.weight));
                out.push(view(ParamOwner::Shortcut(j), ParamKind::Bias, &p.bias));
            }
        }
        out
    }

    /// Mutable views in [`params`](Self::params) order; invalidates traces.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        self.version += 1;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let owner = ParamOwner::Layer(i);
            let mut push = |kind, data| out.push(ParamMut { owner, kind, data });
            match layer {
                Layer::Conv(c) => {
                    push(ParamKind::Weight, c.weight.data_mut());
                    push(ParamKind::Bias, c.bias.data_mut());
                }
                Layer::Linear(l) => {
                    push(ParamKind::Weight, l.weight.data_mut());
                    push(ParamKind::Bias, l.bias.data_mut());
                }
                Layer::BatchNorm(bn) => {
                    push(ParamKind::Gamma, bn.gamma.data_mut());
                    push(ParamKind::Beta, bn.beta.data_mut());
                }
                Layer::Spike(s) => push(ParamKind::Threshold, std::slice::from_mut(&mut s.v_th)),
                _ => {}
            }
        }
        for (j, sc) in self.shortcuts.iter_mut().enumerate() {
            if let Some(p) = &mut sc.projection {
                let owner = ParamOwner::Shortcut(j);
                out.push(ParamMut {
                    owner,
                    kind: ParamKind::Weight,
                    data: p.weight.data_mut(),
                });
                out.push(ParamMut {
                    owner,
                    kind: ParamKind::Bias,
                    data: p.bias.data_mut(),
                });
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// Floors every threshold at the minimum clip level.
    pub fn clamp_thresholds(&mut self) {
        for layer in &mut self.layers {
            if let Layer::Spike(s) = layer {
                s.clamp_threshold();
            }
        }
    }

    /// Forward pass. Training updates batch-norm running statistics and the
    /// spike layers' extremum averages; dropout draws its masks from `rng`
    /// (no dropout when `rng` is `None`).
    pub fn forward(
        &mut self,
        x: &Tensor<T>,
        phase: Phase,
        rng: Option<&mut Rng>,
    ) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let (logits, trace, updates) = self.run(x, phase, phase == Phase::Train, rng, None)?;
        for (i, update) in updates {
            match (&mut self.layers[i], update) {
                (Layer::BatchNorm(bn), StateUpdate::Bn(rs)) => bn.running = rs,
                (Layer::Spike(s), StateUpdate::Ema(e)) => s.ema_ext = e,
                _ => unreachable!("update kinds follow layer kinds"),
            }
        }
        Ok((logits, trace))
    }

    /// Inference-phase forward without touching the model.
    pub fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let (logits, trace, _) = self.run(x, Phase::Infer, false, None, None)?;
        Ok((logits, trace))
    }

    /// Training-phase forward in which every spike output is replaced by the
    /// linearization `o_ref + scale·(clamp(z,0,2) − clamp(z_ref,0,2))` around
    /// `reference`, and dropout reuses the reference masks. Its derivatives
    /// are the ones the backward pass computes, which makes it the function
    /// finite differences are taken of. No state is updated.
    pub fn forward_probe(&self, x: &Tensor<T>, reference: &ForwardTrace<T>) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        if reference.layers.len() != self.layers.len() || reference.phase != Phase::Train {
            return Err(Error::invalid("probe reference must be a training trace of this model"));
        }
        let (logits, trace, _) = self.run(x, Phase::Train, false, None, Some(reference))?;
        Ok((logits, trace))
    }

    fn run(
        &self,
        x: &Tensor<T>,
        phase: Phase,
        update_state: bool,
        mut rng: Option<&mut Rng>,
        probe: Option<&ForwardTrace<T>>,
    ) -> Result<(Tensor<T>, ForwardTrace<T>, Vec<(usize, StateUpdate<T>)>)> {
        if x.ndim() != 4 || x.shape()[1..] != self.input_shape || x.batch() == 0 {
            return Err(Error::shape(format!(
                "input {:?} does not match [B, {}, {}, {}]",
                x.shape(),
                self.input_shape[0],
                self.input_shape[1],
                self.input_shape[2]
            )));
        }
        let sources: BTreeSet<usize> = self.shortcuts.iter().map(|s| s.from).collect();
        let mut saved: Vec<Option<Tensor<T>>> = vec![None; self.layers.len()];
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut sc_caches: Vec<Option<ShortcutCache<T>>> = vec![None; self.shortcuts.len()];
        let mut output_shapes = Vec::with_capacity(self.layers.len());
        let mut updates = Vec::new();
        let mut cur = x.clone();

        for (i, layer) in self.layers.iter().enumerate() {
            let (mut out, cache) = match layer {
                Layer::Conv(c) => {
                    let wq = c.effective_weight()?;
                    let y = conv2d_forward(&cur, wq.as_ref().unwrap_or(&c.weight), &c.bias, c.stride, c.pad)?;
                    (y, LayerCache::Conv { input: cur, weight_used: wq })
                }
                Layer::Linear(l) => {
                    let y = linear_forward(&cur, &l.weight, &l.bias)?;
                    (y, LayerCache::Linear { input: cur })
                }
                Layer::BatchNorm(bn) => {
                    let mut running = bn.running.clone();
                    let (y, cache) = batchnorm_forward(
                        &cur,
                        &bn.gamma,
                        &bn.beta,
                        &mut running,
                        phase,
                        bn.momentum,
                        bn.eps,
                        update_state,
                    )?;
                    if update_state && phase == Phase::Train {
                        updates.push((i, StateUpdate::Bn(running)));
                    }
                    (y, LayerCache::BatchNorm(cache))
                }
                Layer::MaxPool { kernel, stride } => {
                    let (y, map) = maxpool2d(&cur, *kernel, *stride)?;
                    (y, LayerCache::MaxPool(map))
                }
                Layer::Spike(state) => match probe {
                    Some(reference) => {
                        let LayerCache::Spike(rc) = &reference.layers[i] else {
                            return Err(Error::invalid(format!("probe reference layer {i} is not a spike layer")));
                        };
                        let (y, cache) = probe_spike(&cur, state.v_th, rc)?;
                        (y, LayerCache::Spike(cache))
                    }
                    None => {
                        let mut st = state.clone();
                        let (y, cache) = spike_forward_with(&cur, &mut st, phase, update_state)?;
                        if update_state && phase == Phase::Train && st.ema_ext != state.ema_ext {
                            updates.push((i, StateUpdate::Ema(st.ema_ext)));
                        }
                        (y, LayerCache::Spike(cache))
                    }
                },
                Layer::Flatten => {
                    let input_shape = cur.shape().to_vec();
                    let b = cur.batch();
                    let f = cur.sample_len();
                    (cur.reshape([b, f])?, LayerCache::Flatten { input_shape })
                }
                Layer::Dropout { rate } => {
                    let mask = match (phase, probe) {
                        (Phase::Infer, _) => None,
                        (Phase::Train, Some(reference)) => match &reference.layers[i] {
                            LayerCache::Dropout { mask } => mask.clone(),
                            _ => return Err(Error::invalid(format!("probe reference layer {i} is not dropout"))),
                        },
                        (Phase::Train, None) => match rng.as_deref_mut() {
                            Some(r) if *rate > T::zero() => Some(dropout_mask(cur.shape(), *rate, r)),
                            _ => None,
                        },
                    };
                    let y = match &mask {
                        Some(m) => cur.zip_map(m, |a, b| a * b)?,
                        None => cur,
                    };
                    (y, LayerCache::Dropout { mask })
                }
            };

            for (j, sc) in self.shortcuts.iter().enumerate().filter(|(_, s)| s.to == i) {
                let src = saved[sc.from].as_ref().expect("shortcut sources are saved");
                let cache = match &sc.projection {
                    Some(p) => {
                        let wq = p.effective_weight()?;
                        let y = conv2d_forward(src, wq.as_ref().unwrap_or(&p.weight), &p.bias, p.stride, p.pad)?;
                        out.add_assign(&y)?;
                        ShortcutCache {
                            input: Some(src.clone()),
                            weight_used: wq,
                        }
                    }
                    None => {
                        out.add_assign(src)?;
                        ShortcutCache {
                            input: None,
                            weight_used: None,
                        }
                    }
                };
                sc_caches[j] = Some(cache);
            }
            if sources.contains(&i) {
                saved[i] = Some(out.clone());
            }
            output_shapes.push(out.shape().to_vec());
            caches.push(cache);
            cur = out;
        }

        let trace = ForwardTrace {
            phase,
            layers: caches,
            shortcuts: sc_caches.into_iter().map(|c| c.expect("every shortcut visited")).collect(),
            output_shapes,
            logits: cur.clone(),
            model_version: self.version,
        };
        Ok((cur, trace, updates))
    }

    /// Gradient of `CE + λ_H·Σ H(u_l)` for the batch recorded in `trace`.
    pub fn backward(&self, trace: &ForwardTrace<T>, labels: &[usize], lambda_h: T) -> Result<Gradients<T>> {
        self.backward_with(trace, labels, T::one(), lambda_h)
    }

    /// As [`backward`](Self::backward) with the cross-entropy term weighted by
    /// `ce_weight` (zero isolates the Hoyer term).
    pub fn backward_with(
        &self,
        trace: &ForwardTrace<T>,
        labels: &[usize],
        ce_weight: T,
        lambda_h: T,
    ) -> Result<Gradients<T>> {
        if trace.model_version != self.version || trace.layers.len() != self.layers.len() {
            return Err(Error::StaleTrace(
                "model parameters changed since this trace was recorded".into(),
            ));
        }
        if trace.phase != Phase::Train {
            return Err(Error::invalid("backward needs a training-phase trace"));
        }
        let n = self.layers.len();
        let mut grad_out: Vec<Option<Tensor<T>>> = vec![None; n];
        grad_out[n - 1] = Some(softmax_ce_grad(&trace.logits, labels, ce_weight)?);

        let mut layer_grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); n];
        let mut sc_grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.shortcuts.len()];

        for i in (0..n).rev() {
            let g = grad_out[i]
                .take()
                .unwrap_or_else(|| Tensor::zeros(trace.output_shapes[i].clone()));

            for (j, sc) in self.shortcuts.iter().enumerate().filter(|(_, s)| s.to == i) {
                let back = match (&sc.projection, &trace.shortcuts[j]) {
                    (Some(p), ShortcutCache { input: Some(src), weight_used }) => {
                        let w = weight_used.as_ref().unwrap_or(&p.weight);
                        let cg = conv2d_backward_with(&g, src, w, p.stride, p.pad, true)?;
                        sc_grads[j] = vec![cg.w, cg.bias];
                        cg.x.expect("requested")
                    }
                    (None, _) => g.clone(),
                    _ => return Err(Error::invalid("shortcut cache does not match its edge")),
                };
                accumulate(&mut grad_out[sc.from], back)?;
            }

            let need_x = i > 0;
            let grad_in = match (&self.layers[i], &trace.layers[i]) {
                (Layer::Conv(c), LayerCache::Conv { input, weight_used }) => {
                    let w = weight_used.as_ref().unwrap_or(&c.weight);
                    let cg = conv2d_backward_with(&g, input, w, c.stride, c.pad, need_x)?;
                    layer_grads[i] = vec![cg.w, cg.bias];
                    cg.x
                }
                (Layer::Linear(l), LayerCache::Linear { input }) => {
                    let lg = linear_backward(&g, input, &l.weight, need_x)?;
                    layer_grads[i] = vec![lg.w, lg.b];
                    lg.x
                }
                (Layer::BatchNorm(_), LayerCache::BatchNorm(cache)) => {
                    let bg = batchnorm_backward(&g, cache)?;
                    layer_grads[i] = vec![bg.gamma, bg.beta];
                    Some(bg.x)
                }
                (Layer::MaxPool { .. }, LayerCache::MaxPool(map)) => Some(maxpool2d_backward(&g, map)?),
                (Layer::Spike(_), LayerCache::Spike(cache)) => {
                    let (mut gu, gv) = spike_backward(&g, cache)?;
                    if lambda_h != T::zero() {
                        let h = hoyer_grad(&cache.u);
                        for (a, &b) in gu.data_mut().iter_mut().zip(h.data()) {
                            *a += lambda_h * b;
                        }
                    }
                    layer_grads[i] = vec![Tensor::from_vec([1], vec![gv])?];
                    Some(gu)
                }
                (Layer::Flatten, LayerCache::Flatten { input_shape }) => Some(g.reshape(input_shape.clone())?),
                (Layer::Dropout { .. }, LayerCache::Dropout { mask }) => Some(match mask {
                    Some(m) => g.zip_map(m, |a, b| a * b)?,
                    None => g,
                }),
                _ => return Err(Error::invalid(format!("trace layer {i} does not match the model"))),
            };
            if let (true, Some(gx)) = (need_x, grad_in) {
                accumulate(&mut grad_out[i - 1], gx)?;
            }
        }

        let mut owners = Vec::new();
        let mut tensors = Vec::new();
        for p in self.params() {
            owners.push((p.owner, p.kind));
        }
        let mut layer_iter: Vec<std::vec::IntoIter<Tensor<T>>> = layer_grads.into_iter().map(|v| v.into_iter()).collect();
        let mut sc_iter: Vec<std::vec::IntoIter<Tensor<T>>> = sc_grads.into_iter().map(|v| v.into_iter()).collect();
        for &(owner, _) in &owners {
            let t = match owner {
                ParamOwner::Layer(i) => layer_iter[i].next(),
                ParamOwner::Shortcut(j) => sc_iter[j].next(),
            };
            tensors.push(t.ok_or_else(|| Error::invalid("missing gradient for a parameter"))?);
        }
        Ok(Gradients { owners, tensors })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn dropout_mask<T: Scalar>(shape: &[usize], rate: T, rng: &mut Rng) -> Tensor<T> {
    let p = rate.as_f64();
    let keep = T::one() / (T::one() - rate);
    let mut m = Tensor::zeros(shape.to_vec());
    for v in m.data_mut() {
        if rng.unit() >= p {
            *v = keep;
        }
    }
    m
}

fn probe_spike<T: Scalar>(u: &Tensor<T>, v_th: T, rc: &SpikeCache<T>) -> Result<(Tensor<T>, SpikeCache<T>)> {
    u.check_same_shape(&rc.u)?;
    let inv = T::one() / v_th;
    let z = u.map(|x| x * inv);
    let o = if rc.kind == SpikeKind::Identity {
        u.clone()
    } else {
        let two = T::lit(2.0);
        let clamp = |v: T| v.max(T::zero()).min(two);
        let base = rc.output();
        let mut o = base.clone();
        for ((out, &zn), &zr) in o.data_mut().iter_mut().zip(z.data()).zip(rc.z.data()) {
            *out += rc.surrogate_scale * (clamp(zn) - clamp(zr));
        }
        o
    };
    let cache = SpikeCache {
        u: u.clone(),
        z,
        threshold_used: rc.threshold_used.clone(),
        v_th,
        surrogate_scale: rc.surrogate_scale,
        kind: rc.kind,
        spikes: rc.spikes,
    };
    Ok((o, cache))
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, k] = *logits.shape() else {
        return Err(Error::shape(format!("logits must be [B, K], got {:?}", logits.shape())));
    };
    let mut s = logits.clone();
    for r in 0..b {
        let row = &mut s.data_mut()[r * k..(r + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(s)
}

pub(crate) fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// `ce_weight·(softmax − onehot)/B`.
fn softmax_ce_grad<T: Scalar>(logits: &Tensor<T>, labels: &[usize], ce_weight: T) -> Result<Tensor<T>> {
    let mut s = softmax(logits)?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    check_labels(labels, b, k)?;
    for (r, &y) in labels.iter().enumerate() {
        s.data_mut()[r * k + y] -= T::one();
    }
    let f = ce_weight / T::from_usize_lossy(b);
    Ok(s.map(|v| v * f))
}

