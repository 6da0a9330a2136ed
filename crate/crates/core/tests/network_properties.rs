use hsnn::hoyer::hoyer_grad;
use hsnn::hoyer::hoyer_square;
use hsnn::network::{
    build_resnet_s, build_vgg_s, cross_entropy, ArchDescriptor, Layer, LayerCache, ModelOptions, NetworkModel,
    ParamKind, ParamOwner,
};
use hsnn::spike::SpikeKind;
use hsnn::{Phase, Rng, Tensor};

fn no_dropout() -> ModelOptions {
    ModelOptions {
        dropout: 0.0,
        ..ModelOptions::default()
    }
}

fn build(arch: &str, seed: u64, opts: &ModelOptions) -> NetworkModel<f64> {
    arch.parse::<ArchDescriptor>()
        .unwrap()
        .build(opts, &mut Rng::new(seed))
        .unwrap()
}

fn random_input(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap()
}

fn kinds(model: &NetworkModel<f64>) -> Vec<&'static str> {
    model.layers().iter().map(|l| l.kind_name()).collect()
}

fn spike_outputs(trace: &hsnn::network::ForwardTrace<f64>) -> Vec<Tensor<f64>> {
    trace.spike_caches().map(|(_, c)| c.output()).collect()
}

#[test]
fn builders_produce_logits_of_class_width() {
    let opts = ModelOptions::default();
    let mut vgg = build_vgg_s::<f64>([1, 28, 28], 10, 1, &opts, &mut Rng::new(0)).unwrap();
    let (logits, _) = vgg.forward(&random_input([3, 1, 28, 28], 1), Phase::Train, None).unwrap();
    assert_eq!(logits.shape(), &[3, 10]);
    let conv = vgg.layers().iter().filter(|l| matches!(l, Layer::Conv(_))).count();
    let linear = vgg.layers().iter().filter(|l| matches!(l, Layer::Linear(_))).count();
    assert_eq!((conv, linear), (4, 3));

    let resnet = build_resnet_s::<f64>([3, 32, 32], 10, 2, &opts, &mut Rng::new(0)).unwrap();
    let (logits, _) = resnet.infer(&random_input([2, 3, 32, 32], 2)).unwrap();
    assert_eq!(logits.shape(), &[2, 10]);

    assert!(build_vgg_s::<f64>([1, 28, 28], 10, 0, &opts, &mut Rng::new(0)).is_err());
    assert!(build_resnet_s::<f64>([3, 32, 32], 10, 0, &opts, &mut Rng::new(0)).is_err());
    // Four pooling stages collapse a 6×6 input.
    assert!("vgg-s:1x6x6:c2-p-c2-p-c2-p||10".parse::<ArchDescriptor>().and_then(|d| d.build::<f64>(&opts, &mut Rng::new(0))).is_err());
}

#[test]
fn vgg_blocks_are_conv_pool_bn_spike() {
    let model = build("vgg-s:1x8x8:c4-p-c4|fc6|10", 0, &ModelOptions::default());
    assert_eq!(
        kinds(&model),
        [
            "conv", "maxpool", "batchnorm", "hoyer_spike", "conv", "batchnorm", "hoyer_spike", "flatten", "linear",
            "hoyer_spike", "dropout", "linear"
        ]
    );
}

#[test]
fn resnet_blocks_are_bn_spike_conv_with_shortcuts() {
    let model = build("resnet-s:1x8x8:s4-b4-b8s||10", 0, &ModelOptions::default());
    assert_eq!(
        kinds(&model),
        [
            "conv", "batchnorm", "hoyer_spike", "conv", "batchnorm", "hoyer_spike", "conv", "batchnorm", "hoyer_spike",
            "flatten", "linear"
        ]
    );
    let edges: Vec<(usize, usize, bool)> = model
        .shortcuts()
        .iter()
        .map(|s| (s.from, s.to, s.projection.is_some()))
        .collect();
    assert_eq!(edges, [(0, 3, false), (3, 6, true)]);
}

#[test]
fn removing_a_shortcut_changes_outputs() {
    let model = build("resnet-s:1x8x8:s4-b4-b8s||10", 3, &ModelOptions::default());
    let x = random_input([4, 1, 8, 8], 4);
    let (with, _) = model.infer(&x).unwrap();
    for edge in 0..model.shortcuts().len() {
        let mut cut = model.clone();
        cut.remove_shortcut(edge);
        let (without, _) = cut.infer(&x).unwrap();
        assert_ne!(with, without, "shortcut {edge} is dead");
    }
}

#[test]
fn hidden_spike_outputs_are_binary() {
    for (arch, seed) in [("vgg-s:1x8x8:c4-p-c4|fc6|10", 5), ("resnet-s:1x8x8:s4-b4-b8s|fc6|10", 6)] {
        let mut model = build(arch, seed, &ModelOptions::default());
        for round in 0..5 {
            let x = random_input([6, 1, 8, 8], seed * 100 + round);
            let mut rng = Rng::new(round);
            let (_, train) = model.forward(&x, Phase::Train, Some(&mut rng)).unwrap();
            let (_, infer) = model.infer(&x).unwrap();
            for o in spike_outputs(&train).iter().chain(&spike_outputs(&infer)) {
                assert!(o.data().iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
    }
}

#[test]
fn identical_samples_give_identical_rows() {
    let mut model = build("vgg-s:1x8x8:c4-p-c4|fc6|10", 7, &ModelOptions::default());
    model.forward(&random_input([8, 1, 8, 8], 8), Phase::Train, None).unwrap();
    let one = random_input([1, 1, 8, 8], 9);
    let pair = Tensor::from_vec([2, 1, 8, 8], [one.data(), one.data()].concat()).unwrap();
    let (logits, _) = model.infer(&pair).unwrap();
    assert_eq!(logits.sample(0), logits.sample(1));
}

#[test]
fn inference_is_deterministic_and_pure() {
    let mut model = build("resnet-s:1x8x8:s4-b4-b8s|fc6|10", 10, &ModelOptions::default());
    model.forward(&random_input([8, 1, 8, 8], 11), Phase::Train, None).unwrap();
    let before = model.clone();
    let x = random_input([3, 1, 8, 8], 12);
    let (a, ta) = model.infer(&x).unwrap();
    let (b, tb) = model.infer(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(spike_outputs(&ta), spike_outputs(&tb));
    assert_eq!(ta.layers.len(), model.layers().len());
    assert_eq!(model, before);
}

#[test]
fn zero_input_with_zero_shifts_is_silent() {
    let mut model = build("vgg-s:1x8x8:c4-p-c4|fc6|10", 13, &ModelOptions::default());
    let x = Tensor::zeros([2, 1, 8, 8]);
    for phase in [Phase::Train, Phase::Infer] {
        let (logits, trace) = model.forward(&x, phase, None).unwrap();
        for (_, cache) in trace.spike_caches() {
            assert_eq!(cache.spikes, 0);
        }
        // Only the head bias (zero at initialization) reaches the logits.
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }
    // With nonzero batch-norm shifts, the first block's output is set by
    // its shift alone, whatever the first conv's weights.
    for layer in model.layers_mut() {
        if let Layer::BatchNorm(bn) = layer {
            bn.beta = bn.beta.map(|_| 0.5);
        }
    }
    let mut reweighted = model.clone();
    if let Layer::Conv(c) = &mut reweighted.layers_mut()[0] {
        c.weight = c.weight.map(|w| 3.0 * w - 0.1);
    }
    let (a, _) = model.forward(&x, Phase::Train, None).unwrap();
    let (b, _) = reweighted.forward(&x, Phase::Train, None).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().any(|&v| v != 0.0));
}

#[test]
fn hoyer_measure_of_traced_potentials_is_scale_invariant() {
    let mut model = build("vgg-s:1x8x8:c4-p-c4|fc6|10", 14, &ModelOptions::default());
    let (_, trace) = model.forward(&random_input([4, 1, 8, 8], 15), Phase::Train, None).unwrap();
    for u in trace.regularized_potentials() {
        let h = hoyer_square(u);
        for alpha in [1e-3, 0.5, 7.0, 1e4] {
            assert!((hoyer_square(&u.scale(alpha)) - h).abs() <= 1e-9 * h);
        }
    }
}

/// Central differences of the plain (non-spiking) training loss.
fn plain_loss_fd(model: &NetworkModel<f64>, x: &Tensor<f64>, labels: &[usize], p: usize, e: usize, h: f64) -> f64 {
    let eval = |delta: f64| {
        let mut m = model.clone();
        m.params_mut()[p].data[e] += delta;
        let (logits, _) = m.forward(x, Phase::Train, None).unwrap();
        cross_entropy(&logits, labels).unwrap()
    };
    (eval(h) - eval(-h)) / (2.0 * h)
}

fn assert_matches_plain_network(arch: &str, seed: u64) {
    let mut model = build(arch, seed, &no_dropout());
    model.set_spike_kind(SpikeKind::Identity);
    let [c, hh, w] = model.input_shape();
    let x = random_input([3, c, hh, w], seed + 1);
    let labels = [1, 3, 2];
    let (_, trace) = model.forward(&x, Phase::Train, None).unwrap();
    let grads = model.backward(&trace, &labels, 0.0).unwrap();
    let mut checked = 0;
    for (p, g) in grads.tensors.iter().enumerate() {
        if grads.owners[p].1 == ParamKind::Threshold {
            // Identity layers bypass the threshold entirely.
            assert!(g.data().iter().all(|&v| v == 0.0));
            continue;
        }
        for (e, &analytic) in g.data().iter().enumerate() {
            let numeric = plain_loss_fd(&model, &x, &labels, p, e, 1e-5);
            // Roundoff of the difference quotient is about ε·|L|/h ≈ 1e-10.
            let diff = (analytic - numeric).abs();
            let rel = diff / analytic.abs().max(numeric.abs());
            assert!(diff < 1e-9 || rel < 1e-5, "{:?} entry {e}: analytic {analytic}, numeric {numeric}", grads.owners[p]);
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn identity_spikes_without_hoyer_term_reduce_to_plain_backprop() {
    assert_matches_plain_network("vgg-s:1x6x6:c2-p|fc5|4", 20);
}

#[test]
fn shortcut_fan_out_gradients_sum() {
    // The stem feeds both the first block and its shortcut; the second
    // block's input feeds its conv and a projection.
    assert_matches_plain_network("resnet-s:1x6x6:s2-b2-b3s||4", 21);
}

#[test]
fn hoyer_gradient_alone_when_downstream_windows_are_closed() {
    let mut model = build("mlp:1x1x4:|fc4-fc3|2", 22, &no_dropout());
    // First hidden layer: u = 3·x with x ∈ {±1}, so z = ±3 lies outside (0, 2).
    if let Layer::Linear(l) = &mut model.layers_mut()[1] {
        let d = l.weight.data_mut();
        d.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..4 {
            d[i * 4 + i] = 3.0;
        }
    }
    let mut rng = Rng::new(23);
    let x = Tensor::from_vec(
        [5, 1, 1, 4],
        (0..20).map(|_| if rng.below(2) == 0 { -1.0 } else { 1.0 }).collect(),
    )
    .unwrap();
    let lambda = 0.3;
    let (_, trace) = model.forward(&x, Phase::Train, None).unwrap();
    let grads = model.backward_with(&trace, &[0, 1, 0, 1, 1], 0.0, lambda).unwrap();
    let potentials = trace.regularized_potentials();
    assert!(trace.spike_caches().next().unwrap().1.z.data().iter().all(|z| z.abs() == 3.0));

    let find = |layer: usize, kind: ParamKind| {
        let i = grads.owners.iter().position(|&o| o == (ParamOwner::Layer(layer), kind)).unwrap();
        &grads.tensors[i]
    };
    for (layer, u) in [(1usize, potentials[0]), (4, potentials[1])] {
        let expected = hoyer_grad(u).scale(lambda);
        let width = u.shape()[1];
        let bias = find(layer, ParamKind::Bias);
        for j in 0..width {
            let want: f64 = (0..u.batch()).map(|b| expected.data()[b * width + j]).sum();
            assert!((bias.data()[j] - want).abs() <= 1e-12 * want.abs().max(1.0), "layer {layer} bias {j}");
        }
    }
    // Nothing flows into the first layer's threshold when its window is closed.
    let first_threshold = find(2, ParamKind::Threshold);
    assert_eq!(first_threshold.data(), &[0.0]);
}

#[test]
fn stale_traces_are_rejected() {
    let mut model = build("vgg-s:1x6x6:c2||4", 24, &no_dropout());
    let x = random_input([2, 1, 6, 6], 25);
    let (_, trace) = model.forward(&x, Phase::Train, None).unwrap();
    model.params_mut()[0].data[0] += 1.0;
    assert!(model.backward(&trace, &[0, 1], 0.0).is_err());
    let (_, infer) = model.infer(&x).unwrap();
    assert!(model.backward(&infer, &[0, 1], 0.0).is_err());
}

#[test]
fn trace_records_pool_and_bn_caches() {
    let mut model = build("vgg-s:1x8x8:c4-p-c4|fc6|10", 26, &ModelOptions::default());
    let (_, trace) = model.forward(&random_input([2, 1, 8, 8], 27), Phase::Train, None).unwrap();
    assert!(matches!(trace.layers[1], LayerCache::MaxPool(_)));
    assert!(matches!(trace.layers[2], LayerCache::BatchNorm(_)));
    assert_eq!(trace.regularized_potentials().len(), 3);
}
