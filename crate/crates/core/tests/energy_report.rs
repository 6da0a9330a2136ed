use hsnn::data::Dataset;
use hsnn::energy::{
    count_flops, dnn_energy_fj, emit_report, snn_energy_fj, CostOwner, EnergyReport, DEFAULT_CONSTANTS,
};
use hsnn::network::{ArchDescriptor, BatchNorm, Conv, Layer, Linear, ModelOptions, NetworkModel};
use hsnn::spike::HoyerSpikeState;
use hsnn::{Rng, Tensor};
use num_bigint::BigInt;
use num_rational::BigRational;

fn q(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn conv_model(out_channels: usize) -> NetworkModel<f64> {
    let mut rng = Rng::new(0);
    let layers = vec![
        Layer::Conv(Conv::new(1, out_channels, 3, 1, 0, &mut rng).unwrap()),
        Layer::BatchNorm(BatchNorm::new(out_channels)),
        Layer::Spike(HoyerSpikeState::new(Default::default())),
        Layer::Flatten,
        Layer::Linear(Linear::new(out_channels * 4, 2, &mut rng).unwrap()),
    ];
    NetworkModel::new([1, 4, 4], layers, vec![], "custom").unwrap()
}

#[test]
fn mac_and_comparison_counts() {
    let linear: NetworkModel<f64> = "mlp:1x1x4:||3".parse::<ArchDescriptor>().unwrap().build(&ModelOptions::default(), &mut Rng::new(0)).unwrap();
    let rows = count_flops(&linear, [1, 1, 4]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].flops, rows[0].comparisons), (12, 3));

    // 1→1 channel, 3×3 kernel, valid 4×4 input: 2·2·1·9 MACs.
    let rows = count_flops(&conv_model(1), [1, 4, 4]).unwrap();
    assert_eq!((rows[0].flops, rows[0].comparisons), (36, 4));
    assert!(rows[0].is_first_layer && rows[0].spiking_input.is_none());
    assert_eq!(rows[1].spiking_input, Some(2));

    // The spike layer after a 2-channel conv sees 2×2×2 neurons.
    let rows = count_flops(&conv_model(2), [1, 4, 4]).unwrap();
    assert_eq!((rows[0].flops, rows[0].comparisons), (72, 8));

    assert!(count_flops(&conv_model(1), [1, 5, 5]).is_err());
}

#[test]
fn residual_projection_rows_are_dense() {
    let model: NetworkModel<f64> = "resnet-s:1x8x8:s4-b4-b8s||10".parse::<ArchDescriptor>().unwrap().build(&ModelOptions::default(), &mut Rng::new(0)).unwrap();
    let rows = count_flops(&model, [1, 8, 8]).unwrap();
    let projection = rows.iter().find(|r| r.owner == CostOwner::Shortcut(1)).unwrap();
    // 1×1 conv, stride 2: 4·4·8 outputs × 4 inputs.
    assert_eq!(projection.flops, 4 * 4 * 8 * 4);
    assert!(projection.spiking_input.is_none());
    let block_convs: Vec<_> = rows.iter().filter(|r| matches!(r.owner, CostOwner::Layer(3 | 6))).collect();
    assert!(block_convs.iter().all(|r| r.spiking_input.is_some()));
    // The stem conv feeds a 4×8×8 spike layer.
    assert_eq!(rows[0].comparisons, 4 * 8 * 8);
    assert!(rows[0].is_first_layer);
}

/// `mlp:1x1x10:|fc10|20` with an identity first layer, unit thresholds and
/// two samples of which the first has five unit entries: a quarter of the
/// hidden neurons fire.
fn toy_fixture() -> (NetworkModel<f64>, Dataset<f64>) {
    let mut model: NetworkModel<f64> = "mlp:1x1x10:|fc10|20".parse::<ArchDescriptor>().unwrap().build(&ModelOptions::default(), &mut Rng::new(0)).unwrap();
    for layer in model.layers_mut() {
        match layer {
            Layer::Linear(l) if l.fan_out() == 10 => {
                l.weight = Tensor::from_vec([10, 10], (0..100).map(|i| if i % 11 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
                l.bias = Tensor::zeros([10]);
            }
            Layer::Spike(s) => {
                s.v_th = 1.0;
                s.ema_ext = Some(vec![1.0; 10]);
            }
            _ => {}
        }
    }
    let mut x = vec![0.0; 20];
    x[..5].iter_mut().for_each(|v| *v = 1.0);
    let data = Dataset::new(Tensor::from_vec([2, 1, 1, 10], x).unwrap(), vec![0, 1], 20).unwrap();
    (model, data)
}

#[test]
fn toy_fixture_reproduces_hand_energies() {
    let (model, data) = toy_fixture();
    let report = emit_report(&model, &data, 2).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[1].activity, q(1, 4));
    assert_eq!(report.snn_total_fj(), BigRational::from_integer(523_000.into()));
    assert_eq!(report.dnn_total_fj(), BigRational::from_integer(1_380_000.into()));
    assert_eq!(report.snn_energy_pj(), 523.0);
    assert_eq!(report.dnn_energy_pj(), 1380.0);
    let csv = report.to_csv();
    assert_eq!(csv.lines().next().unwrap(), "layer,kind,flops,comparisons,activity,snn_pj,dnn_pj");
    assert_eq!(csv.lines().last().unwrap(), "TOTAL,,300,30,0.25,523,1380");
    assert_eq!(csv.lines().nth(1).unwrap(), "linear1,linear,100,10,1,464,460");
    assert_eq!(csv.lines().nth(2).unwrap(), "linear4,linear,200,20,0.25,59,920");
}

#[test]
fn report_totals_are_reproduced_from_rows() {
    let model: NetworkModel<f32> = "vgg-s:1x8x8:c4-p-c8|fc6|3".parse::<ArchDescriptor>().unwrap().build(&ModelOptions::default(), &mut Rng::new(3)).unwrap();
    let mut rng = Rng::new(4);
    let data = Dataset::new(
        Tensor::from_vec([5, 1, 8, 8], (0..320).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap(),
        vec![0, 1, 2, 0, 1],
        3,
    )
    .unwrap();
    let report = emit_report(&model, &data, 2).unwrap();
    let mut snn = 0.0;
    let mut dnn = 0.0;
    for line in report.to_csv().lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let activity: f64 = f[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&activity));
        if f[0] == "TOTAL" {
            assert!((f[5].parse::<f64>().unwrap() - snn).abs() <= 1e-5 * snn);
            assert!((f[6].parse::<f64>().unwrap() - dnn).abs() <= 1e-5 * dnn);
        } else {
            snn += f[5].parse::<f64>().unwrap();
            dnn += f[6].parse::<f64>().unwrap();
        }
    }
    let exact_sum = report.rows.iter().fold(BigRational::from_integer(0.into()), |a, r| a + &r.snn_fj);
    assert_eq!(exact_sum, report.snn_total_fj());
    assert!(report.dnn_total_fj() >= report.rows[0].snn_fj);
}

#[test]
fn snn_energy_is_monotone_in_each_activity() {
    let model: NetworkModel<f64> = "vgg-s:1x8x8:c4-p-c8|fc6|3".parse::<ArchDescriptor>().unwrap().build(&ModelOptions::default(), &mut Rng::new(5)).unwrap();
    let profiles = count_flops(&model, [1, 8, 8]).unwrap();
    let spiking: Vec<usize> = (0..profiles.len()).filter(|&i| profiles[i].spiking_input.is_some()).collect();
    assert!(spiking.len() >= 2);
    let base = |i: usize| profiles[i].spiking_input.map(|_| q(1, 3));
    for &target in &spiking {
        let mut previous = None;
        for step in 0..=20 {
            let activities: Vec<Option<BigRational>> = (0..profiles.len())
                .map(|i| if i == target { Some(q(step, 20)) } else { base(i) })
                .collect();
            let e = snn_energy_fj(&profiles, &activities, &DEFAULT_CONSTANTS).unwrap();
            if let Some(p) = previous {
                assert!(e > p);
            }
            previous = Some(e);
        }
    }
    // Full activity without comparisons is the pure AC/MAC ratio on spiking rows.
    let mut spiking_rows: Vec<_> = spiking.iter().map(|&i| profiles[i].clone()).collect();
    spiking_rows.iter_mut().for_each(|r| r.comparisons = 0);
    let ones = vec![Some(q(1, 1)); spiking_rows.len()];
    let ratio = snn_energy_fj(&spiking_rows, &ones, &DEFAULT_CONSTANTS).unwrap() / dnn_energy_fj(&spiking_rows, &DEFAULT_CONSTANTS);
    assert_eq!(ratio, q(9, 46));
}

#[test]
fn untrained_model_gives_valid_report() {
    let model: NetworkModel<f64> = "resnet-s:1x8x8:s4-b4-b8s|fc6|10".parse::<ArchDescriptor>().unwrap().build(&ModelOptions::default(), &mut Rng::new(6)).unwrap();
    let data = Dataset::new(Tensor::full([3, 1, 8, 8], 0.3), vec![1, 2, 3], 10).unwrap();
    let report: EnergyReport = emit_report(&model, &data, 3).unwrap();
    assert!(report.rows.iter().all(|r| r.activity >= q(0, 1) && r.activity <= q(1, 1)));
    assert!(report.snn_energy_pj() >= 0.0);
    let empty = Dataset::new(Tensor::<f64>::zeros([0, 1, 8, 8]), vec![], 10);
    assert!(empty.is_err() || emit_report(&model, &empty.unwrap(), 3).is_err());
}
