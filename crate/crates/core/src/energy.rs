//! MAC/comparison counting and the compute-energy model.
//!
//! Energies are evaluated exactly as rationals in femtojoules:
//! `E_snn = F₁·4.6 + C₁·0.4 + Σ_{l≥2} (S_l·F_l·0.9 + C_l·0.7)` pJ and
//! `E_dnn = 4.6·ΣF_l` pJ.

use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{Layer, NetworkModel};
use crate::scalar::Scalar;
use crate::spike::SpikeKind;
use crate::train::measure_spiking_activity;

/// Per-operation energies in femtojoules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnergyConstants {
    pub mac_fj: u64,
    pub ac_fj: u64,
    pub first_comparison_fj: u64,
    pub comparison_fj: u64,
}

pub const DEFAULT_CONSTANTS: EnergyConstants = EnergyConstants {
    mac_fj: 4600,
    ac_fj: 900,
    first_comparison_fj: 400,
    comparison_fj: 700,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostOwner {
    Layer(usize),
    Shortcut(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCostProfile {
    pub owner: CostOwner,
    pub kind: &'static str,
    /// Multiply-accumulates per sample.
    pub flops: u64,
    /// Threshold comparisons per sample.
    pub comparisons: u64,
    pub is_first_layer: bool,
    /// Spike layer whose binary output this layer consumes; `None` for
    /// analog inputs, which are charged as dense MACs.
    pub spiking_input: Option<usize>,
}

impl LayerCostProfile {
    pub fn name(&self) -> String {
        match self.owner {
            CostOwner::Layer(i) => format!("{}{i}", self.kind),
            CostOwner::Shortcut(j) => format!("shortcut{j}"),
        }
    }
}

fn layer_macs<T: Scalar>(layer: &Layer<T>, output: &[usize]) -> Option<u64> {
    match layer {
        Layer::Conv(c) => {
            let k = c.kernel() as u64;
            Some(output.iter().product::<usize>() as u64 * k * k * c.in_channels() as u64)
        }
        Layer::Linear(l) => Some(l.fan_in() as u64 * l.fan_out() as u64),
        _ => None,
    }
}

fn is_passthrough<T>(layer: &Layer<T>) -> bool {
    matches!(layer, Layer::Flatten | Layer::Dropout { .. } | Layer::MaxPool { .. })
}

/// One row per conv/linear layer and per shortcut projection.
///
/// MACs: conv `H'·W'·O·k²·C`, linear `in·out`. A layer's comparisons are the
/// neurons of the spike layer its output drives (for the classifier head,
/// its output count). Batch norm and pooling cost nothing.
pub fn count_flops<T: Scalar>(model: &NetworkModel<T>, input_shape: [usize; 3]) -> Result<Vec<LayerCostProfile>> {
    if input_shape != model.input_shape() {
        return Err(Error::shape(format!(
            "model expects input {:?}, got {input_shape:?}",
            model.input_shape()
        )));
    }
    let layers = model.layers();
    let shapes = model.output_shapes();
    let shortcut_targets: Vec<usize> = model.shortcuts().iter().map(|s| s.to).collect();
    let mut rows = Vec::new();
    let mut first = true;
    for (i, layer) in layers.iter().enumerate() {
        let Some(flops) = layer_macs(layer, &shapes[i]) else {
            continue;
        };
        // Walk back over shape-only layers to the producer of this input.
        let mut j = i;
        let mut spiking_input = None;
        while j > 0 {
            j -= 1;
            if shortcut_targets.contains(&j) {
                break;
            }
            match &layers[j] {
                Layer::Spike(s) => {
                    if s.kind != SpikeKind::Identity {
                        spiking_input = Some(j);
                    }
                    break;
                }
                l if is_passthrough(l) => continue,
                _ => break,
            }
        }
        // Walk forward to the spike layer this output drives.
        let mut comparisons = None;
        for (k, l) in layers.iter().enumerate().skip(i + 1) {
            match l {
                Layer::Spike(_) => {
                    comparisons = Some(shapes[k].iter().product::<usize>() as u64);
                    break;
                }
                Layer::Conv(_) | Layer::Linear(_) => break,
                _ => continue,
            }
        }
        let comparisons = comparisons.unwrap_or_else(|| {
            if i + 1 == layers.len() {
                shapes[i].iter().product::<usize>() as u64
            } else {
                0
            }
        });
        rows.push(LayerCostProfile {
            owner: CostOwner::Layer(i),
            kind: layer.kind_name(),
            flops,
            comparisons,
            is_first_layer: first,
            spiking_input,
        });
        first = false;
    }
    for (j, sc) in model.shortcuts().iter().enumerate() {
        if let Some(p) = &sc.projection {
            let out = p.output_shape(&shapes[sc.from])?;
            let k = p.kernel() as u64;
            rows.push(LayerCostProfile {
                owner: CostOwner::Shortcut(j),
                kind: "projection",
                flops: out.iter().product::<usize>() as u64 * k * k * p.in_channels() as u64,
                comparisons: 0,
                is_first_layer: false,
                spiking_input: None,
            });
        }
    }
    Ok(rows)
}

fn int(v: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

fn check_activity(a: &BigRational) -> Result<()> {
    if *a < int(0) || *a > int(1) {
        return Err(Error::invalid(format!("activity {a} outside [0, 1]")));
    }
    Ok(())
}

/// SNN energy of one row in femtojoules. `activity` is used for rows with a
/// spiking input; other rows are dense.
pub fn row_snn_energy_fj(row: &LayerCostProfile, activity: Option<&BigRational>, c: &EnergyConstants) -> Result<BigRational> {
    let cmp = if row.is_first_layer { c.first_comparison_fj } else { c.comparison_fj };
    let comparisons = int(row.comparisons * cmp);
    match (row.spiking_input, activity) {
        (Some(_), Some(s)) => {
            check_activity(s)?;
            Ok(s * int(row.flops * c.ac_fj) + comparisons)
        }
        (Some(_), None) => Err(Error::invalid(format!("no activity given for {}", row.name()))),
        (None, _) => Ok(int(row.flops * c.mac_fj) + comparisons),
    }
}

/// Exact SNN energy in femtojoules; `activities[i]` pairs with `profiles[i]`.
pub fn snn_energy_fj(profiles: &[LayerCostProfile], activities: &[Option<BigRational>], c: &EnergyConstants) -> Result<BigRational> {
    if profiles.len() != activities.len() {
        return Err(Error::shape(format!(
            "{} rows but {} activities",
            profiles.len(),
            activities.len()
        )));
    }
    profiles
        .iter()
        .zip(activities)
        .try_fold(BigRational::zero(), |acc, (p, a)| Ok(acc + row_snn_energy_fj(p, a.as_ref(), c)?))
}

pub fn dnn_energy_fj(profiles: &[LayerCostProfile], c: &EnergyConstants) -> BigRational {
    int(profiles.iter().map(|p| p.flops).sum::<u64>() * c.mac_fj)
}

/// SNN energy in picojoules.
pub fn snn_energy(profiles: &[LayerCostProfile], activities: &[Option<BigRational>]) -> Result<f64> {
    Ok(to_pj(&snn_energy_fj(profiles, activities, &DEFAULT_CONSTANTS)?))
}

pub fn dnn_energy(profiles: &[LayerCostProfile]) -> f64 {
    to_pj(&dnn_energy_fj(profiles, &DEFAULT_CONSTANTS))
}

pub fn to_pj(fj: &BigRational) -> f64 {
    (fj / int(1000)).to_f64().unwrap_or(f64::NAN)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyRow {
    pub profile: LayerCostProfile,
    /// Input activity; exactly 1 for dense rows.
    pub activity: BigRational,
    pub snn_fj: BigRational,
    pub dnn_fj: BigRational,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub rows: Vec<EnergyRow>,
    pub constants: EnergyConstants,
}

impl EnergyReport {
    /// Builds rows from cost profiles and per-spike-layer activities
    /// (`(spike layer index, activity)` pairs).
    pub fn from_profiles(
        profiles: Vec<LayerCostProfile>,
        spike_activity: &[(usize, BigRational)],
        constants: EnergyConstants,
    ) -> Result<Self> {
        let mut rows = Vec::with_capacity(profiles.len());
        for p in profiles {
            let activity = match p.spiking_input {
                Some(s) => spike_activity
                    .iter()
                    .find(|(i, _)| *i == s)
                    .map(|(_, a)| a.clone())
                    .ok_or_else(|| Error::invalid(format!("no activity measured for spike layer {s}")))?,
                None => int(1),
            };
            let snn_fj = row_snn_energy_fj(&p, Some(&activity), &constants)?;
            let dnn_fj = int(p.flops * constants.mac_fj);
            rows.push(EnergyRow {
                profile: p,
                activity,
                snn_fj,
                dnn_fj,
            });
        }
        Ok(EnergyReport { rows, constants })
    }

    pub fn snn_total_fj(&self) -> BigRational {
        self.rows.iter().fold(BigRational::zero(), |a, r| a + &r.snn_fj)
    }

    pub fn dnn_total_fj(&self) -> BigRational {
        self.rows.iter().fold(BigRational::zero(), |a, r| a + &r.dnn_fj)
    }

    pub fn snn_energy_pj(&self) -> f64 {
        to_pj(&self.snn_total_fj())
    }

    pub fn dnn_energy_pj(&self) -> f64 {
        to_pj(&self.dnn_total_fj())
    }

    /// `layer,kind,flops,comparisons,activity,snn_pj,dnn_pj` rows plus a
    /// `TOTAL` row. Counts are exact integers; reals use six significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,flops,comparisons,activity,snn_pj,dnn_pj\n");
        let (mut flops, mut cmps) = (0u64, 0u64);
        for r in &self.rows {
            flops += r.profile.flops;
            cmps += r.profile.comparisons;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.profile.name(),
                r.profile.kind,
                r.profile.flops,
                r.profile.comparisons,
                format_g6(r.activity.to_f64().unwrap_or(f64::NAN)),
                format_g6(to_pj(&r.snn_fj)),
                format_g6(to_pj(&r.dnn_fj)),
            );
        }
        let total_slots: u64 = self.rows.iter().filter(|r| r.profile.spiking_input.is_some()).map(|r| r.profile.flops).sum();
        let weighted = self
            .rows
            .iter()
            .filter(|r| r.profile.spiking_input.is_some())
            .fold(BigRational::zero(), |a, r| a + &r.activity * int(r.profile.flops));
        let mean_activity = if total_slots == 0 {
            BigRational::zero()
        } else {
            weighted / int(total_slots)
        };
        let _ = writeln!(
            s,
            "TOTAL,,{flops},{cmps},{},{},{}",
            format_g6(mean_activity.to_f64().unwrap_or(f64::NAN)),
            format_g6(self.snn_energy_pj()),
            format_g6(self.dnn_energy_pj()),
        );
        s
    }
}

/// Measures inference activity on `data` and prices every row.
pub fn emit_report<T: Scalar>(model: &NetworkModel<T>, data: &Dataset<T>, batch_size: usize) -> Result<EnergyReport> {
    let profiles = count_flops(model, model.input_shape())?;
    let tally = measure_spiking_activity(model, data, batch_size)?;
    let activity: Vec<(usize, BigRational)> = tally.layers.iter().map(|l| (l.layer, l.exact())).collect();
    EnergyReport::from_profiles(profiles, &activity, DEFAULT_CONSTANTS)
}

/// `printf("%g")` with six significant digits.
pub fn format_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
