use num_bigint::BigInt;
use num_rational::BigRational;

use crate::network::model::ForwardTrace;
use crate::scalar::Scalar;
use crate::spike::SpikeKind;

/// Spikes emitted by one spike layer over some number of samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerActivity {
    pub layer: usize,
    pub spikes: u64,
    /// Neurons × samples.
    pub slots: u64,
}

impl LayerActivity {
    pub fn activity(&self) -> f64 {
        if self.slots == 0 {
            0.0
        } else {
            self.spikes as f64 / self.slots as f64
        }
    }

    pub fn exact(&self) -> BigRational {
        if self.slots == 0 {
            BigRational::from_integer(BigInt::from(0))
        } else {
            BigRational::new(BigInt::from(self.spikes), BigInt::from(self.slots))
        }
    }
}

/// Running per-layer spike counts across batches.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SpikeTally {
    pub layers: Vec<LayerActivity>,
    pub samples: usize,
}

impl SpikeTally {
    pub fn add<T: Scalar>(&mut self, trace: &ForwardTrace<T>) {
        let caches: Vec<_> = trace
            .spike_caches()
            .filter(|(_, c)| c.kind != SpikeKind::Identity)
            .collect();
        if self.layers.is_empty() {
            self.layers = caches
                .iter()
                .map(|(i, _)| LayerActivity {
                    layer: *i,
                    spikes: 0,
                    slots: 0,
                })
                .collect();
        }
        for (acc, (_, c)) in self.layers.iter_mut().zip(caches) {
            acc.spikes += c.spikes;
            acc.slots += c.u.len() as u64;
        }
        self.samples += trace.batch();
    }

    /// Total spikes over total neuron slots, all layers pooled.
    pub fn mean_activity(&self) -> f64 {
        let (s, n) = self
            .layers
            .iter()
            .fold((0u64, 0u64), |(s, n), l| (s + l.spikes, n + l.slots));
        if n == 0 {
            0.0
        } else {
            s as f64 / n as f64
        }
    }

    pub fn activities(&self) -> Vec<f64> {
        self.layers.iter().map(LayerActivity::activity).collect()
    }
}
