//! Seeded fixtures shared by the kernel benchmarks.

use tc3l_core::data::{gen_blobs, DataConfig};
use tc3l_core::{AttentionMode, Batch, ClassCenters, Dataset, ModelConfig, Network, Rng};

/// Default-sized network, centers, and a batch of `m` samples.
pub struct Fixture {
    pub net: Network,
    pub centers: ClassCenters,
    pub batch: Batch,
    pub dataset: Dataset,
}

impl Fixture {
    pub fn new(m: usize, seed: u64) -> Self {
        let config = ModelConfig::default();
        let rng = Rng::new(seed);
        let net = Network::init(config, AttentionMode::Element, 4, &rng).expect("default config");
        let centers =
            ClassCenters::init(config.k_classes, config.c_d, &mut rng.fork(3)).expect("shape");
        let dataset = gen_blobs(&DataConfig {
            n_total: m.max(config.k_classes * 40),
            seed,
            ..DataConfig::default()
        })
        .expect("default data config");
        let idx: Vec<usize> = (0..m).collect();
        let batch = dataset.batch(&idx).expect("indices in range");
        Self {
            net,
            centers,
            batch,
            dataset,
        }
    }
}
