//! Shared fixtures for the benchmarks.

use cdt_core::model::{ModelConfig, ModelParams};
use cdt_core::world::{CellSample, GroundTruthWorld, WorldConfig};
use cdt_core::Tensor;

/// A desk-scale world with a few cells per gene and an untrained model sized
/// to it.
pub struct DeskFixture {
    pub world: GroundTruthWorld,
    pub cells: Vec<CellSample>,
    pub params: ModelParams<f32>,
}

impl DeskFixture {
    pub fn new() -> Self {
        let cfg = WorldConfig {
            cells_per_gene: 2,
            cells_per_snp: 2,
            ..WorldConfig::default()
        };
        let world = GroundTruthWorld::generate(&cfg).expect("desk world");
        let cells = world.simulate_dataset().expect("desk cells").cells;
        let params = ModelParams::init(&ModelConfig::desk(), 0).expect("desk model");
        DeskFixture { world, cells, params }
    }

    pub fn loci(&self) -> &[Tensor<f32>] {
        &self.world.embeddings
    }
}

impl Default for DeskFixture {
    fn default() -> Self {
        Self::new()
    }
}

/// Deterministic dense matrix with entries in [-1, 1).
pub fn matrix(rows: usize, cols: usize, salt: u64) -> Tensor<f32> {
    Tensor::from_fn(vec![rows, cols], |i| {
        let h = (i as u64 ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
        (h as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    })
}
