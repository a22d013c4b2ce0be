//! Shared fixtures for the benchmarks.

use wdmup::diagnostics::ModelSpec;
use wdmup::linalg::{gaussian_matrix, Matrix, RandomSource};
use wdmup::{ArchSpec, BaseHyperparams, OptimizerKind, ParamKind, ResidualNet, StepConfig};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    gaussian_matrix(rows, cols, 1.0, &mut RandomSource::new(seed))
}

/// A μP model at `width` × `depth` with unit base sizes, plus one batch.
pub struct StepFixture {
    pub model: ModelSpec,
    pub net: ResidualNet,
    pub cfg: StepConfig,
    pub x: Matrix,
    pub y: Matrix,
}

pub fn step_fixture(optimizer: OptimizerKind, width: usize, depth: usize) -> StepFixture {
    let arch = ArchSpec::linear(16, width, 4, depth);
    let base = BaseHyperparams { sigma2_base: 1.0, eta_base: 0.1, ..BaseHyperparams::default() };
    let mut model = ModelSpec::new(arch, optimizer, ParamKind::MuP, base);
    model.base_width = 1;
    model.base_depth = 1;
    let (net, cfg) = model.build(arch, 0).expect("valid model");
    StepFixture { model, net, cfg, x: gaussian(32, 16, 1), y: gaussian(32, 4, 2) }
}
