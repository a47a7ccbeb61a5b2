//! Conditional generators and patch discriminators.

mod discriminator;
mod generator;
pub mod layers;

use candle_core::DType;

pub use discriminator::{Discriminator, DiscriminatorConfig, DISCRIMINATOR_STAGES};
pub use generator::{Conditioning, ConvBlock, Generator, GeneratorConfig, GENERATOR_KERNEL};

use crate::error::Result;
use crate::params::{init_rng, ParamBuilder, ParamStore};

pub const GENERATOR_PREFIX: &str = "g.";
pub const BACKWARD_PREFIX: &str = "f.";
pub const DX_PREFIX: &str = "dx.";
pub const DZ_PREFIX: &str = "dz.";

/// The four networks trained jointly: correction map `G: z -> x`, backward
/// map `F: x -> z`, and discriminators on each image domain.
#[derive(Debug, Clone)]
pub struct CycleModel {
    pub g: Generator,
    pub f: Generator,
    pub dx: Discriminator,
    pub dz: Discriminator,
    pub params: ParamStore,
    pub dtype: DType,
}

impl CycleModel {
    pub fn new(
        generator: &GeneratorConfig,
        discriminator: &DiscriminatorConfig,
        seed: u64,
        init_std: f64,
        dtype: DType,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = init_rng(seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng, dtype, init_std);
        let g = Generator::new(&mut b.push("g"), generator)?;
        let f = Generator::new(&mut b.push("f"), generator)?;
        let dx = Discriminator::new(&mut b.push("dx"), discriminator)?;
        let dz = Discriminator::new(&mut b.push("dz"), discriminator)?;
        Ok(Self {
            g,
            f,
            dx,
            dz,
            params,
            dtype,
        })
    }

    pub fn generator_vars(&self) -> Vec<candle_core::Var> {
        self.params.vars_with_prefix(&[GENERATOR_PREFIX, BACKWARD_PREFIX])
    }

    pub fn discriminator_vars(&self) -> Vec<candle_core::Var> {
        self.params.vars_with_prefix(&[DX_PREFIX, DZ_PREFIX])
    }
}
