//! Both branches bundled together, with named parameter blocks for the
//! optimizer and the checkpoint format.

use crate::error::Result;
use crate::field::{ClassTableMask, DynamicField, DynamicGrads, FieldConfig, StaticField, StaticGrads};
use crate::rng::{self, Substream};
use crate::scene::Aabb;

/// Names of the trainable blocks, in storage order.
pub const BLOCK_NAMES: [&str; 12] = [
    "static.grid",
    "static.trunk",
    "static.density",
    "static.semantic",
    "static.color",
    "static.appearance",
    "dynamic.grid",
    "dynamic.trunk",
    "dynamic.density",
    "dynamic.semantic",
    "dynamic.color",
    "dynamic.shadow",
];

/// Number of leading blocks that belong to the static branch.
pub const STATIC_BLOCKS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: FieldConfig,
    pub static_field: StaticField,
    pub dynamic_field: DynamicField,
}

impl Model {
    /// Initializes both branches from the `Init` substream of `seed`.
    pub fn new(
        config: &FieldConfig,
        bounds: Aabb,
        appearance_rows: usize,
        mask: Option<ClassTableMask>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng::stream(seed, Substream::Init, 0);
        let static_field = StaticField::new(config, bounds, appearance_rows, &mut rng)?;
        let dynamic_field = DynamicField::new(config, bounds, mask, &mut rng)?;
        Ok(Model { config: config.clone(), static_field, dynamic_field })
    }

    pub fn blocks(&self) -> [&[f64]; 12] {
        let (s, d) = (&self.static_field, &self.dynamic_field);
        [
            &s.grid.table,
            &s.trunk.params,
            &s.density.params,
            &s.semantic.params,
            &s.color.params,
            &s.appearance.embeddings,
            &d.grid.table,
            &d.trunk.params,
            &d.density.params,
            &d.semantic.params,
            &d.color.params,
            &d.shadow.params,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 12] {
        let (s, d) = (&mut self.static_field, &mut self.dynamic_field);
        [
            &mut s.grid.table,
            &mut s.trunk.params,
            &mut s.density.params,
            &mut s.semantic.params,
            &mut s.color.params,
            &mut s.appearance.embeddings,
            &mut d.grid.table,
            &mut d.trunk.params,
            &mut d.density.params,
            &mut d.semantic.params,
            &mut d.color.params,
            &mut d.shadow.params,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            static_grads: self.static_field.zero_grads(),
            dynamic_grads: self.dynamic_field.zero_grads(),
        }
    }
}

/// Gradients with the same block layout as [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub static_grads: StaticGrads,
    pub dynamic_grads: DynamicGrads,
}

impl ModelGrads {
    pub fn blocks(&self) -> [&[f64]; 12] {
        let (s, d) = (&self.static_grads, &self.dynamic_grads);
        [
            &s.grid,
            &s.trunk,
            &s.density,
            &s.semantic,
            &s.color,
            &s.appearance,
            &d.grid,
            &d.trunk,
            &d.density,
            &d.semantic,
            &d.color,
            &d.shadow,
        ]
    }

    /// Largest absolute gradient over the dynamic branch.
    pub fn max_abs_dynamic(&self) -> f64 {
        self.blocks()[STATIC_BLOCKS..]
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}
