use crate::clustering::Partition;
use crate::emoe::{EmoeLayer, GateMode};
use crate::error::{Error, Result};
use crate::numerics::Scalar;

use super::model::{BlockLayer, ToyModel};

/// Splits every dense block by its partition. Weights are copied, never
/// recomputed, so merging back is exact.
pub fn convert_lora2emoe<T: Scalar>(
    model: &ToyModel<T>,
    partitions: &[Partition],
    top_k: usize,
    gate_mode: GateMode,
) -> Result<ToyModel<T>> {
    if partitions.len() != model.blocks.len() {
        return Err(Error::constraint(format!(
            "{} partitions for {} blocks",
            partitions.len(),
            model.blocks.len()
        )));
    }
    let mut out = model.clone();
    for (l, (block, partition)) in out.blocks.iter_mut().zip(partitions).enumerate() {
        let layer = match &block.layer {
            BlockLayer::Dense(f) => EmoeLayer::split(f, partition, top_k, gate_mode)?,
            BlockLayer::Emoe(_) => return Err(Error::State(format!("block {l} is already split"))),
        };
        block.layer = BlockLayer::Emoe(layer);
    }
    Ok(out)
}

/// Merges every split block back into a dense layer at the original indices.
pub fn convert_emoe2lora<T: Scalar>(model: &ToyModel<T>) -> Result<ToyModel<T>> {
    let mut out = model.clone();
    for (l, block) in out.blocks.iter_mut().enumerate() {
        let layer = match &block.layer {
            BlockLayer::Emoe(e) => e.merge()?,
            BlockLayer::Dense(_) => {
                return Err(Error::State(format!("block {l} is already dense")))
            }
        };
        block.layer = BlockLayer::Dense(layer);
    }
    Ok(out)
}
