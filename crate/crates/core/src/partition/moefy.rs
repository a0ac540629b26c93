use std::collections::BTreeMap;

use ndarray::Axis;

use super::Partition;
use crate::error::{Error, Result};
use crate::model::{LayerKind, Model};

/// A dense model regrouped into expert blocks, with the neuron order used on
/// each layer. `permutations[l][p]` is the original index of the neuron now
/// at position `p`.
#[derive(Debug, Clone)]
pub struct Moefied {
    pub model: Model,
    pub permutations: BTreeMap<usize, Vec<usize>>,
}

/// Reorders the neurons of each partitioned dense layer so that expert `e`
/// occupies the block `[e·n_E, (e+1)·n_E)`, and marks those layers as
/// block-structured. No parameter value changes; with every block selected
/// at unit weight the model computes the same function.
pub fn moefy_model(model: &Model, partition: &Partition) -> Result<Moefied> {
    let mut out = model.clone();
    let mut permutations = BTreeMap::new();
    let size = partition.expert_size();
    for layer in partition.layer_ids() {
        if layer >= model.config.num_layers {
            return Err(Error::Input(format!("partition layer {layer} outside the model")));
        }
        if model.config.layer_kind(layer) != LayerKind::Dense {
            return Err(Error::Config(format!("layer {layer} already has expert structure")));
        }
        if partition.d_ff() != model.config.d_ff {
            return Err(Error::Input(format!(
                "partition covers {} neurons, model has {}",
                partition.d_ff(),
                model.config.d_ff
            )));
        }
        let assign = partition.assignment(layer)?;
        let mut perm: Vec<usize> = (0..assign.len()).collect();
        perm.sort_by_key(|&n| (assign[n], n));
        debug_assert!(perm.iter().enumerate().all(|(p, &n)| assign[n] == p / size));
        permute_layer(&mut out, layer, &perm);
        out.config.expert_blocks.insert(layer, partition.num_experts());
        permutations.insert(layer, perm);
    }
    out.config.validate()?;
    Ok(Moefied {
        model: out,
        permutations,
    })
}

/// Restores the original neuron order and dense layout.
pub fn unmoefy_model(moefied: &Moefied) -> Result<Model> {
    let mut out = moefied.model.clone();
    for (&layer, perm) in &moefied.permutations {
        let mut inverse = vec![0; perm.len()];
        for (p, &n) in perm.iter().enumerate() {
            inverse[n] = p;
        }
        permute_layer(&mut out, layer, &inverse);
        out.config.expert_blocks.remove(&layer);
    }
    Ok(out)
}

fn permute_layer(model: &mut Model, layer: usize, perm: &[usize]) {
    let lw = &mut model.layers[layer];
    lw.w_in = lw.w_in.select(Axis(0), perm);
    lw.w_out = lw.w_out.select(Axis(1), perm);
    if let Some(b) = &lw.b_in {
        lw.b_in = Some(b.select(Axis(0), perm));
    }
}
