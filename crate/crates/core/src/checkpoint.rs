//! Model checkpointing: a self-describing JSON container holding the format
//! version, variant flags, and every layer's shape and parameter buffer.
//! Serialization uses shortest-round-trip float formatting, so reloading is
//! bit-exact for finite f64 values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LinearLayer, Network, VariantFlags};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    in_dim: usize,
    out_dim: usize,
    lr_multiplier: f64,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    use_mmd: bool,
    use_entropy: bool,
    use_residual: bool,
    feature_layer_count: usize,
    layers: Vec<LayerRecord>,
}

fn record(layer: &LinearLayer) -> LayerRecord {
    LayerRecord {
        name: layer.name.clone(),
        in_dim: layer.in_dim(),
        out_dim: layer.out_dim(),
        lr_multiplier: layer.lr_multiplier,
        weight: layer.weight.data().to_vec(),
        bias: layer.bias.data().to_vec(),
    }
}

fn restore(rec: &LayerRecord) -> Result<LinearLayer> {
    let weight = Tensor::new(vec![rec.in_dim, rec.out_dim], rec.weight.clone())?;
    let bias = Tensor::new(vec![rec.out_dim], rec.bias.clone())?;
    Ok(LinearLayer {
        name: rec.name.clone(),
        weight_grad: Tensor::zeros(vec![rec.in_dim, rec.out_dim]),
        bias_grad: Tensor::zeros(vec![rec.out_dim]),
        lr_multiplier: rec.lr_multiplier,
        weight,
        bias,
    })
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    let mut layers: Vec<LayerRecord> = net.feature_layers.iter().map(record).collect();
    layers.push(record(&net.fcb));
    layers.push(record(&net.fcc));
    layers.push(record(&net.res1));
    layers.push(record(&net.res2));
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        use_mmd: net.variant.use_mmd,
        use_entropy: net.variant.use_entropy,
        use_residual: net.variant.use_residual,
        feature_layer_count: net.feature_layers.len(),
        layers,
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Network> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::Configuration(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.format_version
        )));
    }
    let expected = file.feature_layer_count + 4;
    if file.layers.len() != expected {
        return Err(Error::Configuration(format!(
            "checkpoint holds {} layers, expected {expected}",
            file.layers.len()
        )));
    }
    let mut restored: Vec<LinearLayer> = file
        .layers
        .iter()
        .map(restore)
        .collect::<Result<Vec<_>>>()?;
    let res2 = restored.pop().unwrap();
    let res1 = restored.pop().unwrap();
    let fcc = restored.pop().unwrap();
    let fcb = restored.pop().unwrap();
    let variant = VariantFlags {
        use_mmd: file.use_mmd,
        use_entropy: file.use_entropy,
        use_residual: file.use_residual,
    };
    Network::assemble(restored, fcb, fcc, res1, res2, variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::NetworkShape;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = Rng::new(42);
        let shape = NetworkShape {
            input_dim: 5,
            feature_widths: vec![7, 6],
            bottleneck: 4,
            classes: 3,
        };
        let variant = VariantFlags {
            use_mmd: true,
            use_entropy: false,
            use_residual: true,
        };
        let net = Network::new(&shape, variant, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save(&net, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.variant, net.variant);
        for (a, b) in net.layers().iter().zip(loaded.layers().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.lr_multiplier, b.lr_multiplier);
            assert_eq!(a.weight.data(), b.weight.data());
            assert_eq!(a.bias.data(), b.bias.data());
        }
        // Forward agreement on a shared input.
        let x = Tensor::from_parts(
            vec![2, 5],
            (0..10).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        );
        let a = net.forward(&x).unwrap();
        let b = loaded.forward(&x).unwrap();
        assert_eq!(a.f_s.data(), b.f_s.data());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"format_version":99,"use_mmd":true,"use_entropy":true,"use_residual":true,"feature_layer_count":0,"layers":[]}"#,
        )
        .unwrap();
        assert!(matches!(load(&path), Err(Error::Configuration(_))));
    }
}
