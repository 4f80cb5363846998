//! Versioned JSON model files.
//!
//! Weights are stored as plain JSON numbers; serialization uses the shortest
//! decimal text that round-trips the exact f64 value, so save -> load -> save
//! is byte-identical.

use crate::error::{CapmError, Result};
use crate::net::{
    validate_network, ConvLayer, FcLayer, MaxpoolLayer, NetworkSpec, NormalizationConfig, RawLayer,
};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub side: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerRecord {
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        /// Flat row-major [out][in][row][col].
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
    Maxpool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Fc {
        rows: usize,
        cols: usize,
        /// Flat row-major rows x cols.
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
}

/// On-disk model: format version, input shape, normalization, ordered layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub input: InputShape,
    pub normalization: NormalizationConfig,
    pub layers: Vec<LayerRecord>,
}

impl ModelFile {
    pub fn from_network(net: &NetworkSpec, normalization: &NormalizationConfig) -> Self {
        let layers = net
            .to_raw_layers()
            .into_iter()
            .map(|l| match l {
                RawLayer::Conv(c) => LayerRecord::Conv {
                    out_channels: c.out_channels,
                    in_channels: c.in_channels,
                    kernel: c.kernel,
                    stride: c.stride,
                    padding: c.padding,
                    weights: c.weights,
                    bias: c.bias,
                },
                RawLayer::Relu => LayerRecord::Relu,
                RawLayer::Maxpool(m) => LayerRecord::Maxpool {
                    kernel: m.kernel,
                    stride: m.stride,
                },
                RawLayer::Flatten => LayerRecord::Flatten,
                RawLayer::Fc(f) => LayerRecord::Fc {
                    rows: f.out_dim,
                    cols: f.in_dim,
                    weights: f.weights,
                    bias: f.bias,
                },
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            input: InputShape {
                channels: net.input_channels,
                side: net.input_side,
            },
            normalization: normalization.clone(),
            layers,
        }
    }

    /// Validate the records into a network spec.
    pub fn into_network(self) -> Result<(NetworkSpec, NormalizationConfig)> {
        if self.format_version != FORMAT_VERSION {
            return Err(CapmError::ParseError(format!(
                "unsupported format_version {}, expected {FORMAT_VERSION}",
                self.format_version
            )));
        }
        let mut raw = Vec::with_capacity(self.layers.len());
        for (index, rec) in self.layers.into_iter().enumerate() {
            raw.push(match rec {
                LayerRecord::Conv {
                    out_channels,
                    in_channels,
                    kernel,
                    stride,
                    padding,
                    weights,
                    bias,
                } => {
                    let expect = out_channels * in_channels * kernel * kernel;
                    if weights.len() != expect {
                        return Err(CapmError::ParseError(format!(
                            "layer {index} (conv): weights array has {} values, expected {expect}",
                            weights.len()
                        )));
                    }
                    if bias.len() != out_channels {
                        return Err(CapmError::ParseError(format!(
                            "layer {index} (conv): bias array has {} values, expected {out_channels}",
                            bias.len()
                        )));
                    }
                    RawLayer::Conv(ConvLayer {
                        out_channels,
                        in_channels,
                        kernel,
                        stride,
                        padding,
                        weights,
                        bias,
                    })
                }
                LayerRecord::Relu => RawLayer::Relu,
                LayerRecord::Maxpool { kernel, stride } => {
                    RawLayer::Maxpool(MaxpoolLayer { kernel, stride })
                }
                LayerRecord::Flatten => RawLayer::Flatten,
                LayerRecord::Fc {
                    rows,
                    cols,
                    weights,
                    bias,
                } => {
                    if weights.len() != rows * cols {
                        return Err(CapmError::ParseError(format!(
                            "layer {index} (fc): weights array has {} values, expected {}",
                            weights.len(),
                            rows * cols
                        )));
                    }
                    if bias.len() != rows {
                        return Err(CapmError::ParseError(format!(
                            "layer {index} (fc): bias array has {} values, expected {rows}",
                            bias.len()
                        )));
                    }
                    RawLayer::Fc(FcLayer {
                        out_dim: rows,
                        in_dim: cols,
                        weights,
                        bias,
                    })
                }
            });
        }
        let net = validate_network(self.input.channels, self.input.side, raw)?;
        self.normalization.validate(net.input_channels)?;
        Ok((net, self.normalization))
    }
}

/// Load and validate a model file.
pub fn load_model(path: &Path) -> Result<(NetworkSpec, NormalizationConfig)> {
    let text = fs::read_to_string(path)?;
    let file: ModelFile =
        serde_json::from_str(&text).map_err(|e| CapmError::ParseError(e.to_string()))?;
    file.into_network()
}

/// Save a model file; the output is deterministic.
pub fn save_model(
    path: &Path,
    net: &NetworkSpec,
    normalization: &NormalizationConfig,
) -> Result<()> {
    let file = ModelFile::from_network(net, normalization);
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{random_network, RandomNetConfig};
    use std::fs;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let net = random_network(
            &RandomNetConfig {
                stages: 2,
                fc_layers: 2,
                ..RandomNetConfig::default()
            },
            42,
        );
        let norm = NormalizationConfig {
            mean: vec![0.5],
            std: vec![0.5],
        };
        let p1 = dir.path().join("m1.json");
        let p2 = dir.path().join("m2.json");
        save_model(&p1, &net, &norm).unwrap();
        let (loaded, norm2) = load_model(&p1).unwrap();
        assert_eq!(loaded, net);
        save_model(&p2, &loaded, &norm2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_weights_name_the_layer() {
        let net = random_network(&RandomNetConfig::default(), 1);
        let norm = NormalizationConfig::identity(1);
        let mut file = ModelFile::from_network(&net, &norm);
        if let LayerRecord::Conv { weights, .. } = &mut file.layers[0] {
            weights.pop();
        }
        let err = file.into_network().unwrap_err();
        match err {
            CapmError::ParseError(msg) => assert!(msg.contains("layer 0")),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn maxpool_before_relu_is_rejected_on_load() {
        let net = random_network(&RandomNetConfig::default(), 1);
        let norm = NormalizationConfig::identity(1);
        let mut file = ModelFile::from_network(&net, &norm);
        // drop the relu preceding the first maxpool
        let relu_pos = file
            .layers
            .iter()
            .position(|l| matches!(l, LayerRecord::Relu))
            .unwrap();
        file.layers.remove(relu_pos);
        let err = file.into_network().unwrap_err();
        assert!(matches!(err, CapmError::MaxpoolWithoutRelu { .. }));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let net = random_network(&RandomNetConfig::default(), 1);
        let norm = NormalizationConfig::identity(1);
        let mut file = ModelFile::from_network(&net, &norm);
        file.format_version = 99;
        assert!(matches!(
            file.into_network(),
            Err(CapmError::ParseError(_))
        ));
    }
}
