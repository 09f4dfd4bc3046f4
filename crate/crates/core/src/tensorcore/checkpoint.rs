//! JSON checkpoint documents.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Layer, LayerSpec, Network, ParamTensor};
use super::optim::SgdConfig;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// One network: its layer specs, flat parameter arrays and freeze flags, in
/// `Network::params` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub layers: Vec<LayerSpec>,
    pub params: Vec<Vec<f64>>,
    pub frozen: Vec<bool>,
}

impl From<&Network> for NetworkState {
    fn from(net: &Network) -> Self {
        let params = net.params();
        NetworkState {
            layers: net.specs(),
            params: params.iter().map(|p| p.values.clone()).collect(),
            frozen: params.iter().map(|p| p.frozen).collect(),
        }
    }
}

impl TryFrom<&NetworkState> for Network {
    type Error = Error;

    fn try_from(state: &NetworkState) -> Result<Network> {
        let mut values = state.params.iter();
        let mut frozen = state.frozen.iter();
        let mut take = |shape: (usize, usize), decay: bool| -> Result<ParamTensor> {
            let v = values
                .next()
                .ok_or_else(|| Error::Input("checkpoint is missing parameter arrays".into()))?;
            if v.len() != shape.0 * shape.1 {
                return Err(Error::Dimension(format!(
                    "checkpoint array of {} values for shape {shape:?}",
                    v.len()
                )));
            }
            let mut p = ParamTensor::new(v.clone(), shape, decay);
            p.frozen = frozen.next().copied().unwrap_or(false);
            Ok(p)
        };
        let mut layers = Vec::with_capacity(state.layers.len());
        for spec in &state.layers {
            layers.push(match *spec {
                LayerSpec::Affine { inputs, outputs } => Layer::Affine {
                    weight: take((inputs, outputs), true)?,
                    bias: take((1, outputs), false)?,
                },
                LayerSpec::LayerNorm { width } => Layer::LayerNorm {
                    gain: take((1, width), false)?,
                    bias: take((1, width), false)?,
                },
                LayerSpec::Relu => Layer::Relu,
            });
        }
        if values.next().is_some() {
            return Err(Error::Input("checkpoint has surplus parameter arrays".into()));
        }
        Network::from_layers(layers)
    }
}

/// Encoder metadata stored next to its network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSection {
    pub scales: Vec<f64>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub networks: BTreeMap<String, NetworkState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<SgdConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderSection>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            networks: BTreeMap::new(),
            optimizer: None,
            encoder: None,
        }
    }
}

impl Checkpoint {
    pub fn insert(&mut self, name: &str, net: &Network) {
        self.networks.insert(name.to_string(), NetworkState::from(net));
    }

    pub fn network(&self, name: &str) -> Result<Network> {
        let state = self
            .networks
            .get(name)
            .ok_or_else(|| Error::Input(format!("checkpoint has no network `{name}`")))?;
        Network::try_from(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Input(format!(
                "unsupported checkpoint format version {}",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }
}
