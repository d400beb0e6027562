//! Self-describing model checkpoints.
//!
//! One JSON document holds everything the backbone is: shapes, frozen
//! weights, adapter factors, gate values and states, scaling, rank, plus
//! the selection mask once one exists. Loading is bit-exact, so a
//! checkpoint round trip reproduces the model to the last ulp.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lora::Backbone;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub backbone: Backbone,
    pub selection: Option<Vec<usize>>,
    pub provenance: String,
}

impl Checkpoint {
    pub fn new(backbone: Backbone, selection: Option<Vec<usize>>, provenance: impl Into<String>) -> Self {
        Checkpoint { backbone, selection, provenance: provenance.into() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{Architecture, GateFreeze};
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = Architecture { input_dim: 5, hidden_width: 9, output_dim: 5, layers: 3 };
        let mut theta = stream_rng(61, Stream::PretrainInit);
        let mut adapt = stream_rng(61, Stream::AdapterInit);
        let mut backbone = Backbone::random(&arch, 2, 2.0, &mut theta, &mut adapt).unwrap();
        backbone.apply_selection(&[0, 2], GateFreeze::Binarize).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let ckpt = Checkpoint::new(backbone, Some(vec![0, 2]), "test");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();

        assert_eq!(back.selection, Some(vec![0, 2]));
        assert!(ckpt.backbone.theta_bit_eq(&back.backbone));
        for (a, b) in ckpt.backbone.layers().iter().zip(back.backbone.layers()) {
            assert!(a.lora_a().bit_eq(b.lora_a()));
            assert!(a.lora_b().bit_eq(b.lora_b()));
            assert_eq!(a.gate_raw().to_bits(), b.gate_raw().to_bits());
            assert_eq!(a.gate_state(), b.gate_state());
            assert_eq!(a.rank(), b.rank());
            assert_eq!(a.gamma(), b.gamma());
        }

        // saving the loaded checkpoint reproduces the file byte for byte
        let path2 = dir.path().join("model2.json");
        back.save(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }
}
