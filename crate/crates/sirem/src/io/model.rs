//! Model bundle: one f32 array per decoder tensor plus `arm_logits`, with the
//! decoder dims, training config and selection result in the metadata.

use std::path::Path;

use ndarray::{Array1, ArrayView, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use sirem_core::audio::{DecoderDims, DecoderParams};
use sirem_core::policy::ArmLogits;
use sirem_core::train::{SiremModel, TrainConfig};
use sirem_core::trajectory::ARMS_PER_FRAME;

use super::{ArrayDir, IoError};

pub const MODEL_KIND: &str = "sirem-model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: String,
    pub dims: DecoderDims,
    pub freeze_arms: bool,
    pub zero_features: bool,
    pub num_params: usize,
    pub best_val_psnr: f64,
    pub best_epoch: usize,
    pub config: TrainConfig,
}

pub fn save_model(
    dir: &Path,
    model: &SiremModel,
    config: &TrainConfig,
    best_val_psnr: f64,
    best_epoch: usize,
) -> Result<(), IoError> {
    let mut out = ArrayDir::create(dir)?;
    for t in model.params.tensors() {
        let view =
            ArrayView::from_shape(IxDyn(&t.shape), t.data).expect("tensor shape matches data");
        out.write(&t.name, &view)?;
    }
    out.write("arm_logits", &Array1::from_vec(model.logits.0.to_vec()))?;
    let meta = ModelMeta {
        kind: MODEL_KIND.into(),
        dims: model.params.dims().clone(),
        freeze_arms: model.freeze_arms,
        zero_features: model.zero_features,
        num_params: model.params.num_params(),
        best_val_psnr,
        best_epoch,
        config: config.clone(),
    };
    let Value::Object(map) = serde_json::to_value(&meta).expect("metadata serializes") else {
        unreachable!("struct serializes to an object")
    };
    *out.metadata_mut() = map;
    out.save()
}

pub fn load_model(dir: &Path) -> Result<(SiremModel, ModelMeta), IoError> {
    let d = ArrayDir::open(dir)?;
    let meta: ModelMeta = serde_json::from_value(Value::Object(d.metadata().clone()))
        .map_err(|e| IoError::Schema(format!("model metadata: {e}")))?;
    if meta.kind != MODEL_KIND {
        return Err(IoError::Schema(format!(
            "{} is not a model bundle",
            dir.display()
        )));
    }
    let mut params = DecoderParams::<f32>::zeros(meta.dims.clone())?;
    let shapes: Vec<(String, Vec<usize>)> = params
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.shape.clone()))
        .collect();
    for (t, (name, shape)) in params.tensors_mut().into_iter().zip(shapes) {
        let a = d.read::<f32>(&name)?;
        if a.shape() != shape.as_slice() {
            return Err(IoError::Schema(format!(
                "model tensor '{name}' has shape {:?}, expected {shape:?}",
                a.shape()
            )));
        }
        t.data
            .copy_from_slice(a.as_slice().expect("standard layout"));
    }
    let logits = d.read::<f64>("arm_logits")?;
    if logits.len() != ARMS_PER_FRAME {
        return Err(IoError::Schema(format!(
            "arm_logits has {} entries, expected {ARMS_PER_FRAME}",
            logits.len()
        )));
    }
    let logits = ArmLogits(std::array::from_fn(|i| logits[i]));
    logits.validate()?;
    let model = SiremModel {
        params,
        logits,
        freeze_arms: meta.freeze_arms,
        zero_features: meta.zero_features,
    };
    Ok((model, meta))
}
