//! Audio-driven branch: speech features, temporal pooling and the image decoder.

mod decoder;
mod mel;
mod scalar;

pub use decoder::{
    Decoder, DecoderDims, DecoderParams, ForwardCache, Mode, ParamKind, Tensor, TensorMut,
    DROPOUT_RATE,
};
pub use mel::{encode_mel, mel_band_centers, FFT_SIZE, FRAME_HOP, FRAME_LEN, MEL_BANDS};
pub use scalar::Scalar;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    FileBacked,
    Mel,
}

/// Speech features `[L, d]` for one frame window.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Array2<f32>,
    source: FeatureSource,
}

impl FeatureSequence {
    pub fn new(data: Array2<f32>, source: FeatureSource) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::EmptyInput(
                "feature sequence needs L >= 1 and d >= 1".into(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature sequence".into()));
        }
        Ok(Self { data, source })
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    pub fn steps(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Time-averaged feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature(pub Vec<f64>);

impl PooledFeature {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Mean over the time axis. Each column is summed in sorted order, so the
/// result does not depend on the order of the time steps.
pub fn pool(seq: &FeatureSequence) -> PooledFeature {
    let l = seq.steps() as f64;
    let mut col = Vec::with_capacity(seq.steps());
    PooledFeature(
        seq.data
            .columns()
            .into_iter()
            .map(|c| {
                col.clear();
                col.extend(c.iter().map(|&v| v as f64));
                col.sort_by(f64::total_cmp);
                col.iter().sum::<f64>() / l
            })
            .collect(),
    )
}
