//! Per-image processing path shared by the service and direct callers:
//! decode -> letterbox -> executor -> NMS -> unmap to original pixels.

use std::fs;
use std::time::Instant;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{Executor, ExecutorError, InputImage};
use crate::eval::BoxRecord;
use crate::geometry::{nms, Detection, NmsParams};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// Base64 of a binary PPM.
    PpmB64,
    /// Path to a PPM file readable by the service.
    FileRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMessage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub encoding: Encoding,
    pub payload: String,
    pub ts_ms: u64,
}

impl ImageMessage {
    pub fn from_raster(image_id: impl Into<String>, raster: &Raster, ts_ms: u64) -> Self {
        Self {
            image_id: image_id.into(),
            width: raster.width(),
            height: raster.height(),
            encoding: Encoding::PpmB64,
            payload: base64::engine::general_purpose::STANDARD.encode(raster.encode_ppm()),
            ts_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMessage {
    pub image_id: String,
    /// Original-image pixels.
    pub boxes: Vec<BoxRecord>,
    pub latency_ms: f64,
    pub model: String,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot decode image {image_id:?}: {reason}")]
    Decode { image_id: String, reason: String },
    #[error("executor failed on {image_id:?}: {source}")]
    Executor {
        image_id: String,
        source: ExecutorError,
    },
}

impl PipelineError {
    pub fn image_id(&self) -> &str {
        match self {
            PipelineError::Decode { image_id, .. } | PipelineError::Executor { image_id, .. } => image_id,
        }
    }
}

/// Postprocessing thresholds applied after the executor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostConfig {
    pub score_thr: f64,
    pub iou_thr: f64,
    pub max_dets: usize,
}

impl Default for PostConfig {
    fn default() -> Self {
        let d = NmsParams::<f64>::default();
        Self {
            score_thr: d.score_thr,
            iou_thr: d.iou_thr,
            max_dets: d.max_dets,
        }
    }
}

impl PostConfig {
    pub fn nms_params(&self) -> NmsParams<f64> {
        NmsParams {
            iou_thr: self.iou_thr,
            score_thr: self.score_thr,
            max_dets: self.max_dets.max(1),
        }
    }
}

pub fn decode_stage(msg: &ImageMessage, input_size: u32) -> Result<InputImage, PipelineError> {
    let fail = |reason: String| PipelineError::Decode {
        image_id: msg.image_id.clone(),
        reason,
    };
    let bytes = match msg.encoding {
        Encoding::PpmB64 => base64::engine::general_purpose::STANDARD
            .decode(msg.payload.as_bytes())
            .map_err(|e| fail(format!("base64: {e}")))?,
        Encoding::FileRef => fs::read(&msg.payload).map_err(|e| fail(format!("{}: {e}", msg.payload)))?,
    };
    let raster = Raster::decode_ppm(&bytes).map_err(|e| fail(e.to_string()))?;
    if (raster.width(), raster.height()) != (msg.width, msg.height) {
        return Err(fail(format!(
            "payload is {}x{}, message declares {}x{}",
            raster.width(),
            raster.height(),
            msg.width,
            msg.height
        )));
    }
    Ok(InputImage::prepare(msg.image_id.clone(), &raster, input_size))
}

/// NMS in input space, then unmap and clip to the original image.
pub fn postprocess_stage(input: &InputImage, raw: &[Detection<f64>], post: &PostConfig) -> Vec<BoxRecord> {
    let (w, h) = (input.orig_w as f64, input.orig_h as f64);
    nms(raw, &post.nms_params())
        .iter()
        .filter_map(|d| {
            let b = input.transform.unmap_box(&d.bbox).ok()?.clip(w, h)?;
            Some(BoxRecord {
                x: b.x(),
                y: b.y(),
                w: b.w(),
                h: b.h(),
                score: d.score(),
            })
        })
        .collect()
}

/// Runs one message through the full path with a batch of one.
pub fn pipeline_process(
    msg: &ImageMessage,
    executor: &mut dyn Executor,
    post: &PostConfig,
) -> Result<DetectionMessage, PipelineError> {
    let start = Instant::now();
    let input = decode_stage(msg, executor.profile().input_size)?;
    let raw = executor
        .infer(std::slice::from_ref(&input))
        .map_err(|source| PipelineError::Executor {
            image_id: msg.image_id.clone(),
            source,
        })?;
    let raw = raw.into_iter().next().ok_or_else(|| PipelineError::Executor {
        image_id: msg.image_id.clone(),
        source: ExecutorError::Protocol("executor returned no output for the image".into()),
    })?;
    let boxes = postprocess_stage(&input, &raw, post);
    Ok(DetectionMessage {
        image_id: msg.image_id.clone(),
        boxes,
        latency_ms: start.elapsed().as_secs_f64() * 1000.0,
        model: executor.profile().name.clone(),
    })
}
