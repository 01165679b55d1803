//! File formats, configuration, synthetic inputs and the end-to-end run.

mod config;
mod gaussian_file;
mod pipeline;
mod ply;
mod scene_file;
mod synth;

pub use config::{load_config, parse_config, render_config, CONFIG_KEYS};
pub use gaussian_file::{GaussianRecord, GaussianSetFile, GAUSSIAN_MAGIC};
pub use pipeline::{
    check_gradients, run_pipeline, write_trajectory, PipelineOutput, PipelineReport, CONFIG_FILE, GAUSSIANS_FILE,
    GRADCHECK_MIN_NOISE, GRADCHECK_SCENE, METRICS_JSON, METRICS_TEXT, PREDICTION_FILE, TRAJECTORY_FILE,
    TRAJECTORY_HEADER,
};
pub use ply::{export_ply_gaussians, export_ply_labels, palette, PLY_LEGEND};
pub use scene_file::{Payload, PayloadKind, SceneFile, SCENE_MAGIC};
pub use synth::{gen_features, gen_scene, parse_primitives, Primitive, SceneSpec, MINI_STREET, MINI_STREET_CLASSES};

use crate::error::{Error, Result};

/// Little-endian cursor over a byte buffer; running out is a format error.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, at: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Format(format!(
                "{}: truncated at byte {} (need {n} more)",
                self.what, self.at
            )));
        }
        let out = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.at
    }
}
