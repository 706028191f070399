//! Iterative sampling: noise in, frames and occupancy out.
//!
//! Per iteration the perception model reads the current noisy first frame,
//! its occupancy prediction conditions the denoiser over all frames, and the
//! reverse update advances every frame one step. The injected noise is zero
//! at the final step. Fewer steps than the schedule length run on the
//! derived sub-schedule.

use std::time::Instant;

use super::train::{to_unit, Nets};
use crate::error::Result;
use crate::perception::{logits_to_grid, PerceptionNet};
use crate::rng::RngStream;
use crate::schedule::{ddpm_step, NoiseSchedule};
use crate::synthworld::{CameraParams, OccupancyGrid, SceneSpec};
use crate::tensor::{Real, Tensor};

/// Where the conditioning occupancy comes from during sampling.
pub enum CondSource<'a, T> {
    /// The live perception net (the joint pipeline).
    Live,
    /// A detached perception net (independent/offline mode).
    Net(&'a PerceptionNet<T>),
    /// No occupancy conditioning at all.
    None,
}

pub struct SampleOutput<T> {
    /// Generated frames in [0,1], one per camera.
    pub frames: Vec<Tensor<T>>,
    /// Raw signed-range frames as produced by the reverse process.
    pub raw_frames: Vec<Tensor<T>>,
    pub grid: OccupancyGrid,
    /// Wall-clock seconds per reverse step.
    pub step_times: Vec<f64>,
}

/// Run the reverse process from pure noise.
#[allow(clippy::too_many_arguments)]
pub fn sample<T: Real>(
    nets: &Nets<T>,
    spec: &SceneSpec,
    cams: &[CameraParams],
    steps: usize,
    sched: &NoiseSchedule,
    seed: u64,
    voxel_size: f64,
    cond: CondSource<'_, T>,
) -> Result<SampleOutput<T>> {
    let (sub, idx_map) = sched.subsample(steps)?;
    let [h_img, w_img] = nets.denoiser.cfg.image_hw;
    let root = RngStream::new(seed);
    let tokens = spec.encode_tokens();

    let mut frames: Vec<Tensor<T>> = (0..cams.len())
        .map(|f| {
            let mut s = root.derive_n("init", f as u64);
            Tensor::randn(&[3, h_img, w_img], 1.0, &mut s)
        })
        .collect();

    let mut last_logits: Option<Tensor<T>> = None;
    let mut step_times = Vec::with_capacity(steps);
    for k in (0..steps).rev() {
        let t0 = Instant::now();
        let occ_logits = match &cond {
            CondSource::Live => Some(nets.perception.predict(&frames[0])?),
            CondSource::Net(net) => Some(net.predict(&frames[0])?),
            CondSource::None => None,
        };
        if let CondSource::Live = cond {
            last_logits = occ_logits.clone();
        }
        let eps_hats = nets.denoiser.predict(
            &frames,
            idx_map[k],
            &tokens,
            occ_logits.as_ref(),
            cams,
        )?;
        for (f, eps_hat) in eps_hats.iter().enumerate() {
            let z = if k > 0 {
                let mut s = root.derive_n("z", (k * 1024 + f) as u64);
                Tensor::randn(&[3, h_img, w_img], 1.0, &mut s)
            } else {
                Tensor::zeros(&[3, h_img, w_img])
            };
            frames[f] = ddpm_step(&frames[f], eps_hat, k, &z, &sub)?;
        }
        step_times.push(t0.elapsed().as_secs_f64());
    }

    // the returned grid: the last in-loop prediction when the live net
    // conditions the loop, otherwise the trained net on the final frame
    let grid = match (last_logits, &cond) {
        (Some(l), CondSource::Live) => logits_to_grid(&l, voxel_size)?,
        _ => nets.perception.predict_grid(&frames[0], voxel_size)?,
    };

    Ok(SampleOutput {
        frames: frames.iter().map(to_unit).collect(),
        raw_frames: frames,
        grid,
        step_times,
    })
}
