use crate::error::{HgError, Result};
use crate::metrics::{Joints, NUM_JOINTS};
use crate::tensor::{Real, Shape4, Tensor4};

/// Input-to-heatmap downscale factor.
pub const STRIDE: f64 = 4.0;

/// Heatmap cell nearest to an input-pixel coordinate.
pub fn heatmap_cell(p: [f64; 2]) -> [f64; 2] {
    [(p[0] / STRIDE).round(), (p[1] / STRIDE).round()]
}

/// Renders one unnormalized Gaussian per visible joint on a
/// `out_resolution`² grid (shape `1×16×R×R`). Each peak is exactly 1 at the
/// joint's nearest cell; invisible joints give all-zero channels.
///
/// Visible joints whose cell lies more than 3σ outside the grid are a data
/// error, since nothing of them would be rendered.
pub fn make_gaussian_target<T: Real>(
    joints: &Joints,
    visible: &[bool; NUM_JOINTS],
    out_resolution: usize,
    sigma: f64,
) -> Result<Tensor4<T>> {
    if out_resolution == 0 {
        return Err(HgError::config("target resolution must be positive"));
    }
    if !(sigma > 0.0) {
        return Err(HgError::config(format!("sigma must be positive, got {sigma}")));
    }
    let r = out_resolution as f64;
    let reach = 3.0 * sigma;
    let mut t = Tensor4::zeros(Shape4::new(1, NUM_JOINTS, out_resolution, out_resolution));
    let inv = 1.0 / (2.0 * sigma * sigma);
    for j in 0..NUM_JOINTS {
        if !visible[j] {
            continue;
        }
        let [cx, cy] = heatmap_cell(joints[j]);
        if !(cx.is_finite() && cy.is_finite())
            || cx < -reach
            || cy < -reach
            || cx > r - 1.0 + reach
            || cy > r - 1.0 + reach
        {
            return Err(HgError::data(format!(
                "visible joint {j} at ({}, {}) lies outside the frame",
                joints[j][0], joints[j][1]
            )));
        }
        for y in 0..out_resolution {
            let dy = y as f64 - cy;
            for x in 0..out_resolution {
                let dx = x as f64 - cx;
                t.set(0, j, y, x, T::of((-(dx * dx + dy * dy) * inv).exp()));
            }
        }
    }
    Ok(t)
}
