//! Dense flow estimation.
//!
//! The pipeline treats the estimator as pluggable: anything that maps two
//! grayscale frames to a [`DisplacementField`] works, so externally
//! computed flow can be swapped in. The built-in baseline is a pyramidal
//! Horn-Schunck solver: brightness constancy plus a smoothness prior,
//! solved coarse-to-fine with Jacobi sweeps and incremental warping. It is
//! deterministic for fixed parameters.

use crate::error::{Error, Result};
use crate::flow::field::DisplacementField;
use crate::parallel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowMethod {
    HornSchunck,
}

#[derive(Clone, Copy, Debug)]
pub struct FlowEstimatorParams {
    pub method: FlowMethod,
    /// Smoothness weight; larger values favor smoother fields.
    pub alpha: f32,
    /// Jacobi iterations per warp step.
    pub iterations: usize,
    /// Pyramid levels (1 = full resolution only).
    pub levels: usize,
    /// Warp-and-relinearize steps per level.
    pub warps: usize,
}

impl Default for FlowEstimatorParams {
    fn default() -> Self {
        Self {
            method: FlowMethod::HornSchunck,
            alpha: 0.1,
            iterations: 120,
            levels: 3,
            warps: 2,
        }
    }
}

impl FlowEstimatorParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Argument("iterations must be >= 1".into()));
        }
        if self.levels == 0 {
            return Err(Error::Argument("pyramid levels must be >= 1".into()));
        }
        if self.warps == 0 {
            return Err(Error::Argument("warp steps must be >= 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Argument("alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Anything that produces dense flow from a grayscale frame pair.
pub trait FlowEstimator {
    fn estimate(&self, frame_a: &Tensor, frame_b: &Tensor) -> Result<DisplacementField>;
}

/// The built-in variational baseline.
pub struct HornSchunck {
    pub params: FlowEstimatorParams,
}

impl FlowEstimator for HornSchunck {
    fn estimate(&self, frame_a: &Tensor, frame_b: &Tensor) -> Result<DisplacementField> {
        estimate_flow(frame_a, frame_b, &self.params)
    }
}

/// Collapse a (c, h, w) frame to grayscale by channel mean; rank-2 frames
/// pass through unchanged. This is the luminance the estimator sees.
pub fn to_grayscale(frame: &Tensor) -> Result<Tensor> {
    match frame.rank() {
        2 => Ok(frame.clone()),
        3 => {
            let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
            let plane = h * w;
            let data = frame.data();
            let inv = 1.0 / c as f32;
            let gray = (0..plane)
                .map(|i| (0..c).map(|ch| data[ch * plane + i]).sum::<f32>() * inv)
                .collect();
            Ok(Tensor::from_vec_unchecked(vec![h, w], gray))
        }
        _ => Err(Error::Shape(format!(
            "expected (h, w) or (c, h, w) frame, got {:?}",
            frame.shape()
        ))),
    }
}

struct Plane {
    w: usize,
    h: usize,
    v: Vec<f32>,
}

impl Plane {
    fn zeros(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            v: vec![0.0; w * h],
        }
    }

    fn from_tensor(t: &Tensor) -> Self {
        Self {
            w: t.shape()[1],
            h: t.shape()[0],
            v: t.data().to_vec(),
        }
    }

    #[inline]
    fn get(&self, x: isize, y: isize) -> f32 {
        // border replication
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.v[y * self.w + x]
    }

    fn sample(&self, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.w - 1) as f32);
        let y = y.clamp(0.0, (self.h - 1) as f32);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let top = self.v[y0 * self.w + x0]
            + fx * (self.v[y0 * self.w + x1] - self.v[y0 * self.w + x0]);
        let bot = self.v[y1 * self.w + x0]
            + fx * (self.v[y1 * self.w + x1] - self.v[y1 * self.w + x0]);
        top + fy * (bot - top)
    }

    /// 2x2 box downsample, halving each dimension (floor, min 1).
    fn half(&self) -> Plane {
        let nw = (self.w / 2).max(1);
        let nh = (self.h / 2).max(1);
        let mut out = Plane::zeros(nw, nh);
        for y in 0..nh {
            for x in 0..nw {
                let (x2, y2) = (2 * x as isize, 2 * y as isize);
                out.v[y * nw + x] = 0.25
                    * (self.get(x2, y2)
                        + self.get(x2 + 1, y2)
                        + self.get(x2, y2 + 1)
                        + self.get(x2 + 1, y2 + 1));
            }
        }
        out
    }

    /// Bilinear resize with values multiplied by `value_scale`, used to
    /// carry one flow component up a pyramid level (u scales with the
    /// horizontal magnification, v with the vertical).
    fn upsample_flow(&self, nw: usize, nh: usize, value_scale: f32) -> Plane {
        let mut out = Plane::zeros(nw, nh);
        let fx = self.w as f32 / nw as f32;
        let fy = self.h as f32 / nh as f32;
        for y in 0..nh {
            for x in 0..nw {
                let sx = (x as f32 + 0.5) * fx - 0.5;
                let sy = (y as f32 + 0.5) * fy - 0.5;
                out.v[y * nw + x] = self.sample(sx, sy) * value_scale;
            }
        }
        out
    }
}

/// Weighted neighborhood average used by the Jacobi update
/// (4-neighbors 1/6, diagonals 1/12).
fn hs_average(p: &Plane, out: &mut Plane) {
    let w = p.w;
    parallel::for_each_chunk_mut(&mut out.v, w, |y, row| {
        let y = y as isize;
        for (x, slot) in row.iter_mut().enumerate() {
            let x = x as isize;
            let edges = p.get(x - 1, y) + p.get(x + 1, y) + p.get(x, y - 1) + p.get(x, y + 1);
            let diags = p.get(x - 1, y - 1)
                + p.get(x + 1, y - 1)
                + p.get(x - 1, y + 1)
                + p.get(x + 1, y + 1);
            *slot = edges / 6.0 + diags / 12.0;
        }
    });
}

fn warp(plane: &Plane, u: &Plane, v: &Plane) -> Plane {
    let w = plane.w;
    let mut out = Plane::zeros(plane.w, plane.h);
    parallel::for_each_chunk_mut(&mut out.v, w, |y, row| {
        for (x, slot) in row.iter_mut().enumerate() {
            let i = y * w + x;
            *slot = plane.sample(x as f32 + u.v[i], y as f32 + v.v[i]);
        }
    });
    out
}

/// One Horn-Schunck solve for the flow increment at a fixed linearization.
fn hs_sweeps(
    ix: &Plane,
    iy: &Plane,
    it: &Plane,
    alpha2: f32,
    iterations: usize,
    du: &mut Plane,
    dv: &mut Plane,
) {
    let w = du.w;
    let h = du.h;
    let mut ubar = Plane::zeros(w, h);
    let mut vbar = Plane::zeros(w, h);
    let step = |i: usize, ubar: &Plane, vbar: &Plane| {
        let denom = alpha2 + ix.v[i] * ix.v[i] + iy.v[i] * iy.v[i];
        (ix.v[i] * ubar.v[i] + iy.v[i] * vbar.v[i] + it.v[i]) / denom
    };
    for _ in 0..iterations {
        hs_average(du, &mut ubar);
        hs_average(dv, &mut vbar);
        // Jacobi update is per-pixel independent of du/dv, so rows can be
        // written in parallel without changing the result
        {
            let (ubar, vbar) = (&ubar, &vbar);
            parallel::for_each_chunk_mut(&mut du.v, w, |y, row| {
                for (x, slot) in row.iter_mut().enumerate() {
                    let i = y * w + x;
                    *slot = ubar.v[i] - ix.v[i] * step(i, ubar, vbar);
                }
            });
            parallel::for_each_chunk_mut(&mut dv.v, w, |y, row| {
                for (x, slot) in row.iter_mut().enumerate() {
                    let i = y * w + x;
                    *slot = vbar.v[i] - iy.v[i] * step(i, ubar, vbar);
                }
            });
        }
    }
}

fn gradients(a: &Plane, bw: &Plane) -> (Plane, Plane, Plane) {
    let w = a.w;
    let h = a.h;
    let mut ix = Plane::zeros(w, h);
    let mut iy = Plane::zeros(w, h);
    let mut it = Plane::zeros(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            // central differences of the temporal average
            let gx = 0.25
                * (a.get(x + 1, y) - a.get(x - 1, y) + bw.get(x + 1, y) - bw.get(x - 1, y));
            let gy = 0.25
                * (a.get(x, y + 1) - a.get(x, y - 1) + bw.get(x, y + 1) - bw.get(x, y - 1));
            ix.v[i] = gx;
            iy.v[i] = gy;
            it.v[i] = bw.v[i] - a.v[i];
        }
    }
    (ix, iy, it)
}

/// Estimate dense flow from `frame_a` to `frame_b` (grayscale, values in
/// [0, 1]). Identical frames yield an exactly zero field.
pub fn estimate_flow(
    frame_a: &Tensor,
    frame_b: &Tensor,
    params: &FlowEstimatorParams,
) -> Result<DisplacementField> {
    params.validate()?;
    if frame_a.shape() != frame_b.shape() {
        return Err(Error::Shape(format!(
            "frame shapes differ: {:?} vs {:?}",
            frame_a.shape(),
            frame_b.shape()
        )));
    }
    if frame_a.rank() != 2 {
        return Err(Error::Shape(format!(
            "estimator expects grayscale (h, w) frames, got {:?}",
            frame_a.shape()
        )));
    }
    let in_range = |t: &Tensor| t.data().iter().all(|&v| (-1e-3..=1.0 + 1e-3).contains(&v));
    if !in_range(frame_a) || !in_range(frame_b) {
        return Err(Error::Data("frame values must lie in [0, 1]".into()));
    }

    // build pyramids, capping depth so the coarsest level stays usable
    let mut pyr_a = vec![Plane::from_tensor(frame_a)];
    let mut pyr_b = vec![Plane::from_tensor(frame_b)];
    for _ in 1..params.levels {
        let last = pyr_a.last().unwrap();
        if last.w.min(last.h) < 8 {
            break;
        }
        pyr_a.push(pyr_a.last().unwrap().half());
        pyr_b.push(pyr_b.last().unwrap().half());
    }

    let coarsest = pyr_a.len() - 1;
    let mut u = Plane::zeros(pyr_a[coarsest].w, pyr_a[coarsest].h);
    let mut v = Plane::zeros(pyr_a[coarsest].w, pyr_a[coarsest].h);
    let alpha2 = params.alpha * params.alpha;

    for level in (0..pyr_a.len()).rev() {
        let a = &pyr_a[level];
        let b = &pyr_b[level];
        if level != coarsest {
            let sx = a.w as f32 / u.w as f32;
            let sy = a.h as f32 / u.h as f32;
            u = u.upsample_flow(a.w, a.h, sx);
            v = v.upsample_flow(a.w, a.h, sy);
        }
        for _ in 0..params.warps {
            let bw = warp(b, &u, &v);
            let (ix, iy, it) = gradients(a, &bw);
            let mut du = Plane::zeros(a.w, a.h);
            let mut dv = Plane::zeros(a.w, a.h);
            hs_sweeps(&ix, &iy, &it, alpha2, params.iterations, &mut du, &mut dv);
            for i in 0..u.v.len() {
                u.v[i] += du.v[i];
                v.v[i] += dv.v[i];
            }
        }
    }

    DisplacementField::from_planes(u.w, u.h, u.v, v.v)
}
