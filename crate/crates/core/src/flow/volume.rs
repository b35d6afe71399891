//! Multi-frame flow input volumes.
//!
//! A volume holds 2L channels over a w x h grid: channel pair k (1-based)
//! carries the horizontal component in channel 2k-1 and the vertical
//! component in channel 2k. In 0-based storage that is channel 2s for
//! horizontal and 2s+1 for vertical, step s = k-1.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::flow::field::DisplacementField;
use crate::tensor::{read_u32, Tensor};

/// How a volume was assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StackMode {
    Flow,
    Trajectory,
    BidirectionalFlow,
    BidirectionalTrajectory,
}

impl StackMode {
    pub fn tag(self) -> u8 {
        match self {
            StackMode::Flow => 0,
            StackMode::Trajectory => 1,
            StackMode::BidirectionalFlow => 2,
            StackMode::BidirectionalTrajectory => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => StackMode::Flow,
            1 => StackMode::Trajectory,
            2 => StackMode::BidirectionalFlow,
            3 => StackMode::BidirectionalTrajectory,
            _ => return Err(Error::Format(format!("unknown stack mode tag {tag}"))),
        })
    }

    pub fn is_bidirectional(self) -> bool {
        matches!(
            self,
            StackMode::BidirectionalFlow | StackMode::BidirectionalTrajectory
        )
    }

    /// Base stacking used for each direction of a bidirectional volume.
    pub fn base(self) -> BaseMode {
        match self {
            StackMode::Flow | StackMode::BidirectionalFlow => BaseMode::Flow,
            StackMode::Trajectory | StackMode::BidirectionalTrajectory => BaseMode::Trajectory,
        }
    }
}

/// Uni-directional stacking rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseMode {
    Flow,
    Trajectory,
}

/// The ConvNet input volume I_tau: (2L, h, w) values anchored at frame tau.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowVolume {
    pub mode: StackMode,
    pub l: usize,
    pub tau: usize,
    data: Tensor,
}

impl FlowVolume {
    pub fn new(mode: StackMode, l: usize, tau: usize, data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Shape(format!(
                "volume tensor must be rank 3, got {:?}",
                data.shape()
            )));
        }
        if data.shape()[0] != 2 * l {
            return Err(Error::Shape(format!(
                "volume depth {} != 2L = {}",
                data.shape()[0],
                2 * l
            )));
        }
        Ok(Self { mode, l, tau, data })
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height() * self.width();
        &self.data.data()[c * plane..(c + 1) * plane]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data.at(&[c, y, x])
    }

    /// Serialize as a 16-byte header followed by the tensor container.
    /// Header: mode tag u8, L u8, tau u32, w u32, h u32, 2 reserved bytes.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&[self.mode.tag(), self.l as u8])?;
        w.write_all(&(self.tau as u32).to_le_bytes())?;
        w.write_all(&(self.width() as u32).to_le_bytes())?;
        w.write_all(&(self.height() as u32).to_le_bytes())?;
        w.write_all(&[0u8, 0u8])?;
        self.data.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 2];
        r.read_exact(&mut head)
            .map_err(|_| Error::Format("truncated volume header".into()))?;
        let mode = StackMode::from_tag(head[0])?;
        let l = head[1] as usize;
        let tau = read_u32(r)? as usize;
        let w = read_u32(r)? as usize;
        let h = read_u32(r)? as usize;
        let mut reserved = [0u8; 2];
        r.read_exact(&mut reserved)
            .map_err(|_| Error::Format("truncated volume header".into()))?;
        let data = Tensor::read_from(r)?;
        if data.shape() != [2 * l, h, w] {
            return Err(Error::Format("volume header disagrees with tensor shape".into()));
        }
        FlowVolume::new(mode, l, tau, data)
    }
}

fn check_uniform(fields: &[&DisplacementField]) -> Result<(usize, usize)> {
    let first = fields[0];
    let (w, h) = (first.width(), first.height());
    for f in fields {
        if f.width() != w || f.height() != h {
            return Err(Error::Shape(format!(
                "field size {}x{} differs from {}x{}",
                f.width(),
                f.height(),
                w,
                h
            )));
        }
    }
    Ok((w, h))
}

fn select_range<'a>(
    fields: &'a [DisplacementField],
    tau: usize,
    count: usize,
    what: &str,
) -> Result<Vec<&'a DisplacementField>> {
    let end = tau
        .checked_add(count)
        .ok_or_else(|| Error::Range("anchor overflow".into()))?;
    if end > fields.len() {
        return Err(Error::Range(format!(
            "{what} needs fields {tau}..{} but only {} are available",
            end - 1,
            fields.len()
        )));
    }
    Ok(fields[tau..end].iter().collect())
}

/// Stack the components of an ordered field list at fixed grid locations:
/// step s writes field s's dx into channel 2s and dy into channel 2s+1.
fn stack_flow_over(list: &[&DisplacementField]) -> Result<Tensor> {
    let (w, h) = check_uniform(list)?;
    let l = list.len();
    let plane = w * h;
    let mut data = vec![0.0f32; 2 * l * plane];
    for (s, field) in list.iter().enumerate() {
        data[2 * s * plane..(2 * s + 1) * plane].copy_from_slice(field.dx().data());
        data[(2 * s + 1) * plane..(2 * s + 2) * plane].copy_from_slice(field.dy().data());
    }
    Ok(Tensor::from_vec_unchecked(vec![2 * l, h, w], data))
}

/// Stack components sampled along the per-pixel motion trajectory: the
/// path starts at the anchor pixel and each step advances by the sampled
/// displacement of the previous field.
fn stack_trajectory_over(list: &[&DisplacementField]) -> Result<Tensor> {
    let (w, h) = check_uniform(list)?;
    let l = list.len();
    let plane = w * h;
    let mut data = vec![0.0f32; 2 * l * plane];
    for v in 0..h {
        for u in 0..w {
            let mut px = u as f32;
            let mut py = v as f32;
            for (s, field) in list.iter().enumerate() {
                let (dx, dy) = field.sample_bilinear(px, py);
                data[2 * s * plane + v * w + u] = dx;
                data[(2 * s + 1) * plane + v * w + u] = dy;
                if s + 1 < l {
                    // p_{k+1} = p_k + d(p_k); the sample above is the one
                    // that moves the point, so it is reused for the step
                    px += dx;
                    py += dy;
                }
            }
        }
    }
    Ok(Tensor::from_vec_unchecked(vec![2 * l, h, w], data))
}

fn check_stack_args(l: usize) -> Result<()> {
    if l == 0 {
        return Err(Error::Argument("L must be >= 1".into()));
    }
    if l > 255 {
        return Err(Error::Argument("L must fit the u8 header field".into()));
    }
    Ok(())
}

/// Multi-frame flow stacking: channel pair k holds field tau+k-1 sampled
/// at the pixel itself.
pub fn stack_flow(fields: &[DisplacementField], tau: usize, l: usize) -> Result<FlowVolume> {
    check_stack_args(l)?;
    let list = select_range(fields, tau, l, "flow stacking")?;
    FlowVolume::new(StackMode::Flow, l, tau, stack_flow_over(&list)?)
}

/// Sub-pixel trajectory traced from an integer anchor through successive
/// fields. `points[0]` is the anchor; steps 2..=L read fields
/// tau..tau+L-2.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPath {
    pub points: Vec<(f32, f32)>,
}

pub fn trace_trajectory(
    fields: &[DisplacementField],
    anchor: (usize, usize),
    tau: usize,
    l: usize,
) -> Result<TrajectoryPath> {
    check_stack_args(l)?;
    let steps = select_range(fields, tau, l - 1, "trajectory trace")?;
    let mut points = Vec::with_capacity(l);
    let mut p = (anchor.0 as f32, anchor.1 as f32);
    points.push(p);
    for field in steps {
        let (dx, dy) = field.sample_bilinear(p.0, p.1);
        p = (p.0 + dx, p.1 + dy);
        points.push(p);
    }
    Ok(TrajectoryPath { points })
}

/// Multi-frame trajectory stacking: channel pair k holds field tau+k-1
/// sampled at the k-th trajectory point of each pixel.
pub fn stack_trajectory(fields: &[DisplacementField], tau: usize, l: usize) -> Result<FlowVolume> {
    check_stack_args(l)?;
    let list = select_range(fields, tau, l, "trajectory stacking")?;
    FlowVolume::new(StackMode::Trajectory, l, tau, stack_trajectory_over(&list)?)
}

/// Bidirectional stacking: L/2 forward fields starting at the anchor fill
/// channels 1..L, then L/2 backward fields ordered from the anchor
/// backwards fill channels L+1..2L.
///
/// Both field slices are indexed by frame pair: `fwd[t]` maps frame t to
/// t+1 and `bwd[t]` maps frame t+1 back to t, so the first backward step
/// from anchor tau is `bwd[tau-1]`. Backward fields are stored as
/// computed, not negated.
pub fn stack_bidirectional(
    fwd: &[DisplacementField],
    bwd: &[DisplacementField],
    tau: usize,
    l: usize,
    base: BaseMode,
) -> Result<FlowVolume> {
    check_stack_args(l)?;
    if l % 2 != 0 {
        return Err(Error::Argument(format!("bidirectional stacking needs even L, got {l}")));
    }
    let half = l / 2;
    let fwd_list = select_range(fwd, tau, half, "bidirectional forward half")?;
    if tau < half {
        return Err(Error::Range(format!(
            "bidirectional anchor {tau} needs {half} backward fields before it"
        )));
    }
    if tau > bwd.len() {
        return Err(Error::Range(format!(
            "backward fields end at {} but anchor is {tau}",
            bwd.len()
        )));
    }
    let bwd_list: Vec<&DisplacementField> = (1..=half).map(|k| &bwd[tau - k]).collect();

    let stack = |list: &[&DisplacementField]| match base {
        BaseMode::Flow => stack_flow_over(list),
        BaseMode::Trajectory => stack_trajectory_over(list),
    };
    let front = stack(&fwd_list)?;
    let back = stack(&bwd_list)?;
    if front.shape()[1..] != back.shape()[1..] {
        return Err(Error::Shape("forward/backward field sizes differ".into()));
    }
    let (h, w) = (front.shape()[1], front.shape()[2]);
    let mut data = front.into_data();
    data.extend_from_slice(back.data());
    let mode = match base {
        BaseMode::Flow => StackMode::BidirectionalFlow,
        BaseMode::Trajectory => StackMode::BidirectionalTrajectory,
    };
    FlowVolume::new(mode, l, tau, Tensor::from_vec_unchecked(vec![2 * l, h, w], data))
}

/// Subtract each channel's spatial mean, i.e. remove every constituent
/// field's mean displacement vector. Applied to the full volume before
/// cropping.
pub fn subtract_mean(volume: &FlowVolume) -> FlowVolume {
    let plane = volume.width() * volume.height();
    let mut data = volume.data.data().to_vec();
    for c in 0..volume.channels() {
        let slice = &mut data[c * plane..(c + 1) * plane];
        let mean = (slice.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32;
        slice.iter_mut().for_each(|v| *v -= mean);
    }
    FlowVolume {
        mode: volume.mode,
        l: volume.l,
        tau: volume.tau,
        data: Tensor::from_vec_unchecked(volume.data.shape().to_vec(), data),
    }
}

/// Axis-aligned crop rectangle in volume coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Crop a sub-volume and optionally mirror it horizontally. A mirrored
/// volume has its horizontal channels negated as well: flipping the image
/// flips the sign of horizontal motion, while vertical channels are only
/// mirrored.
pub fn crop_volume(volume: &FlowVolume, rect: CropRect, hflip: bool) -> Result<FlowVolume> {
    if rect.width == 0 || rect.height == 0 {
        return Err(Error::Range("empty crop rectangle".into()));
    }
    if rect.x + rect.width > volume.width() || rect.y + rect.height > volume.height() {
        return Err(Error::Range(format!(
            "crop {}x{}+{}+{} outside {}x{} volume",
            rect.width,
            rect.height,
            rect.x,
            rect.y,
            volume.width(),
            volume.height()
        )));
    }
    let channels = volume.channels();
    let src_w = volume.width();
    let plane_in = src_w * volume.height();
    let plane_out = rect.width * rect.height;
    let src = volume.data.data();
    let mut data = vec![0.0f32; channels * plane_out];
    for c in 0..channels {
        // 0-based even channels are horizontal (1-based odd)
        let negate = hflip && c % 2 == 0;
        for j in 0..rect.height {
            let src_row = (rect.y + j) * src_w + rect.x;
            for i in 0..rect.width {
                let si = if hflip { rect.width - 1 - i } else { i };
                let v = src[c * plane_in + src_row + si];
                data[c * plane_out + j * rect.width + i] = if negate { -v } else { v };
            }
        }
    }
    FlowVolume::new(
        volume.mode,
        volume.l,
        volume.tau,
        Tensor::from_vec_unchecked(vec![channels, rect.height, rect.width], data),
    )
}

impl FlowVolume {
    /// Full-frame rectangle.
    pub fn full_rect(&self) -> CropRect {
        CropRect {
            x: 0,
            y: 0,
            width: self.width(),
            height: self.height(),
        }
    }
}
