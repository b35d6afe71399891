use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense displacement field for one frame pair: horizontal and vertical
/// per-pixel displacement planes, in pixels per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    dx: Tensor, // (h, w)
    dy: Tensor, // (h, w)
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

impl DisplacementField {
    pub fn new(dx: Tensor, dy: Tensor) -> Result<Self> {
        if dx.rank() != 2 {
            return Err(Error::Shape(format!(
                "displacement planes must be rank 2, got {:?}",
                dx.shape()
            )));
        }
        if dx.shape() != dy.shape() {
            return Err(Error::Shape(format!(
                "dx {:?} and dy {:?} differ",
                dx.shape(),
                dy.shape()
            )));
        }
        Ok(Self { dx, dy })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        let dx = Tensor::zeros(&[height, width])?;
        Self::new(dx.clone(), dx)
    }

    pub fn constant(width: usize, height: usize, dx: f32, dy: f32) -> Result<Self> {
        Self::new(
            Tensor::new(&[height, width], dx)?,
            Tensor::new(&[height, width], dy)?,
        )
    }

    pub fn from_planes(width: usize, height: usize, dx: Vec<f32>, dy: Vec<f32>) -> Result<Self> {
        Self::new(
            Tensor::from_vec(&[height, width], dx)?,
            Tensor::from_vec(&[height, width], dy)?,
        )
    }

    pub fn width(&self) -> usize {
        self.dx.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.dx.shape()[0]
    }

    pub fn dx(&self) -> &Tensor {
        &self.dx
    }

    pub fn dy(&self) -> &Tensor {
        &self.dy
    }

    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        (self.dx.at(&[y, x]), self.dy.at(&[y, x]))
    }

    /// Displacement with a constant vector added everywhere (synthetic
    /// camera pan).
    pub fn with_offset(&self, cx: f32, cy: f32) -> Self {
        Self {
            dx: self.dx.map(|v| v + cx),
            dy: self.dy.map(|v| v + cy),
        }
    }

    /// Bilinear sample of (dx, dy) at a sub-pixel point. Coordinates are
    /// clamped to the grid before interpolation (border replication), so
    /// the lookup is total. The nested-lerp form returns the stored value
    /// bit-exactly on constant fields and at grid nodes.
    pub fn sample_bilinear(&self, x: f32, y: f32) -> (f32, f32) {
        let w = self.width();
        let h = self.height();
        let x = x.clamp(0.0, (w - 1) as f32);
        let y = y.clamp(0.0, (h - 1) as f32);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let sample = |plane: &Tensor| {
            let row0 = lerp(plane.at(&[y0, x0]), plane.at(&[y0, x1]), fx);
            let row1 = lerp(plane.at(&[y1, x0]), plane.at(&[y1, x1]), fx);
            lerp(row0, row1, fy)
        };
        (sample(&self.dx), sample(&self.dy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_field() -> DisplacementField {
        // dx(y, x) = x, dy(y, x) = y on a 4x3 grid
        let mut dx = Vec::new();
        let mut dy = Vec::new();
        for y in 0..3 {
            for x in 0..4 {
                dx.push(x as f32);
                dy.push(y as f32);
            }
        }
        DisplacementField::from_planes(4, 3, dx, dy).unwrap()
    }

    #[test]
    fn integer_points_hit_grid_values() {
        let f = ramp_field();
        for y in 0..3 {
            for x in 0..4 {
                let (dx, dy) = f.sample_bilinear(x as f32, y as f32);
                assert_eq!((dx, dy), (x as f32, y as f32));
            }
        }
    }

    #[test]
    fn midpoint_is_linear() {
        // nodes valued 0 and 2 -> midpoint 1.0
        let f =
            DisplacementField::from_planes(2, 1, vec![0.0, 2.0], vec![0.0, 0.0]).unwrap();
        let (dx, _) = f.sample_bilinear(0.5, 0.0);
        assert_eq!(dx, 1.0);
    }

    #[test]
    fn out_of_bounds_clamps_to_border() {
        let f = ramp_field();
        // brute-force rule: clamp both coordinates, then interpolate
        let (dx, dy) = f.sample_bilinear(-5.0, -5.0);
        assert_eq!((dx, dy), f.at(0, 0));
        let (dx, dy) = f.sample_bilinear(100.0, 100.0);
        assert_eq!((dx, dy), f.at(3, 2));
    }

    #[test]
    fn constant_field_samples_exactly() {
        let f = DisplacementField::constant(5, 4, 0.37, -1.91).unwrap();
        for &(x, y) in &[(0.3, 0.7), (1.99, 2.01), (4.5, -2.0), (0.123, 3.456)] {
            assert_eq!(f.sample_bilinear(x, y), (0.37, -1.91));
        }
    }

    #[test]
    fn mismatched_planes_rejected() {
        let dx = Tensor::zeros(&[2, 2]).unwrap();
        let dy = Tensor::zeros(&[2, 3]).unwrap();
        assert!(DisplacementField::new(dx, dy).is_err());
    }
}
