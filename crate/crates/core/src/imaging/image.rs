use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// RGB image stored as three planes of `height × width` values.
///
/// Values are nominally in `[0, 1]` but are not clamped during computation;
/// clamping happens when the image is written.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "image extents must be positive");
        Self {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    /// Builds an image from planar RGB data.
    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return Err(Error::shape(format!(
                "image {height}x{width} needs {} planar values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut img = Self::zeros(height, width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    img.set(c, y, x, f(c, y, x));
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &Image, op: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "{op}: image dims {:?} and {:?} differ",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f32, f32) -> f32) -> Result<Image> {
        self.same_dims(other, "zip_map")?;
        Ok(Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    /// Window of `h × w` pixels starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds image {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(h, w, |c, y, x| self.get(c, y0 + y, x0 + x)))
    }

    pub fn transformed(&self, t: Dihedral) -> Image {
        let (h, w) = if t.transposes() {
            (self.width, self.height)
        } else {
            (self.height, self.width)
        };
        Image::from_fn(h, w, |c, y, x| {
            let (sy, sx) = t.source(y, x, self.height, self.width);
            self.get(c, sy, sx)
        })
    }
}

/// One of the eight symmetries of the square: an optional transpose
/// followed by optional horizontal and vertical flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);

    pub fn new(index: u8) -> Self {
        assert!(index < 8, "dihedral index out of range");
        Dihedral(index)
    }

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral)
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn transposes(self) -> bool {
        self.0 & 4 != 0
    }

    fn flips_x(self) -> bool {
        self.0 & 1 != 0
    }

    fn flips_y(self) -> bool {
        self.0 & 2 != 0
    }

    /// Rotation by 90° clockwise.
    pub fn rot90() -> Self {
        // transpose then horizontal flip
        Dihedral(4 | 1)
    }

    /// Source pixel for output `(y, x)` given the source extents.
    fn source(self, y: usize, x: usize, src_h: usize, src_w: usize) -> (usize, usize) {
        let (out_h, out_w) = if self.transposes() { (src_w, src_h) } else { (src_h, src_w) };
        let y = if self.flips_y() { out_h - 1 - y } else { y };
        let x = if self.flips_x() { out_w - 1 - x } else { x };
        if self.transposes() {
            (x, y)
        } else {
            (y, x)
        }
    }
}
