//! Label algebra over pixel grids: compositing, boundary bands and matte label blending.
//!
//! All values are normalized reals. Mattes live in `[0, 1]`; segmentation and
//! boundary masks hold exactly `0` or `1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower edge of the detail band; a pixel must be strictly above it.
pub const BOUNDARY_LOW: f64 = 0.05;
/// Upper edge of the detail band; a pixel must be strictly below it.
pub const BOUNDARY_HIGH: f64 = 0.95;
/// Boundary head outputs at or above this value become `1`.
pub const BOUNDARY_BINARIZE_THRESHOLD: f64 = 0.5;

/// Row-major 2-D array.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "grid of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
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

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn into_values(self) -> Vec<T> {
        self.data
    }
}

fn check_dims(expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Per-pixel opacity in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMatte(Grid<f64>);

impl AlphaMatte {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::from_grid(Grid::new(height, width, values)?)
    }

    pub fn from_grid(grid: Grid<f64>) -> Result<Self> {
        if let Some(bad) = grid.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("matte value {bad} outside [0, 1]")));
        }
        Ok(Self(grid))
    }

    /// Builds a matte, clamping each value into `[0, 1]` (NaN becomes 0).
    pub fn from_fn_clamped(height: usize, width: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        Self(Grid::from_fn(height, width, f).map(clamp_unit))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self(Grid::filled(height, width, value))
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x)
    }
}

impl From<&SegMask> for AlphaMatte {
    fn from(seg: &SegMask) -> Self {
        AlphaMatte(seg.0.map(f64::from))
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

macro_rules! binary_mask {
    ($name:ident, $what:literal) => {
        #[doc = concat!("Binary ", $what, " mask; every element is exactly 0 or 1.")]
        #[derive(Clone, Debug, PartialEq, Eq)]
        pub struct $name(Grid<u8>);

        impl $name {
            pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
                Self::from_grid(Grid::new(height, width, values)?)
            }

            pub fn from_grid(grid: Grid<u8>) -> Result<Self> {
                if let Some(bad) = grid.values().iter().find(|&&v| v > 1) {
                    return Err(Error::invalid(format!(
                        concat!($what, " mask value {} is not binary"),
                        bad
                    )));
                }
                Ok(Self(grid))
            }

            pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
                Self(Grid::from_fn(height, width, |y, x| u8::from(f(y, x))))
            }

            pub fn grid(&self) -> &Grid<u8> {
                &self.0
            }

            pub fn dims(&self) -> (usize, usize) {
                self.0.dims()
            }

            pub fn height(&self) -> usize {
                self.0.height()
            }

            pub fn width(&self) -> usize {
                self.0.width()
            }

            pub fn values(&self) -> &[u8] {
                self.0.values()
            }

            pub fn get(&self, y: usize, x: usize) -> bool {
                self.0.get(y, x) == 1
            }

            pub fn count_ones(&self) -> usize {
                self.0.values().iter().filter(|&&v| v == 1).count()
            }
        }
    };
}

binary_mask!(SegMask, "segmentation");
binary_mask!(BoundaryMask, "boundary");

/// Three-channel image stored channel-planar (`[c][y][x]`) with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != 3 * height * width {
            return Err(Error::invalid(format!(
                "rgb image of {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn_clamped(height, width, |_, _| rgb)
    }

    pub fn from_fn_clamped(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let hw = height * width;
        let mut data = vec![0.0; 3 * hw];
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for c in 0..3 {
                    data[c * hw + y * width + x] = clamp_unit(px[c]);
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    /// Window of `h x w` pixels starting at `(y0, x0)`; must lie inside the image.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> RgbImage {
        assert!(y0 + h <= self.height && x0 + w <= self.width, "crop window outside image");
        RgbImage::from_fn_clamped(h, w, |y, x| self.pixel(y0 + y, x0 + x))
    }
}

/// Alpha compositing: `matte * fg + (1 - matte) * bg`, per pixel and channel.
pub fn composite(fg: &RgbImage, bg: &RgbImage, matte: &AlphaMatte) -> Result<RgbImage> {
    check_dims(fg.dims(), bg.dims())?;
    check_dims(fg.dims(), matte.dims())?;
    let hw = fg.height * fg.width;
    let a = matte.values();
    let mut data = Vec::with_capacity(3 * hw);
    for c in 0..3 {
        let f = fg.channel(c);
        let b = bg.channel(c);
        data.extend((0..hw).map(|i| clamp_unit(a[i] * f[i] + (1.0 - a[i]) * b[i])));
    }
    Ok(RgbImage {
        height: fg.height,
        width: fg.width,
        data,
    })
}

/// True when `value` lies strictly inside the detail band `(0.05, 0.95)`.
pub fn in_boundary_band(value: f64) -> bool {
    value > BOUNDARY_LOW && value < BOUNDARY_HIGH
}

/// Marks pixels whose opacity lies strictly inside `(0.05, 0.95)`.
pub fn extract_boundary(matte: &AlphaMatte) -> BoundaryMask {
    BoundaryMask(matte.grid().map(|v| u8::from(in_boundary_band(v))))
}

/// Matte label blending: take the pseudo matte where the pseudo boundary is set
/// and the segmentation label everywhere else.
pub fn blend_matte(
    pseudo_matte: &AlphaMatte,
    pseudo_boundary: &BoundaryMask,
    seg: &SegMask,
) -> Result<AlphaMatte> {
    let weights = pseudo_boundary.grid().map(f64::from);
    blend_matte_soft(pseudo_matte, &weights, seg)
}

/// Pointwise `w * pseudo + (1 - w) * seg` for arbitrary weights `w` in `[0, 1]`.
pub fn blend_matte_soft(
    pseudo_matte: &AlphaMatte,
    weights: &Grid<f64>,
    seg: &SegMask,
) -> Result<AlphaMatte> {
    check_dims(pseudo_matte.dims(), weights.dims())?;
    check_dims(pseudo_matte.dims(), seg.dims())?;
    if let Some(bad) = weights.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("blend weight {bad} outside [0, 1]")));
    }
    let (h, w) = pseudo_matte.dims();
    let m = pseudo_matte.values();
    let a = weights.values();
    let s = seg.values();
    let data = (0..h * w)
        .map(|i| clamp_unit(a[i] * m[i] + (1.0 - a[i]) * f64::from(s[i])))
        .collect();
    Ok(AlphaMatte(Grid::new(h, w, data)?))
}

/// Turns a continuous boundary-head output into a binary mask (`>= 0.5` is set).
pub fn binarize_boundary(raw: &Grid<f64>) -> Result<BoundaryMask> {
    if let Some(bad) = raw.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("boundary value {bad} outside [0, 1]")));
    }
    Ok(BoundaryMask(
        raw.map(|v| u8::from(v >= BOUNDARY_BINARIZE_THRESHOLD)),
    ))
}
