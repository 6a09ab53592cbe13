use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Square real image, stored row-major.
///
/// Pixel `(row, col)` sits at Cartesian coordinates `x = col - center`,
/// `y = center - row`, so positive angles rotate counter-clockwise on screen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    side: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn zeros(side: usize) -> Self {
        Image {
            side,
            pixels: vec![0.0; side * side],
        }
    }

    pub fn from_pixels(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(Error::SizeMismatch {
                expected: side * side,
                actual: pixels.len(),
            });
        }
        Ok(Image { side, pixels })
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut img = Image::zeros(side);
        for row in 0..side {
            for col in 0..side {
                let (x, y) = img.coords(row, col);
                img.pixels[row * side + col] = f(x, y);
            }
        }
        img
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.side + col]
    }

    /// Index of the grid center: `(L-1)/2` for odd `L`, `L/2` for even `L`.
    pub fn center(&self) -> f64 {
        grid_center(self.side)
    }

    /// Support radius `(L-1)/2`.
    pub fn radius(&self) -> f64 {
        support_radius(self.side)
    }

    pub fn coords(&self, row: usize, col: usize) -> (f64, f64) {
        let c = self.center();
        (col as f64 - c, c - row as f64)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.pixels.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius norm restricted to the support disk.
    pub fn disk_norm(&self) -> f64 {
        disk_mask(self.side)
            .iter()
            .zip(&self.pixels)
            .filter(|(m, _)| **m)
            .map(|(_, v)| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.pixels.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f64) -> Image {
        Image {
            side: self.side,
            pixels: self.pixels.iter().map(|v| v * s).collect(),
        }
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &Image, s: f64) -> Result<Image> {
        check_same_side(self, other)?;
        Ok(Image {
            side: self.side,
            pixels: self
                .pixels
                .iter()
                .zip(&other.pixels)
                .map(|(a, b)| a + s * b)
                .collect(),
        })
    }

    /// Zeroes every pixel outside the support disk.
    pub fn mask_to_disk(&mut self) {
        for (v, inside) in self.pixels.iter_mut().zip(disk_mask(self.side)) {
            if !inside {
                *v = 0.0;
            }
        }
    }
}

pub(crate) fn check_same_side(a: &Image, b: &Image) -> Result<()> {
    if a.side != b.side {
        return Err(Error::SizeMismatch {
            expected: a.side,
            actual: b.side,
        });
    }
    Ok(())
}

pub fn grid_center(side: usize) -> f64 {
    (side / 2) as f64
}

pub fn support_radius(side: usize) -> f64 {
    (side as f64 - 1.0) / 2.0
}

/// Row-major mask of pixels with `x^2 + y^2 <= ((L-1)/2)^2`.
pub fn disk_mask(side: usize) -> Vec<bool> {
    let c = grid_center(side);
    let r2 = support_radius(side).powi(2);
    let mut mask = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let x = col as f64 - c;
            let y = c - row as f64;
            mask.push(x * x + y * y <= r2 + 1e-9);
        }
    }
    mask
}

/// Validates a side length. Even sides are rejected unless `allow_even`.
pub fn check_side(side: usize, min: usize, allow_even: bool) -> Result<()> {
    if side < min {
        return invalid(format!("side length {side} is below the minimum {min}"));
    }
    if side.is_multiple_of(2) && !allow_even {
        return invalid(format!(
            "side length {side} is even; odd sizes are required"
        ));
    }
    Ok(())
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

fn bilinear(img: &Image, row: f64, col: f64) -> f64 {
    let n = img.side as isize;
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let (r0, c0) = (r0 as isize, c0 as isize);
    let px = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= n || c >= n {
            0.0
        } else {
            img.pixels[r as usize * img.side + c as usize]
        }
    };
    let mut v = (1.0 - fr) * (1.0 - fc) * px(r0, c0);
    if fc != 0.0 {
        v += (1.0 - fr) * fc * px(r0, c0 + 1);
    }
    if fr != 0.0 {
        v += fr * (1.0 - fc) * px(r0 + 1, c0);
        if fc != 0.0 {
            v += fr * fc * px(r0 + 1, c0 + 1);
        }
    }
    v
}

/// Rotates counter-clockwise by `theta` radians about the grid center using
/// bilinear interpolation. Samples falling outside the grid read as zero.
pub fn rotate_image(image: &Image, theta: f64) -> Result<Image> {
    if !theta.is_finite() {
        return invalid("rotation angle must be finite");
    }
    if theta == 0.0 {
        return Ok(image.clone());
    }
    let (s, c) = theta.sin_cos();
    let center = image.center();
    let side = image.side;
    let mut out = Image::zeros(side);
    for row in 0..side {
        for col in 0..side {
            let x = col as f64 - center;
            let y = center - row as f64;
            let xs = snap(x * c + y * s);
            let ys = snap(-x * s + y * c);
            out.pixels[row * side + col] = bilinear(image, center - ys, xs + center);
        }
    }
    Ok(out)
}

/// Translates by an integer number of pixels (`dx` to the right, `dy` up),
/// filling uncovered pixels with zero.
pub fn shift_image(image: &Image, dx: i32, dy: i32) -> Image {
    let side = image.side as isize;
    let mut out = Image::zeros(image.side);
    for row in 0..side {
        let src_row = row + dy as isize;
        if src_row < 0 || src_row >= side {
            continue;
        }
        for col in 0..side {
            let src_col = col - dx as isize;
            if src_col < 0 || src_col >= side {
                continue;
            }
            out.pixels[(row * side + col) as usize] =
                image.pixels[(src_row * side + src_col) as usize];
        }
    }
    out
}
