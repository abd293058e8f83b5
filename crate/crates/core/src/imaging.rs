//! Raster helpers: pixel masks, the 11×11 Gaussian blur, grayscale,
//! ellipse strokes and concept overlays.

use std::collections::VecDeque;

use image::{Rgb, RgbImage};

use crate::dataset::PixelBox;
use crate::embedding::GridGeometry;
use crate::error::{Error, Result};

pub const BLUR_KERNEL_SIZE: usize = 11;
/// The kernel spans ±3σ.
pub const BLUR_SIGMA: f64 = 5.0 / 3.0;

/// Boolean mask at pixel resolution, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl PixelMask {
    pub fn new(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(Error::DimensionMismatch {
                what: "pixel mask length",
                expected: (width as usize) * (height as usize),
                found: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; (width as usize) * (height as usize)],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![true; (width as usize) * (height as usize)],
        }
    }

    /// Nearest-neighbour upsampling of patch flags to pixels.
    pub fn from_patches(geometry: GridGeometry, flags: &[bool]) -> Result<Self> {
        if flags.len() != geometry.num_patches() {
            return Err(Error::DimensionMismatch {
                what: "patch flags vs grid",
                expected: geometry.num_patches(),
                found: flags.len(),
            });
        }
        let (w, h) = (geometry.pixel_width(), geometry.pixel_height());
        let p = geometry.patch_size;
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| flags[(y / p) * geometry.grid_w + x / p])
            .collect();
        Ok(Self {
            width: w as u32,
            height: h as u32,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y as usize) * (self.width as usize) + x as usize]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|b| *b)
    }

    pub fn union(&self, other: &PixelMask) -> Result<PixelMask> {
        self.check_same(other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        })
    }

    fn check_same(&self, other: &PixelMask) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::InvalidInput(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Tight half-open pixel box, or `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<PixelBox> {
        let w = self.width as usize;
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.data.iter().enumerate().filter(|(_, v)| **v) {
            let (x, y) = (i % w, i / w);
            b = Some(match b {
                None => (x, y, x + 1, y + 1),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
            });
        }
        b.map(|(x0, y0, x1, y1)| PixelBox {
            x0: x0 as f64,
            y0: y0 as f64,
            x1: x1 as f64,
            y1: y1 as f64,
        })
    }

    /// Largest 4-connected component; ties go to the component reached first
    /// in row-major order.
    pub fn largest_component(&self) -> PixelMask {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut label = vec![usize::MAX; self.data.len()];
        let mut best: (usize, usize) = (0, usize::MAX);
        let mut next = 0;
        for start in 0..self.data.len() {
            if !self.data[start] || label[start] != usize::MAX {
                continue;
            }
            let mut size = 0;
            let mut queue = VecDeque::from([start]);
            label[start] = next;
            while let Some(i) = queue.pop_front() {
                size += 1;
                let (x, y) = (i % w, i / w);
                let mut push = |j: usize| {
                    if self.data[j] && label[j] == usize::MAX {
                        label[j] = next;
                        queue.push_back(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
            }
            if best.1 == usize::MAX || size > best.0 {
                best = (size, next);
            }
            next += 1;
        }
        Self {
            width: self.width,
            height: self.height,
            data: label.iter().map(|l| *l == best.1).collect(),
        }
    }
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Reflect-101 border index (`dcb|abcd|cba`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Separable 11×11 Gaussian blur with reflect-101 borders.
pub fn gaussian_blur(image: &RgbImage) -> RgbImage {
    let k = gaussian_kernel(BLUR_KERNEL_SIZE, BLUR_SIGMA);
    let r = (BLUR_KERNEL_SIZE / 2) as isize;
    let (w, h) = (image.width() as usize, image.height() as usize);
    let raw = image.as_raw();
    let mut tmp = vec![0.0f64; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let xx = reflect(x as isize + t as isize - r, w);
                    acc += kv * raw[(y * w + xx) * 3 + ch] as f64;
                }
                tmp[(y * w + x) * 3 + ch] = acc;
            }
        }
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for (ch, slot) in px.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let yy = reflect(y as isize + t as isize - r, h);
                    acc += kv * tmp[(yy * w + x) * 3 + ch];
                }
                *slot = acc.round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    out
}

/// BT.601 luma replicated to three channels.
pub fn grayscale(image: &RgbImage) -> RgbImage {
    let mut out = image.clone();
    for px in out.pixels_mut() {
        let [r, g, b] = px.0.map(|v| v as f64);
        let l = (0.299 * r + 0.587 * g + 0.114 * b).round().clamp(0.0, 255.0) as u8;
        *px = Rgb([l, l, l]);
    }
    out
}

/// Takes `inside` where the mask is set and `outside` elsewhere.
pub fn composite(inside: &RgbImage, outside: &RgbImage, mask: &PixelMask) -> Result<RgbImage> {
    if inside.dimensions() != outside.dimensions()
        || inside.dimensions() != (mask.width(), mask.height())
    {
        return Err(Error::InvalidInput("composite inputs differ in size".into()));
    }
    let mut out = outside.clone();
    for (i, px) in out.pixels_mut().enumerate() {
        if mask.data[i] {
            *px = inside.as_raw()[i * 3..i * 3 + 3]
                .try_into()
                .map(Rgb)
                .expect("three channels");
        }
    }
    Ok(out)
}

/// 1-px stroke of the ellipse inscribed in `bbox` (pixel units, half-open).
pub fn draw_ellipse(image: &mut RgbImage, bbox: &PixelBox, colour: Rgb<u8>) {
    let cx = (bbox.x0 + bbox.x1) / 2.0;
    let cy = (bbox.y0 + bbox.y1) / 2.0;
    let rx = ((bbox.x1 - bbox.x0) / 2.0 - 0.5).max(0.0);
    let ry = ((bbox.y1 - bbox.y0) / 2.0 - 0.5).max(0.0);
    let steps = ((rx + ry) * 8.0).ceil().max(8.0) as usize;
    let (w, h) = (image.width() as f64, image.height() as f64);
    for s in 0..steps {
        let t = s as f64 / steps as f64 * std::f64::consts::TAU;
        let x = (cx + rx * t.cos() - 0.5).round();
        let y = (cy + ry * t.sin() - 0.5).round();
        if x >= 0.0 && y >= 0.0 && x < w && y < h {
            image.put_pixel(x as u32, y as u32, colour);
        }
    }
}

/// Fixed concept colours; index `l` colours concept `l`.
pub const CONCEPT_PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
];

pub fn concept_colour(l: usize) -> [u8; 3] {
    CONCEPT_PALETTE[l % CONCEPT_PALETTE.len()]
}

/// Blends concept colours over labelled patches at 50% opacity.
pub fn overlay(image: &RgbImage, geometry: GridGeometry, labels: &[Option<usize>]) -> Result<RgbImage> {
    if labels.len() != geometry.num_patches() {
        return Err(Error::DimensionMismatch {
            what: "overlay labels vs grid",
            expected: geometry.num_patches(),
            found: labels.len(),
        });
    }
    if image.dimensions() != (geometry.pixel_width() as u32, geometry.pixel_height() as u32) {
        return Err(Error::InvalidInput("overlay image does not match the grid".into()));
    }
    let mut out = image.clone();
    let p = geometry.patch_size;
    for (x, y, px) in out.enumerate_pixels_mut() {
        let i = (y as usize / p) * geometry.grid_w + x as usize / p;
        if let Some(l) = labels[i] {
            let c = concept_colour(l);
            for ch in 0..3 {
                px.0[ch] = ((px.0[ch] as u16 + c[ch] as u16) / 2) as u8;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(w: u32, h: u32, cell: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            if ((x / cell) + (y / cell)) % 2 == 0 {
                Rgb([250, 20, 120])
            } else {
                Rgb([5, 200, 60])
            }
        })
    }

    /// Direct 2-D convolution with the outer-product kernel.
    fn blur_oracle(img: &RgbImage) -> Vec<f64> {
        let k = gaussian_kernel(BLUR_KERNEL_SIZE, BLUR_SIGMA);
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = vec![0.0; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let mut acc = 0.0;
                    for (dy, ky) in k.iter().enumerate() {
                        for (dx, kx) in k.iter().enumerate() {
                            let yy = reflect(y as isize + dy as isize - 5, h);
                            let xx = reflect(x as isize + dx as isize - 5, w);
                            acc += ky * kx * img.get_pixel(xx as u32, yy as u32).0[ch] as f64;
                        }
                    }
                    out[(y * w + x) * 3 + ch] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(11, BLUR_SIGMA);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(k[i], k[10 - i]);
        }
    }

    #[test]
    fn blur_matches_direct_convolution() {
        let img = checkerboard(37, 29, 3);
        let got = gaussian_blur(&img);
        let want = blur_oracle(&img);
        for (g, w) in got.as_raw().iter().zip(&want) {
            assert!((*g as f64 - w).abs() <= 1.0, "{g} vs {w}");
        }
    }

    #[test]
    fn blur_keeps_constant_images() {
        let img = RgbImage::from_pixel(20, 20, Rgb([17, 99, 201]));
        assert_eq!(gaussian_blur(&img), img);
    }

    #[test]
    fn reflect_101_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn upsampled_patch_mask_and_box() {
        let g = GridGeometry {
            grid_h: 2,
            grid_w: 3,
            patch_size: 4,
        };
        let m = PixelMask::from_patches(g, &[false, true, false, false, true, false]).unwrap();
        assert_eq!(m.count(), 2 * 16);
        let b = m.bounding_box().unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (4.0, 0.0, 8.0, 8.0));
    }

    #[test]
    fn largest_component_prefers_bigger_region() {
        let rows = ["##..#", "##..#", ".....", "....."];
        let data: Vec<bool> = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        let m = PixelMask::new(5, 4, data).unwrap();
        let l = m.largest_component();
        assert_eq!(l.count(), 4);
        assert!(l.get(0, 0) && !l.get(4, 0));
    }

    #[test]
    fn ellipse_stays_inside_its_box() {
        let mut img = RgbImage::new(40, 40);
        let b = PixelBox { x0: 5.0, y0: 10.0, x1: 25.0, y1: 30.0 };
        draw_ellipse(&mut img, &b, Rgb([255, 0, 0]));
        let mut n = 0;
        for (x, y, px) in img.enumerate_pixels() {
            if px.0 == [255, 0, 0] {
                n += 1;
                assert!((5..25).contains(&x) && (10..30).contains(&y));
            }
        }
        assert!(n > 40);
        // The centre is not stroked.
        assert_eq!(img.get_pixel(15, 20).0, [0, 0, 0]);
    }
}
