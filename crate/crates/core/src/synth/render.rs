//! Depth-shaded orthographic renders of voxel grids.

use std::io::Cursor;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::voxel::VoxelGrid;

/// Background intensity; surfaces are shaded in `[NEAR_SHADE, FAR_SHADE]`.
pub const BACKGROUND: f32 = 1.0;
const NEAR_SHADE: f64 = 0.15;
const FAR_SHADE: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    /// Degrees, `[lo, hi]`.
    pub azimuth_range: (f64, f64),
    pub elevation_range: (f64, f64),
    pub depth_ratio_range: (f64, f64),
    pub image_size: usize,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            azimuth_range: (0.0, 360.0),
            elevation_range: (25.0, 30.0),
            depth_ratio_range: (0.65, 1.0),
            image_size: 128,
        }
    }
}

impl RenderParams {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("azimuth", self.azimuth_range),
            ("elevation", self.elevation_range),
            ("depth ratio", self.depth_ratio_range),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::Parameter(format!(
                    "{name} range [{lo}, {hi}] is invalid"
                )));
            }
        }
        if self.depth_ratio_range.0 <= 0.0 {
            return Err(Error::Parameter("depth ratio must be positive".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Parameter("image size must be positive".into()));
        }
        Ok(())
    }
}

/// Camera of one view: angles in degrees and the footprint scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub azimuth: f64,
    pub elevation: f64,
    pub depth_ratio: f64,
}

impl Camera {
    /// Unit vectors `(right, up, forward)` of the image plane; `forward`
    /// points from the camera towards the object.
    pub fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let (sa, ca) = self.azimuth.to_radians().sin_cos();
        let (se, ce) = self.elevation.to_radians().sin_cos();
        let forward = [-ce * sa, -se, -ce * ca];
        let right = [ca, 0.0, -sa];
        let up = [-se * sa, ce, -se * ca];
        (right, up, forward)
    }

    /// Half-width of the image in lattice units for resolution `r`. At ratio 1
    /// the bounding sphere of the lattice exactly fits.
    pub fn half_extent(&self, r: usize) -> f64 {
        r as f64 * 3f64.sqrt() / 2.0 / self.depth_ratio
    }

    /// Lattice-space point seen through the centre of pixel `(px, py)`, on
    /// the image plane through the lattice centre.
    pub fn pixel_point(&self, r: usize, size: usize, px: usize, py: usize) -> [f64; 3] {
        let (right, up, _) = self.basis();
        let h = self.half_extent(r);
        let s = (px as f64 + 0.5) / size as f64 * 2.0 - 1.0;
        let t = 1.0 - (py as f64 + 0.5) / size as f64 * 2.0;
        let c = r as f64 / 2.0;
        std::array::from_fn(|a| c + h * (s * right[a] + t * up[a]))
    }
}

/// RGB image with interleaved channels in `[0, 1]`, row-major from the top.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub size: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn filled(size: usize, v: f32) -> Self {
        Self {
            size,
            pixels: vec![v; size * size * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.size + x) * 3 + c]
    }

    /// Planar `[3, H, W]` copy, the layout the encoder consumes.
    pub fn to_chw(&self) -> Vec<f32> {
        let n = self.size * self.size;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c];
            }
        }
        out
    }

    /// Box-filtered downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || !self.size.is_multiple_of(factor) {
            return Err(Error::Parameter(format!(
                "cannot downsample {} pixels by {factor}",
                self.size
            )));
        }
        let s = self.size / factor;
        let mut out = Image::filled(s, 0.0);
        let w = 1.0 / (factor * factor) as f32;
        for y in 0..self.size {
            for x in 0..self.size {
                for c in 0..3 {
                    out.pixels[((y / factor) * s + x / factor) * 3 + c] += w * self.get(x, y, c);
                }
            }
        }
        Ok(out)
    }

    /// 8-bit RGB PNG bytes.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.size as u32, self.size as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc
                .write_header()
                .map_err(|e| Error::format(0, format!("png header: {e}")))?;
            let data: Vec<u8> = self
                .pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            w.write_image_data(&data)
                .map_err(|e| Error::format(0, format!("png data: {e}")))?;
        }
        Ok(buf)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Image> {
        let dec = png::Decoder::new(Cursor::new(bytes));
        let mut reader = dec
            .read_info()
            .map_err(|e| Error::format(0, format!("png: {e}")))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::format(0, "png: image too large"))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::format(0, format!("png: {e}")))?;
        if info.width != info.height {
            return Err(Error::format(
                0,
                format!("png is {}×{}, expected square", info.width, info.height),
            ));
        }
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::format(0, "png must be 8-bit RGB"));
        }
        let pixels = buf[..info.buffer_size()]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        Ok(Image {
            size: info.width as usize,
            pixels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_png(&bytes)
    }
}

/// Distance along the ray `o + t·d` to the first occupied voxel, found by a
/// voxel traversal (Amanatides–Woo) through the lattice `[0, R]³`.
pub fn first_hit(grid: &VoxelGrid, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
    let r = grid.resolution() as f64;
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a] < 0.0 || o[a] > r {
                return None;
            }
        } else {
            let (u, v) = ((0.0 - o[a]) / d[a], (r - o[a]) / d[a]);
            t0 = t0.max(u.min(v));
            t1 = t1.min(u.max(v));
        }
    }
    if t0 > t1 {
        return None;
    }
    let ri = grid.resolution() as i64;
    let p: [f64; 3] = std::array::from_fn(|a| o[a] + t0 * d[a]);
    let mut cell: [i64; 3] = std::array::from_fn(|a| (p[a].floor() as i64).clamp(0, ri - 1));
    let step: [i64; 3] = std::array::from_fn(|a| if d[a] > 0.0 { 1 } else { -1 });
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if d[a].abs() >= 1e-12 {
            let boundary = if d[a] > 0.0 { cell[a] + 1 } else { cell[a] } as f64;
            t_max[a] = (boundary - o[a]) / d[a];
            t_delta[a] = 1.0 / d[a].abs();
        }
    }
    let mut t = t0;
    loop {
        if grid.get(cell[0] as usize, cell[1] as usize, cell[2] as usize) {
            return Some(t);
        }
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        t = t_max[a];
        if t > t1 {
            return None;
        }
        cell[a] += step[a];
        if cell[a] < 0 || cell[a] >= ri {
            return None;
        }
        t_max[a] += t_delta[a];
    }
}

/// Renders `grid` from `camera`. Surface intensity grows linearly with depth
/// across the lattice's bounding sphere.
pub fn render(grid: &VoxelGrid, camera: &Camera, size: usize) -> Image {
    let r = grid.resolution();
    let (_, _, fwd) = camera.basis();
    let radius = r as f64 * 3f64.sqrt() / 2.0;
    let mut img = Image::filled(size, BACKGROUND);
    for py in 0..size {
        for px in 0..size {
            let p = camera.pixel_point(r, size, px, py);
            let o: [f64; 3] = std::array::from_fn(|a| p[a] - radius * fwd[a]);
            if let Some(t) = first_hit(grid, o, fwd) {
                let depth = (t / (2.0 * radius)).clamp(0.0, 1.0);
                let v = (NEAR_SHADE + (FAR_SHADE - NEAR_SHADE) * depth) as f32;
                let i = (py * size + px) * 3;
                img.pixels[i..i + 3].fill(v);
            }
        }
    }
    img
}

/// Camera of view `view`; angles are drawn uniformly from the configured
/// ranges with a generator derived from `(seed, "view", view)`.
pub fn sample_camera(params: &RenderParams, seed: u64, view: usize) -> Camera {
    let mut rng = rng_for(seed, &["view", &view.to_string()]);
    let mut draw = |(lo, hi): (f64, f64), half_open: bool| {
        if hi <= lo {
            lo
        } else if half_open {
            rng.random_range(lo..hi)
        } else {
            rng.random_range(lo..=hi)
        }
    };
    Camera {
        azimuth: draw(params.azimuth_range, true),
        elevation: draw(params.elevation_range, false),
        depth_ratio: draw(params.depth_ratio_range, false),
    }
}

/// `v` views of `grid` with cameras from [`sample_camera`].
pub fn render_views(
    grid: &VoxelGrid,
    params: &RenderParams,
    v: usize,
    seed: u64,
) -> Result<Vec<(Camera, Image)>> {
    params.validate()?;
    if v == 0 {
        return Err(Error::Parameter("render_views needs v ≥ 1".into()));
    }
    Ok((0..v)
        .map(|i| {
            let cam = sample_camera(params, seed, i);
            let img = render(grid, &cam, params.image_size);
            (cam, img)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let mut img = Image::filled(5, 0.0);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = (i % 256) as f32 / 255.0;
        }
        let back = Image::from_png(&img.to_png().unwrap()).unwrap();
        assert_eq!(back, img);
        assert!(matches!(
            Image::from_png(b"nope"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn basis_is_orthonormal() {
        for (a, e) in [(0.0, 0.0), (37.0, 25.0), (300.0, 30.0)] {
            let (r, u, f) = Camera {
                azimuth: a,
                elevation: e,
                depth_ratio: 1.0,
            }
            .basis();
            let dot = |x: [f64; 3], y: [f64; 3]| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
            for (x, y) in [(r, u), (r, f), (u, f)] {
                assert!(dot(x, y).abs() < 1e-12);
            }
            for x in [r, u, f] {
                assert!((dot(x, x) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn downsample_averages_blocks() {
        let mut img = Image::filled(4, 0.0);
        img.pixels[0] = 1.0;
        let d = img.downsample(2).unwrap();
        assert_eq!(d.size, 2);
        assert!((d.get(0, 0, 0) - 0.25).abs() < 1e-7);
        assert!(img.downsample(3).is_err());
    }
}
