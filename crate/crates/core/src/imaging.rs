//! Planar float images and the filtering primitives the metrics, segmentation
//! and distortions are built from.
//!
//! Pixel data is stored channel-major: all of channel 0 row by row, then
//! channel 1, and so on. Values are nominally in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl PlanarImage {
    /// Builds an image from channel-major data, checking shape and finiteness.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Size(format!(
                "image must be non-empty, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Parameter(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!(
                "non-finite pixel value at index {i}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    /// Builds an image by evaluating `f(channel, row, col)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for r in 0..height {
                for col in 0..width {
                    data.push(f(c, r, col));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    // Internal constructor for results of operations that preserve the invariants.
    fn from_parts(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f64) {
        self.data[(channel * self.height + row) * self.width + col] = value;
    }

    /// Samples of one channel, row-major.
    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn plane_mut(&mut self, channel: usize) -> &mut [f64] {
        let n = self.pixel_count();
        &mut self.data[channel * n..(channel + 1) * n]
    }

    pub fn channel(&self, channel: usize) -> PlanarImage {
        Self::from_parts(self.height, self.width, 1, self.plane(channel).to_vec())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> PlanarImage {
        Self::from_parts(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn clamp01(&self) -> PlanarImage {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    fn same_shape(&self, other: &PlanarImage) -> Result<()> {
        if self.height != other.height
            || self.width != other.width
            || self.channels != other.channels
        {
            return Err(Error::Dimension(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        Ok(())
    }

    pub fn sub(&self, other: &PlanarImage) -> Result<PlanarImage> {
        self.same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self::from_parts(
            self.height,
            self.width,
            self.channels,
            data,
        ))
    }

    pub fn add(&self, other: &PlanarImage) -> Result<PlanarImage> {
        self.same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self::from_parts(
            self.height,
            self.width,
            self.channels,
            data,
        ))
    }

    /// Pointwise product, used for second-order local statistics.
    pub fn mul(&self, other: &PlanarImage) -> Result<PlanarImage> {
        self.same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Self::from_parts(
            self.height,
            self.width,
            self.channels,
            data,
        ))
    }

    pub fn max_abs_diff(&self, other: &PlanarImage) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Rec.601 luminance. Single-channel input is returned unchanged.
pub fn to_grayscale(img: &PlanarImage) -> PlanarImage {
    if img.channels == 1 {
        return img.clone();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
        .collect();
    PlanarImage::from_parts(img.height, img.width, 1, data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Reflect about the edge sample without repeating it: `-1 -> 1`.
    #[default]
    Mirror,
    /// Clamp to the nearest edge sample.
    Replicate,
}

impl Boundary {
    #[inline]
    fn index(self, i: isize, n: usize) -> usize {
        match self {
            Boundary::Replicate => i.clamp(0, n as isize - 1) as usize,
            Boundary::Mirror => {
                if n == 1 {
                    return 0;
                }
                let period = 2 * (n as isize - 1);
                let m = i.rem_euclid(period);
                if m < n as isize {
                    m as usize
                } else {
                    (period - m) as usize
                }
            }
        }
    }
}

/// A 2-D filter with odd side lengths, optionally stored as a separable pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2D {
    rows: usize,
    cols: usize,
    taps: Vec<f64>,
    normalized: bool,
    // (vertical, horizontal) factors whose outer product equals `taps`.
    factors: Option<(Vec<f64>, Vec<f64>)>,
}

impl Kernel2D {
    /// A general (non-separable) kernel from row-major taps.
    pub fn new(rows: usize, cols: usize, taps: Vec<f64>) -> Result<Self> {
        if rows.is_multiple_of(2) || cols.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "kernel sides must be odd, got {rows}x{cols}"
            )));
        }
        if taps.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "expected {} taps, got {}",
                rows * cols,
                taps.len()
            )));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::Parameter("kernel taps must be finite".into()));
        }
        let normalized = (taps.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        Ok(Self {
            rows,
            cols,
            taps,
            normalized,
            factors: None,
        })
    }

    /// Outer product of a vertical and a horizontal 1-D filter.
    pub fn separable(vertical: Vec<f64>, horizontal: Vec<f64>) -> Result<Self> {
        let taps = vertical
            .iter()
            .flat_map(|v| horizontal.iter().map(move |h| v * h))
            .collect();
        let mut k = Self::new(vertical.len(), horizontal.len(), taps)?;
        k.factors = Some((vertical, horizontal));
        Ok(k)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn tap(&self, row: usize, col: usize) -> f64 {
        self.taps[row * self.cols + col]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn is_separable(&self) -> bool {
        self.factors.is_some()
    }

    /// Multiplies every tap by `factor`; normalization is re-evaluated.
    pub fn scaled(&self, factor: f64) -> Kernel2D {
        let taps: Vec<f64> = self.taps.iter().map(|t| t * factor).collect();
        let normalized = (taps.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        let factors = self.factors.as_ref().map(|(v, h)| {
            let s = factor.abs().sqrt();
            let sign = factor.signum();
            (
                v.iter().map(|x| x * s * sign).collect(),
                h.iter().map(|x| x * s).collect(),
            )
        });
        Kernel2D {
            rows: self.rows,
            cols: self.cols,
            taps,
            normalized,
            factors,
        }
    }
}

/// Sampled, normalized separable Gaussian with side `2 * radius + 1`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Kernel2D> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    if radius == 0 {
        return Err(Error::Parameter(
            "gaussian radius must be at least 1".into(),
        ));
    }
    let r = radius as isize;
    let mut g: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= sum);
    Kernel2D::separable(g.clone(), g)
}

/// The 5-tap binomial `[1, 4, 6, 4, 1] / 16` in both directions.
pub fn binomial5() -> Kernel2D {
    let b = vec![1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    Kernel2D::separable(b.clone(), b).expect("binomial taps are valid")
}

/// Normalized `side x side` box filter.
pub fn box_kernel(side: usize) -> Result<Kernel2D> {
    if side == 0 || side.is_multiple_of(2) {
        return Err(Error::Parameter(format!(
            "box side must be odd, got {side}"
        )));
    }
    let b = vec![1.0 / side as f64; side];
    Kernel2D::separable(b.clone(), b)
}

/// Same-size convolution of every channel with `kernel`.
pub fn convolve_same(
    img: &PlanarImage,
    kernel: &Kernel2D,
    boundary: Boundary,
) -> Result<PlanarImage> {
    let (h, w) = img.dims();
    if kernel.rows > 2 * h || kernel.cols > 2 * w {
        return Err(Error::Size(format!(
            "{}x{} kernel is larger than twice the {h}x{w} image",
            kernel.rows, kernel.cols
        )));
    }
    let mut out = Vec::with_capacity(img.data.len());
    for c in 0..img.channels {
        let plane = img.plane(c);
        let filtered = match &kernel.factors {
            Some((vertical, horizontal)) => {
                let tmp = convolve_rows(plane, h, w, horizontal, boundary);
                convolve_cols(&tmp, h, w, vertical, boundary)
            }
            None => convolve_plane_direct(plane, h, w, kernel, boundary),
        };
        out.extend(filtered);
    }
    Ok(PlanarImage::from_parts(h, w, img.channels, out))
}

fn convolve_rows(src: &[f64], h: usize, w: usize, taps: &[f64], boundary: Boundary) -> Vec<f64> {
    let r = taps.len() / 2;
    let mut out = vec![0.0; h * w];
    let mut padded = vec![0.0; w + 2 * r];
    let flipped: Vec<f64> = taps.iter().rev().copied().collect();
    for row in 0..h {
        let line = &src[row * w..(row + 1) * w];
        for (j, p) in padded.iter_mut().enumerate() {
            *p = line[boundary.index(j as isize - r as isize, w)];
        }
        let dst = &mut out[row * w..(row + 1) * w];
        for (col, d) in dst.iter_mut().enumerate() {
            *d = padded[col..col + taps.len()]
                .iter()
                .zip(&flipped)
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    out
}

fn convolve_cols(src: &[f64], h: usize, w: usize, taps: &[f64], boundary: Boundary) -> Vec<f64> {
    let r = taps.len() / 2;
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        let dst = &mut out[row * w..(row + 1) * w];
        for (t, &tap) in taps.iter().enumerate() {
            // out[row] += k[t] * src[row + r - t]
            let sr = boundary.index(row as isize + r as isize - t as isize, h);
            let line = &src[sr * w..(sr + 1) * w];
            for (d, s) in dst.iter_mut().zip(line) {
                *d += tap * s;
            }
        }
    }
    out
}

fn convolve_plane_direct(
    src: &[f64],
    h: usize,
    w: usize,
    k: &Kernel2D,
    boundary: Boundary,
) -> Vec<f64> {
    let (ry, rx) = ((k.rows / 2) as isize, (k.cols / 2) as isize);
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let mut acc = 0.0;
            for i in 0..k.rows {
                let sr = boundary.index(row as isize + ry - i as isize, h);
                for j in 0..k.cols {
                    let sc = boundary.index(col as isize + rx - j as isize, w);
                    acc += k.tap(i, j) * src[sr * w + sc];
                }
            }
            out[row * w + col] = acc;
        }
    }
    out
}

/// Low-pass filter, then keep even rows and columns.
pub fn downsample2(img: &PlanarImage, lowpass: &Kernel2D) -> Result<PlanarImage> {
    let (h, w) = img.dims();
    if h < 2 || w < 2 {
        return Err(Error::Size(format!("cannot downsample a {h}x{w} image")));
    }
    let filtered = convolve_same(img, lowpass, Boundary::Mirror)?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(oh * ow * img.channels);
    for c in 0..img.channels {
        let plane = filtered.plane(c);
        for r in (0..h).step_by(2) {
            out.extend(plane[r * w..(r + 1) * w].iter().step_by(2));
        }
    }
    Ok(PlanarImage::from_parts(oh, ow, img.channels, out))
}

/// Zero-interleave up to the target size, then low-pass with gain 4.
pub fn upsample2(
    img: &PlanarImage,
    target_h: usize,
    target_w: usize,
    lowpass: &Kernel2D,
) -> Result<PlanarImage> {
    let (h, w) = img.dims();
    let fits = |t: usize, d: usize| t == 2 * d || t + 1 == 2 * d;
    if !fits(target_h, h) || !fits(target_w, w) {
        return Err(Error::Size(format!(
            "cannot upsample {h}x{w} to {target_h}x{target_w}"
        )));
    }
    let mut up = vec![0.0; target_h * target_w * img.channels];
    for c in 0..img.channels {
        let plane = img.plane(c);
        let dst = &mut up[c * target_h * target_w..(c + 1) * target_h * target_w];
        for r in 0..h {
            for col in 0..w {
                dst[2 * r * target_w + 2 * col] = plane[r * w + col];
            }
        }
    }
    let up = PlanarImage::from_parts(target_h, target_w, img.channels, up);
    convolve_same(&up, &lowpass.scaled(4.0), Boundary::Mirror)
}

/// Band-pass levels followed by the low-pass residual. `stages == 1` returns
/// the input itself.
pub fn laplacian_pyramid(
    img: &PlanarImage,
    stages: usize,
    lowpass: &Kernel2D,
) -> Result<Vec<PlanarImage>> {
    if stages == 0 {
        return Err(Error::Parameter("pyramid needs at least one stage".into()));
    }
    check_pyramid_fits(img.height, img.width, stages, lowpass)?;
    let mut bands = Vec::with_capacity(stages);
    let mut current = img.clone();
    for _ in 1..stages {
        let down = downsample2(&current, lowpass)?;
        let up = upsample2(&down, current.height, current.width, lowpass)?;
        bands.push(current.sub(&up)?);
        current = down;
    }
    bands.push(current);
    Ok(bands)
}

fn check_pyramid_fits(h: usize, w: usize, stages: usize, lowpass: &Kernel2D) -> Result<()> {
    let (mut h_l, mut w_l) = (h, w);
    let min_side = lowpass.rows.max(lowpass.cols).div_ceil(2).max(2);
    for level in 1..stages {
        if h_l < min_side || w_l < min_side {
            return Err(Error::Size(format!(
                "{h}x{w} image is too small for a {stages}-stage pyramid (level {level} is {h_l}x{w_l})"
            )));
        }
        h_l = h_l.div_ceil(2);
        w_l = w_l.div_ceil(2);
    }
    Ok(())
}

/// Inverse of [`laplacian_pyramid`]: upsample-and-add from the residual.
pub fn reconstruct_laplacian(bands: &[PlanarImage], lowpass: &Kernel2D) -> Result<PlanarImage> {
    let (last, details) = bands
        .split_last()
        .ok_or_else(|| Error::Parameter("empty pyramid".into()))?;
    let mut current = last.clone();
    for band in details.iter().rev() {
        let up = upsample2(&current, band.height, band.width, lowpass)?;
        current = band.add(&up)?;
    }
    Ok(current)
}

fn from_dynamic(decoded: DynamicImage) -> Result<PlanarImage> {
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, raw): (usize, Vec<u8>) = match decoded {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        DynamicImage::ImageLumaA8(buf) => {
            (1, buf.into_raw().chunks_exact(2).map(|p| p[0]).collect())
        }
        DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        DynamicImage::ImageRgba8(buf) => (
            3,
            buf.into_raw()
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
        ),
        other => {
            return Err(Error::Format(format!(
                "unsupported pixel layout {:?}; only 8-bit gray or RGB is accepted",
                other.color()
            )))
        }
    };
    let n = w * h;
    let mut data = vec![0.0; n * channels];
    for (i, px) in raw.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * n + i] = f64::from(v) / 255.0;
        }
    }
    PlanarImage::new(h, w, channels, data)
}

fn decode_bytes(bytes: &[u8], allowed: &[ImageFormat]) -> Result<PlanarImage> {
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::Format(e.to_string()))?;
    match reader.format() {
        Some(f) if allowed.contains(&f) => {}
        Some(f) => return Err(Error::Format(format!("{f:?} input is not supported"))),
        None => return Err(Error::Format("unrecognised image format".into())),
    }
    let decoded = reader.decode().map_err(|e| Error::Format(e.to_string()))?;
    from_dynamic(decoded)
}

/// Reads an 8-bit PNG or binary PPM/PGM file, scaling samples to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<PlanarImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bytes(&bytes, &[ImageFormat::Png, ImageFormat::Pnm])
}

/// Decodes PNG bytes, as produced by [`encode_png`].
pub fn decode_png(bytes: &[u8]) -> Result<PlanarImage> {
    decode_bytes(bytes, &[ImageFormat::Png])
}

pub(crate) fn decode_jpeg(bytes: &[u8]) -> Result<PlanarImage> {
    decode_bytes(bytes, &[ImageFormat::Jpeg])
}

/// Interleaved 8-bit samples after clamping to `[0, 1]`.
pub fn to_u8_interleaved(img: &PlanarImage) -> Vec<u8> {
    let n = img.pixel_count();
    let mut out = vec![0u8; n * img.channels];
    for c in 0..img.channels {
        for (i, v) in img.plane(c).iter().enumerate() {
            out[i * img.channels + c] = quantize(*v);
        }
    }
    out
}

#[inline]
pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit PNG encoding of the clamped image.
pub fn encode_png(img: &PlanarImage) -> Result<Vec<u8>> {
    let raw = to_u8_interleaved(img);
    let (w, h) = (img.width as u32, img.height as u32);
    let dynamic = if img.channels == 1 {
        DynamicImage::ImageLuma8(
            image::GrayImage::from_raw(w, h, raw).expect("buffer sized to image"),
        )
    } else {
        DynamicImage::ImageRgb8(
            image::RgbImage::from_raw(w, h, raw).expect("buffer sized to image"),
        )
    };
    let mut out = Cursor::new(Vec::new());
    dynamic
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn save_image(img: &PlanarImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> PlanarImage {
        PlanarImage::from_fn(h, w, 1, |_, r, c| (r * w + c) as f64).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            PlanarImage::new(0, 2, 1, vec![]),
            Err(Error::Size(_))
        ));
        assert!(matches!(
            PlanarImage::new(2, 2, 2, vec![0.0; 8]),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            PlanarImage::new(2, 2, 1, vec![0.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(PlanarImage::new(1, 2, 1, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn grayscale_weights() {
        let white = PlanarImage::filled(2, 2, 3, 1.0).unwrap();
        assert!(to_grayscale(&white)
            .data()
            .iter()
            .all(|v| (v - 1.0).abs() < 1e-15));
        let red = PlanarImage::from_fn(1, 1, 3, |c, _, _| if c == 0 { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(to_grayscale(&red).data(), &[0.299]);
        let gray = ramp(3, 3);
        assert_eq!(to_grayscale(&gray), gray);
    }

    #[test]
    fn mirror_index_does_not_repeat_edge() {
        let b = Boundary::Mirror;
        assert_eq!(b.index(-1, 5), 1);
        assert_eq!(b.index(-2, 5), 2);
        assert_eq!(b.index(5, 5), 3);
        assert_eq!(b.index(6, 5), 2);
        assert_eq!(b.index(-3, 2), 1);
        assert_eq!(b.index(7, 1), 0);
        assert_eq!(Boundary::Replicate.index(-4, 5), 0);
        assert_eq!(Boundary::Replicate.index(9, 5), 4);
    }

    #[test]
    fn identity_kernel() {
        let img = ramp(4, 5);
        let id = Kernel2D::new(1, 1, vec![1.0]).unwrap();
        assert_eq!(convolve_same(&img, &id, Boundary::Mirror).unwrap(), img);
    }

    #[test]
    fn box_on_ramp_matches_hand_unrolled_sum() {
        // 0 1 2 / 3 4 5 / 6 7 8 under mirror reflection.
        let img = ramp(3, 3);
        let k = Kernel2D::new(3, 3, vec![1.0 / 9.0; 9]).unwrap();
        let out = convolve_same(&img, &k, Boundary::Mirror).unwrap();
        // corner (0,0): rows {1,0,1}, cols {1,0,1}
        let corner = (4.0 + 3.0 + 4.0 + 1.0 + 0.0 + 1.0 + 4.0 + 3.0 + 4.0) / 9.0;
        assert!((out.get(0, 0, 0) - corner).abs() < 1e-12);
        assert!((out.get(0, 1, 1) - 4.0).abs() < 1e-12);
        // edge (0,1): rows {1,0,1}, cols {0,1,2}
        let edge = (3.0 + 4.0 + 5.0 + 0.0 + 1.0 + 2.0 + 3.0 + 4.0 + 5.0) / 9.0;
        assert!((out.get(0, 0, 1) - edge).abs() < 1e-12);
        let sep = convolve_same(&img, &box_kernel(3).unwrap(), Boundary::Mirror).unwrap();
        assert!(sep.max_abs_diff(&out).unwrap() < 1e-12);
    }

    #[test]
    fn kernel_too_large() {
        let img = ramp(2, 2);
        let k = box_kernel(5).unwrap();
        assert!(matches!(
            convolve_same(&img, &k, Boundary::Mirror),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn kernel_sides_must_be_odd() {
        assert!(Kernel2D::new(2, 1, vec![0.5, 0.5]).is_err());
        assert!(box_kernel(4).is_err());
    }

    #[test]
    fn gaussian_window_shape() {
        let k = gaussian_kernel(1.5, 5).unwrap();
        assert_eq!((k.rows(), k.cols()), (11, 11));
        assert!(k.is_normalized());
        assert!((k.taps().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let center = k.tap(5, 5);
        assert!(k.taps().iter().all(|&t| t <= center));
        // direct evaluation of exp(-(i^2 + j^2) / 2 sigma^2), normalized
        let raw: Vec<f64> = (-5i32..=5)
            .flat_map(|i| (-5i32..=5).map(move |j| (-((i * i + j * j) as f64) / 4.5).exp()))
            .collect();
        let total: f64 = raw.iter().sum();
        for (a, b) in k.taps().iter().zip(&raw) {
            assert!((a - b / total).abs() < 1e-15);
        }
        assert!(gaussian_kernel(0.0, 2).is_err());
        assert!(gaussian_kernel(1.0, 0).is_err());
    }

    #[test]
    fn downsample_constant_and_shape() {
        let img = PlanarImage::filled(4, 4, 1, 0.3).unwrap();
        let d = downsample2(&img, &binomial5()).unwrap();
        assert_eq!(d.dims(), (2, 2));
        assert!(d.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        let tiny = PlanarImage::filled(1, 4, 1, 0.3).unwrap();
        assert!(matches!(
            downsample2(&tiny, &binomial5()),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn downsample_alternating_columns_matches_oracle() {
        let (h, w) = (6, 7);
        let img = PlanarImage::from_fn(h, w, 1, |_, _, c| (c % 2) as f64).unwrap();
        let out = downsample2(&img, &binomial5()).unwrap();
        let b = [1.0, 4.0, 6.0, 4.0, 1.0];
        let mirror = |i: isize, n: isize| {
            let p = 2 * (n - 1);
            let m = i.rem_euclid(p);
            if m < n {
                m
            } else {
                p - m
            }
        };
        for (orow, r) in (0..h).step_by(2).enumerate() {
            for (ocol, c) in (0..w).step_by(2).enumerate() {
                let mut acc = 0.0;
                for i in 0..5 {
                    for j in 0..5 {
                        let sr = mirror(r as isize + 2 - i as isize, h as isize) as usize;
                        let sc = mirror(c as isize + 2 - j as isize, w as isize) as usize;
                        acc += b[i] * b[j] / 256.0 * img.get(0, sr, sc);
                    }
                }
                assert!((out.get(0, orow, ocol) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_shapes_and_dc() {
        let zero = PlanarImage::filled(2, 2, 1, 0.0).unwrap();
        let up = upsample2(&zero, 4, 4, &binomial5()).unwrap();
        assert_eq!(up.dims(), (4, 4));
        assert!(up.data().iter().all(|&v| v == 0.0));
        let c = PlanarImage::filled(8, 8, 1, 0.6).unwrap();
        let up = upsample2(&c, 16, 16, &binomial5()).unwrap();
        for r in 2..14 {
            for col in 2..14 {
                assert!((up.get(0, r, col) - 0.6).abs() < 1e-12);
            }
        }
        assert!(upsample2(&c, 12, 16, &binomial5()).is_err());
        assert!(upsample2(&c, 15, 15, &binomial5()).is_ok());
    }

    #[test]
    fn pyramid_degenerate_and_constant() {
        let img = ramp(8, 8);
        let one = laplacian_pyramid(&img, 1, &binomial5()).unwrap();
        assert_eq!(one, vec![img]);
        let c = PlanarImage::filled(32, 32, 1, 0.4).unwrap();
        let bands = laplacian_pyramid(&c, 4, &binomial5()).unwrap();
        assert_eq!(bands.len(), 4);
        for band in &bands[..3] {
            assert!(band.data().iter().all(|v| v.abs() < 1e-12));
        }
        assert!(bands[3].data().iter().all(|v| (v - 0.4).abs() < 1e-12));
        assert!(matches!(
            laplacian_pyramid(&c, 8, &binomial5()),
            Err(Error::Size(_))
        ));
        assert!(laplacian_pyramid(&c, 0, &binomial5()).is_err());
    }

    #[test]
    fn png_round_trip_extremes() {
        let dir = tempfile::tempdir().unwrap();
        for v in [0.0, 1.0] {
            let img = PlanarImage::filled(3, 5, 3, v).unwrap();
            let p = dir.path().join("x.png");
            save_image(&img, &p).unwrap();
            assert_eq!(load_image(&p).unwrap(), img);
        }
    }

    #[test]
    fn load_ppm_and_gray_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ppm");
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([255u8; 12]);
        std::fs::write(&p, &bytes).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.channels(), 3);
        assert!(img.data().iter().all(|&v| v == 1.0));

        let gray = image::GrayImage::from_raw(1, 1, vec![128]).unwrap();
        let p = dir.path().join("g.png");
        gray.save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.channels(), 1);
        assert!((img.data()[0] - 128.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
        let p = dir.path().join("t.ppm");
        std::fs::write(&p, b"P6\n4 4\n255\n\x01\x02").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format(_))));
        let p = dir.path().join("junk.png");
        std::fs::write(&p, b"not an image at all").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format(_))));
        let p16 = dir.path().join("deep.png");
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(1, 1, vec![1000u16])
            .unwrap()
            .save(&p16)
            .unwrap();
        assert!(matches!(load_image(&p16), Err(Error::Format(_))));
    }

    #[test]
    fn save_to_unwritable_path() {
        let img = PlanarImage::filled(2, 2, 1, 0.5).unwrap();
        let err = save_image(&img, "/nonexistent-dir/for/sure/x.png").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
