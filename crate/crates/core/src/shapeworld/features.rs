use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hexcone RGB→HSV. Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`;
/// greys get hue 0.
pub fn rgb_to_hsv(rgb: [u8; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (h % 360.0, s, v)
}

/// Joint HSV histogram quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HsvBins {
    pub hue: usize,
    pub saturation: usize,
    pub value: usize,
}

impl Default for HsvBins {
    fn default() -> Self {
        Self {
            hue: 10,
            saturation: 6,
            value: 3,
        }
    }
}

impl HsvBins {
    pub fn len(&self) -> usize {
        self.hue * self.saturation * self.value
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature length per cell: histogram plus mean RGB.
    pub fn feature_dim(&self) -> usize {
        self.len() + 3
    }

    /// Flat bin index, hue-major then saturation then value.
    pub fn bin(&self, (h, s, v): (f64, f64, f64)) -> usize {
        let q = |x: f64, n: usize| ((x * n as f64) as usize).min(n - 1);
        let hb = q(h / 360.0, self.hue);
        let sb = q(s, self.saturation);
        let vb = q(v, self.value);
        (hb * self.saturation + sb) * self.value + vb
    }
}

/// Per-cell descriptor on an `n`×`n` grid: normalized joint HSV histogram
/// followed by mean R, G, B in `[0, 1]`. Returns `[D, n, n]`.
pub fn cell_features(img: &RgbImage, n: usize, bins: HsvBins) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    if n == 0 || bins.is_empty() || w == 0 || w % n != 0 || h % n != 0 {
        return Err(Error::Input(format!(
            "image {w}x{h} does not divide into a {n}x{n} grid"
        )));
    }
    let (cw, ch) = (w / n, h / n);
    let d = bins.feature_dim();
    let hist_len = bins.len();
    let plane = n * n;
    let mut out = vec![0.0; d * plane];
    let pixels = (cw * ch) as f64;
    for row in 0..n {
        for col in 0..n {
            let cell = row * n + col;
            let mut hist = vec![0usize; hist_len];
            let mut sums = [0u64; 3];
            for y in row * ch..(row + 1) * ch {
                for x in col * cw..(col + 1) * cw {
                    let p = img.get_pixel(x as u32, y as u32).0;
                    hist[bins.bin(rgb_to_hsv(p))] += 1;
                    for k in 0..3 {
                        sums[k] += p[k] as u64;
                    }
                }
            }
            for (b, &count) in hist.iter().enumerate() {
                out[b * plane + cell] = count as f64 / pixels;
            }
            for k in 0..3 {
                out[(hist_len + k) * plane + cell] = sums[k] as f64 / (255.0 * pixels);
            }
        }
    }
    Tensor::new(&[d, n, n], out)
}
