use crate::error::{Error, Result};

/// A single channel-major `(channels, height, width)` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Contract(format!(
                "tensor data has {} values, shape ({channels}, {height}, {width}) needs {}",
                data.len(),
                channels * height * width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    /// Per-channel mean over the spatial dimensions.
    pub fn spatial_mean(&self) -> Vec<f32> {
        let n = self.plane_len() as f64;
        (0..self.channels)
            .map(|c| (self.plane(c).iter().map(|&v| v as f64).sum::<f64>() / n) as f32)
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Bilinear resampling of a `(x, y, w, h)` window of `src` onto an
/// `out_h × out_w` grid, half-pixel centred. Samples outside the source are
/// clamped to the border.
pub fn resize_bilinear(
    src: &Tensor3,
    window: (f32, f32, f32, f32),
    out_h: usize,
    out_w: usize,
) -> Tensor3 {
    let (wx, wy, ww, wh) = window;
    if wx == 0.0
        && wy == 0.0
        && ww == src.width as f32
        && wh == src.height as f32
        && out_h == src.height
        && out_w == src.width
    {
        return src.clone();
    }
    let sx = ww / out_w as f32;
    let sy = wh / out_h as f32;
    let max_x = (src.width - 1) as f32;
    let max_y = (src.height - 1) as f32;
    let taps = |pos: f32, max: f32| {
        let p = pos.clamp(0.0, max);
        let lo = p.floor();
        let frac = p - lo;
        let lo = lo as usize;
        let hi = (lo + 1).min(max as usize);
        (lo, hi, frac)
    };
    let xs: Vec<_> = (0..out_w)
        .map(|x| taps(wx + (x as f32 + 0.5) * sx - 0.5, max_x))
        .collect();
    let ys: Vec<_> = (0..out_h)
        .map(|y| taps(wy + (y as f32 + 0.5) * sy - 0.5, max_y))
        .collect();
    let mut out = Tensor3::zeros(src.channels, out_h, out_w);
    for c in 0..src.channels {
        let plane = src.plane(c);
        let dst = out.plane_mut(c);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &plane[y0 * src.width..(y0 + 1) * src.width];
            let r1 = &plane[y1 * src.width..(y1 + 1) * src.width];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bottom = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spatial_mean_is_plane_average() {
        let t = Tensor3::from_vec(2, 1, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        assert_eq!(t.spatial_mean(), vec![2.0, 1.0]);
    }

    #[test]
    fn resize_same_size_is_identity() {
        let t = Tensor3::from_vec(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(resize_bilinear(&t, (0.0, 0.0, 2.0, 2.0), 2, 2), t);
    }

    #[test]
    fn upsampling_constant_stays_constant() {
        let t = Tensor3::filled(1, 3, 3, 0.25);
        let up = resize_bilinear(&t, (0.0, 0.0, 3.0, 3.0), 7, 5);
        assert!(up.data.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor3::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
    }
}
