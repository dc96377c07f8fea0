use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One example: image `[3,H,W]` in `[0,1]`, mask `[1,H,W]` in `{0,1}`, and a
/// validity map that is 0 exactly on padding.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub valid: Tensor<f32>,
    pub id: String,
}

impl SegSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        if image.ndim() != 3 || image.dim(0) != 3 {
            return Err(Error::shape("sample image", image.shape(), &[3, 0, 0]));
        }
        let (h, w) = (image.dim(1), image.dim(2));
        if mask.shape() != [1, h, w] {
            return Err(Error::shape("sample mask", mask.shape(), &[1, h, w]));
        }
        Ok(SegSample {
            image,
            mask,
            valid: Tensor::full(&[1, h, w], 1.0),
            id: id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.image.dim(1)
    }

    pub fn width(&self) -> usize {
        self.image.dim(2)
    }

    /// Number of valid building pixels.
    pub fn building_pixels(&self) -> usize {
        self.mask
            .data()
            .iter()
            .zip(self.valid.data())
            .filter(|(&m, &v)| m > 0.5 && v > 0.5)
            .count()
    }

    fn map_planes(&self, f: impl Fn(&Tensor<f32>) -> Tensor<f32>) -> SegSample {
        SegSample {
            image: f(&self.image),
            mask: f(&self.mask),
            valid: f(&self.valid),
            id: self.id.clone(),
        }
    }
}

fn pad_plane(x: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let (c, h0, w0) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for i in 0..h0 {
            let src = &x.data()[(ch * h0 + i) * w0..][..w0];
            out.data_mut()[(ch * h + i) * w..][..w0].copy_from_slice(src);
        }
    }
    out
}

fn crop_plane(x: &Tensor<f32>, top: usize, left: usize, h: usize, w: usize) -> Tensor<f32> {
    let (c, h0, w0) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for i in 0..h {
            let src = &x.data()[(ch * h0 + top + i) * w0 + left..][..w];
            out.data_mut()[(ch * h + i) * w..][..w].copy_from_slice(src);
        }
    }
    out
}

/// Zero-pad bottom/right to `h x w`; the added pixels are marked invalid.
pub fn pad_to(sample: &SegSample, h: usize, w: usize) -> Result<SegSample> {
    if h < sample.height() || w < sample.width() {
        return Err(Error::Precondition(format!(
            "cannot pad {}x{} down to {h}x{w}",
            sample.height(),
            sample.width()
        )));
    }
    Ok(sample.map_planes(|p| pad_plane(p, h, w)))
}

/// Zero-pad bottom/right to the next multiple of `m` in each dimension.
pub fn pad_to_multiple(sample: &SegSample, m: usize) -> Result<SegSample> {
    if m == 0 {
        return Err(Error::Precondition("pad multiple must be >= 1".into()));
    }
    pad_to(sample, sample.height().div_ceil(m) * m, sample.width().div_ceil(m) * m)
}

/// Crop one `size x size` window, the same for image, mask and valid map.
pub fn random_crop(sample: &SegSample, size: usize, rng: &mut impl Rng) -> Result<SegSample> {
    let (h, w) = (sample.height(), sample.width());
    if size == 0 || size > h || size > w {
        return Err(Error::Precondition(format!("crop {size} does not fit a {h}x{w} sample")));
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    Ok(crop_window(sample, top, left, size, size))
}

pub fn crop_window(sample: &SegSample, top: usize, left: usize, h: usize, w: usize) -> SegSample {
    sample.map_planes(|p| crop_plane(p, top, left, h, w))
}

/// Horizontal and vertical flips, each with probability `p`.
pub fn flip_augment(sample: &SegSample, rng: &mut impl Rng, p: f64) -> SegSample {
    let hflip = rng.random_bool(p);
    let vflip = rng.random_bool(p);
    let mut out = sample.clone();
    if hflip {
        out = out.map_planes(|x| x.flip(2));
    }
    if vflip {
        out = out.map_planes(|x| x.flip(1));
    }
    out
}

/// Stack equally sized samples into `[B,3,H,W]`, `[B,1,H,W]`, `[B,1,H,W]`.
pub fn collate(samples: &[SegSample]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let stack = |f: fn(&SegSample) -> &Tensor<f32>| -> Result<Tensor<f32>> {
        let items: Vec<Tensor<f32>> = samples.iter().map(|s| f(s).clone()).collect();
        Tensor::stack(&items)
    };
    Ok((stack(|s| &s.image)?, stack(|s| &s.mask)?, stack(|s| &s.valid)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ConfusionCounts;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize) -> SegSample {
        let image = Tensor::from_fn(&[3, h, w], |i| (i % 251) as f32 / 251.0);
        let mask = Tensor::from_fn(&[1, h, w], |i| ((i * 7) % 5 == 0) as u8 as f32);
        SegSample::new("s", image, mask).unwrap()
    }

    #[test]
    fn padding_arithmetic() {
        let p = pad_to_multiple(&sample(100, 70), 32).unwrap();
        assert_eq!((p.height(), p.width()), (128, 96));
        assert_eq!(p.valid.sum(), 7000.0);
        let s = sample(64, 64);
        assert_eq!(pad_to_multiple(&s, 32).unwrap(), s);
        let p = pad_to(&sample(15, 15), 24, 24).unwrap();
        assert_eq!(p.image.at(&[2, 14, 14]), sample(15, 15).image.at(&[2, 14, 14]));
        assert_eq!(p.image.at(&[0, 20, 3]), 0.0);
    }

    #[test]
    fn crop_is_identity_at_full_size_and_deterministic() {
        let s = sample(20, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_crop(&s, 21, &mut rng).is_err());
        let s = sample(20, 20);
        assert_eq!(random_crop(&s, 20, &mut rng).unwrap(), s);
        let a = random_crop(&s, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = random_crop(&s, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flips_are_involutions_and_preserve_counts() {
        let s = sample(9, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(flip_augment(&s, &mut rng, 0.0), s);
        let both = flip_augment(&s, &mut rng, 1.0);
        assert_eq!(both.building_pixels(), s.building_pixels());
        assert_eq!(flip_augment(&both, &mut rng, 1.0), s);
        let pred = s.mask.map(|v| 1.0 - v * 0.3);
        let c0 = ConfusionCounts::from_maps(&pred, &s.mask, &s.valid, 0.5).unwrap();
        let c1 = ConfusionCounts::from_maps(&pred.flip(2).flip(1), &both.mask, &both.valid, 0.5).unwrap();
        assert_eq!(c0, c1);
    }

    #[test]
    fn mismatched_mask_is_rejected() {
        let r = SegSample::new("x", Tensor::zeros(&[3, 4, 4]), Tensor::zeros(&[1, 4, 5]));
        assert!(r.is_err());
    }
}
