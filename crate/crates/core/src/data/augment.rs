use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Zero padding, random square crop and random horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub pad: usize,
    pub crop: usize,
    pub flip: bool,
}

impl Augment {
    /// Pad 4, crop 32, flip: the residual-network recipe.
    pub const RESNET: Augment = Augment {
        pad: 4,
        crop: 32,
        flip: true,
    };
    /// Random 28x28 crops of unpadded images with flips.
    pub const NIN: Augment = Augment {
        pad: 0,
        crop: 28,
        flip: true,
    };
}

/// One view of one image: top-left corner in padded coordinates and whether to mirror it.
pub type CropSpec = (usize, usize, bool);

/// Extracts one `crop x crop` view per image from the zero-padded batch.
pub fn crop_flip(batch: &Tensor, pad: usize, crop: usize, views: &[CropSpec]) -> Result<Tensor> {
    let (n, c, h, w) = batch.nchw()?;
    if views.len() != n {
        return Err(Error::invalid(format!(
            "{} views for {n} images",
            views.len()
        )));
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    if crop == 0 || crop > ph || crop > pw {
        return Err(Error::invalid(format!(
            "crop {crop} does not fit the padded {ph}x{pw} image"
        )));
    }
    let src = batch.data();
    let mut out = vec![0.0; n * c * crop * crop];
    for (i, &(oy, ox, flip)) in views.iter().enumerate() {
        if oy + crop > ph || ox + crop > pw {
            return Err(Error::invalid(format!(
                "offset ({oy}, {ox}) leaves the padded image"
            )));
        }
        for ch in 0..c {
            let plane = &src[(i * c + ch) * h * w..][..h * w];
            let dst = &mut out[(i * c + ch) * crop * crop..][..crop * crop];
            for y in 0..crop {
                let sy = (oy + y).wrapping_sub(pad);
                if sy >= h {
                    continue;
                }
                for x in 0..crop {
                    let px = if flip { crop - 1 - x } else { x };
                    let sx = (ox + px).wrapping_sub(pad);
                    if sx < w {
                        dst[y * crop + x] = plane[sy * w + sx];
                    }
                }
            }
        }
    }
    Tensor::new([n, c, crop, crop], out)
}

/// Random view per image; the stream draws `(row, col, flip)` for each image in order.
pub fn augment(batch: &Tensor, aug: &Augment, rng: &mut Rng) -> Result<Tensor> {
    let (n, _, h, w) = batch.nchw()?;
    let (ph, pw) = (h + 2 * aug.pad, w + 2 * aug.pad);
    if aug.crop == 0 || aug.crop > ph || aug.crop > pw {
        return Err(Error::invalid(format!(
            "crop {} does not fit the padded {ph}x{pw} image",
            aug.crop
        )));
    }
    let views: Vec<CropSpec> = (0..n)
        .map(|_| {
            let oy = rng.below(ph - aug.crop + 1);
            let ox = rng.below(pw - aug.crop + 1);
            let flip = aug.flip && rng.bernoulli(0.5);
            (oy, ox, flip)
        })
        .collect();
    crop_flip(batch, aug.pad, aug.crop, &views)
}

/// Central `crop x crop` window (single-view testing).
pub fn center_crop(batch: &Tensor, crop: usize) -> Result<Tensor> {
    let (n, _, h, w) = batch.nchw()?;
    if crop > h || crop > w {
        return Err(Error::invalid(format!(
            "crop {crop} larger than {h}x{w} image"
        )));
    }
    if crop == h && crop == w {
        return Ok(batch.clone());
    }
    let view = ((h - crop) / 2, (w - crop) / 2, false);
    crop_flip(batch, 0, crop, &vec![view; n])
}
