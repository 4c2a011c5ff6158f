//! Single-image completion shared by the `complete` command and the service.

use image::{GrayImage, RgbImage};
use inpaint_core::imaging::{corrupt, normalize, ImageTensor, Mask, RangeTag};
use inpaint_core::Generator32;

use crate::{AppError, AppResult};

/// Mask bytes at or above this value mark pixels to fill.
pub const MASK_THRESHOLD: u8 = 128;

pub fn threshold_mask(gray: &GrayImage) -> Mask {
    let values = gray.pixels().map(|p| u8::from(p.0[0] >= MASK_THRESHOLD)).collect();
    Mask::new(gray.height() as usize, gray.width() as usize, values).expect("binary values of the right length")
}

/// Fill the masked pixels of `image`. Unmasked pixels are copied from the
/// input bytes, so they are bit-identical whatever the model does.
pub fn complete_rgb(generator: &Generator32, image: &RgbImage, mask: &Mask) -> AppResult<RgbImage> {
    let (w, h) = image.dimensions();
    if (mask.width(), mask.height()) != (w as usize, h as usize) {
        return Err(AppError::Input {
            field: "mask",
            message: format!("mask is {}x{} but image is {w}x{h}", mask.width(), mask.height()),
        });
    }
    generator.check_input(&[1, 4, h as usize, w as usize])?;
    if mask.is_empty() {
        return Ok(image.clone());
    }
    let raw = ImageTensor::<f32>::from_rgb8(image);
    let signed = normalize(&raw)?;
    let (_, input4) = corrupt(&signed, mask)?;
    let x = input4.to_tensor().reshape(&[1, 4, h as usize, w as usize])?;
    let generated = generator.generate(&x)?;
    let generated = ImageTensor::from_tensor(&generated.map(|v| v.clamp(-1.0, 1.0)), 0, RangeTag::Signed)?;
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (yy, xx) = (y as usize, x as usize);
        if mask.get(yy, xx) {
            for c in 0..3 {
                px.0[c] = (generated.get(c, yy, xx) * 127.5 + 127.5).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}
