use std::path::Path;

use candle_core::{DType, Device, Tensor};
pub use image::RgbImage;

use crate::error::{Error, Result};

/// RGB image to a `[1, 3, h, w]` tensor with values in `[-1, 1]`.
pub fn image_to_tensor(img: &RgbImage, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0).collect();
    let t = Tensor::from_vec(data, (h as usize, w as usize, 3), device)?;
    Ok(t.permute((2, 0, 1))?.unsqueeze(0)?)
}

/// Inverse of [`image_to_tensor`]; values are clamped to `[-1, 1]` and rounded.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let t = match t.rank() {
        4 => t.squeeze(0)?,
        3 => t.clone(),
        r => return Err(Error::Shape(format!("image tensor must have rank 3 or 4, got {r}"))),
    };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("image tensor must have 3 channels, got {c}")));
    }
    let t = ((t.to_dtype(DType::F32)?.clamp(-1f32, 1f32)? + 1.0)? * 127.5)?;
    let data: Vec<f32> = t.permute((1, 2, 0))?.flatten_all()?.to_vec1()?;
    let bytes: Vec<u8> = data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::from_raw(w as u32, h as u32, bytes).ok_or_else(|| Error::Shape("image buffer size".into()))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Tiles equally sized images row-major into one sheet with a 2-pixel gutter.
pub fn contact_sheet(cells: &[Option<RgbImage>], columns: usize, cell_w: u32, cell_h: u32) -> RgbImage {
    let columns = columns.max(1);
    let rows = cells.len().div_ceil(columns).max(1);
    let gutter = 2u32;
    let width = columns as u32 * (cell_w + gutter) + gutter;
    let height = rows as u32 * (cell_h + gutter) + gutter;
    let mut sheet = RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
    for (i, cell) in cells.iter().enumerate() {
        let x0 = gutter + (i % columns) as u32 * (cell_w + gutter);
        let y0 = gutter + (i / columns) as u32 * (cell_h + gutter);
        for y in 0..cell_h {
            for x in 0..cell_w {
                let px = match cell {
                    Some(img) if x < img.width() && y < img.height() => *img.get_pixel(x, y),
                    Some(_) => image::Rgb([255, 255, 255]),
                    None => image::Rgb([200, 40, 40]),
                };
                sheet.put_pixel(x0 + x, y0 + y, px);
            }
        }
    }
    sheet
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_is_lossless_for_u8() {
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([(x * 50) as u8, (y * 80) as u8, 7]));
        let t = image_to_tensor(&img, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 3, 5]);
        assert_eq!(tensor_to_image(&t).unwrap(), img);
    }

    #[test]
    fn sheet_marks_failed_cells() {
        let a = RgbImage::from_pixel(4, 4, image::Rgb([0, 0, 0]));
        let sheet = contact_sheet(&[Some(a), None], 2, 4, 4);
        assert_eq!(sheet.dimensions(), (14, 8));
        assert_eq!(*sheet.get_pixel(2, 2), image::Rgb([0, 0, 0]));
        assert_eq!(*sheet.get_pixel(8, 2), image::Rgb([200, 40, 40]));
    }
}
