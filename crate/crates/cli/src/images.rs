//! Image file output. PPM is the primary format because it is bit-exact
//! and dependency-free; PNG rides behind a feature flag.

use std::path::Path;

use mindvis_core::data::Image;
use mindvis_core::{Error, Result};

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend(img.data.iter().map(|&v| to_byte(v)));
    out
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, to_ppm(img))?)
}

#[cfg(feature = "png")]
pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_byte(v)).collect();
    let buf = image::RgbImage::from_raw(img.w as u32, img.h as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encoding: {e}")))
}

/// Compose equally sized cells into one image: one row per entry, cells
/// separated by a neutral gutter.
pub fn image_grid(rows: &[Vec<&Image>], pad: usize) -> Result<Image> {
    const GUTTER: f32 = 0.5;
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Degenerate("empty image grid".into()))?;
    let (ch, cw) = (first.h, first.w);
    let cols = rows.iter().map(Vec::len).max().unwrap();
    for cell in rows.iter().flatten() {
        if cell.h != ch || cell.w != cw {
            return Err(Error::shape(format!(
                "grid cells must share one size, found {}x{} next to {ch}x{cw}",
                cell.h, cell.w
            )));
        }
    }

    let gh = rows.len() * (ch + pad) + pad;
    let gw = cols * (cw + pad) + pad;
    let mut grid = Image::new(gh, gw);
    grid.data.fill(GUTTER);
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let oy = pad + r * (ch + pad);
            let ox = pad + c * (cw + pad);
            for y in 0..ch {
                for x in 0..cw {
                    grid.set_pixel(oy + y, ox + x, cell.pixel(y, x));
                }
            }
        }
    }
    Ok(grid)
}
