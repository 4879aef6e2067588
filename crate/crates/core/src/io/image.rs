use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use crate::cfa::{BayerMosaic, ColorImage};
use crate::error::{Error, Result};

fn decode_err(path: &Path) -> impl FnOnce(png::DecodingError) -> Error + '_ {
    move |source| Error::PngDecode { path: path.to_path_buf(), source }
}

fn encode_err(path: &Path) -> impl FnOnce(png::EncodingError) -> Error + '_ {
    move |source| Error::PngEncode { path: path.to_path_buf(), source }
}

/// Reads an 8-bit RGB PNG, mapping each sample to `v / 255`.
pub fn load_png(path: &Path) -> Result<ColorImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(decode_err(path))?;
    let info = reader.info();
    let unsupported = |reason: String| Error::UnsupportedImage { path: path.to_path_buf(), reason };
    if info.color_type != png::ColorType::Rgb {
        return Err(unsupported(format!("colour type {:?}, expected 8-bit RGB", info.color_type)));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(unsupported(format!("bit depth {:?}, expected 8", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| unsupported("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(decode_err(path))?;
    let stride = frame.line_size;
    let img = ColorImage::from_fn(h, w, |c, y, x| buf[y * stride + 3 * x + c] as f32 / 255.0);
    Ok(img)
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(encode_err(path))?;
        writer.write_image_data(data).map_err(encode_err(path))?;
        writer.finish().map_err(encode_err(path))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes an 8-bit RGB PNG with `round(v * 255)` clamped to [0, 255].
pub fn save_png(path: &Path, img: &ColorImage) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data.push(quantize(img.get(c, y, x)));
            }
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, &data)
}

/// Writes a mosaic as an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, m: &BayerMosaic) -> Result<()> {
    let data: Vec<u8> = m.tensor().data().iter().map(|&v| quantize(v)).collect();
    write_png(path, m.width(), m.height(), png::ColorType::Grayscale, &data)
}

/// `.png` files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every PNG in `dir` as (file stem, image).
pub fn load_dir(dir: &Path) -> Result<Vec<(String, ColorImage)>> {
    list_pngs(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            Ok((name, load_png(&p)?))
        })
        .collect()
}
