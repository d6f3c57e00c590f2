//! 8-bit RGB PNG reading and writing, plus the atomic file-write helper all
//! file outputs go through (write to a temp sibling, then rename).

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::ImageBuffer;

/// Write bytes to `path` atomically: no partial file is ever observable.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Image(format!("bad output path {}", path.display())))?;
    let mut tmp = file_name.to_os_string();
    tmp.push(".tmp");
    let tmp_path = match dir {
        Some(d) => d.join(&tmp),
        None => std::path::PathBuf::from(&tmp),
    };
    std::fs::write(&tmp_path, bytes)?;
    std::fs::rename(&tmp_path, path)?;
    Ok(())
}

/// Decode an 8-bit PNG into an RGB buffer. Gray and alpha variants are
/// expanded/flattened; 16-bit files are rejected.
pub fn read_png(path: &Path) -> Result<ImageBuffer> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image(format!(
            "{}: only 8-bit PNGs are supported (got {:?})",
            path.display(),
            info.bit_depth
        )));
    }
    let color = info.color_type;
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let raw = &buf[..frame.buffer_size()];

    let mut rgb = vec![0u8; width * height * 3];
    match color {
        png::ColorType::Rgb => rgb.copy_from_slice(raw),
        png::ColorType::Rgba => {
            for (dst, src) in rgb.chunks_exact_mut(3).zip(raw.chunks_exact(4)) {
                dst.copy_from_slice(&src[..3]);
            }
        }
        png::ColorType::Grayscale => {
            for (dst, &g) in rgb.chunks_exact_mut(3).zip(raw.iter()) {
                dst.fill(g);
            }
        }
        png::ColorType::GrayscaleAlpha => {
            for (dst, src) in rgb.chunks_exact_mut(3).zip(raw.chunks_exact(2)) {
                dst.fill(src[0]);
            }
        }
        other => {
            return Err(Error::Image(format!(
                "{}: unsupported color type {other:?}",
                path.display()
            )));
        }
    }
    ImageBuffer::from_rgb8(width, height, rgb)
}

/// Encode an RGB buffer as an 8-bit PNG, written atomically.
pub fn write_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    let mut bytes: Vec<u8> = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut bytes, img.width as u32, img.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        writer
            .write_image_data(&img.data)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    }
    atomic_write(path, &bytes)
}
