//! File helpers shared by the writers.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Encodes a single-channel image as PNG at 8 or 16 bits per pixel.
pub fn encode_gray_png(width: usize, height: usize, samples: GraySamples<'_>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        let data: Vec<u8> = match samples {
            GraySamples::Eight(v) => {
                enc.set_depth(png::BitDepth::Eight);
                v.to_vec()
            }
            GraySamples::Sixteen(v) => {
                enc.set_depth(png::BitDepth::Sixteen);
                v.iter().flat_map(|s| s.to_be_bytes()).collect()
            }
        };
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidArgument(format!("png header: {e}")))?;
        writer
            .write_image_data(&data)
            .map_err(|e| Error::InvalidArgument(format!("png data: {e}")))?;
    }
    Ok(out)
}

pub enum GraySamples<'a> {
    Eight(&'a [u8]),
    Sixteen(&'a [u16]),
}

/// Decodes a 16-bit single-channel PNG into `(width, height, samples)`.
pub fn decode_gray16_png(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let img_err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(img_err(format!(
            "expected 16-bit grayscale, found {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let samples = buf[..w * h * 2]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((w, h, samples))
}
