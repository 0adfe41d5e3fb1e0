use std::io::Cursor;
use std::path::Path;

use super::{BinaryMask, GrayImage, RgbImage};
use crate::error::{Error, Result};

const PNG_SIGNATURE: &[u8] = &[0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

struct Decoded {
    height: usize,
    width: usize,
    channels: usize,
    samples: Vec<u8>,
}

fn decode_png(bytes: &[u8]) -> Result<Decoded> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    // palette and sub-byte depths expand to 8-bit; 16-bit stays 16-bit and is rejected
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::MalformedImage(format!("PNG: {e}")))?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(Error::UnsupportedImage("PNG: unsupported bit depth 16".into()));
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::MalformedImage(format!("PNG: {e}")))?;
    if frame.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedImage(format!("PNG: unsupported bit depth {:?}", frame.bit_depth)));
    }
    let channels = frame.color_type.samples();
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut samples = Vec::with_capacity(w * h * channels);
    for row in buf[..frame.buffer_size()].chunks(frame.line_size).take(h) {
        samples.extend_from_slice(&row[..w * channels]);
    }
    Ok(Decoded { height: h, width: w, channels, samples })
}

fn decode_ppm(bytes: &[u8]) -> Result<Decoded> {
    // header: "P6" <ws> width <ws> height <ws> maxval <single ws> raster; '#' starts a comment
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedImage("PPM: bad header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::MalformedImage("PPM: bad header".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedImage(format!("PPM: unsupported maxval {maxval} (8-bit only)")));
    }
    let need = width * height * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::MalformedImage(format!("PPM: expected {need} raster bytes")))?;
    Ok(Decoded { height, width, channels: 3, samples: raster.to_vec() })
}

fn decode_any(bytes: &[u8]) -> Result<Decoded> {
    let d = if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)?
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)?
    } else {
        let magic: String = bytes.iter().take(4).map(|&b| b.escape_ascii().to_string()).collect();
        return Err(Error::UnsupportedImage(format!("unrecognized format (magic {magic:?}); expected PNG or PPM P6")));
    };
    if d.height == 0 || d.width == 0 {
        return Err(Error::MalformedImage("zero-sized image".into()));
    }
    Ok(d)
}

/// Decodes 8-bit PNG (gray, gray+alpha, RGB, RGBA; alpha dropped) or binary PPM.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    let d = decode_any(bytes)?;
    let pixels = match d.channels {
        1 | 2 => d.samples.chunks(d.channels).flat_map(|s| [s[0]; 3]).collect(),
        3 => d.samples,
        4 => d.samples.chunks(4).flat_map(|s| [s[0], s[1], s[2]]).collect(),
        c => return Err(Error::UnsupportedImage(format!("{c} channels"))),
    };
    RgbImage::new(d.height, d.width, pixels)
}

/// Decodes to one channel; color inputs are averaged.
pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage> {
    let d = decode_any(bytes)?;
    let pixels = match d.channels {
        1 | 2 => d.samples.chunks(d.channels).map(|s| s[0]).collect(),
        3 | 4 => d
            .samples
            .chunks(d.channels)
            .map(|s| ((s[0] as u32 + s[1] as u32 + s[2] as u32 + 1) / 3) as u8)
            .collect(),
        c => return Err(Error::UnsupportedImage(format!("{c} channels"))),
    };
    Ok(GrayImage { height: d.height, width: d.width, pixels })
}

pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_image(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_gray(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory PNG header");
        writer.write_image_data(data).expect("in-memory PNG data");
    }
    out
}

/// 8-bit grayscale PNG, lesion = 255, background = 0.
pub fn encode_mask_png(mask: &BinaryMask) -> Vec<u8> {
    let data: Vec<u8> = mask.data().iter().map(|&v| if v { 255 } else { 0 }).collect();
    encode_png(mask.width(), mask.height(), png::ColorType::Grayscale, &data)
}

pub fn encode_gray_png(img: &GrayImage) -> Vec<u8> {
    encode_png(img.width, img.height, png::ColorType::Grayscale, &img.pixels)
}

pub fn encode_rgb_png(img: &RgbImage) -> Vec<u8> {
    encode_png(img.width(), img.height(), png::ColorType::Rgb, img.pixels())
}
