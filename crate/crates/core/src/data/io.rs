use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Compression, Decoder, Encoder, Transformations};

use crate::error::{Error, Result};
use crate::label::{LabelMap, PALETTE};

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, format!("png: {e}"))
}

/// Writes 1 (grey) or 3 (RGB) byte planes of `width x height` as an 8-bit PNG.
pub fn write_png_bands(path: &Path, width: usize, height: usize, bands: &[Vec<u8>]) -> Result<()> {
    let color = match bands.len() {
        1 => ColorType::Grayscale,
        2 => ColorType::GrayscaleAlpha,
        3 => ColorType::Rgb,
        4 => ColorType::Rgba,
        n => return Err(Error::InvalidArgument(format!("cannot store {n} bands in one png"))),
    };
    let plane = width * height;
    if bands.iter().any(|b| b.len() != plane) {
        return Err(Error::InvalidArgument(format!(
            "band size differs from {width}x{height}"
        )));
    }
    let mut enc = Encoder::new(create(path)?, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(BitDepth::Eight);
    enc.set_compression(Compression::Fast);
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    let mut interleaved = Vec::with_capacity(plane * bands.len());
    for i in 0..plane {
        interleaved.extend(bands.iter().map(|b| b[i]));
    }
    w.write_image_data(&interleaved).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

/// Reads an 8-bit grey or RGB(A) PNG into `(width, height, planes)`.
pub fn read_png_bands(path: &Path) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(f));
    dec.set_transformations(Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "png too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.bit_depth != BitDepth::Eight {
        return Err(Error::format(path, "expected 8-bit samples"));
    }
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(Error::format(path, "paletted png where bands were expected")),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut planes = vec![Vec::with_capacity(w * h); channels];
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * channels];
        for px in row.chunks_exact(channels) {
            for (p, &v) in planes.iter_mut().zip(px) {
                p.push(v);
            }
        }
    }
    Ok((w, h, planes))
}

/// Writes a class map as an 8-bit paletted PNG using [`PALETTE`].
pub fn write_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut enc = Encoder::new(create(path)?, labels.width() as u32, labels.height() as u32);
    enc.set_color(ColorType::Indexed);
    enc.set_depth(BitDepth::Eight);
    enc.set_compression(Compression::Fast);
    enc.set_palette(PALETTE.concat());
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(labels.data()).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

/// Reads the palette indices of a paletted PNG.
pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(f));
    dec.set_transformations(Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "png too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.color_type != ColorType::Indexed || info.bit_depth != BitDepth::Eight {
        return Err(Error::format(path, "expected an 8-bit paletted label png"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        data.extend_from_slice(&buf[y * info.line_size..y * info.line_size + w]);
    }
    LabelMap::new(h, w, data).map_err(|e| Error::format(path, e.to_string()))
}
