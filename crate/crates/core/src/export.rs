//! Heatmap export: an `.npz` archive with one `(nodes, 4)` float64 array per
//! level, plus colour-coded overlays rendered at the input frame size.

use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use crate::checkpoint::write_atomic;
use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::gnn::Heatmaps;
use crate::graph::{patch_index_unchecked, Level};
use crate::labels::NUM_LANDMARKS;
use crate::model::Model;
use crate::par::Exec;

/// Landmark channel colours: red, green, blue, yellow.
pub const CHANNEL_COLOURS: [[u8; 3]; NUM_LANDMARKS] = [[230, 25, 75], [60, 180, 75], [0, 130, 200], [255, 225, 25]];

#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn npy_bytes(shape: &[usize], data: &[f64]) -> Vec<u8> {
    let dims = match shape {
        [d] => format!("({d},)"),
        _ => format!("({})", shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {dims}, }}");
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + data.len() * 8);
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_npy(name: &str, bytes: &[u8]) -> Result<NpyArray> {
    let bad = |m: &str| Error::Domain(format!("{name}: {m}"));
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" || bytes[6] != 1 {
        return Err(bad("not an NPY v1 array"));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated header"))?)
        .map_err(|_| bad("header is not ASCII"))?;
    if !header.contains("'descr': '<f8'") || !header.contains("'fortran_order': False") {
        return Err(bad("only little-endian C-order float64 is supported"));
    }
    let start = header.find("'shape': (").ok_or_else(|| bad("no shape"))? + 10;
    let end = start + header[start..].find(')').ok_or_else(|| bad("unterminated shape"))?;
    let shape = header[start..end]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad("bad dimension")))
        .collect::<Result<Vec<_>>>()?;
    let body = &bytes[10 + hlen..];
    let n: usize = shape.iter().product();
    if body.len() != n * 8 {
        return Err(bad("payload size does not match shape"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(NpyArray {
        name: name.to_string(),
        shape,
        data,
    })
}

/// Serializes arrays as an uncompressed `.npz` archive.
pub fn npz_bytes(arrays: &[NpyArray]) -> Result<Vec<u8>> {
    let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
    let opts = SimpleFileOptions::default().compression_method(CompressionMethod::Stored);
    for a in arrays {
        zip.start_file(format!("{}.npy", a.name), opts)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        zip.write_all(&npy_bytes(&a.shape, &a.data))?;
    }
    let cur = zip.finish().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(cur.into_inner())
}

pub fn read_npz(path: &Path) -> Result<Vec<NpyArray>> {
    let mut zip = ZipArchive::new(std::fs::File::open(path)?).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let mut out = Vec::with_capacity(zip.len());
    for i in 0..zip.len() {
        let mut f = zip.by_index(i).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let name = f.name().trim_end_matches(".npy").to_string();
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        out.push(parse_npy(&name, &buf)?);
    }
    Ok(out)
}

pub fn heatmap_arrays(heatmaps: &Heatmaps) -> Vec<NpyArray> {
    heatmaps
        .levels
        .iter()
        .map(|(level, v)| NpyArray {
            name: level.to_string(),
            shape: vec![v.len() / NUM_LANDMARKS, NUM_LANDMARKS],
            data: v.clone(),
        })
        .collect()
}

/// Node of `level` covering frame pixel `(h, w)`; `grid` is the main grid
/// side used by the model.
fn node_for_pixel(level: Level, h: usize, w: usize, frame: (usize, usize), grid: usize) -> usize {
    match level {
        Level::Aux(k) => patch_index_unchecked(h, w, k, frame.0, frame.1),
        Level::Main => (h * grid / frame.0) * grid + w * grid / frame.1,
    }
}

/// Blends each channel's heatmap over the grayscale frame.
pub fn render_overlay(frame: &GrayImage, level: Level, values: &[f64], grid: usize) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (h, w) = (frame.height, frame.width);
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        let g = frame.data[r * w + c].clamp(0.0, 1.0) as f64 * 255.0;
        let mut px = [g, g, g];
        let node = node_for_pixel(level, r, c, (h, w), grid);
        for (p, colour) in CHANNEL_COLOURS.iter().enumerate() {
            let a = 0.7 * values[node * NUM_LANDMARKS + p].clamp(0.0, 1.0);
            for (v, &col) in px.iter_mut().zip(colour) {
                *v = *v * (1.0 - a) + col as f64 * a;
            }
        }
        Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportSummary {
    pub npz: PathBuf,
    pub overlays: Vec<PathBuf>,
    /// `(level name, [nodes, channels])` in file order.
    pub shapes: Vec<(String, [usize; 2])>,
}

/// Writes `heatmaps.npz` and `overlay_<level>.png` for every level.
pub fn export_heatmaps(model: &Model<f32>, exec: Exec, frame: &GrayImage, out_dir: &Path) -> Result<ExportSummary> {
    let s = model.config.image_size;
    let input = frame.resize(s, s);
    let heat = model.heatmaps(exec, &model.image_map(&input.data, s, s)?)?;
    write_heatmaps(&heat, frame, s, out_dir)
}

pub fn write_heatmaps(heat: &Heatmaps, frame: &GrayImage, grid: usize, out_dir: &Path) -> Result<ExportSummary> {
    std::fs::create_dir_all(out_dir)?;
    let arrays = heatmap_arrays(heat);
    let npz = out_dir.join("heatmaps.npz");
    let bytes = npz_bytes(&arrays)?;
    write_atomic(&npz, |w| Ok(w.write_all(&bytes)?))?;
    let mut overlays = Vec::new();
    for (level, values) in &heat.levels {
        let img = render_overlay(frame, *level, values, grid);
        let mut png = Vec::new();
        img.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)?;
        let path = out_dir.join(format!("overlay_{level}.png"));
        write_atomic(&path, |w| Ok(w.write_all(&png)?))?;
        overlays.push(path);
    }
    Ok(ExportSummary {
        npz,
        overlays,
        shapes: arrays.iter().map(|a| (a.name.clone(), [a.shape[0], a.shape[1]])).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn npy_header_is_aligned() {
        let b = npy_bytes(&[3, 4], &[0.0; 12]);
        let hlen = u16::from_le_bytes([b[8], b[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(b[10 + hlen - 1], b'\n');
    }

    #[test]
    fn npz_round_trip_is_bit_exact() {
        let arrays = vec![
            NpyArray {
                name: "level_1".into(),
                shape: vec![4, 4],
                data: (0..16).map(|i| (i as f64).sqrt() / 7.0).collect(),
            },
            NpyArray {
                name: "main".into(),
                shape: vec![2, 4],
                data: vec![f64::MIN_POSITIVE, 1.0 - f64::EPSILON, 0.0, 1.0, 0.1, 0.2, 0.3, 0.4],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npz");
        std::fs::write(&p, npz_bytes(&arrays).unwrap()).unwrap();
        assert_eq!(read_npz(&p).unwrap(), arrays);
    }

    #[test]
    fn overlay_matches_frame_size() {
        let frame = GrayImage::new(6, 10, vec![0.5; 60]).unwrap();
        let img = render_overlay(&frame, Level::Aux(1), &[0.0; 16], 4);
        assert_eq!(img.dimensions(), (10, 6));
        assert_eq!(img.get_pixel(0, 0).0, [128, 128, 128]);
    }
}
