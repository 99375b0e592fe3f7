//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json          format version, SceneConfig, sample count, checksums
//! <root>/<idx>/scene.json       exact shape parameters and depth order
//! <root>/<idx>/image.png        8-bit grayscale, canvas_size^2
//! <root>/<idx>/fg_class.png     16-bit grayscale label maps, label_size^2
//! <root>/<idx>/occ_class.png
//! <root>/<idx>/fg_instance.png
//! <root>/<idx>/occ_instance.png
//! ```
//!
//! The per-sample checksum is the SHA-256 of the four label maps' pixel
//! values (u16 little-endian, in the order listed above). Amodal masks and
//! occlusion fractions are not stored; they are recomputed from `scene.json`.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{label_maps, occlusion_fractions, Sample, Scene, SceneConfig};
use crate::raster::{GrayImage, Grid, LabelMap};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

const LABEL_FILES: [&str; 4] = [
    "fg_class.png",
    "occ_class.png",
    "fg_instance.png",
    "occ_instance.png",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SceneConfig,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: SceneConfig,
    sample_count: usize,
    samples: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    index: usize,
    checksum: String,
}

fn label_checksum(maps: [&LabelMap; 4]) -> String {
    let mut h = Sha256::new();
    for m in maps {
        for v in &m.data {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn sample_checksum(s: &Sample) -> String {
    let r = &s.rendered;
    label_checksum([&r.fg_class, &r.occ_class, &r.fg_instance, &r.occ_instance])
}

pub fn write_dataset(path: &Path, config: &SceneConfig, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let dir = path.join(s.index.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let scene_path = dir.join("scene.json");
        let json = serde_json::to_vec_pretty(&s.scene).map_err(|e| Error::json(&scene_path, e))?;
        fs::write(&scene_path, json).map_err(|e| Error::io(&scene_path, e))?;
        write_png_u8(&dir.join("image.png"), &s.rendered.image)?;
        let r = &s.rendered;
        for (name, map) in
            LABEL_FILES
                .iter()
                .zip([&r.fg_class, &r.occ_class, &r.fg_instance, &r.occ_instance])
        {
            write_png_u16(&dir.join(name), map)?;
        }
        entries.push(ManifestEntry {
            index: s.index,
            checksum: sample_checksum(s),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        sample_count: samples.len(),
        samples: entries,
    };
    let mpath = path.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&mpath, e))?;
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mpath = path.join("manifest.json");
    let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::json(&mpath, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if manifest.samples.len() != manifest.sample_count {
        return Err(Error::InvalidConfig(format!(
            "manifest lists {} samples but sample_count is {}",
            manifest.samples.len(),
            manifest.sample_count
        )));
    }
    manifest.config.validate()?;
    let samples = manifest
        .samples
        .iter()
        .map(|entry| read_sample(path, &manifest.config, entry))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: manifest.config,
        samples,
    })
}

fn read_sample(root: &Path, config: &SceneConfig, entry: &ManifestEntry) -> Result<Sample> {
    let index = entry.index;
    let fail = |message: String| Error::Sample {
        sample: index,
        message,
    };
    let dir = root.join(index.to_string());
    let scene_bytes =
        fs::read(dir.join("scene.json")).map_err(|e| fail(format!("scene.json: {e}")))?;
    let scene: Scene =
        serde_json::from_slice(&scene_bytes).map_err(|e| fail(format!("scene.json: {e}")))?;
    if scene.canvas_size != config.canvas_size || scene.label_size != config.label_size {
        return Err(fail(
            "scene.json: resolution disagrees with manifest".into(),
        ));
    }

    let image = read_png_u8(&dir.join("image.png")).map_err(|m| fail(format!("image.png: {m}")))?;
    if image.width != config.canvas_size || image.height != config.canvas_size {
        return Err(fail("image.png: wrong dimensions".into()));
    }
    let mut maps = Vec::with_capacity(4);
    for name in LABEL_FILES {
        let m = read_png_u16(&dir.join(name)).map_err(|m| fail(format!("{name}: {m}")))?;
        if m.width != config.label_size || m.height != config.label_size {
            return Err(fail(format!("{name}: wrong dimensions")));
        }
        maps.push(m);
    }
    let occ_instance = maps.pop().unwrap();
    let fg_instance = maps.pop().unwrap();
    let occ_class = maps.pop().unwrap();
    let fg_class = maps.pop().unwrap();
    if label_checksum([&fg_class, &occ_class, &fg_instance, &occ_instance]) != entry.checksum {
        return Err(Error::ChecksumMismatch { sample: index });
    }

    let (.., amodal_masks) = label_maps(&scene);
    let occlusion_fraction = occlusion_fractions(&fg_instance, &amodal_masks);
    Ok(Sample {
        index,
        scene,
        rendered: super::RenderedSample {
            image,
            fg_class,
            occ_class,
            fg_instance,
            occ_instance,
            amodal_masks,
            occlusion_fraction,
        },
    })
}

fn encoder<'a>(
    w: BufWriter<fs::File>,
    width: usize,
    height: usize,
    depth: png::BitDepth,
) -> png::Encoder<'a, BufWriter<fs::File>> {
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    enc.set_compression(png::Compression::Default);
    enc
}

pub(crate) fn write_png_u8(path: &Path, img: &GrayImage) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = encoder(
        BufWriter::new(file),
        img.width,
        img.height,
        png::BitDepth::Eight,
    );
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut w = enc.write_header().map_err(to_io)?;
    w.write_image_data(&img.data).map_err(to_io)?;
    w.finish().map_err(to_io)
}

pub(crate) fn write_png_u16(path: &Path, map: &LabelMap) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = encoder(
        BufWriter::new(file),
        map.width,
        map.height,
        png::BitDepth::Sixteen,
    );
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut w = enc.write_header().map_err(to_io)?;
    let bytes: Vec<u8> = map.data.iter().flat_map(|v| v.to_be_bytes()).collect();
    w.write_image_data(&bytes).map_err(to_io)?;
    w.finish().map_err(to_io)
}

fn decode(
    path: &Path,
    depth: png::BitDepth,
) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let file = fs::File::open(path).map_err(|e| e.to_string())?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != depth {
        return Err(format!(
            "expected {depth:?}-bit grayscale, found {:?} {:?}",
            info.color_type, info.bit_depth
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    buf.truncate(frame.buffer_size());
    Ok((w, h, buf))
}

fn read_png_u8(path: &Path) -> std::result::Result<GrayImage, String> {
    let (w, h, buf) = decode(path, png::BitDepth::Eight)?;
    Grid::from_vec(w, h, buf).map_err(|e| e.to_string())
}

fn read_png_u16(path: &Path) -> std::result::Result<LabelMap, String> {
    let (w, h, buf) = decode(path, png::BitDepth::Sixteen)?;
    let data = buf
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Grid::from_vec(w, h, data).map_err(|e| e.to_string())
}
