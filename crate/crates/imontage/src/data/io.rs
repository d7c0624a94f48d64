//! Image and manifest files: 8-bit RGB PNG (binary PPM as the
//! dependency-free fallback) and JSONL manifests, one record per
//! LF-terminated line.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};

use super::{DataError, ManifestRecord};
use crate::pack::Image;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.to_path_buf();
    move |source| DataError::Io { path, source }
}

fn codec_err(path: &Path) -> impl FnOnce(image::ImageError) -> DataError {
    let path = path.to_path_buf();
    move |source| DataError::Codec { path, source }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write `img` as PNG, or as binary PPM when the extension says so.
pub fn save_image(img: &Image, path: &Path) -> Result<(), DataError> {
    if path.extension().is_some_and(|e| e == "ppm") {
        return save_ppm(img, path);
    }
    let buf: RgbImage = ImageBuffer::from_fn(img.w as u32, img.h as u32, |x, y| {
        let px = img.get(y as usize, x as usize);
        Rgb(px.map(quantize))
    });
    buf.save(path).map_err(codec_err(path))
}

/// Encode `img` as PNG bytes in memory.
pub fn encode_png(img: &Image) -> Vec<u8> {
    let buf: RgbImage = ImageBuffer::from_fn(img.w as u32, img.h as u32, |x, y| {
        let px = img.get(y as usize, x as usize);
        Rgb(px.map(quantize))
    });
    let mut bytes = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut bytes, image::ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    bytes.into_inner()
}

pub fn load_image(path: &Path) -> Result<Image, DataError> {
    if path.extension().is_some_and(|e| e == "ppm") {
        return load_ppm(path);
    }
    let decoded = image::ImageReader::open(path)
        .map_err(io_err(path))?
        .decode()
        .map_err(codec_err(path))?
        .into_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data = decoded.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(Image::new(h, w, data))
}

fn save_ppm(img: &Image, path: &Path) -> Result<(), DataError> {
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut bytes = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    bytes.extend(img.data.iter().map(|&v| quantize(v)));
    file.write_all(&bytes).map_err(io_err(path))
}

fn load_ppm(path: &Path) -> Result<Image, DataError> {
    let bad = |msg: &str| DataError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string()),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    // Header: three whitespace-separated fields after the magic, then one
    // whitespace byte, then raw RGB.
    let mut pos = 0usize;
    let mut field = || -> Result<String, DataError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if field()? != "P6" {
        return Err(bad("not a binary PPM"));
    }
    let w: usize = field()?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = field()?.parse().map_err(|_| bad("bad height"))?;
    if field()? != "255" {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1;
    let need = w * h * 3;
    let raw = bytes.get(pos..pos + need).ok_or_else(|| bad("short pixel data"))?;
    Ok(Image::new(
        h,
        w,
        raw.iter().map(|&v| v as f32 / 255.0).collect(),
    ))
}

/// One JSON object per line, UTF-8, LF-terminated.
pub fn save_manifest(records: &[ManifestRecord], path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("manifest records serialize"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|source| DataError::Manifest {
                path: PathBuf::from(path),
                line: i + 1,
                source,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;

    /// Every channel already sits on the 8-bit lattice, so codec round
    /// trips must be exact.
    fn quantized_test_image() -> Image {
        let mut img = Image::zeros(9, 13);
        for y in 0..img.h {
            for x in 0..img.w {
                let v = |k: usize| ((y * 31 + x * 7 + k * 11) % 256) as f32 / 255.0;
                img.set(y, x, [v(0), v(1), v(2)]);
            }
        }
        img
    }

    #[test]
    fn png_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = quantized_test_image();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!((back.h, back.w), (img.h, img.w));
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn ppm_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = quantized_test_image();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn missing_file_reports_its_path() {
        let err = load_image(Path::new("/nonexistent/img.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/img.png"));
    }

    fn sample_records() -> Vec<ManifestRecord> {
        vec![
            ManifestRecord {
                task: TaskKind::Edit,
                instruction: "recolor the red circle to blue".into(),
                ref_paths: vec!["edit/000000_ref0.png".into()],
                target_paths: vec!["edit/000000_tgt0.png".into()],
                bucket: "32x32".into(),
                motion_score: None,
                fg_mask_paths: Some(vec!["edit/000000_mask0.png".into()]),
                weight: 1.0,
                transition: false,
            },
            ManifestRecord {
                task: TaskKind::Video,
                instruction: "continue the motion of the red circle for 3 frames".into(),
                ref_paths: vec!["video/000001_ref0.png".into()],
                target_paths: vec!["video/000001_tgt0.png".into(), "video/000001_tgt1.png".into()],
                bucket: "32x32".into(),
                motion_score: Some(1.25),
                fg_mask_paths: None,
                weight: 2.0,
                transition: true,
            },
        ]
    }

    #[test]
    fn manifest_round_trips_line_per_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let records = sample_records();
        save_manifest(&records, &path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
        assert!(!text.contains('\r'));
        assert_eq!(text.lines().count(), records.len());
        assert_eq!(load_manifest(&path).unwrap(), records);
    }

    #[test]
    fn manifest_errors_carry_the_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let good = serde_json::to_string(&sample_records()[0]).unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        match load_manifest(&path) {
            Err(DataError::Manifest { line: 2, .. }) => {}
            other => panic!("expected a line-2 manifest error, got {other:?}"),
        }
    }
}
