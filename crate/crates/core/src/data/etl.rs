use std::hash::Hasher;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{denormalize, normalize, DatasetManifest, ImageRecord, Split};
use crate::denoiser::UPSCALE;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CropMode {
    #[default]
    Center,
    /// Per-file offsets drawn from a stream keyed by the seed and the record id.
    Random { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub manifest: DatasetManifest,
    pub records: Vec<ImageRecord>,
    pub skipped: Vec<SkippedFile>,
}

/// Top-left corner `(x, y)` of a centered `size × size` window.
pub fn center_crop_offsets(width: usize, height: usize, size: usize) -> (usize, usize) {
    ((width - size) / 2, (height - size) / 2)
}

fn id_stream(id: &str) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(id.as_bytes());
    h.finish()
}

fn rgb_pixels(img: &DynamicImage) -> std::result::Result<image::RgbImage, String> {
    match img.color() {
        ColorType::Rgb8 => Ok(img.to_rgb8()),
        // alpha is dropped; the colour channels are kept as stored
        ColorType::Rgba8 => Ok(img.to_rgb8()),
        ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16 => {
            Err("grayscale image".into())
        }
        other => Err(format!("unsupported pixel format {other:?}")),
    }
}

fn crop_record(
    id: &str,
    path: &Path,
    size: usize,
    mode: CropMode,
) -> std::result::Result<ImageRecord, String> {
    let img = image::ImageReader::open(path)
        .map_err(|e| format!("unreadable: {e}"))?
        .with_guessed_format()
        .map_err(|e| format!("unreadable: {e}"))?
        .decode()
        .map_err(|e| format!("unreadable: {e}"))?;
    let rgb = rgb_pixels(&img)?;
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w < size || h < size {
        return Err(format!("{w}x{h} is smaller than the target size {size}"));
    }
    let (x0, y0) = match mode {
        CropMode::Center => center_crop_offsets(w, h, size),
        CropMode::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id_stream(id));
            (rng.random_range(0..=w - size), rng.random_range(0..=h - size))
        }
    };
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let p = rgb.get_pixel((x0 + x) as u32, (y0 + y) as u32);
            for c in 0..3 {
                data[(c * size + y) * size + x] = normalize(p[c]);
            }
        }
    }
    let pixels = Tensor::new(&[3, size, size], data).map_err(|e| e.to_string())?;
    ImageRecord::new(id, pixels, Some(path.display().to_string())).map_err(|e| e.to_string())
}

/// Reads an 8-bit RGB (or RGBA, alpha dropped) PNG as a `(3, H, W)` tensor in `[-1, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image { path: path.into(), source: e })?;
    let rgb = rgb_pixels(&img).map_err(|reason| Error::InsufficientData(format!("{}: {reason}", path.display())))?;
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = normalize(p[c]);
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Writes a `(3, H, W)` or `(1, 3, H, W)` tensor in `[-1, 1]` as an 8-bit RGB PNG.
pub fn write_png(path: &Path, pixels: &Tensor) -> Result<()> {
    let (h, w) = match *pixels.shape() {
        [3, h, w] | [1, 3, h, w] => (h, w),
        _ => return Err(shape_err!("expected a single RGB image, got {:?}", pixels.shape())),
    };
    let d = pixels.data();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| denormalize(d[(c * h + y as usize) * w + x as usize]);
        image::Rgb([at(0), at(1), at(2)])
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.into(), source: e })
}

/// Crops every PNG under `dir` (non-recursive) to `size × size` RGB records.
///
/// Grayscale, undersized and undecodable files are skipped and reported.
/// Records come back sorted by id (the file stem).
pub fn ingest(dir: &Path, size: usize, mode: CropMode, split: Split) -> Result<Ingested> {
    if size == 0 || size % UPSCALE != 0 {
        return Err(shape_err!("target size must be a positive multiple of {UPSCALE}, got {size}"));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            paths.push(path);
        }
    }
    paths.sort();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for path in paths {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match crop_record(&id, &path, size, mode) {
            Ok(r) => records.push(r),
            Err(reason) => skipped.push(SkippedFile { path, reason }),
        }
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let seed = match mode {
        CropMode::Center => 0,
        CropMode::Random { seed } => seed,
    };
    let manifest = DatasetManifest::describe(split, size, seed, &records);
    Ok(Ingested { manifest, records, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage, Rgba, RgbaImage};

    fn gradient_rgb(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn offset_arithmetic() {
        assert_eq!(center_crop_offsets(700, 600, 512), (94, 44));
        assert_eq!(center_crop_offsets(512, 512, 512), (0, 0));
    }

    #[test]
    fn keeps_only_rgb_and_reports_the_rest() {
        let dir = tempfile::tempdir().unwrap();
        gradient_rgb(8, 8).save(dir.path().join("b_rgb.png")).unwrap();
        GrayImage::from_pixel(8, 8, Luma([9])).save(dir.path().join("a_gray.png")).unwrap();
        RgbaImage::from_pixel(8, 8, Rgba([255, 0, 0, 10])).save(dir.path().join("c_rgba.png")).unwrap();
        gradient_rgb(4, 4).save(dir.path().join("d_small.png")).unwrap();
        std::fs::write(dir.path().join("e_broken.png"), b"not a png").unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();

        let out = ingest(dir.path(), 8, CropMode::Center, Split::Train).unwrap();
        let ids: Vec<_> = out.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["b_rgb", "c_rgba"]);
        assert_eq!(out.skipped.len(), 3);
        assert!(out.skipped[0].reason.contains("grayscale"));
        assert!(out.skipped.iter().any(|s| s.reason.contains("smaller")));
        assert!(out.skipped.iter().any(|s| s.reason.contains("unreadable")));
        // alpha dropped, red channel intact
        assert_eq!(out.records[1].pixels.data()[0], 1.0);
    }

    #[test]
    fn exact_size_crop_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_rgb(12, 12);
        img.save(dir.path().join("x.png")).unwrap();
        let out = ingest(dir.path(), 12, CropMode::Center, Split::Test).unwrap();
        let px = &out.records[0].pixels;
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                let i = (c * 12 + y as usize) * 12 + x as usize;
                assert_eq!(px.data()[i], normalize(p[c]));
            }
        }
    }

    #[test]
    fn center_crop_reads_the_offset_window() {
        let dir = tempfile::tempdir().unwrap();
        gradient_rgb(20, 14).save(dir.path().join("x.png")).unwrap();
        let out = ingest(dir.path(), 8, CropMode::Center, Split::Train).unwrap();
        let px = &out.records[0].pixels;
        // offsets (6, 3): red holds x, green holds y
        assert_eq!(px.data()[0], normalize(6));
        assert_eq!(px.data()[64], normalize(3));
    }

    #[test]
    fn rerun_gives_identical_manifest_and_random_crop_is_seeded() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            gradient_rgb(24 + i, 20).save(dir.path().join(format!("img{i}.png"))).unwrap();
        }
        let a = ingest(dir.path(), 16, CropMode::Center, Split::Train).unwrap();
        let b = ingest(dir.path(), 16, CropMode::Center, Split::Train).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.manifest.checksum(), b.manifest.checksum());

        let r1 = ingest(dir.path(), 16, CropMode::Random { seed: 5 }, Split::Train).unwrap();
        let r2 = ingest(dir.path(), 16, CropMode::Random { seed: 5 }, Split::Train).unwrap();
        assert_eq!(r1.manifest, r2.manifest);
        for r in &r1.records {
            r.validate().unwrap();
        }
    }

    #[test]
    fn png_round_trip_is_exact_on_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_rgb(8, 4);
        img.save(dir.path().join("in.png")).unwrap();
        let t = read_png(&dir.path().join("in.png")).unwrap();
        assert_eq!(t.shape(), &[3, 4, 8]);
        write_png(&dir.path().join("out.png"), &t).unwrap();
        assert_eq!(image::open(dir.path().join("out.png")).unwrap().to_rgb8(), img);
        GrayImage::from_pixel(4, 4, Luma([0])).save(dir.path().join("g.png")).unwrap();
        assert!(matches!(read_png(&dir.path().join("g.png")), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn missing_directory_and_bad_size() {
        assert!(matches!(
            ingest(Path::new("/nonexistent/cmsr"), 8, CropMode::Center, Split::Train),
            Err(Error::Io { .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest(dir.path(), 10, CropMode::Center, Split::Train),
            Err(Error::InvalidShape(_))
        ));
    }
}
