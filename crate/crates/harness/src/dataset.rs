//! Synthetic small-object scenes and their on-disk layout.
//!
//! A dataset directory holds `annotations.json` plus `images/NNNNNN.ptds`,
//! one headered little-endian `f32` plane per image.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use smalldet_core::metrics::GroundTruth;
use smalldet_core::{BBox, Tensor};

use crate::config::{read_json, write_json, SceneSpec};
use crate::error::{HarnessError, Result};

pub const IMAGE_MAGIC: &[u8; 4] = b"PTDS";
pub const IMAGE_VERSION: u32 = 1;
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const ANNOTATIONS_VERSION: u32 = 1;
/// Attempts per object before the generator gives up on placing it.
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub class_id: usize,
    /// Pixel-edge corners `(x1, y1, x2, y2)`, integers.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub objects: Vec<Object>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    version: u32,
    spec: SceneSpec,
    images: Vec<AnnotationEntry>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationEntry {
    file: String,
    height: usize,
    width: usize,
    objects: Vec<Object>,
}

fn image_file(i: usize) -> String {
    format!("{i:06}.ptds")
}

/// Renders `count` scenes. All randomness comes from one xoshiro256++
/// stream seeded with `spec.seed`.
pub fn generate(spec: &SceneSpec, count: usize) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(HarnessError::Config("image count must be positive".into()));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let samples = (0..count).map(|_| render_scene(spec, &mut rng)).collect();
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

fn range_u32(rng: &mut impl Rng, [lo, hi]: [usize; 2]) -> usize {
    rng.random_range(lo as u32..=hi as u32) as usize
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f32 {
    (lo + (hi - lo) * rng.random::<f64>()) as f32
}

/// Rectangles in pixel cells `[x1, x2) × [y1, y2)`; a one-pixel gap keeps
/// distinct objects from touching, even diagonally.
fn separated(a: [usize; 4], b: [usize; 4]) -> bool {
    a[2] < b[0] || b[2] < a[0] || a[3] < b[1] || b[3] < a[1]
}

fn render_scene(spec: &SceneSpec, rng: &mut impl Rng) -> Sample {
    let n = spec.image_size;
    let [b0, b1] = spec.background;
    let mut pixels: Vec<f32> = (0..n * n).map(|_| uniform(rng, b0, b1)).collect();
    let wanted = range_u32(rng, spec.num_objects);
    let mut placed: Vec<[usize; 4]> = Vec::with_capacity(wanted);
    let mut objects = Vec::with_capacity(wanted);
    for _ in 0..wanted {
        let w = range_u32(rng, spec.object_size);
        let h = range_u32(rng, spec.object_size);
        let class_id = rng.random_range(0..spec.num_classes as u32) as usize;
        let spot = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let x = range_u32(rng, [0, n - w]);
            let y = range_u32(rng, [0, n - h]);
            let r = [x, y, x + w, y + h];
            placed.iter().all(|&p| separated(p, r)).then_some(r)
        });
        // the first object always fits, so every scene has at least one
        let Some(r) = spot else { continue };
        let (lo, hi) = spec.class_band(class_id);
        for yy in r[1]..r[3] {
            for xx in r[0]..r[2] {
                pixels[yy * n + xx] = uniform(rng, lo, hi);
            }
        }
        placed.push(r);
        objects.push(Object {
            class_id,
            bbox: r.map(|v| v as f64),
        });
    }
    Sample {
        image: Image {
            height: n,
            width: n,
            pixels,
        },
        objects,
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.spec.image_size
    }

    /// `[N, 1, H, W]` stack of the selected images.
    pub fn batch_tensor(&self, indices: &[usize]) -> Tensor {
        let n = self.spec.image_size;
        let mut data = Vec::with_capacity(indices.len() * n * n);
        for &i in indices {
            data.extend(self.samples[i].image.pixels.iter().map(|&p| p as f64));
        }
        Tensor::new([indices.len(), 1, n, n], data).expect("pixel data is finite")
    }

    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        self.samples
            .iter()
            .enumerate()
            .flat_map(|(image_id, s)| {
                s.objects.iter().map(move |o| GroundTruth {
                    bbox: BBox::from_array(o.bbox).expect("annotation boxes are valid"),
                    class_id: o.class_id,
                    image_id,
                })
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| HarnessError::io(&images, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, s) in self.samples.iter().enumerate() {
            let name = image_file(i);
            write_image(&images.join(&name), &s.image)?;
            entries.push(AnnotationEntry {
                file: name,
                height: s.image.height,
                width: s.image.width,
                objects: s.objects.clone(),
            });
        }
        write_json(
            &dir.join(ANNOTATIONS_FILE),
            &AnnotationFile {
                version: ANNOTATIONS_VERSION,
                spec: self.spec.clone(),
                images: entries,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let ann_path = dir.join(ANNOTATIONS_FILE);
        let ann: AnnotationFile = read_json(&ann_path)?;
        if ann.version != ANNOTATIONS_VERSION {
            return Err(HarnessError::format(
                &ann_path,
                format!("unsupported annotation version {}", ann.version),
            ));
        }
        if ann.images.is_empty() {
            return Err(HarnessError::format(&ann_path, "dataset has no images"));
        }
        let mut samples = Vec::with_capacity(ann.images.len());
        for e in ann.images {
            let path = dir.join("images").join(&e.file);
            let image = read_image(&path)?;
            if (image.height, image.width) != (e.height, e.width)
                || image.height != ann.spec.image_size
            {
                return Err(HarnessError::format(
                    &path,
                    format!(
                        "image is {}×{}, annotations say {}×{}",
                        image.height, image.width, e.height, e.width
                    ),
                ));
            }
            for o in &e.objects {
                let valid = BBox::from_array(o.bbox).is_ok()
                    && o.bbox[0] >= 0.0
                    && o.bbox[1] >= 0.0
                    && o.bbox[2] <= e.width as f64
                    && o.bbox[3] <= e.height as f64;
                if !valid || o.class_id >= ann.spec.num_classes {
                    return Err(HarnessError::format(
                        &ann_path,
                        format!("{}: bad object {o:?}", e.file),
                    ));
                }
            }
            samples.push(Sample {
                image,
                objects: e.objects,
            });
        }
        Ok(Dataset {
            spec: ann.spec,
            samples,
        })
    }
}

pub fn encode_image(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * img.pixels.len());
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    for p in &img.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Image> {
    let err = |d: String| HarnessError::format(path, d);
    if bytes.len() < 16 || &bytes[..4] != IMAGE_MAGIC {
        return Err(err("not a PTDS image (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != IMAGE_VERSION {
        return Err(err(format!("unsupported image version {version}")));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    let expected = 16 + 4 * h * w;
    if h == 0 || w == 0 || bytes.len() != expected {
        return Err(err(format!(
            "{h}×{w} image needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let pixels: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
        return Err(err(format!("non-finite pixel at index {i}")));
    }
    Ok(Image {
        height: h,
        width: w,
        pixels,
    })
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_image(img)).map_err(|e| HarnessError::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode_image(&bytes, path)
}

/// Every file of a saved dataset, sorted, for byte-level comparisons.
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let images = dir.join("images");
    let mut files: Vec<PathBuf> = fs::read_dir(&images)
        .map_err(|e| HarnessError::io(&images, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    files.sort();
    files.insert(0, dir.join(ANNOTATIONS_FILE));
    Ok(files)
}

/// Recovers object rectangles by thresholding at `threshold` and taking
/// the bounding box of each 8-connected foreground component, in
/// row-major order of first pixel.
pub fn rescan(img: &Image, threshold: f32) -> Vec<[usize; 4]> {
    let (h, w) = (img.height, img.width);
    let mut seen = vec![false; h * w];
    let mut found = Vec::new();
    for start in 0..h * w {
        if seen[start] || img.pixels[start] < threshold {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut r = [w, h, 0, 0];
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            r = [r[0].min(x), r[1].min(y), r[2].max(x + 1), r[3].max(y + 1)];
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && img.pixels[j] >= threshold {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        found.push(r);
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FOREGROUND_FLOOR;

    #[test]
    fn deterministic_and_nonempty() {
        let spec = SceneSpec::new(32, 3, 42);
        let a = generate(&spec, 6).unwrap();
        let b = generate(&spec, 6).unwrap();
        assert_eq!(a, b);
        assert!(a.samples.iter().all(|s| !s.objects.is_empty()));
        let c = generate(&SceneSpec::new(32, 3, 43), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rescan_recovers_annotations() {
        let mut spec = SceneSpec::new(64, 4, 5);
        spec.num_objects = [1, 8];
        spec.object_size = [2, 8];
        let d = generate(&spec, 20).unwrap();
        for s in &d.samples {
            let mut got = rescan(&s.image, FOREGROUND_FLOOR as f32);
            let mut want: Vec<[usize; 4]> =
                s.objects.iter().map(|o| o.bbox.map(|v| v as usize)).collect();
            got.sort();
            want.sort();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn single_object_scenes() {
        let mut spec = SceneSpec::new(32, 1, 9);
        spec.num_objects = [1, 1];
        let d = generate(&spec, 10).unwrap();
        assert!(d.samples.iter().all(|s| s.objects.len() == 1));
        assert_eq!(d.ground_truths().len(), 10);
    }

    #[test]
    fn pixels_stay_in_bands() {
        let spec = SceneSpec::new(32, 2, 1);
        let d = generate(&spec, 4).unwrap();
        for s in &d.samples {
            for o in &s.objects {
                let (lo, hi) = spec.class_band(o.class_id);
                let [x1, y1, x2, y2] = o.bbox.map(|v| v as usize);
                for y in y1..y2 {
                    for x in x1..x2 {
                        let p = s.image.at(y, x) as f64;
                        assert!(p >= lo - 1e-6 && p <= hi + 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_objects_rejected() {
        let mut spec = SceneSpec::new(32, 1, 0);
        spec.object_size = [2, 40];
        assert!(matches!(generate(&spec, 1), Err(HarnessError::Unplaceable { size: 40, image: 32 })));
    }

    #[test]
    fn image_codec_round_trip_and_errors() {
        let img = Image {
            height: 2,
            width: 3,
            pixels: vec![0.0, -1.5, 0.25, 1e-30, 3.0, 7.0],
        };
        let bytes = encode_image(&img);
        assert_eq!(&bytes[..4], b"PTDS");
        assert_eq!(bytes.len(), 16 + 24);
        let p = Path::new("x.ptds");
        assert_eq!(decode_image(&bytes, p).unwrap(), img);
        assert!(decode_image(&bytes[..30], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_image(&bad, p).unwrap_err().to_string().contains("x.ptds"));
    }
}
