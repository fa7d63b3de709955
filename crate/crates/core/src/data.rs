//! Dataset manifests, the procedural colour-band dataset, and in-memory
//! training batches.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{Rgb, RgbImage};
use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::text::{TokenBatch, TokenSequence, Vocabulary};

/// One manifest entry. `image` is relative to the manifest's directory
/// unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub captions: Vec<String>,
    pub id: u64,
    pub split: String,
}

/// A validated dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn image_path(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.image)
    }

    /// Indices of records in `split`.
    pub fn split(&self, split: &str) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    /// Every `(record, caption)` pair of a split.
    pub fn pairs(&self, split: &str) -> Vec<(usize, usize)> {
        self.split(split)
            .into_iter()
            .flat_map(|r| (0..self.records[r].captions.len()).map(move |c| (r, c)))
            .collect()
    }

    /// Vocabulary over the training captions.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::build(
            self.records
                .iter()
                .filter(|r| r.split == "train")
                .flat_map(|r| r.captions.iter().map(String::as_str)),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.records)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Reads and validates a manifest, reporting every offending record.
pub fn ingest_dataset(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Ingest(vec![format!("{}: {e}", path.display())]))?;
    let records: Vec<ManifestRecord> = serde_json::from_str(&text)
        .map_err(|e| Error::Ingest(vec![format!("{}: {e}", path.display())]))?;
    if records.is_empty() {
        return Err(Error::Ingest(vec![format!(
            "{}: manifest has no records",
            path.display()
        )]));
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = DatasetManifest { root, records };
    let mut problems = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let what = format!("record {i} (id {}, image `{}`)", r.id, r.image);
        if !manifest.image_path(r).is_file() {
            problems.push(format!("{what}: image file not found"));
        }
        if r.captions.is_empty() {
            problems.push(format!("{what}: no captions"));
        }
        if let Some(c) = r.captions.iter().position(|c| c.trim().is_empty()) {
            problems.push(format!("{what}: caption {c} is empty"));
        }
        if !matches!(r.split.as_str(), "train" | "val" | "test") {
            problems.push(format!("{what}: unknown split `{}`", r.split));
        }
    }
    if problems.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::Ingest(problems))
    }
}

/// Named colours of the synthetic dataset. Each differs from the gray
/// background by more than 48 in at least one channel.
pub const PALETTE: [(&str, [u8; 3]); 6] = [
    ("red", [220, 30, 30]),
    ("green", [30, 200, 50]),
    ("blue", [30, 60, 230]),
    ("yellow", [235, 215, 30]),
    ("white", [245, 245, 245]),
    ("black", [15, 15, 15]),
];

pub const BACKGROUND: [u8; 3] = [128, 128, 128];

/// Figure width per band as a fraction of the image width.
const BAND_WIDTHS: [f64; 4] = [0.25, 0.5, 0.35, 0.45];

pub fn palette_color(name: &str) -> Option<[u8; 3]> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// Parameters of the procedural dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    pub resolution: usize,
    /// Caption templates with `{head}`, `{torso}`, `{legs}` and `{feet}`
    /// placeholders; each image gets one caption per template.
    pub templates: Vec<String>,
    /// Maximum horizontal offset of the figure, as a fraction of the width.
    pub jitter: f64,
}

impl SyntheticSpec {
    pub fn new(count: usize, resolution: usize) -> Self {
        Self {
            count,
            resolution,
            templates: vec![
                "a person with a {head} head, a {torso} torso, {legs} legs and {feet} feet".into(),
                "this pedestrian wears a {torso} shirt and {legs} pants with {feet} shoes and has {head} hair".into(),
            ],
            jitter: 0.1,
        }
    }
}

/// One generated pedestrian.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: RgbImage,
    /// Palette names for head, torso, legs, feet.
    pub colors: [&'static str; 4],
    pub captions: Vec<String>,
    /// Painted rectangle per band as `(x0, y0, x1, y1)`, end-exclusive.
    pub boxes: [(u32, u32, u32, u32); 4],
}

pub fn fill_template(template: &str, colors: &[&str; 4]) -> String {
    template
        .replace("{head}", colors[0])
        .replace("{torso}", colors[1])
        .replace("{legs}", colors[2])
        .replace("{feet}", colors[3])
}

/// Draws one sample. Bands occupy equal vertical quarters of the image.
pub fn synthetic_sample(spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<SyntheticSample> {
    let r = spec.resolution as u32;
    if r < 8 || r % 4 != 0 {
        return Err(Error::input(format!(
            "synthetic resolution {r} must be a multiple of 4 and at least 8"
        )));
    }
    let colors = [0; 4].map(|_| PALETTE.choose(rng).expect("palette not empty").0);
    let offset = if spec.jitter > 0.0 {
        rng.random_range(-spec.jitter..=spec.jitter) * r as f64
    } else {
        0.0
    };
    let center = r as f64 / 2.0 + offset;
    let mut image = RgbImage::from_pixel(r, r, Rgb(BACKGROUND));
    let band = r / 4;
    let mut boxes = [(0, 0, 0, 0); 4];
    for (k, width) in BAND_WIDTHS.iter().enumerate() {
        let half = width * r as f64 / 2.0;
        let x0 = (center - half).round().clamp(0.0, r as f64) as u32;
        let x1 = (center + half).round().clamp(0.0, r as f64) as u32;
        let (y0, y1) = (k as u32 * band, (k as u32 + 1) * band);
        let c = palette_color(colors[k]).expect("palette name");
        for y in y0..y1 {
            for x in x0..x1 {
                image.put_pixel(x, y, Rgb(c));
            }
        }
        boxes[k] = (x0, y0, x1, y1);
    }
    let captions = spec
        .templates
        .iter()
        .map(|t| fill_template(t, &colors))
        .collect();
    Ok(SyntheticSample {
        image,
        colors,
        captions,
        boxes,
    })
}

/// Writes `spec.count` PNGs plus `manifest.json` into `out_dir` and returns
/// the manifest. Identical `(spec, seed)` give identical bytes.
pub fn make_synthetic_dataset(spec: &SyntheticSpec, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if spec.count == 0 {
        return Err(Error::input("synthetic dataset needs count >= 1"));
    }
    if spec.templates.is_empty() {
        return Err(Error::input("synthetic dataset needs at least one template"));
    }
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let sample = synthetic_sample(spec, &mut rng)?;
        let name = format!("images/{i:05}.png");
        sample.image.save(out_dir.join(&name))?;
        records.push(ManifestRecord {
            image: name,
            captions: sample.captions,
            id: i as u64,
            split: "train".into(),
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// `(3, H, W)` tensor in `[-1, 1]`.
pub fn image_to_tensor(image: &RgbImage, dtype: DType) -> Result<Tensor> {
    let (w, h) = image.dimensions();
    let mut data = vec![0f32; 3 * (w * h) as usize];
    let plane = (w * h) as usize;
    for (x, y, p) in image.enumerate_pixels() {
        let i = (y * w + x) as usize;
        for c in 0..3 {
            data[c * plane + i] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h as usize, w as usize), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Inverse of [`image_to_tensor`] for a `(3, H, W)` tensor, clamping to the
/// displayable range.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::input(format!("expected 3 channels, got {c}")));
    }
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let plane = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|ch| ((data[ch * plane + i] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8))
    }))
}

/// Mean RGB of body band `band` (0 = head .. 3 = feet) of a `(3, H, W)`
/// image tensor, in the tensor's `[-1, 1]` units.
pub fn band_channel_means(image: &Tensor, band: usize) -> Result<[f64; 3]> {
    let (c, h, _) = image.dims3()?;
    if c != 3 || band >= 4 || h % 4 != 0 {
        return Err(Error::input(format!(
            "cannot take band {band} of a {:?} image",
            image.dims()
        )));
    }
    let rows = image.narrow(1, band * h / 4, h / 4)?;
    let means = rows.flatten_from(1)?.mean(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok([means[0], means[1], means[2]])
}

/// A batch of matched image/caption pairs.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// Real images per stage, `(B, 3, R_i, R_i)`.
    pub images: Vec<Tensor>,
    pub tokens: TokenBatch,
    /// Manifest record index of every row.
    pub records: Vec<usize>,
}

/// Training split held in memory at every stage resolution.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    /// Per stage, `(N, 3, R_i, R_i)`.
    images: Vec<Tensor>,
    /// Encoded captions per image.
    captions: Vec<Vec<TokenSequence>>,
    records: Vec<usize>,
}

impl TrainingSet {
    /// Loads the train split, resizing to the final resolution and
    /// average-pooling down for the earlier stages.
    pub fn load(manifest: &DatasetManifest, vocab: &Vocabulary, cfg: &ModelConfig) -> Result<Self> {
        let records = manifest.split("train");
        if records.is_empty() {
            return Err(Error::input("manifest has no training records"));
        }
        let side = cfg.final_resolution() as u32;
        let mut full = Vec::with_capacity(records.len());
        let mut captions = Vec::with_capacity(records.len());
        for &r in &records {
            let rec = &manifest.records[r];
            let mut img = image::open(manifest.image_path(rec))?.to_rgb8();
            if img.dimensions() != (side, side) {
                img = image::imageops::resize(&img, side, side, image::imageops::FilterType::Triangle);
            }
            full.push(image_to_tensor(&img, cfg.dtype())?);
            captions.push(
                rec.captions
                    .iter()
                    .map(|c| vocab.encode(c, cfg.max_len).0)
                    .collect(),
            );
        }
        let top = Tensor::stack(&full, 0)?;
        let mut images = Vec::with_capacity(cfg.stages);
        for stage in 0..cfg.stages {
            let factor = cfg.final_resolution() / cfg.resolution(stage);
            images.push(if factor == 1 { top.clone() } else { top.avg_pool2d(factor)? });
        }
        Ok(Self {
            images,
            captions,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Rows `indices` (into the training split) with caption `choice[i]`.
    pub fn batch(&self, indices: &[usize], choice: &[usize]) -> Result<TrainBatch> {
        let idx = Tensor::from_vec(
            indices.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            indices.len(),
            &Device::Cpu,
        )?;
        let images = self
            .images
            .iter()
            .map(|t| t.index_select(&idx, 0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let seqs: Vec<TokenSequence> = indices
            .iter()
            .zip(choice)
            .map(|(&i, &c)| self.captions[i][c].clone())
            .collect();
        Ok(TrainBatch {
            images,
            tokens: TokenBatch::new(&seqs)?,
            records: indices.iter().map(|&i| self.records[i]).collect(),
        })
    }

    /// Draws `batch_size` distinct images and one caption for each.
    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> Result<TrainBatch> {
        if batch_size > self.len() {
            return Err(Error::input(format!(
                "batch size {batch_size} exceeds the {} training images",
                self.len()
            )));
        }
        let indices = index::sample(rng, self.len(), batch_size).into_vec();
        let choice: Vec<usize> = indices
            .iter()
            .map(|&i| rng.random_range(0..self.captions[i].len()))
            .collect();
        self.batch(&indices, &choice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::new(8, 32);
        let a = make_synthetic_dataset(&spec, 7, &dir.path().join("a")).unwrap();
        let b = make_synthetic_dataset(&spec, 7, &dir.path().join("b")).unwrap();
        assert_eq!(a.records, b.records);
        for r in &a.records {
            let x = std::fs::read(a.image_path(r)).unwrap();
            let y = std::fs::read(b.image_path(r)).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn captions_name_painted_colors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = SyntheticSpec::new(1, 64);
        for _ in 0..20 {
            let s = synthetic_sample(&spec, &mut rng).unwrap();
            for (k, (x0, y0, x1, y1)) in s.boxes.iter().enumerate() {
                assert_eq!((*y0, *y1), (k as u32 * 16, (k as u32 + 1) * 16));
                let c = s.image.get_pixel((x0 + x1) / 2, (y0 + y1) / 2).0;
                assert_eq!(Some(c), palette_color(s.colors[k]));
            }
            assert!(s.captions[0].contains(&format!("{} torso", s.colors[1])));
        }
    }

    #[test]
    fn tensor_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = synthetic_sample(&SyntheticSpec::new(1, 16), &mut rng).unwrap();
        let t = image_to_tensor(&s.image, DType::F32).unwrap();
        assert_eq!(tensor_to_image(&t).unwrap(), s.image);
    }

    #[test]
    fn ingest_reports_all_problems() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, "[]").unwrap();
        assert!(matches!(ingest_dataset(&path), Err(Error::Ingest(_))));
        std::fs::write(
            &path,
            r#"[{"image":"nope.png","captions":[],"id":1,"split":"train"},
                {"image":"gone.png","captions":["x"],"id":2,"split":"train"}]"#,
        )
        .unwrap();
        match ingest_dataset(&path) {
            Err(Error::Ingest(p)) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_captions_give_two_pairs_and_duplicates_allowed() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_synthetic_dataset(&SyntheticSpec::new(2, 16), 1, dir.path()).unwrap();
        let mut records = m.records.clone();
        records.push(ManifestRecord {
            captions: vec!["another caption".into()],
            ..records[0].clone()
        });
        let path = dir.path().join("dup.json");
        std::fs::write(&path, serde_json::to_string(&records).unwrap()).unwrap();
        let m = ingest_dataset(&path).unwrap();
        assert_eq!(m.pairs("train").len(), 5);
        assert!(m.vocabulary().id("another").is_some());
    }
}
