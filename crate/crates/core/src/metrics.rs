//! Pose Score, Pose Variance and Inception Score, plus the keypoint
//! detector adapter and a band-layout oracle detector for synthetic images.

use std::fmt;
use std::io::{BufRead, Write};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of body keypoints per pedestrian.
pub const NUM_KEYPOINTS: usize = 18;

/// Default coordinate normalizer for Pose Variance.
pub const DEFAULT_B_MAX: f64 = 256.0;

/// Keypoint names in the 18-part COCO ordering used by OpenPose.
pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_eye",
    "left_eye",
    "right_ear",
    "left_ear",
];

/// Detected body parts of one image; `None` marks an undetected part.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub parts: [Option<(f64, f64)>; NUM_KEYPOINTS],
}

impl KeypointSet {
    pub fn empty() -> Self {
        Self {
            parts: [None; NUM_KEYPOINTS],
        }
    }

    pub fn detected_count(&self) -> usize {
        self.parts.iter().filter(|p| p.is_some()).count()
    }

    /// Checks detected coordinates lie inside an `size x size` image.
    pub fn validate(&self, size: f64) -> Result<()> {
        for (i, p) in self.parts.iter().enumerate() {
            if let Some((x, y)) = p {
                if !(0.0..size).contains(x) || !(0.0..size).contains(y) {
                    return Err(Error::input(format!(
                        "keypoint {} at ({x}, {y}) outside a {size}px image",
                        KEYPOINT_NAMES[i]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Multiplies every detected coordinate by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            parts: self.parts.map(|p| p.map(|(x, y)| (x * factor, y * factor))),
        }
    }
}

/// `PS = mean over images of (#detected / 18)`.
pub fn pose_score(detections: &[KeypointSet]) -> Result<f64> {
    if detections.is_empty() {
        return Err(Error::input("pose score needs at least one image"));
    }
    let total: f64 = detections
        .iter()
        .map(|d| d.detected_count() as f64 / NUM_KEYPOINTS as f64)
        .sum();
    Ok(total / detections.len() as f64)
}

/// `PV = exp(mean over parts and axes of Var(coordinate / b_max))`.
///
/// Variance is the population variance over the images in which the part
/// was detected; a part seen in fewer than two images contributes zero.
pub fn pose_variance(detections: &[KeypointSet], b_max: f64) -> Result<f64> {
    if detections.len() < 2 {
        return Err(Error::input(format!(
            "pose variance needs at least two images, got {}",
            detections.len()
        )));
    }
    if !(b_max > 0.0 && b_max.is_finite()) {
        return Err(Error::input("b_max must be positive"));
    }
    let mut total = 0.0;
    for part in 0..NUM_KEYPOINTS {
        for axis in 0..2 {
            let values: Vec<f64> = detections
                .iter()
                .filter_map(|d| d.parts[part])
                .map(|(x, y)| if axis == 0 { x } else { y } / b_max)
                .collect();
            total += population_variance(&values);
        }
    }
    Ok((total / (2 * NUM_KEYPOINTS) as f64).exp())
}

fn population_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Fraction of images in which each keypoint was detected.
pub fn part_detection_rates(detections: &[KeypointSet]) -> Vec<f64> {
    let n = detections.len().max(1) as f64;
    (0..NUM_KEYPOINTS)
        .map(|k| detections.iter().filter(|d| d.parts[k].is_some()).count() as f64 / n)
        .collect()
}

/// Inception Score from per-image class probabilities, split into `splits`
/// contiguous chunks: `exp(mean_x KL(p(y|x) || p(y)))` per chunk, returned as
/// the mean and population standard deviation across chunks.
pub fn inception_score(class_probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    if class_probs.is_empty() {
        return Err(Error::input("inception score needs at least one row"));
    }
    if splits == 0 || splits > class_probs.len() {
        return Err(Error::input(format!(
            "cannot split {} rows into {splits} groups",
            class_probs.len()
        )));
    }
    let classes = class_probs[0].len();
    for (i, row) in class_probs.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.len() != classes || (sum - 1.0).abs() > 1e-6 || row.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::input(format!("row {i} is not a probability vector")));
        }
    }
    let n = class_probs.len();
    let mut scores = Vec::with_capacity(splits);
    for k in 0..splits {
        let chunk = &class_probs[k * n / splits..(k + 1) * n / splits];
        let m = chunk.len() as f64;
        let marginal: Vec<f64> = (0..classes)
            .map(|c| chunk.iter().map(|r| r[c]).sum::<f64>() / m)
            .collect();
        let mean_kl = chunk
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&marginal)
                    .filter(|(p, _)| **p > 0.0)
                    .map(|(p, q)| p * (p.ln() - q.ln()))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / m;
        scores.push(mean_kl.exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// Probability that a random positive outscores a random negative, with
/// ties counted as one half (Mann-Whitney statistic).
pub fn auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::input("AUC needs positive and negative samples"));
    }
    let mut wins = 0.0;
    for p in positive {
        for n in negative {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (positive.len() * negative.len()) as f64)
}

/// A pose estimator returning the 18 keypoints of one image.
pub trait KeypointDetector {
    fn name(&self) -> &str;
    fn detect(&self, image: &RgbImage) -> std::result::Result<KeypointSet, String>;
}

/// Runs `detector` on `image`, tagging failures with `image_id`.
pub fn detect_keypoints(
    image: &RgbImage,
    image_id: &str,
    detector: &dyn KeypointDetector,
) -> Result<KeypointSet> {
    let set = detector.detect(image).map_err(|message| Error::Detector {
        image_id: image_id.to_string(),
        message,
    })?;
    set.validate(image.width().max(image.height()) as f64)
        .map_err(|e| Error::Detector {
            image_id: image_id.to_string(),
            message: e.to_string(),
        })?;
    Ok(set)
}

/// Oracle detector for the synthetic band layout.
///
/// The background colour is read from the top-left pixel. Each horizontal
/// quarter of the image is a body band (head, torso, legs, feet); a band
/// counts as present when at least `min_fraction` of its pixels differ from
/// the background by more than `threshold` in some channel. The keypoints of
/// a present band are placed at fixed positions inside the foreground
/// bounding box of that band.
#[derive(Debug, Clone)]
pub struct BandLayoutDetector {
    pub threshold: u8,
    pub min_fraction: f64,
}

impl Default for BandLayoutDetector {
    fn default() -> Self {
        Self {
            threshold: 40,
            min_fraction: 0.05,
        }
    }
}

/// Keypoint slots per band, with positions relative to the band's foreground
/// box as `(fraction of width from left, fraction of height from top)`.
const BAND_KEYPOINTS: [&[(usize, f64, f64)]; 4] = [
    // head: nose, eyes, ears
    &[(0, 0.5, 0.5), (14, 0.33, 0.33), (15, 0.67, 0.33), (16, 0.1, 0.5), (17, 0.9, 0.5)],
    // torso: neck, shoulders, elbows, wrists
    &[
        (1, 0.5, 0.0),
        (2, 0.1, 0.1),
        (5, 0.9, 0.1),
        (3, 0.0, 0.5),
        (6, 1.0, 0.5),
        (4, 0.0, 1.0),
        (7, 1.0, 1.0),
    ],
    // legs: hips, knees
    &[(8, 0.25, 0.0), (11, 0.75, 0.0), (9, 0.25, 0.5), (12, 0.75, 0.5)],
    // feet: ankles
    &[(10, 0.25, 0.5), (13, 0.75, 0.5)],
];

impl KeypointDetector for BandLayoutDetector {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn detect(&self, image: &RgbImage) -> std::result::Result<KeypointSet, String> {
        let (w, h) = image.dimensions();
        if w == 0 || h < 4 {
            return Err(format!("image of {w}x{h} is too small"));
        }
        let bg = image.get_pixel(0, 0).0;
        let is_fg = |x: u32, y: u32| {
            let p = image.get_pixel(x, y).0;
            (0..3).any(|c| p[c].abs_diff(bg[c]) > self.threshold)
        };
        let mut set = KeypointSet::empty();
        let band_h = h / 4;
        for (band, slots) in BAND_KEYPOINTS.iter().enumerate() {
            let y0 = band as u32 * band_h;
            let y1 = if band == 3 { h } else { y0 + band_h };
            let mut count = 0usize;
            let (mut min_x, mut max_x, mut min_y, mut max_y) = (u32::MAX, 0, u32::MAX, 0);
            for y in y0..y1 {
                for x in 0..w {
                    if is_fg(x, y) {
                        count += 1;
                        min_x = min_x.min(x);
                        max_x = max_x.max(x);
                        min_y = min_y.min(y);
                        max_y = max_y.max(y);
                    }
                }
            }
            let area = (w * (y1 - y0)) as f64;
            if count == 0 || (count as f64) < self.min_fraction * area {
                continue;
            }
            let (bx, by) = (min_x as f64, min_y as f64);
            let (bw, bh) = ((max_x - min_x) as f64, (max_y - min_y) as f64);
            for &(slot, fx, fy) in slots.iter() {
                set.parts[slot] = Some((bx + fx * bw, by + fy * bh));
            }
        }
        Ok(set)
    }
}

/// Summary of pose metrics over a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub images: usize,
    pub pose_score: f64,
    pub pose_variance: Option<f64>,
    /// Why `pose_variance` is missing, when it is.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pose_variance_note: Option<String>,
    pub b_max: f64,
    /// Keypoint name and detection rate, in COCO order.
    pub part_detection_rates: Vec<(String, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inception_score: Option<InceptionSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InceptionSummary {
    pub mean: f64,
    pub std: f64,
    pub splits: usize,
}

impl PoseReport {
    /// Builds the report; pose variance is omitted (with a note) when fewer
    /// than two images are available.
    pub fn from_detections(detections: &[KeypointSet], b_max: f64) -> Result<Self> {
        let pose_score = pose_score(detections)?;
        let (pose_variance, pose_variance_note) = if detections.len() < 2 {
            (
                None,
                Some(format!(
                    "pose variance needs at least two images, got {}",
                    detections.len()
                )),
            )
        } else {
            (Some(pose_variance(detections, b_max)?), None)
        };
        Ok(Self {
            images: detections.len(),
            pose_score,
            pose_variance,
            pose_variance_note,
            b_max,
            part_detection_rates: KEYPOINT_NAMES
                .iter()
                .map(|n| n.to_string())
                .zip(part_detection_rates(detections))
                .collect(),
            inception_score: None,
        })
    }
}

impl fmt::Display for PoseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "images         {}", self.images)?;
        writeln!(f, "pose score     {:.4}", self.pose_score)?;
        match (self.pose_variance, &self.pose_variance_note) {
            (Some(pv), _) => writeln!(f, "pose variance  {pv:.4}")?,
            (None, Some(note)) => writeln!(f, "pose variance  n/a ({note})")?,
            (None, None) => writeln!(f, "pose variance  n/a")?,
        }
        if let Some(is) = &self.inception_score {
            writeln!(f, "inception      {:.4} ± {:.4} ({} splits)", is.mean, is.std, is.splits)?;
        }
        writeln!(f, "detection rate per keypoint:")?;
        for (name, rate) in &self.part_detection_rates {
            writeln!(f, "  {name:<16}{rate:.3}")?;
        }
        Ok(())
    }
}

/// One line of the detections interchange file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub id: String,
    /// 18 entries of `[x, y, detected]`, with `detected` as 0 or 1.
    pub keypoints: Vec<[f64; 3]>,
}

impl DetectionRecord {
    pub fn new(id: impl Into<String>, set: &KeypointSet) -> Self {
        Self {
            id: id.into(),
            keypoints: set
                .parts
                .iter()
                .map(|p| match p {
                    Some((x, y)) => [*x, *y, 1.0],
                    None => [0.0, 0.0, 0.0],
                })
                .collect(),
        }
    }

    pub fn keypoint_set(&self) -> Result<KeypointSet> {
        if self.keypoints.len() != NUM_KEYPOINTS {
            return Err(Error::input(format!(
                "record `{}` has {} keypoints, expected {NUM_KEYPOINTS}",
                self.id,
                self.keypoints.len()
            )));
        }
        let mut set = KeypointSet::empty();
        for (slot, [x, y, flag]) in set.parts.iter_mut().zip(&self.keypoints) {
            *slot = (*flag != 0.0).then_some((*x, *y));
        }
        Ok(set)
    }
}

pub fn write_detections(mut out: impl Write, records: &[DetectionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_detections(input: impl BufRead) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
