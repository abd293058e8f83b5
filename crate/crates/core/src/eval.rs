//! Zero-shot prediction and explanation faithfulness.
//!
//! Deletion blurs concept regions one at a time, most important first.
//! Insertion starts from the image with every concept region blurred and
//! restores them in the same order. Both record the similarity between the
//! modified image and the class predicted on the clean image.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::descriptors::ZeroShotClassifier;
use crate::embedding::{similarity, EmbeddingVector, EncoderBackend};
use crate::error::{Error, Result};
use crate::imaging::{composite, gaussian_blur, PixelMask};
use crate::mi::normalized_auc;

pub use crate::grounding::concept_rank;

/// Display scale for similarity curves.
pub const PLOT_SCALE: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub predicted: usize,
    pub scores: Vec<f64>,
    pub label: Option<usize>,
    pub correct: Option<bool>,
}

/// Index of the largest score; ties go to the lower index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn zero_shot_predict(
    image_id: &str,
    embedding: &EmbeddingVector,
    classifier: &ZeroShotClassifier,
    label: Option<usize>,
) -> Result<PredictionRecord> {
    let scores = classifier.scores(embedding)?;
    let predicted = argmax(&scores);
    Ok(PredictionRecord {
        image_id: image_id.to_string(),
        predicted,
        scores,
        label,
        correct: label.map(|l| l == predicted),
    })
}

pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    let labelled: Vec<bool> = records.iter().filter_map(|r| r.correct).collect();
    if labelled.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(labelled.iter().filter(|c| **c).count() as f64 / labelled.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveMode {
    Insertion,
    Deletion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessCurve {
    pub mode: CurveMode,
    /// Predicted-class similarity per state, unscaled.
    pub scores: Vec<f64>,
    /// Whether the argmax class equals the label, per state.
    pub correct: Option<Vec<bool>>,
    pub auc: f64,
}

impl FaithfulnessCurve {
    pub fn plot_scores(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s * PLOT_SCALE).collect()
    }
}

/// The `L + 1` images visited by a curve. `regions` must be in rank order.
pub fn region_states(image: &RgbImage, regions: &[PixelMask], mode: CurveMode) -> Result<Vec<RgbImage>> {
    let (w, h) = image.dimensions();
    let blurred = gaussian_blur(image);
    // prefix[t] = union of the first t regions.
    let mut prefix = vec![PixelMask::empty(w, h)];
    for r in regions {
        let next = prefix.last().expect("non-empty").union(r)?;
        prefix.push(next);
    }
    let all = prefix.last().expect("non-empty").clone();
    prefix
        .iter()
        .map(|p| match mode {
            CurveMode::Deletion => composite(&blurred, image, p),
            CurveMode::Insertion => {
                // Blurred where a region has not been restored yet.
                let pending = PixelMask::new(
                    w,
                    h,
                    all.as_slice()
                        .iter()
                        .zip(p.as_slice())
                        .map(|(a, done)| *a && !*done)
                        .collect(),
                )?;
                composite(&blurred, image, &pending)
            }
        })
        .collect()
}

pub fn faithfulness_curve<B: EncoderBackend + ?Sized>(
    image: &RgbImage,
    ranked_regions: &[PixelMask],
    predicted: usize,
    label: Option<usize>,
    classifier: &ZeroShotClassifier,
    backend: &B,
    mode: CurveMode,
) -> Result<FaithfulnessCurve> {
    if predicted >= classifier.num_classes() {
        return Err(Error::InvalidInput(format!("class {predicted} out of range")));
    }
    let mut scores = Vec::with_capacity(ranked_regions.len() + 1);
    let mut correct = Vec::with_capacity(ranked_regions.len() + 1);
    for state in region_states(image, ranked_regions, mode)? {
        let e = backend.embed_image(&state)?;
        let s = classifier.scores(&e)?;
        scores.push(similarity(&e, classifier.row(predicted))?);
        if let Some(l) = label {
            correct.push(argmax(&s) == l);
        }
    }
    Ok(FaithfulnessCurve {
        mode,
        auc: normalized_auc(&scores),
        scores,
        correct: label.map(|_| correct),
    })
}

pub fn deletion_curve<B: EncoderBackend + ?Sized>(
    image: &RgbImage,
    ranked_regions: &[PixelMask],
    predicted: usize,
    label: Option<usize>,
    classifier: &ZeroShotClassifier,
    backend: &B,
) -> Result<FaithfulnessCurve> {
    faithfulness_curve(image, ranked_regions, predicted, label, classifier, backend, CurveMode::Deletion)
}

pub fn insertion_curve<B: EncoderBackend + ?Sized>(
    image: &RgbImage,
    ranked_regions: &[PixelMask],
    predicted: usize,
    label: Option<usize>,
    classifier: &ZeroShotClassifier,
    backend: &B,
) -> Result<FaithfulnessCurve> {
    faithfulness_curve(image, ranked_regions, predicted, label, classifier, backend, CurveMode::Insertion)
}

/// Mean over images of the normalized AUC of each 0/1 accuracy trajectory.
pub fn accuracy_auc(trajectories: &[Vec<bool>]) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total: f64 = trajectories
        .iter()
        .map(|t| normalized_auc(&t.iter().map(|c| if *c { 1.0 } else { 0.0 }).collect::<Vec<_>>()))
        .sum();
    Ok(total / trajectories.len() as f64)
}

fn trajectories(curves: &[FaithfulnessCurve], mode: CurveMode) -> Result<Vec<Vec<bool>>> {
    curves
        .iter()
        .map(|c| {
            if c.mode != mode {
                return Err(Error::InvalidInput(format!("expected {mode:?} curves")));
            }
            c.correct
                .clone()
                .ok_or_else(|| Error::InvalidInput("curve has no labels".into()))
        })
        .collect()
}

/// Accuracy under deletion (lower is better).
pub fn acc_drop(deletion: &[FaithfulnessCurve]) -> Result<f64> {
    accuracy_auc(&trajectories(deletion, CurveMode::Deletion)?)
}

/// Accuracy under insertion (higher is better).
pub fn acc_increase(insertion: &[FaithfulnessCurve]) -> Result<f64> {
    accuracy_auc(&trajectories(insertion, CurveMode::Insertion)?)
}

/// Mean curve AUC over images.
pub fn mean_auc(curves: &[FaithfulnessCurve]) -> Result<f64> {
    if curves.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(curves.iter().map(|c| c.auc).sum::<f64>() / curves.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn clf(rows: Vec<Vec<f32>>) -> ZeroShotClassifier {
        let n = rows.len();
        ZeroShotClassifier::from_weights(
            (0..n).map(|i| format!("c{i}")).collect(),
            vec!["[CLASS]".into()],
            rows.into_iter().map(|r| EmbeddingVector::normalized(r).unwrap()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn own_row_predicts_its_class() {
        let c = clf(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.6, 0.8, 0.0]]);
        let p = zero_shot_predict("x", c.row(3), &c, Some(3)).unwrap();
        assert_eq!(p.predicted, 3);
        assert!((p.scores[3] - 1.0).abs() < 1e-6);
        assert_eq!(p.correct, Some(true));
    }

    #[test]
    fn ties_go_to_the_lower_class() {
        assert_eq!(argmax(&[0.2, 0.7, 0.7, 0.1]), 1);
        let c = clf(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let e = EmbeddingVector::normalized(vec![1.0, 0.0]).unwrap();
        assert_eq!(zero_shot_predict("x", &e, &c, None).unwrap().predicted, 0);
    }

    #[test]
    fn states_have_the_documented_endpoints() {
        let img = RgbImage::from_fn(32, 32, |x, y| Rgb([(x * 8) as u8, (y * 8) as u8, ((x ^ y) * 8) as u8]));
        let mut a = PixelMask::empty(32, 32);
        let mut b = PixelMask::empty(32, 32);
        a = a.union(&PixelMask::new(32, 32, (0..1024).map(|i| i % 32 < 10).collect()).unwrap()).unwrap();
        b = b.union(&PixelMask::new(32, 32, (0..1024).map(|i| i / 32 > 20).collect()).unwrap()).unwrap();
        let del = region_states(&img, &[a.clone(), b.clone()], CurveMode::Deletion).unwrap();
        let ins = region_states(&img, &[a, b], CurveMode::Insertion).unwrap();
        assert_eq!(del.len(), 3);
        assert_eq!(del[0], img);
        assert_eq!(ins[2], img);
        assert_eq!(del[2], ins[0]);
        assert_ne!(del[1], img);
    }

    #[test]
    fn no_regions_gives_a_single_state() {
        let img = RgbImage::new(8, 8);
        assert_eq!(region_states(&img, &[], CurveMode::Insertion).unwrap().len(), 1);
    }

    #[test]
    fn accuracy_auc_by_hand() {
        // Always correct: every step is 1.
        assert_eq!(accuracy_auc(&[vec![true; 4]]).unwrap(), 1.0);
        // [1,0,0] → 0.25 ; [1,1,0] → 0.75 ; mean 0.5.
        let v = accuracy_auc(&[vec![true, false, false], vec![true, true, false]]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert!(accuracy_auc(&[]).is_err());
    }
}
