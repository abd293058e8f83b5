//! End-to-end orchestration: localization, concepts, grounding, language
//! retrieval, mutual information and faithfulness.

use std::collections::BTreeMap;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::{fit_concepts, ConceptSegmentation};
use crate::config::RunConfig;
use crate::dataset::{Dataset, PixelBox};
use crate::descriptors::{build_classifier, DescriptorBank, ZeroShotClassifier};
use crate::embedding::{resize_to_input, similarity, EmbeddingVector, EncoderBackend, PatchFeatureGrid};
use crate::error::{Error, Result};
use crate::eval::{concept_rank, faithfulness_curve, zero_shot_predict, CurveMode, FaithfulnessCurve, PredictionRecord};
use crate::flags::Flag;
use crate::grounding::{
    assign_descriptors, score_concepts, sinkhorn_assign, GroundedConcept, GroundedConceptSet, ImportanceInputs,
};
use crate::imaging::PixelMask;
use crate::language::{retrieve_class_descriptors, ClassConceptSet};
use crate::mi::{mi_dynamics, ConceptIdSet, MiCurve};
use crate::prompting::region_embedding;
use crate::spectral::{affinity, corloc, fiedler_partition, largest_connected_component, CorLoc, FiedlerPartition, ProminenceMask};
use crate::world::SyntheticWorld;

/// One image to process.
#[derive(Debug, Clone)]
pub struct ImageInput {
    pub id: String,
    pub image: RgbImage,
    pub label: Option<usize>,
    pub gt_box: Option<PixelBox>,
}

impl ImageInput {
    pub fn from_dataset(dataset: &Dataset) -> Result<Vec<ImageInput>> {
        dataset
            .items
            .iter()
            .map(|item| {
                Ok(ImageInput {
                    id: item.id.clone(),
                    image: dataset.load_image(item)?,
                    label: Some(item.label),
                    gt_box: item.gt_box,
                })
            })
            .collect()
    }

    /// Every image of a synthetic world, class by class, with ids matching
    /// [`SyntheticWorld::write`].
    pub fn from_world(world: &SyntheticWorld) -> Vec<ImageInput> {
        let mut out = Vec::new();
        for c in 0..world.classes.len() {
            for i in 0..world.images_per_class {
                let (image, gt) = world.render(c, i);
                out.push(ImageInput {
                    id: format!("img_{:03}", c * world.images_per_class + i),
                    image,
                    label: Some(c),
                    gt_box: Some(gt),
                });
            }
        }
        out
    }
}

/// Encoding, prediction and prominent-patch localization of one image.
#[derive(Debug, Clone)]
pub struct ImageAnalysis {
    pub id: String,
    /// The image at model input resolution.
    pub image: RgbImage,
    pub label: Option<usize>,
    pub embedding: EmbeddingVector,
    pub patches: PatchFeatureGrid,
    pub partition: FiedlerPartition,
    /// Largest connected component of the partition.
    pub prominent: ProminenceMask,
    pub corloc: Option<CorLoc>,
    pub prediction: PredictionRecord,
}

#[derive(Debug, Clone)]
pub struct Explanation {
    pub analysis: ImageAnalysis,
    pub segmentation: ConceptSegmentation,
    pub grounded: GroundedConceptSet,
    pub flags: Vec<Flag>,
}

impl Explanation {
    /// Pixel masks of the concepts in importance order.
    pub fn ranked_regions(&self) -> Result<Vec<PixelMask>> {
        concept_rank(&self.grounded)
            .into_iter()
            .map(|i| self.segmentation.concept_pixels(self.grounded.concepts[i].concept))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiResult {
    pub image_id: String,
    pub predicted: usize,
    pub vision: Vec<u32>,
    pub language: ClassConceptSet,
    pub curve: MiCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessResult {
    pub image_id: String,
    pub deletion: FaithfulnessCurve,
    pub insertion: FaithfulnessCurve,
}

fn push_unique(flags: &mut Vec<Flag>, f: Flag) {
    if !flags.contains(&f) {
        flags.push(f);
    }
}

pub struct Pipeline<'a> {
    config: RunConfig,
    backend: &'a dyn EncoderBackend,
    classifier: ZeroShotClassifier,
    bank: DescriptorBank,
}

impl<'a> Pipeline<'a> {
    /// Builds the classifier and embeds the descriptor bank.
    pub fn new(
        config: RunConfig,
        backend: &'a dyn EncoderBackend,
        classes: &[String],
        bank: DescriptorBank,
    ) -> Result<Self> {
        config.validate()?;
        if backend.info().facet != config.facet {
            return Err(Error::Config(format!(
                "backend facet is {} but the run asks for {}",
                backend.info().facet,
                config.facet
            )));
        }
        let classifier = build_classifier(classes, config.templates()?, backend)?;
        let bank = if bank.is_embedded() { bank } else { bank.embed(backend)? };
        Ok(Self {
            config,
            backend,
            classifier,
            bank,
        })
    }

    /// Loads dataset and descriptors named in the config.
    pub fn from_config(config: RunConfig, backend: &'a dyn EncoderBackend) -> Result<(Self, Dataset)> {
        let dataset = Dataset::load(config.require_dataset()?)?;
        let bank = DescriptorBank::load(config.require_descriptors()?)?;
        let classes = dataset.classes.clone();
        Ok((Self::new(config, backend, &classes, bank)?, dataset))
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn classifier(&self) -> &ZeroShotClassifier {
        &self.classifier
    }

    pub fn bank(&self) -> &DescriptorBank {
        &self.bank
    }

    pub fn backend(&self) -> &dyn EncoderBackend {
        self.backend
    }

    fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        Ok(self.config.thread_pool()?.install(f))
    }

    pub fn analyze(&self, input: &ImageInput) -> Result<ImageAnalysis> {
        let info = self.backend.info();
        let scale_x = info.input_size as f64 / input.image.width() as f64;
        let scale_y = info.input_size as f64 / input.image.height() as f64;
        let image = resize_to_input(&input.image, info)?;
        let (embedding, patches) = self.backend.encode_image(&image)?;
        let partition = fiedler_partition(&affinity(&patches)?)?;
        let prominent = largest_connected_component(&partition.mask)?;
        let corloc = match input.gt_box {
            Some(b) => Some(corloc(
                &prominent,
                &PixelBox {
                    x0: b.x0 * scale_x,
                    y0: b.y0 * scale_y,
                    x1: b.x1 * scale_x,
                    y1: b.y1 * scale_y,
                },
            )?),
            None => None,
        };
        let prediction = zero_shot_predict(&input.id, &embedding, &self.classifier, input.label)?;
        Ok(ImageAnalysis {
            id: input.id.clone(),
            image,
            label: input.label,
            embedding,
            patches,
            partition,
            prominent,
            corloc,
            prediction,
        })
    }

    pub fn analyze_all(&self, inputs: &[ImageInput]) -> Result<Vec<ImageAnalysis>> {
        self.in_pool(|| inputs.par_iter().map(|i| self.analyze(i)).collect::<Result<Vec<_>>>())?
    }

    /// Grounds one image's concepts in the descriptor bank.
    pub fn ground(&self, analysis: &ImageAnalysis, segmentation: &ConceptSegmentation) -> Result<(GroundedConceptSet, Vec<Flag>)> {
        let mut flags = Vec::new();
        let padding = self.backend.info().patch_size as u32;
        let present = segmentation.present();
        for c in 0..segmentation.l {
            if !present.contains(&c) {
                flags.push(Flag::ConceptAbsent { concept: c });
            }
        }
        let mut regions = Vec::with_capacity(present.len());
        for &c in &present {
            let region = segmentation.concept_region(c)?;
            let r = region_embedding(&analysis.image, &region, padding, self.backend)?;
            for f in r.flags {
                push_unique(&mut flags, f);
            }
            regions.push(r.embedding);
        }
        let concepts: Vec<(usize, Vec<usize>)> = present
            .iter()
            .map(|&c| (c, (0..segmentation.labels.len()).filter(|&p| segmentation.labels[p] == Some(c)).collect()))
            .collect();
        if regions.is_empty() {
            return Ok((GroundedConceptSet { concepts: Vec::new(), flags: Vec::new() }, flags));
        }
        let mut scores = score_concepts(&regions, &self.bank)?;
        for f in scores.apply_filter(self.config.k)? {
            // Rows are positions in `present`; report concept labels.
            if let Flag::EmptyCandidateSet { concept } = f {
                flags.push(Flag::EmptyCandidateSet { concept: present[concept] });
            }
        }
        let inputs = ImportanceInputs {
            region_similarity: regions
                .iter()
                .map(|r| similarity(&analysis.embedding, r))
                .collect::<Result<_>>()?,
            descriptor_similarity: self
                .bank
                .embeddings()?
                .iter()
                .map(|d| similarity(&analysis.embedding, d))
                .collect::<Result<_>>()?,
            concepts,
        };
        let grounded = match sinkhorn_assign(&scores, &self.config.sinkhorn_options()) {
            Ok(plan) => {
                if !plan.converged {
                    flags.push(Flag::SinkhornNotConverged { iterations: plan.iterations });
                }
                assign_descriptors(&plan, &scores, self.config.top_n, &inputs)?
            }
            Err(Error::AllMasked) => GroundedConceptSet {
                concepts: inputs
                    .concepts
                    .iter()
                    .zip(&inputs.region_similarity)
                    .map(|((c, patches), s)| GroundedConcept {
                        concept: *c,
                        colour: crate::imaging::concept_colour(*c),
                        patches: patches.clone(),
                        descriptors: Vec::new(),
                        region_similarity: *s,
                        importance: 0.0,
                    })
                    .collect(),
                flags: present.iter().map(|&c| Flag::EmptyPlanRow { concept: c }).collect(),
            },
            Err(e) => return Err(e),
        };
        Ok((grounded, flags))
    }

    /// Fits concepts per group (ground-truth class when known, else the
    /// prediction) and grounds every image.
    pub fn explain_analyses(&self, analyses: Vec<ImageAnalysis>) -> Result<Vec<Explanation>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, a) in analyses.iter().enumerate() {
            groups
                .entry(a.label.unwrap_or(a.prediction.predicted))
                .or_default()
                .push(i);
        }
        let mut segs: Vec<Option<(ConceptSegmentation, Vec<Flag>)>> = vec![None; analyses.len()];
        for members in groups.values() {
            let batch: Vec<(&PatchFeatureGrid, &ProminenceMask)> =
                members.iter().map(|&i| (&analyses[i].patches, &analyses[i].prominent)).collect();
            let fit = fit_concepts(&batch, &self.config.concept_options())?;
            for (&i, seg) in members.iter().zip(fit.segmentations) {
                segs[i] = Some((seg, fit.flags.clone()));
            }
        }
        let grounded: Vec<(GroundedConceptSet, Vec<Flag>)> = self.in_pool(|| {
            analyses
                .par_iter()
                .zip(segs.par_iter())
                .map(|(a, s)| self.ground(a, &s.as_ref().expect("every image is in a group").0))
                .collect::<Result<Vec<_>>>()
        })??;
        Ok(analyses
            .into_iter()
            .zip(segs)
            .zip(grounded)
            .map(|((analysis, seg), (grounded, ground_flags))| {
                let (segmentation, fit_flags) = seg.expect("every image is in a group");
                let mut flags = analysis.partition.flags.clone();
                for f in fit_flags.into_iter().chain(ground_flags).chain(grounded.flags.iter().cloned()) {
                    push_unique(&mut flags, f);
                }
                Explanation {
                    analysis,
                    segmentation,
                    grounded,
                    flags,
                }
            })
            .collect())
    }

    pub fn explain(&self, inputs: &[ImageInput]) -> Result<Vec<Explanation>> {
        let analyses = self.analyze_all(inputs)?;
        self.explain_analyses(analyses)
    }

    /// Language-side concepts for a class.
    pub fn class_concepts(&self, class: usize) -> Result<ClassConceptSet> {
        retrieve_class_descriptors(class, self.classifier.row(class), &self.bank, self.config.u)
    }

    /// MI dynamics between an explanation and its predicted class.
    pub fn mutual_information(&self, e: &Explanation) -> Result<MiResult> {
        let predicted = e.analysis.prediction.predicted;
        let language = self.class_concepts(predicted)?;
        let vision = e.grounded.ranked_descriptor_ids();
        let dy = ConceptIdSet::new(language.ids.clone())?;
        let curve = if vision.is_empty() {
            MiCurve {
                values: vec![0.0],
                auc: 0.0,
                order: Vec::new(),
                flags: vec![Flag::NoOverlap],
            }
        } else {
            mi_dynamics(&ConceptIdSet::new(vision.clone())?, &dy)?
        };
        Ok(MiResult {
            image_id: e.analysis.id.clone(),
            predicted,
            vision,
            language,
            curve,
        })
    }

    pub fn faithfulness(&self, e: &Explanation) -> Result<FaithfulnessResult> {
        let regions = e.ranked_regions()?;
        let predicted = e.analysis.prediction.predicted;
        let curve = |mode| {
            faithfulness_curve(
                &e.analysis.image,
                &regions,
                predicted,
                e.analysis.label,
                &self.classifier,
                self.backend,
                mode,
            )
        };
        Ok(FaithfulnessResult {
            image_id: e.analysis.id.clone(),
            deletion: curve(CurveMode::Deletion)?,
            insertion: curve(CurveMode::Insertion)?,
        })
    }

    pub fn faithfulness_all(&self, explanations: &[Explanation]) -> Result<Vec<FaithfulnessResult>> {
        self.in_pool(|| explanations.par_iter().map(|e| self.faithfulness(e)).collect::<Result<Vec<_>>>())?
    }
}
