//! Zero-shot classification with descriptors, boosted by explanations of
//! confusable classes.
//!
//! A class is scored by the mean similarity between the image and prompts
//! pairing the class name with each of its descriptors. For every class, the
//! two classes whose classifier rows are closest contribute the descriptors
//! found in their own explanations. An augmentation is kept only if the
//! class's own accuracy does not drop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::descriptors::{DescriptorBank, ZeroShotClassifier};
use crate::embedding::{similarity, EmbeddingVector, EncoderBackend};
use crate::error::{Error, Result};
use crate::eval::argmax;
use crate::flags::Flag;

pub const NEIGHBOURS: usize = 2;

pub fn boost_prompt(class: &str, descriptor: &str) -> String {
    format!("how can you identify a {class}. Distinctive and physical features describing it is {descriptor}")
}

/// The `k` classes whose classifier rows are most similar to `class`'s,
/// excluding itself; ties go to the lower id.
pub fn nearest_classes(classifier: &ZeroShotClassifier, class: usize, k: usize) -> Result<Vec<usize>> {
    let row = classifier.row(class);
    let mut others: Vec<(usize, f64)> = (0..classifier.num_classes())
        .filter(|&c| c != class)
        .map(|c| Ok((c, similarity(row, classifier.row(c))?)))
        .collect::<Result<_>>()?;
    others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(others.into_iter().take(k).map(|(c, _)| c).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBoost {
    pub class: String,
    pub neighbours: Vec<String>,
    /// Descriptor ids offered by the neighbours' explanations.
    pub added: Vec<u32>,
    pub accepted: bool,
    pub baseline_accuracy: f64,
    pub boosted_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostReport {
    pub baseline_accuracy: f64,
    pub boosted_accuracy: f64,
    pub per_class: Vec<ClassBoost>,
    pub flags: Vec<Flag>,
}

/// Cached prompt embeddings for (class, descriptor) pairs.
struct PairCache {
    vectors: BTreeMap<(usize, u32), EmbeddingVector>,
}

impl PairCache {
    fn build<B: EncoderBackend + ?Sized>(
        pairs: &[(usize, u32)],
        classes: &[String],
        bank: &DescriptorBank,
        backend: &B,
    ) -> Result<Self> {
        let prompts: Vec<String> = pairs
            .iter()
            .map(|&(c, d)| boost_prompt(&classes[c], bank.text(d)))
            .collect();
        let vectors = backend.encode_texts(&prompts)?;
        Ok(Self {
            vectors: pairs.iter().copied().zip(vectors).collect(),
        })
    }
}

/// Per-image class scores for the given descriptor lists. Classes with no
/// descriptors fall back to the classifier row.
fn class_scores(
    image: &EmbeddingVector,
    lists: &[Vec<u32>],
    cache: &PairCache,
    classifier: &ZeroShotClassifier,
) -> Result<Vec<f64>> {
    lists
        .iter()
        .enumerate()
        .map(|(c, ids)| {
            if ids.is_empty() {
                return similarity(image, classifier.row(c));
            }
            let mut sum = 0.0;
            for d in ids {
                sum += similarity(image, &cache.vectors[&(c, *d)])?;
            }
            Ok(sum / ids.len() as f64)
        })
        .collect()
}

fn predictions(
    images: &[(EmbeddingVector, usize)],
    lists: &[Vec<u32>],
    cache: &PairCache,
    classifier: &ZeroShotClassifier,
) -> Result<Vec<usize>> {
    images
        .iter()
        .map(|(e, _)| class_scores(e, lists, cache, classifier).map(|s| argmax(&s)))
        .collect()
}

fn overall(images: &[(EmbeddingVector, usize)], preds: &[usize]) -> f64 {
    let hits = images.iter().zip(preds).filter(|((_, l), p)| l == *p).count();
    hits as f64 / images.len() as f64
}

fn class_accuracy(images: &[(EmbeddingVector, usize)], preds: &[usize], class: usize) -> f64 {
    let (mut n, mut hits) = (0, 0);
    for ((_, l), p) in images.iter().zip(preds) {
        if *l == class {
            n += 1;
            hits += usize::from(p == l);
        }
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Runs the boost experiment.
///
/// * `base`: each class's own descriptor ids.
/// * `explanations`: descriptor ids found in explanations of each class's
///   images; a class without an entry has no explanations.
/// * `images`: joint embeddings with ground-truth labels.
pub fn descriptor_boost<B: EncoderBackend + ?Sized>(
    classifier: &ZeroShotClassifier,
    base: &[Vec<u32>],
    explanations: &BTreeMap<usize, Vec<u32>>,
    bank: &DescriptorBank,
    images: &[(EmbeddingVector, usize)],
    backend: &B,
) -> Result<BoostReport> {
    let classes = classifier.classes().to_vec();
    let n = classes.len();
    if base.len() != n {
        return Err(Error::DimensionMismatch {
            what: "descriptor lists vs classes",
            expected: n,
            found: base.len(),
        });
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some((_, l)) = images.iter().find(|(_, l)| *l >= n) {
        return Err(Error::InvalidInput(format!("label {l} out of range")));
    }

    let mut flags = Vec::new();
    let mut neighbours = Vec::with_capacity(n);
    let mut offered = Vec::with_capacity(n);
    for c in 0..n {
        let near = nearest_classes(classifier, c, NEIGHBOURS)?;
        let mut add = Vec::new();
        for &m in &near {
            match explanations.get(&m) {
                Some(ids) => {
                    for id in ids {
                        if !base[c].contains(id) && !add.contains(id) {
                            add.push(*id);
                        }
                    }
                }
                None => flags.push(Flag::MissingNeighborExplanations { class: c, neighbor: m }),
            }
        }
        neighbours.push(near);
        offered.push(add);
    }

    let mut pairs: Vec<(usize, u32)> = Vec::new();
    for c in 0..n {
        for d in base[c].iter().chain(&offered[c]) {
            pairs.push((c, *d));
        }
    }
    let cache = PairCache::build(&pairs, &classes, bank, backend)?;

    let mut lists: Vec<Vec<u32>> = base.to_vec();
    let base_preds = predictions(images, &lists, &cache, classifier)?;
    let baseline_accuracy = overall(images, &base_preds);
    let mut current = base_preds.clone();
    let mut per_class = Vec::with_capacity(n);
    for c in 0..n {
        let before = class_accuracy(images, &current, c);
        let mut accepted = false;
        let mut after = before;
        if !offered[c].is_empty() {
            let mut trial = lists.clone();
            trial[c].extend(&offered[c]);
            let preds = predictions(images, &trial, &cache, classifier)?;
            let acc = class_accuracy(images, &preds, c);
            if acc >= before {
                accepted = true;
                after = acc;
                lists = trial;
                current = preds;
            }
        }
        per_class.push(ClassBoost {
            class: classes[c].clone(),
            neighbours: neighbours[c].iter().map(|&m| classes[m].clone()).collect(),
            added: offered[c].clone(),
            accepted,
            baseline_accuracy: class_accuracy(images, &base_preds, c),
            boosted_accuracy: after,
        });
    }
    // Per-class figures after all decisions.
    for (c, pc) in per_class.iter_mut().enumerate() {
        pc.boosted_accuracy = class_accuracy(images, &current, c);
    }
    Ok(BoostReport {
        baseline_accuracy,
        boosted_accuracy: overall(images, &current),
        per_class,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::build_classifier;
    use crate::world::SyntheticWorld;

    #[test]
    fn prompt_wording() {
        assert_eq!(
            boost_prompt("heron", "long legs"),
            "how can you identify a heron. Distinctive and physical features describing it is long legs"
        );
    }

    #[test]
    fn nothing_offered_keeps_the_baseline() {
        let w = SyntheticWorld::standard(7, 1);
        let enc = w.encoder().unwrap();
        let bank = DescriptorBank::from_class_lists(&w.descriptors()).unwrap();
        let classes = w.class_names();
        let clf = build_classifier(&classes, &["a photo of a [CLASS]."], &enc).unwrap();
        let base: Vec<Vec<u32>> = classes.iter().map(|c| bank.class_ids(c).unwrap().to_vec()).collect();
        let images: Vec<(EmbeddingVector, usize)> = (0..classes.len()).map(|c| (clf.row(c).clone(), c)).collect();
        let r = descriptor_boost(&clf, &base, &BTreeMap::new(), &bank, &images, &enc).unwrap();
        assert_eq!(r.baseline_accuracy, r.boosted_accuracy);
        assert!(r.per_class.iter().all(|c| !c.accepted));
        assert_eq!(r.flags.len(), 2 * classes.len());
    }

    #[test]
    fn neighbours_exclude_self() {
        let w = SyntheticWorld::standard(7, 1);
        let enc = w.encoder().unwrap();
        let clf = build_classifier(&w.class_names(), &["a photo of a [CLASS]."], &enc).unwrap();
        for c in 0..clf.num_classes() {
            let n = nearest_classes(&clf, c, 2).unwrap();
            assert_eq!(n.len(), 2);
            assert!(!n.contains(&c));
        }
    }
}
