//! The textual descriptor pool and zero-shot classifier weights.
//!
//! Descriptor files map class names to descriptor lists:
//!
//! ```json
//! {"heron": ["long thin legs", "grey plumage"], "fox": ["bushy tail"]}
//! ```
//!
//! Descriptors are pooled across classes. Duplicates are detected after
//! trimming whitespace and ignoring case; the first spelling wins. Ids are
//! assigned in order of first appearance, walking classes in sorted order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{similarity, BackendInfo, EmbeddingVector, EncoderBackend};
use crate::error::{Error, Result};
use crate::store::{EmbeddingStore, StoreHeader};

/// Text encoder prompt for a descriptor; `[DES]` is replaced.
pub const DESCRIPTOR_TEMPLATE: &str = "a photo showing [DES]";

pub const IMAGENET_TEMPLATES: [&str; 8] = [
    "itap of a [CLASS].",
    "a bad photo of the [CLASS].",
    "a origami [CLASS].",
    "a photo of the large [CLASS].",
    "a [CLASS] in a video game.",
    "art of the [CLASS].",
    "a photo of the small [CLASS].",
    "a photo of a [CLASS].",
];

pub const PLACES365_TEMPLATES: [&str; 3] = [
    "a photo taken in an [CLASS].",
    "a photo of a [CLASS].",
    "a scene taken in a [CLASS].",
];

pub const FOOD101_TEMPLATES: [&str; 1] = ["a photo of [CLASS], a type of food."];

/// Template set by dataset name (`imagenet`, `places365`, `food101`).
pub fn templates_for(dataset: &str) -> Option<&'static [&'static str]> {
    match dataset.to_ascii_lowercase().as_str() {
        "imagenet" => Some(&IMAGENET_TEMPLATES),
        "places365" => Some(&PLACES365_TEMPLATES),
        "food101" => Some(&FOOD101_TEMPLATES),
        _ => None,
    }
}

pub fn instantiate(template: &str, class: &str) -> String {
    template.replace("[CLASS]", class)
}

fn dedup_key(text: &str) -> String {
    text.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorEntry {
    pub id: u32,
    pub text: String,
    /// Classes whose lists contained this descriptor, in sorted order.
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorBank {
    entries: Vec<DescriptorEntry>,
    class_lists: BTreeMap<String, Vec<u32>>,
    template: String,
    embeddings: Option<Vec<EmbeddingVector>>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    template: &'a str,
    count: usize,
    descriptors: &'a [DescriptorEntry],
}

impl DescriptorBank {
    pub fn from_class_lists(lists: &BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut entries: Vec<DescriptorEntry> = Vec::new();
        let mut index: HashMap<String, u32> = HashMap::new();
        let mut class_lists = BTreeMap::new();
        for (class, list) in lists {
            let mut ids = Vec::new();
            for text in list {
                let key = dedup_key(text);
                if key.is_empty() {
                    continue;
                }
                let id = *index.entry(key).or_insert_with(|| {
                    entries.push(DescriptorEntry {
                        id: entries.len() as u32,
                        text: text.trim().to_string(),
                        sources: Vec::new(),
                    });
                    entries.len() as u32 - 1
                });
                let e = &mut entries[id as usize];
                if e.sources.last() != Some(class) {
                    e.sources.push(class.clone());
                }
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
            class_lists.insert(class.clone(), ids);
        }
        if entries.is_empty() {
            return Err(Error::EmptyPool);
        }
        Ok(Self {
            entries,
            class_lists,
            template: DESCRIPTOR_TEMPLATE.to_string(),
            embeddings: None,
        })
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let lists: BTreeMap<String, Vec<String>> = serde_json::from_slice(bytes)?;
        Self::from_class_lists(&lists)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read(path).map_err(Error::at(path))?)
    }

    /// The per-class lists after dedup, in the input JSON layout.
    pub fn class_lists_json(&self) -> BTreeMap<String, Vec<String>> {
        self.class_lists
            .iter()
            .map(|(c, ids)| (c.clone(), ids.iter().map(|i| self.text(*i).to_string()).collect()))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::report::write_atomic(path.as_ref(), &serde_json::to_vec_pretty(&self.class_lists_json())?)
    }

    pub fn with_template(mut self, template: impl Into<String>) -> Self {
        self.template = template.into();
        self.embeddings = None;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DescriptorEntry] {
        &self.entries
    }

    pub fn text(&self, id: u32) -> &str {
        &self.entries[id as usize].text
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn class_ids(&self, class: &str) -> Option<&[u32]> {
        self.class_lists.get(class).map(|v| v.as_slice())
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.class_lists.keys().map(|s| s.as_str())
    }

    pub fn id_of(&self, text: &str) -> Option<u32> {
        let key = dedup_key(text);
        self.entries.iter().find(|e| dedup_key(&e.text) == key).map(|e| e.id)
    }

    pub fn prompt(&self, id: u32) -> String {
        self.template.replace("[DES]", self.text(id))
    }

    pub fn prompts(&self) -> Vec<String> {
        (0..self.len() as u32).map(|i| self.prompt(i)).collect()
    }

    /// Encodes every descriptor through the template.
    pub fn embed<B: EncoderBackend + ?Sized>(mut self, backend: &B) -> Result<Self> {
        let vectors = backend.encode_texts(&self.prompts())?;
        if vectors.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "descriptor embeddings",
                expected: self.len(),
                found: vectors.len(),
            });
        }
        self.embeddings = Some(vectors);
        Ok(self)
    }

    pub fn is_embedded(&self) -> bool {
        self.embeddings.is_some()
    }

    pub fn embeddings(&self) -> Result<&[EmbeddingVector]> {
        self.embeddings
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("descriptor bank has not been embedded".into()))
    }

    pub fn embedding(&self, id: u32) -> Result<&EmbeddingVector> {
        Ok(&self.embeddings()?[id as usize])
    }

    /// Bank manifest: template, ids, texts and provenance.
    pub fn manifest_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(Manifest {
            template: &self.template,
            count: self.len(),
            descriptors: &self.entries,
        })?)
    }

    /// Text-embedding block keyed by the instantiated prompts.
    pub fn to_store(&self, info: &BackendInfo) -> Result<EmbeddingStore> {
        let mut store = EmbeddingStore::new(StoreHeader::from_info(info));
        for (prompt, v) in self.prompts().into_iter().zip(self.embeddings()?) {
            store.insert_text(prompt, v.clone())?;
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotClassifier {
    classes: Vec<String>,
    templates: Vec<String>,
    weights: Vec<EmbeddingVector>,
}

impl ZeroShotClassifier {
    pub fn from_weights(classes: Vec<String>, templates: Vec<String>, weights: Vec<EmbeddingVector>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidInput("classifier needs at least one class".into()));
        }
        if classes.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                what: "classifier rows",
                expected: classes.len(),
                found: weights.len(),
            });
        }
        Ok(Self { classes, templates, weights })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn weights(&self) -> &[EmbeddingVector] {
        &self.weights
    }

    pub fn row(&self, class: usize) -> &EmbeddingVector {
        &self.weights[class]
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Dot product of an image embedding with every class row.
    pub fn scores(&self, image: &EmbeddingVector) -> Result<Vec<f64>> {
        self.weights.iter().map(|w| similarity(image, w)).collect()
    }
}

/// Per class: embed every template instantiation, average, renormalize.
pub fn build_classifier<B: EncoderBackend + ?Sized, S: AsRef<str>>(
    classnames: &[String],
    templates: &[S],
    backend: &B,
) -> Result<ZeroShotClassifier> {
    if classnames.is_empty() {
        return Err(Error::InvalidInput("class list is empty".into()));
    }
    if templates.is_empty() {
        return Err(Error::InvalidInput("at least one template is required".into()));
    }
    let prompts: Vec<String> = classnames
        .iter()
        .flat_map(|c| templates.iter().map(move |t| instantiate(t.as_ref(), c)))
        .collect();
    let vectors = backend.encode_texts(&prompts)?;
    let t = templates.len();
    let weights = vectors
        .chunks(t)
        .map(|chunk| EmbeddingVector::mean_normalized(chunk.iter()))
        .collect::<Result<Vec<_>>>()?;
    ZeroShotClassifier::from_weights(
        classnames.to_vec(),
        templates.iter().map(|s| s.as_ref().to_string()).collect(),
        weights,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::SyntheticEncoder;
    use crate::world::SyntheticWorld;

    fn lists(pairs: &[(&str, &[&str])]) -> BTreeMap<String, Vec<String>> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    fn encoder() -> SyntheticEncoder {
        SyntheticWorld::standard(7, 1).encoder().unwrap()
    }

    #[test]
    fn pooled_dedup_assigns_dense_ids() {
        let bank = DescriptorBank::from_json(br#"{"b": ["y", "z"], "a": ["x", "y"]}"#).unwrap();
        assert_eq!(bank.len(), 3);
        let texts: Vec<&str> = bank.entries().iter().map(|e| e.text.as_str()).collect();
        assert_eq!(texts, vec!["x", "y", "z"]);
        assert_eq!(bank.entries()[1].sources, vec!["a", "b"]);
        assert_eq!(bank.class_ids("b").unwrap(), &[1, 2]);
    }

    #[test]
    fn dedup_ignores_case_and_whitespace() {
        let bank = DescriptorBank::from_class_lists(&lists(&[("a", &["Long Tail", "  long tail "]), ("b", &["LONG TAIL"])]))
            .unwrap();
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.text(0), "Long Tail");
    }

    #[test]
    fn empty_pool_is_an_error() {
        assert!(matches!(DescriptorBank::from_json(b"{}"), Err(Error::EmptyPool)));
        assert!(matches!(DescriptorBank::from_json(br#"{"a": ["  "]}"#), Err(Error::EmptyPool)));
        assert!(DescriptorBank::from_json(b"[1, 2").is_err());
    }

    #[test]
    fn save_load_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let bank = DescriptorBank::from_class_lists(&lists(&[("a", &["x", "Y", "x"]), ("b", &["y", "w"])])).unwrap();
        let p = dir.path().join("d.json");
        bank.save(&p).unwrap();
        assert_eq!(DescriptorBank::load(&p).unwrap(), bank);
    }

    #[test]
    fn embedded_rows_are_unit_and_use_the_template() {
        let enc = encoder();
        let bank = DescriptorBank::from_class_lists(&lists(&[("a", &["red wings"])])).unwrap().embed(&enc).unwrap();
        assert_eq!(bank.prompt(0), "a photo showing red wings");
        let e = bank.embedding(0).unwrap();
        assert!(e.is_unit());
        assert_eq!(e, &enc.embed_text("a photo showing red wings").unwrap());
    }

    #[test]
    fn single_template_row_is_the_prompt_embedding() {
        let enc = encoder();
        let clf = build_classifier(&["heron".to_string()], &["a photo of a [CLASS]."], &enc).unwrap();
        assert_eq!(clf.row(0), &enc.embed_text("a photo of a heron.").unwrap());
    }

    #[test]
    fn duplicated_template_gives_the_same_row() {
        let enc = encoder();
        let classes = vec!["heron".to_string(), "fox".to_string()];
        let one = build_classifier(&classes, &["art of the [CLASS]."], &enc).unwrap();
        let two = build_classifier(&classes, &["art of the [CLASS].", "art of the [CLASS]."], &enc).unwrap();
        for c in 0..2 {
            assert!(similarity(one.row(c), two.row(c)).unwrap() > 1.0 - 1e-6);
            assert!(two.row(c).is_unit());
        }
    }

    #[test]
    fn imagenet_has_eight_templates() {
        let t = templates_for("ImageNet").unwrap();
        assert_eq!(t.len(), 8);
        assert!(t.iter().all(|s| s.contains("[CLASS]")));
        assert_eq!(templates_for("places365").unwrap().len(), 3);
        assert_eq!(templates_for("food101").unwrap().len(), 1);
    }
}
