//! Textual concepts around a class in the language embedding space.

use serde::{Deserialize, Serialize};

use crate::descriptors::DescriptorBank;
use crate::embedding::{similarity, EmbeddingVector};
use crate::error::{Error, Result};
use crate::flags::Flag;

pub const DEFAULT_U: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConceptSet {
    pub class: usize,
    pub u: usize,
    /// Best first.
    pub ids: Vec<u32>,
    pub scores: Vec<f64>,
    pub flags: Vec<Flag>,
}

/// Top-`u` descriptors by dot product with `class_embedding`; ties go to
/// the lower id. `u > D` is clamped and flagged.
pub fn retrieve_class_descriptors(
    class: usize,
    class_embedding: &EmbeddingVector,
    bank: &DescriptorBank,
    u: usize,
) -> Result<ClassConceptSet> {
    if u == 0 {
        return Err(Error::InvalidInput("u must be at least 1".into()));
    }
    let desc = bank.embeddings()?;
    let scores: Vec<f64> = desc
        .iter()
        .map(|d| similarity(class_embedding, d))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut flags = Vec::new();
    let used = u.min(order.len());
    if used < u {
        flags.push(Flag::RetrievalClamped { requested: u, used });
    }
    order.truncate(used);
    Ok(ClassConceptSet {
        class,
        u: used,
        scores: order.iter().map(|&i| scores[i]).collect(),
        ids: order.into_iter().map(|i| i as u32).collect(),
        flags,
    })
}

impl ClassConceptSet {
    pub fn report(&self, class_name: &str, bank: &DescriptorBank) -> serde_json::Value {
        serde_json::json!({
            "class": class_name,
            "u": self.u,
            "descriptors": self.ids.iter().zip(&self.scores).map(|(id, s)| serde_json::json!({
                "id": id,
                "text": bank.text(*id),
                "score": s,
            })).collect::<Vec<_>>(),
            "flags": self.flags,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::SyntheticWorld;

    fn bank() -> (DescriptorBank, crate::synthetic::SyntheticEncoder) {
        let w = SyntheticWorld::standard(7, 1);
        let enc = w.encoder().unwrap();
        let bank = DescriptorBank::from_class_lists(&w.descriptors()).unwrap().embed(&enc).unwrap();
        (bank, enc)
    }

    #[test]
    fn own_embedding_is_retrieved_first() {
        let (bank, _) = bank();
        let e = bank.embedding(7).unwrap().clone();
        let r = retrieve_class_descriptors(0, &e, &bank, 1).unwrap();
        assert_eq!(r.ids, vec![7]);
    }

    #[test]
    fn full_retrieval_is_sorted_and_prefix_monotone() {
        let (bank, enc) = bank();
        let q = enc.embed_text("a photo of a heron.").unwrap();
        let all = retrieve_class_descriptors(0, &q, &bank, bank.len()).unwrap();
        assert_eq!(all.ids.len(), bank.len());
        assert!(all.scores.windows(2).all(|w| w[0] >= w[1]));
        let ten = retrieve_class_descriptors(0, &q, &bank, 10).unwrap();
        assert_eq!(ten.ids[..], all.ids[..10]);
    }

    #[test]
    fn oversized_u_is_clamped() {
        let (bank, enc) = bank();
        let q = enc.embed_text("fox").unwrap();
        let r = retrieve_class_descriptors(1, &q, &bank, 10_000).unwrap();
        assert_eq!(r.u, bank.len());
        assert_eq!(r.flags, vec![Flag::RetrievalClamped { requested: 10_000, used: bank.len() }]);
    }
}
