use serde::{Deserialize, Serialize};

/// Non-fatal conditions raised while processing. Results carry these so that
/// callers (and the JSON reports) can see where a fallback rule kicked in.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "flag", rename_all = "snake_case")]
pub enum Flag {
    /// The second-largest eigenvalue of the affinity matrix is repeated.
    DegenerateSpectrum,
    /// Fewer prominent patches (k-means) or lower rank (PCA) than requested concepts.
    ConceptCountReduced { requested: usize, used: usize },
    /// No descriptor passed the candidate filter for this concept row.
    EmptyCandidateSet { concept: usize },
    /// Sinkhorn iterations stopped before the marginal tolerance was met.
    SinkhornNotConverged { iterations: usize },
    /// The transport plan row for this concept carried no mass.
    EmptyPlanRow { concept: usize },
    /// The padded circle box had to be clipped to the image bounds.
    PaddingClipped,
    /// The two descriptor sets share no id; mutual information is reported as 0.
    NoOverlap,
    /// More descriptors were requested than the bank holds.
    RetrievalClamped { requested: usize, used: usize },
    /// A neighbour class had no grounded explanations to borrow from.
    MissingNeighborExplanations { class: usize, neighbor: usize },
    /// A visual concept had no patches in this image.
    ConceptAbsent { concept: usize },
}
