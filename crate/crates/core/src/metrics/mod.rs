//! Alignment scoring: ridge-regression encoding with Pearson fitness,
//! representational similarity analysis, and noise-ceiling normalization.

mod corr;
mod encoding;
mod fitness;
mod ridge;

pub use corr::{compute_rdm, compute_rdm_f32, pearson, rsa_score, spearman, Rdm, RsaScore};
pub use encoding::{
    encoding_noise_ceiling, encoding_score, normalized_encoding_score, EncodingDesign,
    EncodingScore, SplitSpec, DEAD_VOXEL_NC,
};
pub use fitness::{
    evaluate_layers, fitness, layer_profile, region_voxel_scores, FitnessEntry, FitnessParams,
    FitnessRecord, LayerProfile, LayerScores,
};
pub use ridge::{ridge_fit, ridge_predict, RidgeModel};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 2 entries, got {len}")]
    TooShort { len: usize },
    #[error("shape mismatch: got {got}, expected {expected}")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("ridge penalty must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("singular system at pivot {pivot}; rank-deficient input with zero penalty")]
    SingularSystem { pivot: usize },
    #[error("too few stimuli for a split: {train} train / {test} test")]
    TooFewStimuli { train: usize, test: usize },
    #[error("every feature column is constant")]
    AllColumnsConstant,
    #[error("responses carry {repeats} repeat(s); noise ceilings need at least 2")]
    RepeatAxisMissing { repeats: usize },
    #[error("RDM upper triangle has zero variance")]
    DegenerateRdm,
    #[error("non-positive lower noise ceiling {ceiling}")]
    DegenerateNoiseCeiling { ceiling: f64 },
    #[error("noise ceiling needs at least 2 subjects, got {got}")]
    TooFewSubjects { got: usize },
    #[error("region {region} not present in dataset")]
    MissingRegion { region: String },
    #[error(transparent)]
    Randnet(#[from] crate::randnet::RandnetError),
}
