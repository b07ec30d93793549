//! Detectors for unwanted visual content trained from text alone.
//!
//! Everything operates on precomputed, L2-normalized embeddings from a
//! contrastive vision-language model. A detector is a set of frozen task
//! embeddings describing the wanted (in-distribution) data plus a few
//! trainable embeddings that learn to point at everything else; training
//! uses text embeddings only and the detector is then applied to images.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod embedding;
pub mod error;
pub mod metrics;
pub mod objective;
pub mod scoring;
pub mod synth;
pub mod theory;
pub mod trainer;

pub use embedding::{
    build_task_embeddings, ensemble_store, load_store, normalize_rows, save_store, EmbeddingStore,
    Modality, PromptGroup, TaskEmbeddings, DEFAULT_TEMPERATURE,
};
pub use error::{Error, ErrorClass, Result};
pub use metrics::{auroc, eval_report, fpr_at_tpr, EvalReport, FprAtTpr};
pub use objective::{
    focal_weights, loss, loss_and_gradient, loss_gradient, loss_with_weights,
    predict_out_probability, DetectorModel, LossBreakdown, LossConfig, LossVariant,
};
pub use scoring::{export_scores, read_scores, score_baseline, score_hftt, ScoreMethod, ScoreSet};
pub use synth::{
    load_templates, load_word_set, synthesize_in_distribution, word2data, PromptTemplate,
    WordCorpus,
};
pub use theory::{
    closed_form_classifier, fit_quadratic_classifier, run_theory, sample_bimodal, transfer_fixture,
    verify_corollary, BimodalConfig, BimodalSample, TransferFixture,
};
pub use trainer::{
    init_trainable, load_model, save_model, train, train_with_observer, InitScheme, TrainConfig,
    TrainReport,
};
