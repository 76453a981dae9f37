//! Two-stage inference: exact cosine top-K over the index, then fusion and
//! re-ranking restricted to those candidates.

mod index;
mod pipeline;
mod ranking;


pub use index::{EmbeddingIndex, INDEX_MAGIC, INDEX_VERSION};
pub use pipeline::{rank_all, run_pipeline, PipelineConfig, SessionState};
pub use ranking::{
    brute_force_top_k, stage1_from_embedding, stage1_order, stage1_retrieve, stage2_from_fused, stage2_order, stage2_rerank,
    RankedEntry, RankedList, Stage,
};
