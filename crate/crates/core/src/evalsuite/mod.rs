//! Fidelity metrics, ensemble credibility, projections and the attention
//! memory model.

pub mod credibility;
pub mod memory;
pub mod metrics;
pub mod mip;

pub use credibility::{credibility, credibility_from_stats, credibility_with_floor, CredibilityReport};
pub use memory::{attention_memory, memory_csv, score_bytes, AttentionArch, LevelDims, MemModelConfig, MemRegime};
pub use metrics::{ms_ssim, psnr, ssim, ssim_per_slice, volume_metrics, MetricsReport, VolumeMetrics};
pub use mip::{cross_section_xz, mip_depth, Mip};
