//! Configuration, file formats, persisted state and orchestration for
//! data-consistent inversion runs, plus drivers for the wave example.

pub mod config;
pub mod error;
pub mod io;
pub mod run;
pub mod simulate;
pub mod state;
pub mod study;
pub mod surrogate;

pub use config::PipelineConfig;
pub use error::PipelineError;
pub use state::PersistedState;

/// Seed of an independent random stream derived from a base seed.
///
/// Streams: 1 initial samples, 2 reference samples, 3 predicted noise,
/// 4 observed noise, 5 predicted filters, 6 observed filters, 7 clustering.
pub fn seed_for(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream)
}
