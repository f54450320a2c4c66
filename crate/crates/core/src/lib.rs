//! One-dimensional sea-ice floe collisions: a reference contact simulator,
//! a message-passing surrogate trained on it, and ensemble filters that use
//! the surrogate as their forecast model.

pub mod assim;
pub mod cn;
pub mod dem;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod render;

pub use assim::{AssimConfig, AssimError, AssimResult, EnsembleState, FilterKind, NoiseModel, ObservationModel};
pub use cn::{CnConfig, CnError, CnModel, CnParams, DemStepModel, StepModel, TrainConfig, TruthVelocities};
pub use dem::{DemError, FloeSystem, SimState, Trajectory};
pub use graph::{build_chain_graph, EdgePermutation, RelationMatrices};
pub use io::{Checkpoint, IoError, Provenance};
pub use metrics::{MetricsError, SkillReport};
pub use nn::{Activation, Mlp};

/// Generator used by every seeded pipeline stage.
pub type FloeRng = rand_chacha::ChaCha8Rng;

/// Seeded generator on an independent stream, so runs that need several
/// generators (one per trajectory, say) stay reproducible individually.
pub fn seeded_rng(seed: u64, stream: u64) -> FloeRng {
    use rand::SeedableRng;
    let mut rng = FloeRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
