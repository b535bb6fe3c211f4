//! Shared fixtures for the criterion benches.

use sphere_icl::episode::InputDistribution;
use sphere_icl::model::{AdamWConfig, DataSpec, ModelConfig, Trainer};
use sphere_icl::tasks::{TaskFamily, TaskPrior, TaskSource};

/// Desk-preset trainer (2 layers, width 64, d = 3, n = 32) with batch 64
/// continuous linear tasks on a cap of half-angle `phi` (radians).
pub fn desk_trainer(phi: f64) -> (Trainer, DataSpec) {
    let (d, n) = (3, 32);
    let prior = TaskPrior::from_angles(TaskFamily::Linear, d, 0.0, phi, 0.0, 1.0).unwrap();
    let data = DataSpec {
        source: TaskSource::continuous(&prior).unwrap(),
        inputs: InputDistribution::GaussianIso.sampler(d).unwrap(),
        context_length: n,
        batch_size: 64,
        probe: None,
    };
    let trainer = Trainer::new(&ModelConfig::desk(d, n), AdamWConfig::default(), 0).unwrap();
    (trainer, data)
}
