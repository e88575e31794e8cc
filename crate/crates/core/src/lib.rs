pub mod baselines;
pub mod diloc;
pub mod geometry;
pub mod harness;
pub mod mobile;
pub mod robust;
pub mod scene;
