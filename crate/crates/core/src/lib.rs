//! Numerical laboratory for torus diffeomorphisms derived from linear Anosov
//! automorphisms: Lyapunov spectra by QR frame iteration, structural
//! hypothesis scans (cones, transversality, rate bounds), unstable-leaf
//! volume growth, and rigidity-inequality experiments.

pub mod growth;
pub mod lab;
pub mod lyapunov;
pub mod maps;
pub mod splitting;
pub mod torus;
