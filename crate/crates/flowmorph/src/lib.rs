//! Learned deformation flows between 3D shapes.
//!
//! A latent-conditioned velocity field advects source-shape vertices toward a
//! target shape through an ODE integrator. The field is built so that the
//! reverse path is the exact negation of the forward path (round trips are
//! structural, not learned), and it can be parameterized as the curl of a
//! vector potential (exactly divergence-free, so advection conserves enclosed
//! volume) and/or mirror-symmetrized about the yz plane. Shapes live in a
//! shared latent space trained hub-and-spoke style with symmetric Chamfer
//! losses; embedding, canonical correspondence, and keyframe interpolation
//! build on the trained space.
//!
//! Modules follow the pipeline: [`geometry`] (meshes, sampling, Chamfer),
//! [`numerics`] (networks, autodiff, Adam, checkpoints), [`flowfield`] (the
//! velocity field), [`odeint`] (integrators), [`training`] (hub-and-spoke
//! optimization), [`embedding`], [`canonical`], [`interp`], and [`verify`]
//! (the runtime property suite).

pub mod canonical;
pub mod embedding;
pub mod flowfield;
pub mod geometry;
pub mod interp;
pub mod numerics;
pub mod odeint;
pub mod toy;
pub mod training;
pub mod verify;
