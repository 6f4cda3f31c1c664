//! Automated skull-face overlay: cone-based soft-tissue modelling, camera
//! recovery with unknown focal length, composite plausibility fitness and
//! differential evolution over synthetic ground-truth cases.

pub mod cones;
pub mod contour;
pub mod de;
pub mod eval;
pub mod fitness;
pub mod geometry;
pub mod io;
pub mod pnpf;
pub mod synth;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/cones.md")]
    mod cones {}
    #[doc = include_str!("../../../book/src/pnpf.md")]
    mod pnpf {}
    #[doc = include_str!("../../../book/src/parallelism.md")]
    mod parallelism {}
    #[doc = include_str!("../../../book/src/fitness.md")]
    mod fitness {}
    #[doc = include_str!("../../../book/src/optimizer.md")]
    mod optimizer {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
