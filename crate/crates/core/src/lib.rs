//! Bottom-up instance segmentation by box-consistency grouping.
//!
//! A dense network predicts, for every pixel, a foreground probability and
//! offsets to the box of the instance it belongs to. This crate turns those
//! maps into instances: peaks of the probability map propose boxes, NMS keeps
//! a set of global boxes, and each foreground pixel joins the global box its
//! own predicted box overlaps most.
//!
//! Modules are layered: [`geometry`] and [`maps`] at the bottom, [`targets`],
//! [`losses`], [`grouping`] and [`synth`] on top of them, and [`eval`],
//! [`bench`] and [`cli`] at the outer edge.

pub mod bench;
pub mod cli;
pub mod eval;
pub mod geometry;
pub mod grouping;
pub mod losses;
pub mod maps;
pub mod synth;
pub mod targets;
