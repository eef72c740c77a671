//! Geo-referenced extrinsic calibration of static roadside cameras from
//! tracked vehicle bounding boxes and a GNSS/IMU pose log of one
//! calibration vehicle.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry;
pub mod grouping;
pub mod hypothesis;
pub mod pipeline;
pub mod pnp;
pub mod refinement;
pub mod stats;
pub mod synthgen;
pub mod tracking;
