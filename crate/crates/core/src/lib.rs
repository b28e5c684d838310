//! Globally certifiable rotation and pose estimation built on the Cayley map.

pub mod liegroup;
pub mod noise;
pub mod problems;
pub mod qcqp;
pub mod certify;
pub mod harness;
pub mod localsolve;
pub mod sdp;
