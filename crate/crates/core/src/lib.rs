//! Navigator/Driver planning harness.

pub mod action_fit;
pub mod evaluation;
pub mod gateway;
pub mod io_util;
pub mod kinematics;
pub mod prompting;
pub mod scene_log;
