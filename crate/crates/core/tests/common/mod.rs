#![allow(dead_code)]

pub use lgm_core::verify::{random_camera, random_scene};

pub const FOV: f64 = 0.856_956_957_3;
