pub mod backbone;
pub mod condgen;
pub mod contrastive;
pub mod data;
pub mod diffusion;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod nn;
pub mod seeds;
pub mod tensorcore;
