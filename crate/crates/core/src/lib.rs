pub mod audio_io;
pub mod brir;
pub mod corpus;
pub mod dsp;
pub mod eval;
pub mod features;
pub mod mixer;
pub mod seed;
pub mod model;
pub mod nn;
