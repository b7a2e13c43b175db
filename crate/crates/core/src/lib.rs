pub mod bench;
pub mod codec;
pub mod denoiser;
pub mod image_io;
pub mod inject;
pub mod mask;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod promptgen;
pub mod schedule;
pub mod synth;
pub mod textcond;
