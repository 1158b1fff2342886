//! File formats, configuration, profiling and the command-line front end
//! around `linvid-core`.

pub mod alloc_track;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dump;
pub mod profile;
