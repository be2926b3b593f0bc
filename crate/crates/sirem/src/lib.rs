//! File formats and command-line pipeline around `sirem-core`.

pub mod cli;
pub mod io;
