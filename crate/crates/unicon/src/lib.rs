//! Training harness, file formats and command-line front end for the
//! `unicon-core` adapter toolkit.

pub mod checkpoint;
pub mod cli;
pub mod clock;
pub mod config;
pub mod corpus;
pub mod harness;
pub mod logs;
pub mod pgm;
pub mod report;
