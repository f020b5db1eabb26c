//! File formats, artifact caching, the parallel search driver and reporting
//! on top of `segnas-core`.

pub mod artifacts;
pub mod checkpoint;
pub mod config;
pub mod describe;
pub mod driver;
pub mod log;
pub mod report;
