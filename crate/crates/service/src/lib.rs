//! HTTP API, CLI plumbing and the bundled demo corpus for the streetlens
//! pipeline.

pub mod demo;
pub mod http;
