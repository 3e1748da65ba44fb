//! Command-line tools and the HTTP service.

pub mod app;
pub mod service;
