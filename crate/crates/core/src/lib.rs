pub mod cli;
pub mod config;
pub mod engine;
pub mod gateway;
pub mod geometry;
pub mod grammar;
pub mod render;
pub mod replay;
pub mod service;
pub mod store;
pub mod trace;
