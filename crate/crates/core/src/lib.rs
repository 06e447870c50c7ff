pub mod cli;
pub mod diagnostics;
pub mod dynamics;
pub mod ensemble;
pub mod integrate;
pub mod matso;
