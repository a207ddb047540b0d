pub mod action;
pub mod agent;
pub mod backend;
pub mod bench;
pub mod device;
pub mod memory;
pub mod vh;
