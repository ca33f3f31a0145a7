pub mod autodiff;
pub mod dynamics;
pub mod dsl;
pub mod tailoring;
pub mod discovery;
pub mod bounds;
pub mod cli;
