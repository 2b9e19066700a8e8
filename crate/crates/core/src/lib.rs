pub mod activation;
pub mod error;
pub mod integrate;
pub mod linalg;
pub mod signal;
pub mod oscillator;
pub mod transform;
pub mod operators;
pub mod reconstruction;
pub mod compiler;
pub mod fk;
pub mod verify;
