pub mod container;
pub mod image;
