pub mod cam;
pub mod data;
pub mod image;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod subcluster;
pub mod trainer;
