pub mod attention;
pub mod embed;
pub mod ista;
pub mod layer;
pub mod model;
pub mod norm;
