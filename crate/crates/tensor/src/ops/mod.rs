pub mod attention;
pub mod conv;
pub mod elementwise;
pub mod fold;
pub mod linalg;
pub mod norm;
pub mod sample;
pub mod shape;
