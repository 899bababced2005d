pub mod eval;
pub mod geometry;
pub mod image;
pub mod mesh;
pub mod ssm;
pub mod splat;
pub mod similarity;
pub mod planning;
pub mod optimize;
pub mod scenario;
pub mod io;
