pub mod cli;
pub mod density;
pub mod fpsolve;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod model;
pub mod particle;
pub mod sde;
pub mod stats;
pub mod study;
