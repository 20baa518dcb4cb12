pub mod automata;
pub mod check;
pub mod config;
pub mod engine;
pub mod eval;
pub mod lang;
pub mod logical;
pub mod model;
pub mod obs;
pub mod physical;
pub mod store;
pub mod util;
pub mod value;
