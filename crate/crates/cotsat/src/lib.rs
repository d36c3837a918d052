pub mod cnf_io;
pub mod compiler;
pub mod decode;
pub mod dpll;
pub mod dsl;
pub mod engine;
pub mod formula;
pub mod harness;
pub mod instance_gen;
pub mod sat_program;
pub mod vocab;
