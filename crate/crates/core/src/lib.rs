pub mod checks;
pub mod data;
pub mod gmim;
pub mod harness;
pub mod kv;
pub mod lmim;
pub mod mi;
pub mod model;
pub mod par;
pub mod tensor;
