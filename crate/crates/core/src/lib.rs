pub mod dictionary;
pub mod kv;
pub mod overlap;
pub mod par;
pub mod tensor;
pub mod volume;
pub mod nn;
pub mod checkpoint;
pub mod joint;
pub mod eval;
pub mod gradcheck;
pub mod pipeline;
