pub mod corpus;
pub mod crf;
pub mod encoder;
pub mod evaluator;
pub mod model;
pub mod persistence;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
