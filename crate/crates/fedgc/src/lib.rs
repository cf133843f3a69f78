pub mod condense;
pub mod fedcore;
pub mod ibx;
pub mod miaeval;
pub mod graphstore;
pub mod models;
pub mod pipeline;
pub mod tensor;
