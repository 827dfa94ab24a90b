pub mod archive;
pub mod baselines;
pub mod cascade;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod layout;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod perceiver;
pub mod tensor;
pub mod toy;
pub mod trainer;
