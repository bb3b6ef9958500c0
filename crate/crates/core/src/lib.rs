pub mod analysis;
pub mod data;
pub mod episode;
pub mod exec;
pub mod model;
pub mod prior;
pub mod probe;
pub mod runner;
pub mod seed;
pub mod surgery;
pub mod svg;
pub mod table;
pub mod tensor;
pub mod train;
