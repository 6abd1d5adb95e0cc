pub mod casegen;
pub mod linsys;
pub mod model;
pub mod netlist;
pub mod pdip;
pub mod powerflow;
pub mod stamping;
pub mod tpia;
