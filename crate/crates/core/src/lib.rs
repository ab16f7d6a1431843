pub mod diff;
pub mod field;
pub mod geometry;
pub mod meshing;
pub mod metrics;
pub mod nbv;
pub mod pipeline;
pub mod sensor_sim;
pub mod supervision;
