pub mod numerics;
pub mod attention;
pub mod agents;
pub mod container;
pub mod envs;
pub mod perturb;
pub mod es;
pub mod bc;
pub mod probes;
