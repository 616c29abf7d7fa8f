pub mod dataset;
pub mod decision;
pub mod metrics;
pub mod modelgw;
pub mod protocol;
pub mod riskctl;
pub mod runner;
pub mod special;
