pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dsp;
pub mod features;
pub mod graphs;
pub mod methods;
pub mod metrics;
pub mod model_p;
pub mod model_u;
pub mod nn;
pub mod pipeline;
pub mod train;
