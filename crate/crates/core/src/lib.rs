//! Bayesian structural time-series models for causal impact estimation on
//! panels of related series.

pub mod causal;
pub mod emvs;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod gwishart;
pub mod io;
pub mod linalg;
pub mod mcmc;
pub mod panel;
pub mod sim;
pub mod state_space;
pub mod stationary;
pub mod structural;

pub use causal::{full_causal_pipeline, CausalConfig, CausalReport, ModelArm};
pub use emvs::{EmvsModel, EmvsProblem, EmvsState, SpikeSlabConfig};
pub use error::{Error, Result};
pub use graph::Graph;
pub use io::{read_panel, write_panel, GraphSource, Ingested};
pub use mcmc::{run_chain, ChainInit, ChainModel, McmcConfig, McmcPriors, PosteriorDraws};
pub use panel::{apply_regression, TimeFormat, TimeSeriesPanel};
pub use state_space::{FilterOptions, FilterState, SmoothedMoments, StateSpaceSystem};
pub use sim::{generate_panel, SimConfig};
pub use stationary::StationaryVarParams;
pub use structural::{ComponentParams, SlopeMode, StructuralSpec};
