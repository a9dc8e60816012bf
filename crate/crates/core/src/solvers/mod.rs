//! Numerical core: elastic-net regression and biased matrix completion.

pub mod completion;
pub mod elastic_net;

pub use completion::{
    CompletionProblem, CompletionReport, SgdOptions, objective_completion, solve_completion,
};
pub use elastic_net::{
    CdOptions, CdReport, ElasticNetProblem, objective_elastic_net, soft_threshold,
    solve_elastic_net, solve_elastic_net_with,
};
