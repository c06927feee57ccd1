//! Numerical laboratory for singularly perturbed gradient flows
//! `eps u'(t) + DE(t, u(t)) = 0` driven by time-dependent, possibly
//! nonconvex energies on `R^d`.
//!
//! The crate integrates the perturbed flow, charts the critical set
//! as continuation branches, computes energy-dissipation costs between
//! critical components via heteroclinic graph search, extracts
//! vanishing-viscosity limits with their jump certificates, and probes
//! how generic perturbations restore transversality.

pub mod atlas;
pub mod cost;
pub mod energy;
pub mod flow;
pub mod genericity;
pub mod limit;

pub use atlas::{
    build_atlas, continue_branch, find_critical, lusin_diagnostic, transversality, Atlas,
    AtlasConfig, BranchKind, Classification, ComponentId, ComponentRef, ContinuationConfig,
    CriticalBranch, CriticalPoint, TransversalityReport,
};
pub use cost::{
    cost, heterocline, reparameterize, CostConfig, CostOutcome, CostResult, CurveFlag,
    TransitionCurve,
};
pub use energy::{builtin, check_consistency, BuiltinName, ConsistencyReport, EnergyModel,
    EnergySample, EnergyError};
pub use flow::{integrate, energy_identity_residual, dissipation_measure, FlowConfig, FlowError,
    Trajectory};
pub use genericity::{perturb, sample_test, GenericityReport, Perturbation, PerturbationMode};
pub use limit::{
    dissipation_barycenter, dissipation_localization, extract_limit, graph_hausdorff,
    jump_windows, sweep, JumpRecord, LimitEstimate, LocalizationReport, StepPolicy, SweepResult,
};
