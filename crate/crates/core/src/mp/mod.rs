//! Maximum-principle checks for the transformed control problem: spike
//! variations and variational equations, order-of-ε slope tests, backward
//! regression for the adjoints, and the Hamiltonian inequality.

pub mod adjoint;
pub mod lq;
pub mod spike;

use serde::Serialize;

pub use adjoint::{
    check_steps, control_grid, discard_study, duality_check, hamiltonian, mp_condition_check, mp_condition_with,
    solve_adjoints_lsmc, AdjointSlice, AdjointSolution, DiscardReport, DualityReport, MpCell, MpConfig, MpReport,
};
pub use lq::{lq_expected_cost, lq_optimal, LqSolution};
pub use spike::{
    estimate_order, expansion_check, hat_j_sample, slope_suite, spike_control, variational_paths, variational_sample,
    ExpansionPoint, ExpansionReport, OrderEstimate, SlopeSuite, SpikeControl, SpikeVariation, VariationalBundle,
    VariationalPaths,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            Verdict::Fail => 1,
            Verdict::Inconclusive => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Inconclusive => "INCONCLUSIVE",
        }
    }
}
