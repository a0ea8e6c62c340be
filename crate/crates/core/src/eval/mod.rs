//! Retrieval experiments and their metrics.

mod experiments;
mod metrics;

pub use experiments::{
    bench_contact_sheet, contact_sheet_svg, run_perturbation_bench, run_s2i, run_s2s, ExperimentReport, MethodTrace,
    PairOutcome, PerturbBenchConfig, PerturbBenchReport, S2iVariant, S2sDirection, CHANCE_TRIALS, PRECISION_KS,
    SCALE_NOTE,
};
pub use metrics::{average_precision, empirical_chance, mean_ap, precision_at_k, rank_by_distance, RankedJudgment};
