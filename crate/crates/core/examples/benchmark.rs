//! Compares the three controller variants over a handful of corridor seeds
//! and prints the metrics table.

use sicnav::cli::{
    metrics_table, ExperimentConfig, PredictorChoice, RunSpec, ScenarioSource, Variant,
};
use sicnav::sim::aggregate_metrics;

fn main() -> sicnav::Result<()> {
    let count: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    let variants = [
        (Variant::SicnavCvg, PredictorChoice::Cvg, "sicnav-cvg"),
        (
            Variant::SicnavSamples,
            PredictorChoice::Mixture,
            "sicnav-samples",
        ),
        (Variant::MpcCvmm, PredictorChoice::Cvmm, "mpc-cvmm"),
    ];
    for (variant, predictor, label) in variants {
        let spec = RunSpec {
            source: ScenarioSource::Seeds {
                start: 0,
                end: count,
            },
            variant,
            predictor,
            config: ExperimentConfig::default(),
            out: std::env::temp_dir(),
            workers: 1,
            verbose: false,
        };
        let results = spec
            .seeds()
            .into_iter()
            .map(|seed| spec.run_seed(seed).map(|r| r.summary()))
            .collect::<sicnav::Result<Vec<_>>>()?;
        print!("{}", metrics_table(label, &aggregate_metrics(&results)?));
    }
    Ok(())
}
