//! Head-on encounter with a two-mode prediction: the planner picks a side
//! and the sample weights concentrate on the mode that lets it pass.

use sicnav::mpc::{assemble, Controller, PlanningMode};
use sicnav::sim::two_mode_encounter;

fn main() -> sicnav::Result<()> {
    let scene = two_mode_encounter()?;
    let mut controller = Controller::new(scene.config.clone(), PlanningMode::Bilevel)?;
    let bundle = controller.control_step(&scene.state, &scene.samples)?;
    let d = &bundle.diagnostics;
    println!(
        "status {:?} after {} iterations, {:.1} ms",
        d.status, d.iterations, d.solve_time_ms
    );
    println!(
        "min predicted clearance {:.2e} m, kkt {:.2e}, infeasibility {:.2e}: {}",
        d.min_predicted_clearance, d.kkt_residual, d.primal_infeasibility, d.message
    );

    for (t, w) in bundle.weights.iter().enumerate() {
        let positive: f64 = w
            .iter()
            .zip(&scene.positive_mode)
            .filter(|(_, p)| **p)
            .map(|(w, _)| w)
            .sum();
        let robot = bundle.robot_plan[t + 1].position;
        let human = bundle.human_predictions[0][t + 1];
        println!(
            "t={t}  +y mode weight {positive:.3}  robot ({:.2}, {:.2})  human ({:.2}, {:.2})",
            robot.x, robot.y, human.x, human.y
        );
    }

    // the same scene with the predictions held fixed, for comparison
    let frozen = assemble(
        &scene.state,
        &scene.samples,
        scene.previous_action,
        &scene.config,
        PlanningMode::FrozenPredictions,
    )?;
    println!(
        "frozen-prediction problem has {} variables",
        sicnav::nlp::NlpProblem::num_variables(&frozen)
    );
    Ok(())
}
