//! One closed-loop corridor episode with the bilevel controller and the
//! constant-velocity predictor. Pass a seed as the first argument.

use sicnav::mpc::{Controller, MpcConfig, PlanningMode};
use sicnav::sim::{generate_corridor, run_episode, BuiltinPredictor, PredictorKind};

fn main() -> sicnav::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3);
    let scenario = generate_corridor(seed, 3)?;
    let mut controller = Controller::new(
        scenario.mpc_config(&MpcConfig::default()),
        PlanningMode::Bilevel,
    )?;
    let mut predictor = BuiltinPredictor::new(PredictorKind::Cvg, 1, seed);
    let result = run_episode(&scenario, &mut controller, &mut predictor)?;

    for r in result.trace.iter().step_by(4) {
        let nearest = r
            .humans
            .iter()
            .map(|h| (h.position - r.robot.position).norm())
            .fold(f64::INFINITY, f64::min);
        println!(
            "t={:5.2}  robot ({:5.2}, {:5.2})  speed {:.2}  nearest human {:.2} m  {:?}{}",
            r.time,
            r.robot.position.x,
            r.robot.position.y,
            r.robot.speed,
            nearest,
            r.status,
            if r.fallback { " (braking)" } else { "" }
        );
    }
    println!(
        "seed {seed}: success {}  time {:.2} s  collision steps {}  frozen steps {}",
        result.success, result.navigation_time, result.collision_steps, result.frozen_steps
    );
    Ok(())
}
