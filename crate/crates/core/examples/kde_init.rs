//! Initial sample weights from a leave-one-out kernel density estimate over
//! draws of the synthetic multimodal predictor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sicnav::prediction::{
    kde_init_weights, mixture_predict, BandwidthRule, HistoryWindow, MixtureMode,
};
use sicnav::state::RobotState;
use sicnav::Vec2;

fn main() -> sicnav::Result<()> {
    let dt = 0.25;
    let robot = RobotState::new(Vec2::new(0.0, 0.0), 0.0, 0.0)?;
    let mut history = HistoryWindow::new(1, dt, 2.0)?;
    history.push(0.0, robot, &[Vec2::new(4.0, 0.0)])?;
    history.push(dt, robot, &[Vec2::new(3.75, 0.0)])?;

    let modes = [
        MixtureMode {
            goal_direction: 0.0,
            probability: 0.7,
        },
        MixtureMode {
            goal_direction: 0.8,
            probability: 0.3,
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let samples = mixture_predict(&history, 8, 12, &modes, 0.05, &mut rng)?;

    for (label, rule) in [
        ("scott", BandwidthRule::Scott),
        ("fixed 0.5", BandwidthRule::Fixed(0.5)),
    ] {
        let w = kde_init_weights(&samples, rule)?;
        println!("bandwidth {label}:");
        for (s, weight) in w.as_slice().iter().enumerate() {
            let end = samples.samples[s].at(0, samples.horizon() - 1);
            println!(
                "  sample {s:2}  endpoint ({:5.2}, {:5.2})  weight {weight:.3}",
                end.x, end.y
            );
        }
    }
    Ok(())
}
