//! Two ORCA agents walking head-on. Each step builds the pair half-plane,
//! solves the relaxed lower-level QP and reports its KKT residual.

use sicnav::orca::{
    agent_halfplane, kkt_residuals, solve_orca_qp, OrcaParams, OrcaPlanes, PairParams,
};
use sicnav::Vec2;

fn main() -> sicnav::Result<()> {
    let dt = 0.25;
    let params = OrcaParams::default();
    let pair = PairParams {
        combined_radius: 0.6,
        time_horizon: params.time_horizon,
        responsibility: 0.5,
        time_step: dt,
    };
    let goals = [Vec2::new(6.0, 0.0), Vec2::new(0.0, 0.0)];
    let mut pos = [Vec2::new(0.0, 0.02), Vec2::new(6.0, -0.02)];
    let mut vel = [Vec2::new(1.0, 0.0), Vec2::new(-1.0, 0.0)];
    let mut closest = f64::INFINITY;

    for step in 0..28 {
        let mut next = vel;
        for i in 0..2 {
            let other = 1 - i;
            let plane = agent_halfplane(pos[i], vel[i], pos[other], vel[other], &pair)?;
            let planes = OrcaPlanes {
                agents: vec![plane],
                obstacles: Vec::new(),
            };
            let to_goal = goals[i] - pos[i];
            let intent = to_goal.scale(1.0 / to_goal.norm().max(1.0));
            let sol = solve_orca_qp(&planes, intent, &params)?;
            let kkt = kkt_residuals(&planes, &sol, intent, &params)?.max_abs();
            if i == 0 && step % 4 == 0 {
                println!(
                    "t={:5.2}  agent 0 at ({:5.2}, {:5.2})  v=({:5.2}, {:5.2})  slack {:.1e}  kkt {:.1e}",
                    step as f64 * dt, pos[0].x, pos[0].y, sol.velocity.x, sol.velocity.y, sol.slack, kkt
                );
            }
            next[i] = sol.velocity;
        }
        vel = next;
        for i in 0..2 {
            pos[i] += dt * vel[i];
        }
        closest = closest.min((pos[0] - pos[1]).norm());
    }
    println!(
        "closest centre distance {closest:.3} m (combined radius {:.2} m)",
        pair.combined_radius
    );
    Ok(())
}
