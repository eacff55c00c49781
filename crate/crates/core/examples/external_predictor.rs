//! Drives an episode from a prediction server on a local TCP port. The
//! server here answers with constant-velocity samples; any process that
//! speaks the same one-line JSON protocol can take its place.

use std::net::TcpListener;
use std::thread;

use sicnav::mpc::{Controller, MpcConfig, PlanningMode};
use sicnav::prediction::{ExternalPredictor, PredictionRequest, PredictionResponse};
use sicnav::sim::{generate_corridor, run_episode, RemotePredictor};

/// Constant-velocity extrapolation from the last two history rows.
fn answer(request: &PredictionRequest) -> String {
    let samples = (0..request.num_samples)
        .map(|_| {
            request
                .agents
                .iter()
                .map(|a| {
                    let [t1, x1, y1] = a.history[a.history.len() - 1];
                    let [t0, x0, y0] = a.history[a.history.len().saturating_sub(2)];
                    let span = (t1 - t0).max(1e-9);
                    let (vx, vy) = ((x1 - x0) / span, (y1 - y0) / span);
                    (1..=request.horizon)
                        .map(|k| {
                            let s = k as f64 * request.dt;
                            [x1 + s * vx, y1 + s * vy]
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    serde_json::to_string(&PredictionResponse { samples }).expect("plain numbers serialize")
}

fn main() -> sicnav::Result<()> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let endpoint = listener.local_addr()?.to_string();
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let _ = sicnav::prediction::serve_connection(stream, answer);
        }
    });

    let scenario = generate_corridor(11, 3)?;
    let mut controller = Controller::new(
        scenario.mpc_config(&MpcConfig::default()),
        PlanningMode::Bilevel,
    )?;
    let mut client = ExternalPredictor::new(endpoint.clone());
    client.timeout = std::time::Duration::from_millis(500);
    let mut predictor = RemotePredictor {
        client,
        num_samples: 3,
    };
    let result = run_episode(&scenario, &mut controller, &mut predictor)?;
    let stale = result.trace.iter().filter(|r| r.stale_predictions).count();
    println!(
        "server {endpoint}: success {}  time {:.2} s  steps {}  stale prediction steps {stale}",
        result.success, result.navigation_time, result.total_steps
    );
    Ok(())
}
