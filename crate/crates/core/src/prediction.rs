//! Joint trajectory sample sets, built-in predictors and the external
//! prediction protocol.
//!
//! A [`SampleSet`] holds `S` joint samples, each giving one position per
//! human per future step. Built-in producers are the constant-velocity
//! baselines and a synthetic multimodal mixture; [`ExternalPredictor`]
//! talks newline-delimited JSON to a separate prediction process.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::state::{RobotState, WeightVector};

/// One joint sample: `positions[j][t]` is human `j` at future step `t + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub positions: Vec<Vec<Vec2>>,
}

impl TrajectorySample {
    pub fn new(positions: Vec<Vec<Vec2>>) -> Result<Self> {
        let horizon = positions.first().map_or(0, Vec::len);
        if horizon == 0 || positions.iter().any(|p| p.len() != horizon) {
            return Err(Error::DimensionMismatch(
                "trajectory sample needs N >= 1 humans with a common horizon T >= 1".into(),
            ));
        }
        if positions.iter().flatten().any(|p| !p.is_finite()) {
            return Err(Error::InvalidState(
                "trajectory sample has non-finite positions".into(),
            ));
        }
        Ok(Self { positions })
    }

    pub fn num_humans(&self) -> usize {
        self.positions.len()
    }

    pub fn horizon(&self) -> usize {
        self.positions[0].len()
    }

    /// Position of human `j` at future step `t` (1-based, `1..=T`).
    pub fn at(&self, j: usize, t: usize) -> Vec2 {
        self.positions[j][t - 1]
    }
}

/// `S` joint samples sharing `(N, T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub samples: Vec<TrajectorySample>,
    pub dt: f64,
    /// Simulation time at which the samples were generated.
    pub stamp: f64,
}

impl SampleSet {
    pub fn new(samples: Vec<TrajectorySample>, dt: f64, stamp: f64) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::DimensionMismatch("sample set is empty".into()))?;
        let (n, t) = (first.num_humans(), first.horizon());
        if samples
            .iter()
            .any(|s| s.num_humans() != n || s.horizon() != t)
        {
            return Err(Error::DimensionMismatch(
                "samples disagree on (N, T)".into(),
            ));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sample spacing must be positive, got {dt}"
            )));
        }
        Ok(Self { samples, dt, stamp })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_humans(&self) -> usize {
        self.samples[0].num_humans()
    }

    pub fn horizon(&self) -> usize {
        self.samples[0].horizon()
    }

    /// `S x N` slice of positions at future step `t` (1-based).
    pub fn positions_at(&self, t: usize) -> Vec<Vec<Vec2>> {
        self.samples
            .iter()
            .map(|s| s.positions.iter().map(|p| p[t - 1]).collect())
            .collect()
    }

    /// The same prediction viewed `steps` sample periods later: leading
    /// steps are dropped and the last step is repeated.
    pub fn shifted(&self, steps: usize) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|s| TrajectorySample {
                positions: s
                    .positions
                    .iter()
                    .map(|p| {
                        let t = p.len();
                        (0..t).map(|k| p[(k + steps).min(t - 1)]).collect()
                    })
                    .collect(),
            })
            .collect();
        Self {
            samples,
            dt: self.dt,
            stamp: self.stamp + steps as f64 * self.dt,
        }
    }
}

/// Recent positions of every agent at a uniform spacing, most recent last.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryWindow {
    pub dt: f64,
    pub capacity: usize,
    pub times: VecDeque<f64>,
    pub humans: Vec<VecDeque<Vec2>>,
    pub robot: VecDeque<RobotState>,
}

impl HistoryWindow {
    /// Window holding `duration / dt + 1` points per agent.
    pub fn new(num_humans: usize, dt: f64, duration: f64) -> Result<Self> {
        if !(dt > 0.0 && duration >= 0.0) {
            return Err(Error::InvalidConfig(
                "history spacing must be positive".into(),
            ));
        }
        let capacity = (duration / dt + 1e-9).floor() as usize + 1;
        Ok(Self {
            dt,
            capacity,
            times: VecDeque::new(),
            humans: vec![VecDeque::new(); num_humans],
            robot: VecDeque::new(),
        })
    }

    pub fn num_humans(&self) -> usize {
        self.humans.len()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn push(&mut self, time: f64, robot: RobotState, humans: &[Vec2]) -> Result<()> {
        if humans.len() != self.humans.len() {
            return Err(Error::DimensionMismatch(format!(
                "history has {} humans, got {}",
                self.humans.len(),
                humans.len()
            )));
        }
        if let Some(&last) = self.times.back() {
            if !(time > last) {
                return Err(Error::InvalidState(
                    "history timestamps must increase".into(),
                ));
            }
            if ((time - last) - self.dt).abs() > 1e-6 * self.dt.max(1.0) {
                return Err(Error::InvalidState(format!(
                    "history spacing {} differs from dt {}",
                    time - last,
                    self.dt
                )));
            }
        }
        self.times.push_back(time);
        self.robot.push_back(robot);
        for (h, p) in self.humans.iter_mut().zip(humans) {
            h.push_back(*p);
        }
        while self.times.len() > self.capacity {
            self.times.pop_front();
            self.robot.pop_front();
            for h in &mut self.humans {
                h.pop_front();
            }
        }
        Ok(())
    }

    pub fn latest_time(&self) -> Option<f64> {
        self.times.back().copied()
    }

    /// Current position and finite-difference velocity of human `j`;
    /// zero velocity with fewer than two points.
    pub fn current(&self, j: usize) -> Option<(Vec2, Vec2)> {
        let h = &self.humans[j];
        let last = *h.back()?;
        let vel = match (h.len() >= 2, self.times.len() >= 2) {
            (true, true) => {
                let prev = h[h.len() - 2];
                let span = self.times[self.times.len() - 1] - self.times[self.times.len() - 2];
                (1.0 / span) * (last - prev)
            }
            _ => Vec2::ZERO,
        };
        Some((last, vel))
    }

    pub fn to_request(&self, horizon: usize, num_samples: usize) -> PredictionRequest {
        PredictionRequest {
            dt: self.dt,
            horizon,
            num_samples,
            agents: self
                .humans
                .iter()
                .enumerate()
                .map(|(id, h)| AgentHistory {
                    id,
                    history: self
                        .times
                        .iter()
                        .zip(h)
                        .map(|(t, p)| [*t, p.x, p.y])
                        .collect(),
                })
                .collect(),
            robot_history: self
                .times
                .iter()
                .zip(&self.robot)
                .map(|(t, r)| [*t, r.position.x, r.position.y, r.heading])
                .collect(),
        }
    }
}

fn check_request(history: &HistoryWindow, horizon: usize, num_samples: usize) -> Result<()> {
    if horizon == 0 || num_samples == 0 {
        return Err(Error::InvalidConfig(
            "prediction horizon and sample count must be >= 1".into(),
        ));
    }
    if history.num_humans() == 0 {
        return Err(Error::DimensionMismatch("no humans to predict".into()));
    }
    if history.is_empty() {
        return Err(Error::InvalidState("empty history".into()));
    }
    Ok(())
}

fn constant_velocity(history: &HistoryWindow, horizon: usize) -> Vec<Vec<Vec2>> {
    (0..history.num_humans())
        .map(|j| {
            let (p, v) = history.current(j).expect("history is non-empty");
            (1..=horizon)
                .map(|k| p + (k as f64 * history.dt) * v)
                .collect()
        })
        .collect()
}

/// Constant-velocity rollout duplicated `num_samples` times.
pub fn cvg_predict(
    history: &HistoryWindow,
    horizon: usize,
    num_samples: usize,
) -> Result<SampleSet> {
    check_request(history, horizon, num_samples)?;
    let sample = TrajectorySample::new(constant_velocity(history, horizon))?;
    SampleSet::new(
        vec![sample; num_samples],
        history.dt,
        history.latest_time().unwrap_or(0.0),
    )
}

/// Same rollout as [`cvg_predict`]; the frozen-prediction controller
/// consumes it without refinement.
pub fn cvmm_predict(
    history: &HistoryWindow,
    horizon: usize,
    num_samples: usize,
) -> Result<SampleSet> {
    cvg_predict(history, horizon, num_samples)
}

/// A mode of the synthetic mixture: the predicted velocity turns by
/// `goal_direction` radians (positive is left) over the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureMode {
    pub goal_direction: f64,
    pub probability: f64,
}

/// Synthetic multimodal predictor. Each joint sample draws one mode per
/// human, bends the constant-velocity path toward it and adds Gaussian
/// position noise with standard deviation `noise_scale * sqrt(t)`.
pub fn mixture_predict<R: Rng + ?Sized>(
    history: &HistoryWindow,
    horizon: usize,
    num_samples: usize,
    modes: &[MixtureMode],
    noise_scale: f64,
    rng: &mut R,
) -> Result<SampleSet> {
    check_request(history, horizon, num_samples)?;
    if modes.is_empty() {
        return Err(Error::InvalidConfig(
            "mixture needs at least one mode".into(),
        ));
    }
    let total: f64 = modes.iter().map(|m| m.probability).sum();
    if modes.iter().any(|m| !(m.probability >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(
            "mode probabilities must sum to 1".into(),
        ));
    }
    if !(noise_scale >= 0.0) {
        return Err(Error::InvalidConfig(
            "noise scale must be non-negative".into(),
        ));
    }
    let dt = history.dt;
    let mut samples = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let mut positions = Vec::with_capacity(history.num_humans());
        for j in 0..history.num_humans() {
            let (p0, v0) = history.current(j).expect("history is non-empty");
            let mode = draw_mode(modes, rng);
            let speed = v0.norm();
            let heading = v0.y.atan2(v0.x);
            let mut p = p0;
            let mut path = Vec::with_capacity(horizon);
            for k in 1..=horizon {
                let turn = mode.goal_direction * k as f64 / horizon as f64;
                p += (speed * dt) * Vec2::from_angle(heading + turn);
                let mut q = p;
                if noise_scale > 0.0 {
                    let sd = noise_scale * (k as f64 * dt).sqrt();
                    let nx: f64 = StandardNormal.sample(rng);
                    let ny: f64 = StandardNormal.sample(rng);
                    q += sd * Vec2::new(nx, ny);
                }
                path.push(q);
            }
            positions.push(path);
        }
        samples.push(TrajectorySample::new(positions)?);
    }
    SampleSet::new(samples, dt, history.latest_time().unwrap_or(0.0))
}

fn draw_mode<R: Rng + ?Sized>(modes: &[MixtureMode], rng: &mut R) -> MixtureMode {
    if modes.len() == 1 {
        return modes[0];
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for m in modes {
        acc += m.probability;
        if u < acc && m.probability > 0.0 {
            return *m;
        }
    }
    *modes
        .iter()
        .rev()
        .find(|m| m.probability > 0.0)
        .expect("probabilities sum to 1")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum BandwidthRule {
    /// `h_d = S^(-1/(d+4)) * sigma_d` per dimension.
    #[default]
    Scott,
    /// The same bandwidth in every dimension.
    Fixed(f64),
}

/// Leave-one-out Gaussian KDE likelihood of each joint sample,
/// normalized to the simplex.
pub fn kde_init_weights(samples: &SampleSet, rule: BandwidthRule) -> Result<WeightVector> {
    let s = samples.len();
    if s < 2 {
        return WeightVector::uniform(s.max(1));
    }
    let points: Vec<Vec<f64>> = samples
        .samples
        .iter()
        .map(|smp| {
            smp.positions
                .iter()
                .flatten()
                .flat_map(|p| [p.x, p.y])
                .collect()
        })
        .collect();
    let d = points[0].len();
    let mut bandwidth = vec![0.0; d];
    for (k, h) in bandwidth.iter_mut().enumerate() {
        let mean = points.iter().map(|p| p[k]).sum::<f64>() / s as f64;
        let var = points.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
        *h = match rule {
            BandwidthRule::Scott => (s as f64).powf(-1.0 / (d as f64 + 4.0)) * var.sqrt(),
            BandwidthRule::Fixed(h) => h,
        };
    }
    if let BandwidthRule::Fixed(h) = rule {
        if !(h > 0.0) {
            return Err(Error::InvalidConfig(
                "KDE bandwidth must be positive".into(),
            ));
        }
    }
    // zero-variance dimensions scale every kernel identically; drop them
    let dims: Vec<usize> = (0..d).filter(|&k| bandwidth[k] > 0.0).collect();
    if dims.is_empty() {
        return WeightVector::uniform(s);
    }
    let log_density: Vec<f64> = (0..s)
        .map(|i| {
            let terms: Vec<f64> = (0..s)
                .filter(|&k| k != i)
                .map(|k| {
                    -0.5 * dims
                        .iter()
                        .map(|&c| ((points[i][c] - points[k][c]) / bandwidth[c]).powi(2))
                        .sum::<f64>()
                })
                .collect();
            log_sum_exp(&terms)
        })
        .collect();
    let norm = log_sum_exp(&log_density);
    WeightVector::normalized(log_density.iter().map(|l| (l - norm).exp()).collect())
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentHistory {
    pub id: usize,
    /// `[t, x, y]` rows, oldest first.
    pub history: Vec<[f64; 3]>,
}

/// Request line of the prediction wire protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRequest {
    pub dt: f64,
    pub horizon: usize,
    pub num_samples: usize,
    pub agents: Vec<AgentHistory>,
    /// `[t, x, y, heading]` rows, oldest first.
    pub robot_history: Vec<[f64; 4]>,
}

/// Response line: `samples[s][j][t] = [x, y]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub samples: Vec<Vec<Vec<[f64; 2]>>>,
}

impl PredictionResponse {
    pub fn from_sample_set(set: &SampleSet) -> Self {
        Self {
            samples: set
                .samples
                .iter()
                .map(|s| {
                    s.positions
                        .iter()
                        .map(|p| p.iter().map(|q| [q.x, q.y]).collect())
                        .collect()
                })
                .collect(),
        }
    }

    /// Validates the shape against the request and converts.
    pub fn into_sample_set(self, request: &PredictionRequest, stamp: f64) -> Result<SampleSet> {
        let (s, n, t) = (request.num_samples, request.agents.len(), request.horizon);
        if self.samples.len() != s
            || self
                .samples
                .iter()
                .any(|smp| smp.len() != n || smp.iter().any(|traj| traj.len() != t))
        {
            return Err(Error::Protocol(format!(
                "response shape differs from S={s}, N={n}, T={t}"
            )));
        }
        if self
            .samples
            .iter()
            .flatten()
            .flatten()
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::Protocol(
                "response contains non-finite positions".into(),
            ));
        }
        let samples = self
            .samples
            .into_iter()
            .map(|smp| {
                TrajectorySample::new(
                    smp.into_iter()
                        .map(|traj| traj.into_iter().map(|[x, y]| Vec2::new(x, y)).collect())
                        .collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        SampleSet::new(samples, request.dt, stamp)
    }
}

/// Client for an external prediction process speaking one JSON line per
/// request and response over TCP.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalPredictor {
    pub endpoint: String,
    pub timeout: Duration,
}

impl ExternalPredictor {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(80);

    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Self::DEFAULT_TIMEOUT,
        }
    }

    pub fn predict(
        &self,
        history: &HistoryWindow,
        horizon: usize,
        num_samples: usize,
    ) -> Result<SampleSet> {
        check_request(history, horizon, num_samples)?;
        let request = history.to_request(horizon, num_samples);
        let line = self.exchange(&request)?;
        let response: PredictionResponse = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Protocol(format!("malformed response: {e}")))?;
        response.into_sample_set(&request, history.latest_time().unwrap_or(0.0))
    }

    fn exchange(&self, request: &PredictionRequest) -> Result<String> {
        let deadline = Instant::now() + self.timeout;
        let stale = |what: &str| Error::StaleSamples(format!("{what} exceeded {:?}", self.timeout));
        let addr = self
            .endpoint
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| Error::InvalidConfig(format!("cannot resolve {}", self.endpoint)))?;
        let stream =
            TcpStream::connect_timeout(&addr, self.timeout).map_err(|e| match e.kind() {
                ErrorKind::TimedOut | ErrorKind::WouldBlock => stale("connect"),
                _ => Error::Io(e),
            })?;
        stream.set_nodelay(true)?;
        let remaining = || {
            deadline
                .checked_duration_since(Instant::now())
                .filter(|d| !d.is_zero())
                .ok_or_else(|| stale("request"))
        };
        let mut writer = stream.try_clone()?;
        writer.set_write_timeout(Some(remaining()?))?;
        let mut payload = serde_json::to_string(request)?;
        payload.push('\n');
        writer
            .write_all(payload.as_bytes())
            .map_err(|e| timeout_or_io(e, stale("write")))?;
        let mut reader = BufReader::new(stream);
        let mut line = String::new();
        loop {
            reader.get_ref().set_read_timeout(Some(remaining()?))?;
            match reader.read_line(&mut line) {
                Ok(0) => {
                    return Err(Error::Protocol(
                        "connection closed before a response".into(),
                    ))
                }
                Ok(_) if line.ends_with('\n') => return Ok(line),
                Ok(_) => continue,
                Err(e) => return Err(timeout_or_io(e, stale("response"))),
            }
        }
    }
}

fn timeout_or_io(e: std::io::Error, stale: Error) -> Error {
    match e.kind() {
        ErrorKind::TimedOut | ErrorKind::WouldBlock => stale,
        _ => Error::Io(e),
    }
}

/// Serves one request on an accepted connection; handy for stub
/// predictors in tests and examples.
pub fn serve_connection<F>(stream: TcpStream, handler: F) -> Result<()>
where
    F: FnOnce(&PredictionRequest) -> String,
{
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let request: PredictionRequest = serde_json::from_str(line.trim_end())?;
    let mut reply = handler(&request);
    reply.push('\n');
    writer.write_all(reply.as_bytes())?;
    Ok(())
}

/// Latest-value handoff between a producer thread and the controller.
/// Readers always see a complete snapshot.
#[derive(Debug)]
pub struct SnapshotCell<T> {
    slot: Mutex<Option<Arc<T>>>,
}

impl<T> Default for SnapshotCell<T> {
    fn default() -> Self {
        Self {
            slot: Mutex::new(None),
        }
    }
}

impl<T> SnapshotCell<T> {
    pub fn publish(&self, value: T) {
        *self.slot.lock().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(value));
    }

    pub fn latest(&self) -> Option<Arc<T>> {
        self.slot.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn window(points: &[(f64, f64)]) -> HistoryWindow {
        let mut h = HistoryWindow::new(1, 0.25, 3.2).unwrap();
        let robot = RobotState::new(Vec2::ZERO, 0.0, 0.0).unwrap();
        for (k, (x, y)) in points.iter().enumerate() {
            h.push(k as f64 * 0.25, robot, &[Vec2::new(*x, *y)])
                .unwrap();
        }
        h
    }

    #[test]
    fn constant_velocity_rollout() {
        let h = window(&[(-0.25, 0.0), (0.0, 0.0)]);
        let set = cvg_predict(&h, 8, 3).unwrap();
        assert_eq!(set.len(), 3);
        for s in &set.samples {
            for k in 1..=8 {
                let p = s.at(0, k);
                assert!((p.x - 0.25 * k as f64).abs() < 1e-12 && p.y.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stationary_and_single_point_histories() {
        for h in [window(&[(1.0, 2.0), (1.0, 2.0)]), window(&[(1.0, 2.0)])] {
            let set = cvmm_predict(&h, 4, 1).unwrap();
            assert!(set.samples[0].positions[0]
                .iter()
                .all(|p| *p == Vec2::new(1.0, 2.0)));
        }
    }

    #[test]
    fn velocity_is_last_finite_difference() {
        let h = window(&[(0.0, 0.0), (0.31, -0.07), (0.52, 0.11)]);
        let set = cvg_predict(&h, 1, 1).unwrap();
        let v = Vec2::new((0.52 - 0.31) / 0.25, (0.11 + 0.07) / 0.25);
        let expected = Vec2::new(0.52, 0.11) + 0.25 * v;
        assert!(set.samples[0].at(0, 1).distance(expected) < 1e-12);
    }

    #[test]
    fn history_window_is_bounded() {
        let pts: Vec<_> = (0..40).map(|k| (k as f64, 0.0)).collect();
        let h = window(&pts);
        assert_eq!(h.len(), 13);
        assert_eq!(h.humans[0].back().unwrap().x, 39.0);
    }

    #[test]
    fn single_mode_without_noise_is_cvg() {
        let h = window(&[(0.0, 0.0), (0.2, 0.1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let modes = [MixtureMode {
            goal_direction: 0.0,
            probability: 1.0,
        }];
        let a = mixture_predict(&h, 8, 4, &modes, 0.0, &mut rng).unwrap();
        let b = cvg_predict(&h, 8, 4).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            for (p, q) in x.positions[0].iter().zip(&y.positions[0]) {
                assert!(p.distance(*q) < 1e-12);
            }
        }
    }

    #[test]
    fn mode_frequencies_follow_probabilities() {
        let h = window(&[(0.0, 0.0), (0.25, 0.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let modes = [
            MixtureMode {
                goal_direction: 0.8,
                probability: 0.5,
            },
            MixtureMode {
                goal_direction: -0.8,
                probability: 0.5,
            },
            MixtureMode {
                goal_direction: 0.0,
                probability: 0.0,
            },
        ];
        let set = mixture_predict(&h, 8, 1000, &modes, 0.0, &mut rng).unwrap();
        let left = set.samples.iter().filter(|s| s.at(0, 8).y > 1e-9).count();
        let straight = set
            .samples
            .iter()
            .filter(|s| s.at(0, 8).y.abs() <= 1e-9)
            .count();
        assert_eq!(straight, 0);
        assert!((left as f64 / 1000.0 - 0.5).abs() <= 0.05);
        assert!(mixture_predict(&h, 8, 2, &[], 0.0, &mut rng).is_err());
    }

    #[test]
    fn kde_identical_samples_are_uniform() {
        let h = window(&[(0.0, 0.0), (0.2, 0.1)]);
        let set = cvg_predict(&h, 8, 5).unwrap();
        let w = kde_init_weights(&set, BandwidthRule::Scott).unwrap();
        assert!(w.as_slice().iter().all(|x| (x - 0.2).abs() < 1e-15));
    }

    fn set_from(points: &[[f64; 2]]) -> SampleSet {
        SampleSet::new(
            points
                .iter()
                .map(|p| TrajectorySample::new(vec![vec![Vec2::new(p[0], p[1])]]).unwrap())
                .collect(),
            0.25,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn kde_prefers_clustered_samples() {
        let set = set_from(&[[0.0, 0.0], [0.0, 0.0], [3.0, 1.0]]);
        let w = kde_init_weights(&set, BandwidthRule::Scott).unwrap();
        assert!(w.as_slice()[0] > w.as_slice()[2]);
        assert!(w.as_slice()[1] > w.as_slice()[2]);
    }

    #[test]
    fn snapshot_cell_returns_latest() {
        let cell = SnapshotCell::default();
        assert!(cell.latest().is_none());
        cell.publish(1);
        cell.publish(2);
        assert_eq!(*cell.latest().unwrap(), 2);
    }

    #[test]
    fn shift_repeats_last_step() {
        let set = set_from(&[[1.0, 1.0]]);
        let s = set.shifted(3);
        assert_eq!(s.samples[0].at(0, 1), Vec2::new(1.0, 1.0));
        assert_eq!(s.stamp, 0.75);
    }

    proptest! {
        #[test]
        fn kde_is_permutation_equivariant(
            pts in proptest::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 2..12),
            rot in 0usize..12,
        ) {
            let pts: Vec<[f64; 2]> = pts.into_iter().map(|(a, b)| [a, b]).collect();
            let w = kde_init_weights(&set_from(&pts), BandwidthRule::Scott).unwrap();
            let k = rot % pts.len();
            let mut rotated = pts.clone();
            rotated.rotate_left(k);
            let wr = kde_init_weights(&set_from(&rotated), BandwidthRule::Scott).unwrap();
            let total: f64 = w.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for i in 0..pts.len() {
                prop_assert!((wr.as_slice()[i] - w.as_slice()[(i + k) % pts.len()]).abs() < 1e-12);
            }
        }
    }
}
