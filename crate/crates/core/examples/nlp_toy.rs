//! A small mathematical program with complementarity constraints solved by
//! the relaxed SQP: minimize (a - 1)^2 + (b - 1)^2 with a, b >= 0, a b = 0.

use sicnav::nlp::{solve, CompSide, ComplementarityPair, NlpProblem, RowMatrix, SolverSettings};

struct Corner;

impl NlpProblem for Corner {
    fn num_variables(&self) -> usize {
        2
    }
    fn num_equalities(&self) -> usize {
        0
    }
    fn num_inequalities(&self) -> usize {
        0
    }
    fn objective(&self, x: &[f64]) -> f64 {
        (x[0] - 1.0).powi(2) + (x[1] - 1.0).powi(2)
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] - 1.0)]
    }
    fn equalities(&self, _x: &[f64]) -> Vec<f64> {
        Vec::new()
    }
    fn equality_jacobian(&self, _x: &[f64]) -> RowMatrix {
        RowMatrix::new(0, 2)
    }
    fn inequalities(&self, _x: &[f64]) -> Vec<f64> {
        Vec::new()
    }
    fn inequality_jacobian(&self, _x: &[f64]) -> RowMatrix {
        RowMatrix::new(0, 2)
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0, 0.0], vec![f64::INFINITY; 2])
    }
    fn complementarity(&self) -> Vec<ComplementarityPair> {
        vec![ComplementarityPair {
            a: CompSide::Variable(0),
            b: CompSide::Variable(1),
        }]
    }
}

fn main() -> sicnav::Result<()> {
    let settings = SolverSettings {
        log_iterations: true,
        ..Default::default()
    };
    for start in [[0.9, 0.2], [0.2, 0.9]] {
        let sol = solve(&Corner, &start, None, &settings)?;
        println!(
            "start {start:?} -> x = ({:.4}, {:.4}), f = {:.4}, {:?} after {} iterations, final rho {:.0e}",
            sol.x[0], sol.x[1], sol.objective, sol.status, sol.iterations, sol.rho
        );
        for r in &sol.log {
            println!(
                "    it {:2}  rho {:.0e}  merit {:.5}  kkt {:.1e}  step {:.2}",
                r.iteration, r.rho, r.merit_after, r.kkt, r.step
            );
        }
    }
    Ok(())
}
