//! Sample weight refinement: repeated observations of a human pull the
//! weight onto the sample whose prediction keeps matching them.

use sicnav::refine::{weight_update, RefineConfig};
use sicnav::state::WeightVector;
use sicnav::Vec2;

fn main() -> sicnav::Result<()> {
    let config = RefineConfig::default();
    // three hypotheses for one human: veer left, go straight, veer right
    let lateral = [0.4, 0.0, -0.4];
    let mut weights = WeightVector::uniform(lateral.len())?;
    println!("prior            {:?}", weights.as_slice());

    for t in 1..=6 {
        let x = 0.3 * t as f64;
        let samples: Vec<Vec<Vec2>> = lateral
            .iter()
            .map(|dy| vec![Vec2::new(x, dy * t as f64 / 6.0)])
            .collect();
        // the refined position follows the left-veering hypothesis with some error
        let refined = vec![Vec2::new(x + 0.05, 0.35 * t as f64 / 6.0)];
        weights = weight_update(&weights, &refined, &samples, &config)?;
        let w = weights.as_slice();
        println!(
            "after step {t}     [{:.3}, {:.3}, {:.3}]  entropy {:.3}",
            w[0],
            w[1],
            w[2],
            weights.entropy()
        );
    }
    Ok(())
}
