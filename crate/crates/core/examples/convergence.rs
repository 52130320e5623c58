//! Buffered rates converge to the unbuffered one as the buffer grows, at
//! the speed of the tail criterion.

use jsqd::rate::{convergence_study, family_trajectory, harmonic, Family};
use jsqd::ModelParams;

fn main() -> jsqd::Result<()> {
    let params = ModelParams::new(0.5, 2);
    let depth = 24;
    for family in [Family::A, Family::B, Family::C] {
        let q = family_trajectory(family, &harmonic(depth), 2.0, &params, depth, 2000)?;
        let report = convergence_study(&q, 10, &params)?;
        println!("family {family:?}");
        print!("{}", report.to_csv());
        for note in &report.notes {
            println!("# {note}");
        }
        println!();
    }
    Ok(())
}
