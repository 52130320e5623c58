//! Integrates the mean-field ODE from an empty system and watches it settle
//! on the closed-form stationary profile.

use jsqd::fluid::{integrate_fluid, stationary_profile, FluidOpts};
use jsqd::{ModelParams, QVector};

fn main() -> jsqd::Result<()> {
    let params = ModelParams::new(0.7, 2);
    let sol = integrate_fluid(&QVector::empty(params.depth), &params, &FluidOpts::default(), 30.0)?;
    let target = stationary_profile(&params, params.depth)?;

    for m in [0, 100, 250, 500, 1000] {
        let row = sol.path.row(m);
        let dist = (1..=params.depth).map(|j| (row[j] - target.get(j)).abs()).fold(0.0, f64::max);
        println!("t = {:>5.1}  q1 = {:.6}  q2 = {:.6}  max |q - Q*| = {dist:.2e}", sol.path.time(m), row[1], row[2]);
    }
    println!("step-halving error estimate {:.2e}", sol.error_estimate);
    println!("closure residual {:.2e}", sol.closure_residual);
    Ok(())
}
