//! Evaluates the quadratic rate function of a few deviation paths around
//! the stationary profile, and checks the minimal-control identity by
//! solving the controlled linear ODE.

use jsqd::path::{Control, PLPath};
use jsqd::rate::{control_cost, rate_i, rate_stationary, solve_controlled_ode, Reference};
use jsqd::ModelParams;

fn main() -> jsqd::Result<()> {
    let params = ModelParams::new(0.5, 2);
    let depth = 4;
    let reference = Reference::stationary(&params, depth)?;
    let q = reference.to_path(1.0, 1000)?;

    let ramp = PLPath::from_fn(1.0, 1000, |t| {
        let mut v = vec![0.0; depth + 1];
        v[1] = 0.1 * t;
        v
    })?;
    let r = rate_i(&ramp, &q, &params)?;
    println!("ramp on level 1: I = {:.9} (closed form 0.0234444)", r.total);
    println!("per level: {:?}", &r.per_coordinate[1..]);
    println!("log-space evaluator: {:.9}", rate_stationary(&ramp, &reference, &params)?.total);
    println!("doubled ramp: {:.9}", rate_i(&ramp.scaled(2.0), &q, &params)?.total);

    // push level 2 up for half the horizon and let the dynamics respond
    let phi = Control::new(PLPath::from_fn(1.0, 1000, |t| {
        let mut v = vec![0.0; depth + 1];
        v[2] = if t < 0.5 { 0.05 } else { 0.0 };
        v
    })?)?;
    let eta = solve_controlled_ode(&phi, &q, &params, None)?;
    println!(
        "control cost {:.9}, rate of the response {:.9}",
        control_cost(&phi, &q, &params)?,
        rate_i(&eta, &q, &params)?.total
    );
    Ok(())
}
