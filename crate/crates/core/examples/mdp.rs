//! Monte Carlo estimates of deviation probabilities on the moderate
//! deviation scale, next to the law-of-large-numbers distance.

use jsqd::mdp::{run_lln_experiment, run_mdp_experiment, DeviationEvent, Functional, InitialCondition, MdpConfig};
use jsqd::ModelParams;

fn main() -> jsqd::Result<()> {
    let mut config = MdpConfig {
        n_list: vec![200, 800, 3200],
        gamma: 0.3,
        replicas: 500,
        event: DeviationEvent { coordinate: 1, threshold: 0.2, functional: Functional::Sup },
        params: ModelParams::new(0.5, 2),
        horizon: 3.0,
        seed: 1,
        init: InitialCondition::Stationary,
    };
    let report = run_mdp_experiment(&config)?;
    println!("      n    a(n)  successes        p  95% interval          sqrt(n) q50");
    for r in &report.rows {
        println!(
            "{:>7}  {:.4}  {:>9}  {:.4}  [{:.4}, {:.4}]  {:.3}",
            r.n, r.a_n, r.successes, r.p, r.lower, r.upper, r.fluct_q50
        );
    }

    config.init = InitialCondition::Empty;
    config.replicas = 10;
    let lln = run_lln_experiment(&config)?;
    println!("median sup l2 distance to the fluid path: {:?}", lln.medians());
    for note in &lln.notes {
        println!("# {note}");
    }
    Ok(())
}
