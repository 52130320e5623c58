//! Simulates a JSQ(d) system with both engines and compares the terminal
//! occupancy against the fluid limit.

use jsqd::fluid::{integrate_fluid, FluidOpts};
use jsqd::sim::{simulate_occupancy_ctmc, simulate_server_level, SimConfig};
use jsqd::{ModelParams, QVector};

fn main() -> jsqd::Result<()> {
    let params = ModelParams::new(0.9, 2);
    let horizon = 20.0;
    let config = SimConfig::new(2000, params.clone(), horizon, 7);

    let server = simulate_server_level(&config)?;
    let chain = simulate_occupancy_ctmc(&config)?;
    let fluid = integrate_fluid(&QVector::empty(params.depth), &params, &FluidOpts::default(), horizon)?;
    let limit = fluid.path.row(fluid.path.intervals());

    println!("level  server    chain     fluid");
    for j in 1..=5 {
        println!(
            "{j:>5}  {:.4}    {:.4}    {:.4}",
            server.terminal().to_qvector().get(j),
            chain.terminal().to_qvector().get(j),
            limit[j]
        );
    }
    println!(
        "server engine: {} arrivals, {} departures, longest queue {}",
        server.events.arrivals, server.events.departures, server.max_length
    );
    Ok(())
}
