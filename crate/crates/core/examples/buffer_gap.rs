//! Buffered fixed points against the unbuffered profile: the gap at each
//! level and the constant in the `(Q*_K)^{d-1}` bound.

use jsqd::fluid::{buffer_gap_report, BufferedProfile};
use jsqd::ModelParams;

fn main() -> jsqd::Result<()> {
    let params = ModelParams::new(0.5, 2);
    let k1 = BufferedProfile::new(&params, 1)?.value(1);
    println!("K = 1: Q*_1(1) = {k1:.12} (sqrt 2 - 1 = {:.12})", 2f64.sqrt() - 1.0);

    let report = buffer_gap_report(&params, 1..=10)?;
    println!("   K  e(K)          ratio         constant  ordered");
    for r in &report.rows {
        println!("{:>4}  {:<12.4e}  {:<12.4e}  {:.6}  {}", r.k, r.e, r.ratio, r.constant, r.ordered);
    }
    println!("fitted C = {:.6}", report.fitted_c);
    Ok(())
}
