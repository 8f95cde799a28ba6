//! Finite-difference check of every differentiable primitive and the
//! model losses, followed by a deliberately broken backward rule.

use pointar::checks::{format_report, gradcheck_suite};
use pointar::nncore::GradcheckOptions;

fn main() -> pointar::Result<()> {
    let opts = GradcheckOptions::default();
    print!("{}", format_report(&gradcheck_suite(opts, 0)?));

    println!("\nwith the softmax gradient scaled by 1.5:");
    let broken = gradcheck_suite(
        GradcheckOptions {
            corrupt: Some("softmax"),
            ..opts
        },
        0,
    )?;
    for r in broken.iter().filter(|r| !r.passed()) {
        println!("  {} fails at {:.2e}", r.name, r.max_rel_err);
    }
    Ok(())
}
