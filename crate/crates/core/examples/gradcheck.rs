//! Checks reverse-mode gradients of every operator against central
//! differences. Pass `--network` to include the full tiny network (~10 s).

use gldfn::harness::gradcheck_suite::{run_case, CASES};

pub fn run_example() -> gldfn::Result<()> {
    let with_network = std::env::args().any(|a| a == "--network");
    for case in CASES.iter().filter(|c| with_network || c.name != "network") {
        let r = run_case(case.name, 0)?;
        let verdict = if r.max_rel_error < case.tolerance { "ok" } else { "FAILED" };
        println!("{:<24} {:.2e}  {verdict}", case.name, r.max_rel_error);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> gldfn::Result<()> {
    run_example()
}
