//! Any admissible control sequence plus the constructive slacks is a
//! feasible point of the transcribed problem, and its time-before-exit is
//! read off the slacks.

use dcoc::scenario::{bundled, random_controls, witness_violation};
use dcoc::solver::Nlp;
use dcoc::transcription::{build_nlp, default_big_m};
use rand::SeedableRng;

fn main() -> dcoc::Result<()> {
    let config = bundled("2rw_restricted")?;
    let problem = config.problem()?;
    let nlp = build_nlp(&problem, config.theta, default_big_m(&problem))?;
    println!("{} variables, {} inequality rows", nlp.n_vars(), nlp.n_ineq());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    for trial in 0..5 {
        let controls = random_controls(&problem, &mut rng);
        let violation = witness_violation(&nlp, &controls)?;
        let extract = nlp.extract(&nlp.feasible_point(&controls)?)?;
        println!("trial {trial}: worst violation {violation:.1e}, kappa {}", extract.kappa);
    }
    Ok(())
}
