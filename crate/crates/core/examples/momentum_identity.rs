//! The attitude model conserves `J_bar w + J_w W nu` up to the external
//! radiation torque and the gyroscopic term.

use dcoc::attitude::{AttitudeModel, AttitudeParams};
use dcoc::problem::Vector;
use rand::{Rng, SeedableRng};

fn main() -> dcoc::Result<()> {
    let s = 1.0 / 3f64.sqrt();
    let layouts = [
        ("three wheels", vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
        ("two wheels", vec![[s, s, s], [1.0, 0.0, 0.0]]),
    ];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for (name, axes) in layouts {
        let model = AttitudeModel::new(AttitudeParams::reference(axes))?;
        let p = model.wheel_count();
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let x = Vector::from_fn(6 + p, |i, _| match i {
                0..=2 => rng.gen_range(-0.5..0.5),
                3..=5 => rng.gen_range(-1e-2..1e-2),
                _ => rng.gen_range(-100.0..100.0),
            });
            let u = Vector::from_fn(p, |_, _| rng.gen_range(-1.0..1.0));
            worst = worst.max(model.momentum_identity_residual(&x, &u)?);
        }
        println!("{name}: worst relative residual over 1000 states {worst:.3e}");
    }
    Ok(())
}
