//! Finite-difference check of the autograd engine on a small float64 network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use deltalogit::tensor::finite_diff_check;
use deltalogit::{Result, Tensor};

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
    let params = vec![
        Tensor::randn(&[6], 1.0, &mut rng),
        Tensor::randn(&[6, 8], 0.5, &mut rng),
        Tensor::randn(&[8, 5], 0.5, &mut rng),
    ];
    let targets = [0u32, 3, 1, 4];
    let mask = [true, true, false, true];
    let loss = |p: &[Tensor<f64>]| {
        let h = x.rms_norm(&p[0], 1e-6)?.matmul(&p[1])?.silu();
        h.matmul(&p[2])?.cross_entropy_rows(&targets, &mask)
    };
    let report = finite_diff_check(loss, &params, 1e-6, 64, 1)?;
    for c in &report.params {
        println!(
            "param {}: {} entries, max rel err {:.2e}, max abs err {:.2e}",
            c.index, c.entries_checked, c.max_rel_err, c.max_abs_err
        );
    }
    println!("worst relative error {:.2e}", report.max_rel_err());
    Ok(())
}
