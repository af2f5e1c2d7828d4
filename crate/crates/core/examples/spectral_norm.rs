//! Power iteration for spectral norms and the network Lipschitz bound.

use lmt::lipschitz::{
    certified_lipschitz, required_margin, spectral_norm_converged, spectral_norm_power_iter,
    training_lipschitz,
};
use lmt::model::build_mnist_mlp;
use lmt::Tensor;

fn main() -> lmt::Result<()> {
    // singular values 3√5 ≈ 6.708 and √5
    let w = Tensor::from_rows(&[vec![3.0, 0.0], vec![4.0, 5.0]])?;
    let v0 = [1.0, 0.0];
    for iters in [1, 2, 5, 20] {
        let (sigma, _) = spectral_norm_power_iter(&w, &v0, iters)?;
        println!("{iters:>2} rounds: {sigma:.9}");
    }
    let (sigma, _, rounds) = spectral_norm_converged(&w, &v0)?;
    println!("converged after {rounds} rounds: {sigma:.12} (exact {:.12})", 45f64.sqrt());

    let mut model = build_mnist_mlp(0);
    let exact = certified_lipschitz(&model)?;
    println!("\n784-100-100-100-10 at initialisation");
    println!("per-layer norms {:.4?}", exact.per_layer_norms);
    println!("exact bound {:.6}", exact.global_bound);
    for step in 1..=5 {
        let fast = training_lipschitz(&mut model)?;
        println!("warm-started step {step}: {:.6}", fast.global_bound);
    }
    println!("margin needed for eps = 1.0: {:.6}", required_margin(&exact, 1.0)?);
    Ok(())
}
