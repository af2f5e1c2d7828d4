//! CW-L2 against a linear classifier, where the smallest adversarial
//! perturbation is the distance to the decision boundary.

use lmt::attack::{cw_l2_attack, AttackConfig};
use lmt::model::Dense;
use lmt::{MlpModel, Tensor};

fn main() -> lmt::Result<()> {
    // class 0 wins iff x0 > x1; the boundary is the diagonal
    let w = Tensor::from_rows(&[vec![4.0, -4.0], vec![-4.0, 4.0]])?;
    let model = MlpModel::from_layers(vec![Dense::new(w, Tensor::zeros(vec![2]))?])?;

    for x in [[0.6, 0.4], [0.55, 0.45], [0.9, 0.2]] {
        let exact = (x[0] - x[1]) / 2f64.sqrt();
        let r = cw_l2_attack(&model, &x, 0, &AttackConfig::default())?;
        println!(
            "x = {x:?}: success {} norm {:.4} (boundary distance {exact:.4}) class {} -> {}",
            r.success, r.perturbation_norm, r.original_class, r.adversarial_class
        );
    }

    let capped = AttackConfig {
        norm_cap: Some(0.1),
        ..AttackConfig::default()
    };
    let r = cw_l2_attack(&model, &[0.6, 0.4], 0, &capped)?;
    println!("with a 0.1 norm cap: success {}, norm {:.4}", r.success, r.perturbation_norm);
    Ok(())
}
