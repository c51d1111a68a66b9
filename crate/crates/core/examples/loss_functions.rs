//! Evaluates the four losses on one confident and one hard pixel, showing
//! how focusing and class weights reshape the penalty.

use useg::loss::{compute_loss, pixel_loss, LossConfig, PixelTargets, INSPECTION_WEIGHTS};
use useg::tensor::Tensor;

fn main() -> useg::Result<()> {
    println!("{:>6} {:>10} {:>10} {:>10}", "p", "SCE", "Focal(2)", "W(10)-Focal(2)");
    for p in [0.05, 0.3, 0.6, 0.9, 0.99] {
        println!(
            "{p:>6} {:>10.5} {:>10.5} {:>10.5}",
            pixel_loss(p, 0.0, 1.0),
            pixel_loss(p, 2.0, 1.0),
            pixel_loss(p, 2.0, 10.0)
        );
    }

    // two pixels, six classes: an easy coating pixel and a missed corroded one
    let mut logits = Tensor::zeros(&[1, 6, 1, 2]);
    logits.data_mut()[0] = 4.0; // class 0 at pixel 0
    logits.data_mut()[1] = 2.0; // class 0 at pixel 1
    let targets = PixelTargets::dense(1, 1, 2, vec![0, 2])?;
    let w = INSPECTION_WEIGHTS.to_vec();
    for cfg in [
        LossConfig::sce(),
        LossConfig::weighted_sce(w.clone()),
        LossConfig::focal(2.0),
        LossConfig::weighted_focal(2.0, w),
    ] {
        let (loss, grad) = compute_loss(&logits, &targets, &cfg)?;
        // gradient on the corroded logit at the missed pixel
        let g = grad.data()[2 * 2 + 1];
        println!("{:<14} loss {loss:>8.4}  dL/dz(corroded) {g:>8.4}", cfg.name());
    }
    Ok(())
}
