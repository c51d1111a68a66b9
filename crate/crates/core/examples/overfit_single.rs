//! Overfits the default U-Net to one synthetic 64x64 scene and reports the
//! corroded-class Dice on that same scene.

use useg::data::{generate_scene, AugmentConfig, SynthConfig};
use useg::model::{UNet, UNetConfig};
use useg::optim::{train_with_observer, TrainConfig};

fn main() -> useg::Result<()> {
    let scene = generate_scene(&SynthConfig {
        seed: 1,
        ..Default::default()
    })?;
    let cfg = TrainConfig {
        max_epochs: 400,
        eval_every: 20,
        early_stop_patience: 400,
        augment: AugmentConfig::disabled(),
        ..Default::default()
    };
    let model = UNet::new(UNetConfig::default(), 0)?;
    let data = [scene];
    let (best, _) = train_with_observer(model, &data, &data, &cfg, |r| {
        if let Some(e) = &r.eval {
            println!(
                "epoch {:>3}  loss {:.4}  dsc {:.4}  ({:.1}s)",
                r.epoch,
                r.train_loss,
                e.score(),
                r.wall_time_s
            );
        }
    })?;
    println!("best dsc {:.4} at epoch {}", best.eval_dsc, best.epoch);
    Ok(())
}
