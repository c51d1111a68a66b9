//! Saves a briefly trained model, reloads it and confirms the logits are
//! bit-identical; then shows how a damaged file is rejected.

use useg::data::{generate_scene, network_input, AugmentConfig, SynthConfig};
use useg::model::{load_checkpoint, save_checkpoint, UNet, UNetConfig};
use useg::optim::{train, TrainConfig};
use useg::Error;

fn main() -> useg::Result<()> {
    let scene = generate_scene(&SynthConfig::default())?;
    let data = [scene];
    let cfg = TrainConfig {
        max_epochs: 5,
        eval_every: 5,
        augment: AugmentConfig::disabled(),
        ..Default::default()
    };
    let (best, _) = train(UNet::new(UNetConfig::default(), 7)?, &data, &data, &cfg)?;

    let dir = std::env::temp_dir().join("useg-ckpt-demo");
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    let path = dir.join("model.useg");
    save_checkpoint(&best, &path)?;
    let loaded = load_checkpoint(&path)?;

    let x = network_input(&data[0].image);
    let a = best.to_model()?.forward_eval(&x)?;
    let b = loaded.to_model()?.forward_eval(&x)?;
    println!(
        "saved epoch {} (dsc {:.4}); logits bit-identical after reload: {}",
        loaded.epoch,
        loaded.eval_dsc,
        a == b
    );

    let mut bytes = std::fs::read(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    bytes.truncate(bytes.len() / 2);
    let broken = dir.join("truncated.useg");
    std::fs::write(&broken, &bytes).map_err(|e| Error::Io { path: broken.clone(), source: e })?;
    match load_checkpoint(&broken) {
        Err(e) => println!("truncated file rejected: {e}"),
        Ok(_) => println!("truncated file unexpectedly loaded"),
    }
    Ok(())
}
