//! Times eval-mode inference of the default U-Net on a 256x320 image.

use std::time::Instant;

use useg::data::{generate_scene, network_input, SynthConfig};
use useg::model::{UNet, UNetConfig};
use useg::tensor::Mode;

fn main() -> useg::Result<()> {
    let scene = generate_scene(&SynthConfig {
        height: 256,
        width: 320,
        ..Default::default()
    })?;
    let x = network_input(&scene.image);
    let mut model = UNet::new(UNetConfig::default(), 0)?;
    // one train-mode pass initializes the running statistics
    model.forward(&x, Mode::Train)?;

    let runs = 5;
    let start = Instant::now();
    for _ in 0..runs {
        model.forward_eval(&x)?;
    }
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{} parameters, 256x320 input: {:.1} ms per frame, {:.2} fps",
        model.param_count(),
        1e3 * secs / runs as f64,
        runs as f64 / secs
    );
    Ok(())
}
