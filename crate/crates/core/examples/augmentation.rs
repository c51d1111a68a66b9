//! Draws a few augmentations of one scene and reports what each draw did
//! and how many pixels fell out of frame.

use useg::data::{augment_traced, generate_scene, AugmentConfig, SynthConfig};

fn main() -> useg::Result<()> {
    let scene = generate_scene(&SynthConfig::default())?;
    let cfg = AugmentConfig::default();
    let before = scene.targets.valid_count();
    for draw in 0..6 {
        let (out, a) = augment_traced(&scene, &cfg, draw)?;
        println!(
            "draw {draw}: rot {:>6.2} deg  shift {:>3?}  gamma {:.2}  bright {:>6.1}  valid {} -> {}",
            a.rotation.to_degrees(),
            a.shift,
            a.gamma,
            a.brightness,
            before,
            out.targets.valid_count()
        );
    }
    Ok(())
}
