//! Equalizes a dim, unevenly lit image with CLAHE and compares the
//! intensity spread before and after.

use useg::data::{clahe, DEFAULT_CLIP_LIMIT, DEFAULT_TILES};
use useg::tensor::Tensor;

fn spread(t: &Tensor) -> (f64, f64) {
    let d = t.data();
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

fn main() -> useg::Result<()> {
    let (h, w) = (64, 64);
    // dark left half, a faint ring texture, light falling off to the right
    let image = Tensor::from_fn(&[1, 1, h, w], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let ring = 6.0 * ((y - 32.0).hypot(x - 32.0) / 3.0).sin();
        (40.0 + 0.5 * x + ring).round()
    });
    let out = clahe(&image, DEFAULT_CLIP_LIMIT, DEFAULT_TILES)?;
    let (lo, hi) = spread(&image);
    let (lo2, hi2) = spread(&out);
    println!("input  range {lo:>5.0}..{hi:<5.0} mean {:.1}", image.mean());
    println!("output range {lo2:>5.0}..{hi2:<5.0} mean {:.1}", out.mean());
    let row: Vec<String> = (0..w).step_by(8).map(|x| format!("{:>4}", out.data()[32 * w + x])).collect();
    println!("middle row after CLAHE: {}", row.join(""));
    Ok(())
}
