//! Compares reverse-mode gradients of an attention-style expression with
//! central differences in f64.

use diffcore::{check_gradients, DTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> DTensor<f64> {
    let n = shape.iter().product();
    DTensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn main() -> diffcore::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&[2, 5, 8], &mut rng);
    let wq = random(&[8, 8], &mut rng);
    let wk = random(&[8, 8], &mut rng);
    let gain = random(&[8], &mut rng);
    let bias = random(&[8], &mut rng);
    let report = check_gradients(
        &[x, wq, wk, gain, bias],
        |g, v| {
            let h = g.layer_norm(v[0], 2, v[3], v[4])?;
            let q = g.matmul(h, v[1])?;
            let k = g.matmul(h, v[2])?;
            let kt = g.transpose_last(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, 1.0 / 8f64.sqrt());
            let attn = g.softmax(scores, 2)?;
            let out = g.matmul(attn, h)?;
            let sq = g.square(out);
            Ok(g.mean(sq))
        },
        usize::MAX,
        0,
    )?;
    println!(
        "checked {} coordinates: max relative error {:.2e}, max absolute error {:.2e}",
        report.checked, report.max_rel_error, report.max_abs_error
    );
    Ok(())
}
