use ones::metrics::{noise_linearity, noise_scan, noise_scan_csv, NoiseTarget};
use ones::model::{Activation, MoeLayer};
use ones::numerics::Rng;

// How much of a gathered layer's output comes from experts the token was
// never routed to, as the SVD ratio λ grows

fn main() -> ones::Result<()> {
    let mut rng = Rng::new(5);
    let layer = MoeLayer::random(16, 64, 4, 2, Activation::Gelu, &mut rng)?;
    let tokens: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..16).map(|_| rng.normal(1.0)).collect())
        .collect();
    let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();

    let rows = noise_scan(&layer, &grid, &tokens, NoiseTarget::FirstLayer)?;
    print!("{}", noise_scan_csv(&rows));
    let (slope, r2) = noise_linearity(&rows);
    println!("noise vs λ: slope {slope:.3}, R² {r2:.3}");
    Ok(())
}
