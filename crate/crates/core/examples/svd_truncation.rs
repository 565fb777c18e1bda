use ones::numerics::{relative_frobenius, svd, truncate_svd, Matrix, Rng};

// Adaptive rank selection: keep the smallest prefix of singular values
// holding a fraction λ of the total singular mass

fn main() -> ones::Result<()> {
    let mut rng = Rng::new(1);
    // low-rank signal plus a little noise
    let u = Matrix::from_fn(12, 3, |_, _| rng.normal(1.0));
    let v = Matrix::from_fn(3, 20, |_, _| rng.normal(1.0));
    let a = u
        .matmul(&v)?
        .add(&Matrix::from_fn(12, 20, |_, _| rng.normal(0.05)))?;

    let f = svd(&a)?;
    let s: Vec<String> = f.s.iter().map(|x| format!("{x:.2}")).collect();
    println!("singular values: {}", s.join(" "));

    for lambda in [0.25, 0.5, 0.75, 0.9, 1.0] {
        let t = truncate_svd(&f, lambda)?;
        let approx = t.factors.reconstruct();
        println!(
            "λ = {lambda:.2}: rank {:2}, relative error {:.2e}",
            t.rank,
            relative_frobenius(&approx, &a)?
        );
    }
    Ok(())
}
