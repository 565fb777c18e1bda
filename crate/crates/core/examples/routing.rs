use ones::model::{balance_loss, moe_forward, Activation, MoeLayer, RoutingOutcome};
use ones::numerics::Rng;

// Noisy top-2 routing over four experts and the load-balance loss

fn main() -> ones::Result<()> {
    let mut rng = Rng::new(7);
    let layer = MoeLayer::random(8, 16, 4, 2, Activation::Gelu, &mut rng)?;

    let mut outcome = RoutingOutcome::new(4);
    for t in 0..6 {
        let x: Vec<f64> = (0..8).map(|_| rng.normal(1.0)).collect();
        let (y, route) = moe_forward(&layer, &x, Some(&mut rng))?;
        let token = &route.tokens[0];
        let probs: Vec<String> = token.probs.iter().map(|p| format!("{p:.3}")).collect();
        println!(
            "token {t}: gates [{}] -> experts {:?}, |y| = {:.3}",
            probs.join(", "),
            token.selected,
            ones::numerics::norm2(&y)
        );
        outcome.tokens.extend(route.tokens);
    }

    let fractions: Vec<String> = outcome
        .dispatch_fractions()
        .iter()
        .map(|f| format!("{f:.2}"))
        .collect();
    println!("dispatch fractions: [{}]", fractions.join(", "));
    println!(
        "balance loss: {:.4} (1.0 when routing is uniform)",
        balance_loss(&[outcome])?
    );
    Ok(())
}
