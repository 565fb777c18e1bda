use ones::metrics::{dense_flops, moe_flops};

// Per-token feed-forward FLOPs of a dense layer and of a top-K MoE layer

fn main() {
    let (d, h) = (32, 128);
    let dense = dense_flops(d, h);
    println!("dense FFN d={d} h={h}: {dense} FLOPs/token");
    for e in [2, 4, 8, 16] {
        for k in [1, 2] {
            let moe = moe_flops(d, h, e, k);
            println!(
                "MoE E={e:2} K={k}: {moe:6} FLOPs/token, {:.4}x dense",
                moe as f64 / dense as f64
            );
        }
    }
}
