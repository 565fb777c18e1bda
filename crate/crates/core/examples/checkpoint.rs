use ones::model::{ClassifierModel, FfnKind};
use ones::numerics::Rng;
use ones::workbench::{
    decode_checkpoint, encode_checkpoint, sha256_hex, ExperimentConfig, Provenance,
};

// Checkpoint bytes round-trip exactly

fn main() -> ones::Result<()> {
    let cfg = ExperimentConfig::preset("smoke")?;
    let arch = cfg.teacher_arch();
    let model = ClassifierModel::random(&arch, &mut Rng::new(cfg.seed))?;

    let provenance = Provenance {
        role: "teacher".into(),
        seed: cfg.seed,
        ..Default::default()
    };
    let bytes = encode_checkpoint(&model, provenance.clone())?;
    let (loaded, meta) = decode_checkpoint(&bytes)?;
    let again = encode_checkpoint(&loaded, meta.provenance)?;

    println!("{} bytes, sha256 {}", bytes.len(), sha256_hex(&bytes));
    println!("moe: {}", matches!(arch.ffn, FfnKind::Moe { .. }));
    println!("model equal after decode: {}", loaded == model);
    println!("bytes equal after re-encode: {}", again == bytes);
    Ok(())
}
