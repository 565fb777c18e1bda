use ones::workbench::{
    generate_dataset, linear_probe_accuracy, ProbeFeatures, SyntheticTaskSpec, TaskKind,
};

// The parity task defeats a linear probe on every feature map

fn main() -> ones::Result<()> {
    let spec = SyntheticTaskSpec {
        kind: TaskKind::NoisyParity {
            bits: 2,
            flip_prob: 0.0,
        },
        num_classes: 2,
        input_dim: 4,
        seq_len: 4,
        train_size: 2_000,
        test_size: 1_000,
        seed: 0,
    };
    let task = generate_dataset(&spec)?;
    println!("class counts {:?}", task.train.class_counts());
    for kind in [ProbeFeatures::MeanPooled, ProbeFeatures::Flattened] {
        println!(
            "{kind:?} linear probe: {:.3}",
            linear_probe_accuracy(&task.train, &task.test, kind)
        );
    }
    Ok(())
}
