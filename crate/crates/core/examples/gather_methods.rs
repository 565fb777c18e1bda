use ones::gather::{build_student, GatherConfig, GatherMethod};
use ones::metrics::model_ffn_flops;
use ones::model::{Activation, ClassifierModel, FfnKind, ModelArch};
use ones::numerics::Rng;

// Collapse a randomly initialised MoE classifier into dense students with
// each gathering method

fn main() -> ones::Result<()> {
    let arch = ModelArch {
        input_dim: 8,
        d_model: 16,
        d_ff: 64,
        seq_len: 4,
        num_classes: 3,
        blocks: 2,
        parameter_sharing: true,
        activation: Activation::Gelu,
        ffn: FfnKind::Moe {
            experts: 4,
            top_k: 2,
            router_noise: true,
        },
    };
    let teacher = ClassifierModel::random(&arch, &mut Rng::new(3))?;
    println!(
        "teacher: {} params, {} FFN FLOPs/token",
        teacher.parameter_count(),
        model_ffn_flops(&teacher)
    );

    for method in GatherMethod::ALL {
        let cfg = match method {
            GatherMethod::SvdKg => GatherConfig::svdkg(0.75),
            m => GatherConfig::new(m),
        };
        let (student, report) = build_student(&teacher, &cfg)?;
        let layer = &report.layers[0];
        let detail = match (&layer.w1_ranks, &layer.selected_units) {
            (Some(r), _) => format!(", W1 ranks {:?} (K_g = {})", r.ranks, r.k_g),
            (_, Some(units)) => format!(
                ", units per expert {:?}",
                units.iter().map(Vec::len).collect::<Vec<_>>()
            ),
            _ => String::new(),
        };
        println!(
            "{:<6} student: {} params, {} FFN FLOPs/token{detail}",
            method.name(),
            student.parameter_count(),
            model_ffn_flops(&student)
        );
    }
    Ok(())
}
