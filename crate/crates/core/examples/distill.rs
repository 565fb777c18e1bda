use ones::gather::{build_student, GatherConfig};
use ones::metrics::{accuracy, moe_benefits, Scoreboard};
use ones::train::{distill_student, train_supervised};
use ones::workbench::{generate_dataset, random_dense, teach, ExperimentConfig};

// Teach an MoE, gather it with SVD-KG, then distil the student against the
// frozen teacher. A shortened version of the default task.

fn main() -> ones::Result<()> {
    let mut cfg = ExperimentConfig::preset("default")?;
    cfg.task.train_size = 6_000;
    cfg.task.test_size = 1_000;
    cfg.teacher.steps = 300;
    cfg.distill.steps = 300;

    let task = generate_dataset(&cfg.task)?;
    let teacher = teach(&cfg, &task)?.model;
    let dense = train_supervised(random_dense(&cfg, 10)?, &cfg.teacher, &task.train, None)?.model;

    let (student, _) = build_student(&teacher, &GatherConfig::svdkg(cfg.gather.lambda))?;
    let gathered = accuracy(&student, &task.test)?;
    let student = distill_student(student, &teacher, &cfg.distill, &task.train, None)?.model;

    let scores = Scoreboard {
        score_student: accuracy(&student, &task.test)?,
        score_dense: accuracy(&dense, &task.test)?,
        score_moe: accuracy(&teacher, &task.test)?,
    };
    println!("teacher   {:.3}", scores.score_moe);
    println!("dense     {:.3}", scores.score_dense);
    println!("gathered  {gathered:.3}");
    println!("distilled {:.3}", scores.score_student);
    match moe_benefits(&scores) {
        Ok(b) => println!("MoE benefits {:.1}%", 100.0 * b),
        Err(e) => println!("MoE benefits undefined: {e}"),
    }
    Ok(())
}
