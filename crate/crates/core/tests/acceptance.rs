//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;

use ones::gather::{
    build_student, gather_sum, gather_svdkg, gather_topkg, topkg_quota, GatherConfig, GatherMethod,
};
use ones::metrics::{
    dense_flops, flops_per_token, model_ffn_flops, moe_benefits, moe_flops, noise_decompose,
    noise_linearity, noise_scan, FfnLayerRef, NoiseTarget, Scoreboard,
};
use ones::model::{
    balance_loss, Activation, ClassifierModel, FeedForward, Ffn, FfnExpert, FfnKind, Gating,
    ModelArch, MoeLayer, Router, RoutingOutcome, TokenRoute,
};
use ones::numerics::{Matrix, Rng};
use ones::train::{backward, DistillMode, KlDirection, Objective};
use ones::workbench::commands::{run_distill, run_gather, DistillOverrides};
use ones::workbench::{
    decode_checkpoint, encode_checkpoint, file_sha256, load_checkpoint, run_pipeline, Example,
    ExperimentConfig,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal(std))
}

fn random_bank(rng: &mut Rng, e: usize, d: usize, h: usize) -> Vec<FfnExpert> {
    (0..e)
        .map(|_| {
            let mut f = Ffn::random(d, h, Activation::Gelu, rng);
            f.b1.iter_mut().for_each(|v| *v = rng.normal(0.1));
            f.b2.iter_mut().for_each(|v| *v = rng.normal(0.1));
            f
        })
        .collect()
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Descending singular values and the matching rank-one terms, via nalgebra.
fn na_spectrum(m: &Matrix) -> (Vec<f64>, Vec<DMatrix<f64>>) {
    let svd = to_na(m).svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s = idx.iter().map(|&k| svd.singular_values[k]).collect();
    let terms = idx
        .iter()
        .map(|&k| u.column(k) * vt.row(k) * svd.singular_values[k])
        .collect();
    (s, terms)
}

/// Per-expert truncate-then-sum, coded against nalgebra's SVD.
fn truncate_then_sum(parts: &[&Matrix], lambda: f64) -> DMatrix<f64> {
    let (r, c) = parts[0].shape();
    let mut acc = DMatrix::zeros(r, c);
    for w in parts {
        let (s, terms) = na_spectrum(w);
        let total: f64 = s.iter().sum();
        let mut mass = 0.0;
        for (k, t) in terms.iter().enumerate() {
            acc += t;
            mass += s[k];
            if mass >= lambda * total {
                break;
            }
        }
    }
    acc
}

fn criterion_1() -> Outcome {
    let cases = [
        ((84.63, 84.03, 84.71), 88.2),
        ((78.4, 76.9, 79.5), 57.7),
        ((75.7, 72.8, 77.5), 61.7),
    ];
    let mut got = Vec::new();
    for ((student, dense, moe), published) in cases {
        let b = moe_benefits(&Scoreboard {
            score_student: student,
            score_dense: dense,
            score_moe: moe,
        })
        .map_err(|e| e.to_string())?;
        let pct = 100.0 * b;
        ensure((pct - published).abs() <= 0.05, || {
            format!("({student}, {dense}, {moe}) gives {pct:.3}%, published {published}%")
        })?;
        got.push(format!("{pct:.2}%"));
    }
    Ok(got.join(", "))
}

fn criterion_2() -> Outcome {
    let mut rng = Rng::new(2);
    let mut worst: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    for bank_idx in 0..50 {
        let e = [2, 4, 8][bank_idx % 3];
        let d = 2 + rng.below(63);
        let h = 2 + rng.below(63);
        let bank = random_bank(&mut rng, e, d, h);
        let lambda = 0.05 + 0.9 * rng.uniform();
        let (g1, g2, _, _) = gather_svdkg(&bank, lambda).map_err(|e| e.to_string())?;
        let w1s: Vec<&Matrix> = bank.iter().map(|f| &f.w1).collect();
        let w2s: Vec<&Matrix> = bank.iter().map(|f| &f.w2).collect();
        for (got, parts) in [(&g1, &w1s), (&g2, &w2s)] {
            let err = rel_frob(&to_na(got), &truncate_then_sum(parts, lambda));
            worst = worst.max(err);
            ensure(err <= 1e-8, || {
                format!("bank {bank_idx} (E={e}, {d}x{h}, λ={lambda:.3}): oracle error {err:.2e}")
            })?;
        }
        let (f1, f2, _, _) = gather_svdkg(&bank, 1.0).map_err(|e| e.to_string())?;
        let (s1, s2) = gather_sum(&bank).map_err(|e| e.to_string())?;
        for (got, want) in [(&f1, &s1), (&f2, &s2)] {
            let err = rel_frob(&to_na(got), &to_na(want));
            worst_sum = worst_sum.max(err);
            ensure(err <= 1e-8, || {
                format!("bank {bank_idx}: λ = 1 differs from sum by {err:.2e}")
            })?;
        }
    }
    Ok(format!(
        "50 banks, max oracle error {worst:.1e}, max λ=1 vs sum error {worst_sum:.1e}"
    ))
}

fn check_rank_rule(spectrum: &[f64], k: usize, lambda: f64) -> Result<(), String> {
    let total: f64 = spectrum.iter().sum();
    let target = lambda * total;
    let mut cum = 0.0;
    let mut smallest = None;
    for (i, s) in spectrum.iter().enumerate() {
        cum += s;
        if cum >= target {
            smallest = Some(i + 1);
            break;
        }
    }
    let smallest = smallest.unwrap_or(spectrum.len());
    ensure(k == smallest, || {
        format!("recorded K = {k}, smallest qualifying K = {smallest}")
    })
}

fn criterion_3() -> Outcome {
    let mut rng = Rng::new(3);
    let mut layers = 0;
    let mut matrices = 0;
    for t in 0..12 {
        let arch = ModelArch {
            input_dim: 3,
            d_model: 4 + rng.below(12),
            d_ff: 4 + rng.below(20),
            seq_len: 3,
            num_classes: 3,
            blocks: 2,
            parameter_sharing: t % 2 == 0,
            activation: Activation::Gelu,
            ffn: FfnKind::Moe {
                experts: [2, 4, 8][t % 3],
                top_k: 2,
                router_noise: true,
            },
        };
        let teacher = ClassifierModel::random(&arch, &mut rng).map_err(|e| e.to_string())?;
        for lambda in [0.1, 0.25, 0.5, 0.75, 0.9, 1.0] {
            let (_, report) =
                build_student(&teacher, &GatherConfig::svdkg(lambda)).map_err(|e| e.to_string())?;
            for layer in &report.layers {
                layers += 1;
                let FeedForward::Moe(moe) = &teacher.stages[layer.stage] else {
                    return Err(format!("stage {} is not an MoE stage", layer.stage));
                };
                for (record, pick) in [(&layer.w1_ranks, 0), (&layer.w2_ranks, 1)] {
                    let record = record.as_ref().ok_or("SVD-KG layer without rank record")?;
                    ensure(record.k_g == record.ranks.iter().sum::<usize>(), || {
                        "K_g is not ΣK".into()
                    })?;
                    for (i, (spectrum, &k)) in record.spectra.iter().zip(&record.ranks).enumerate()
                    {
                        let w = if pick == 0 {
                            &moe.experts[i].w1
                        } else {
                            &moe.experts[i].w2
                        };
                        let (independent, _) = na_spectrum(w);
                        ensure(independent.len() == spectrum.len(), || {
                            "spectrum length".into()
                        })?;
                        for (a, b) in spectrum.iter().zip(&independent) {
                            ensure((a - b).abs() <= 1e-9 * independent[0].max(1.0), || {
                                format!("singular value {a} vs nalgebra {b}")
                            })?;
                        }
                        check_rank_rule(spectrum, k, lambda)?;
                        matrices += 1;
                    }
                }
            }
        }
    }
    Ok(format!(
        "{layers} gathered layers, {matrices} expert matrices checked exhaustively"
    ))
}

fn unit_score(e: &FfnExpert, j: usize) -> f64 {
    let col: f64 = (0..e.w1.rows())
        .map(|r| e.w1.get(r, j).powi(2))
        .sum::<f64>()
        .sqrt();
    let row: f64 = (0..e.w2.cols())
        .map(|c| e.w2.get(j, c).powi(2))
        .sum::<f64>()
        .sqrt();
    col + row
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|&j| m & (1 << j) != 0).collect())
        .collect()
}

/// Best-scoring unit set by exhaustive enumeration; equal totals go to the
/// lexicographically smallest index set.
fn enumerate_best(e: &FfnExpert, k: usize) -> Vec<usize> {
    let scores: Vec<f64> = (0..e.d_ff()).map(|j| unit_score(e, j)).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for set in subsets(e.d_ff(), k) {
        let mut sorted: Vec<f64> = set.iter().map(|&j| scores[j]).collect();
        sorted.sort_by(f64::total_cmp);
        let total: f64 = sorted.iter().sum();
        let better = match &best {
            None => true,
            Some((b, prev)) => {
                let tol = 1e-12 * b.abs().max(1.0);
                total > *b + tol || ((total - *b).abs() <= tol && set < *prev)
            }
        };
        if better {
            best = Some((total, set));
        }
    }
    best.map(|(_, s)| s).unwrap_or_default()
}

fn tied_bank(rng: &mut Rng, e: usize, d: usize, h: usize, pattern: usize) -> Vec<FfnExpert> {
    let mut bank = random_bank(rng, e, d, h);
    for f in &mut bank {
        match pattern {
            // duplicated units
            0 => {
                for j in (1..h).step_by(2) {
                    for r in 0..d {
                        let v = f.w1.get(r, j - 1);
                        f.w1.set(r, j, v);
                    }
                    for c in 0..d {
                        let v = f.w2.get(j - 1, c);
                        f.w2.set(j, c, v);
                    }
                }
            }
            // same norms, different signs
            1 => {
                for j in 0..h {
                    for r in 0..d {
                        f.w1.set(r, j, if (r + j) % 2 == 0 { 1.0 } else { -1.0 });
                    }
                    for c in 0..d {
                        f.w2.set(j, c, if c % 2 == 0 { 0.5 } else { -0.5 });
                    }
                }
            }
            // all-zero expert
            2 => {
                f.w1 = Matrix::zeros(d, h);
                f.w2 = Matrix::zeros(h, d);
            }
            _ => {}
        }
    }
    bank
}

fn criterion_4() -> Outcome {
    let mut rng = Rng::new(4);
    let mut checked = 0;
    let mut tie_cases = 0;
    for case in 0..60 {
        let e = [1, 2, 3, 4, 6][case % 5];
        let h = e * (1 + rng.below((12 / e).max(1))).min(12 / e);
        let d = 1 + rng.below(6);
        let pattern = case % 4;
        let bank = tied_bank(&mut rng, e, d, h, pattern);
        if pattern < 3 {
            tie_cases += 1;
        }
        let (w1, w2, sel) = gather_topkg(&bank, false).map_err(|e| e.to_string())?;
        let quota = topkg_quota(h, e, false).map_err(|e| e.to_string())?;
        let mut offset = 0;
        for (i, f) in bank.iter().enumerate() {
            let want = enumerate_best(f, quota[i]);
            ensure(sel[i] == want, || {
                format!(
                    "case {case} expert {i}: selected {:?}, enumeration {:?}",
                    sel[i], want
                )
            })?;
            for (p, &j) in sel[i].iter().enumerate() {
                for r in 0..d {
                    ensure(w1.get(r, offset + p) == f.w1.get(r, j), || {
                        format!("W1 column {} is not expert {i} unit {j}", offset + p)
                    })?;
                }
                for c in 0..d {
                    ensure(w2.get(offset + p, c) == f.w2.get(j, c), || {
                        format!("W2 row {} is not expert {i} unit {j}", offset + p)
                    })?;
                }
            }
            offset += sel[i].len();
            checked += 1;
        }
        ensure(offset == h && w1.cols() == h && w2.rows() == h, || {
            "student width".into()
        })?;
    }
    // remainder units go to the first experts
    let bank = random_bank(&mut rng, 3, 4, 11);
    let (_, _, sel) = gather_topkg(&bank, true).map_err(|e| e.to_string())?;
    for (i, f) in bank.iter().enumerate() {
        ensure(sel[i] == enumerate_best(f, [4, 4, 3][i]), || {
            "remainder selection".into()
        })?;
    }
    Ok(format!(
        "{checked} experts enumerated ({tie_cases} of 60 banks with ties), pairing positional"
    ))
}

fn fd_arch(ffn: FfnKind, sharing: bool) -> ModelArch {
    ModelArch {
        input_dim: 3,
        d_model: 8,
        d_ff: 6,
        seq_len: 3,
        num_classes: 3,
        blocks: 2,
        parameter_sharing: sharing,
        activation: Activation::Gelu,
        ffn,
    }
}

/// Move norm gains, biases and the router off their initial values so every
/// gradient is generic.
fn jitter(model: &mut ClassifierModel, rng: &mut Rng) {
    for block in &mut model.blocks {
        for v in block
            .norm_mix
            .gain
            .iter_mut()
            .chain(&mut block.norm_ffn.gain)
        {
            *v += rng.normal(0.2);
        }
        for v in block
            .norm_mix
            .bias
            .iter_mut()
            .chain(&mut block.norm_ffn.bias)
        {
            *v += rng.normal(0.2);
        }
    }
    model.head_b.iter_mut().for_each(|v| *v += rng.normal(0.2));
    for stage in &mut model.stages {
        let ffns: Vec<&mut Ffn> = match stage {
            FeedForward::Dense(f) => vec![f],
            FeedForward::Moe(m) => {
                m.router
                    .weight
                    .as_mut_slice()
                    .iter_mut()
                    .for_each(|v| *v = rng.normal(0.5));
                m.experts.iter_mut().collect()
            }
        };
        for f in ffns {
            f.b1.iter_mut().for_each(|v| *v += rng.normal(0.2));
            f.b2.iter_mut().for_each(|v| *v += rng.normal(0.2));
        }
    }
}

/// Worst per-tensor relative error between the analytic gradient and central
/// differences.
fn fd_error(
    model: &ClassifierModel,
    data: &[Example],
    objective: &Objective,
    teacher: &[Vec<f64>],
) -> Result<f64, String> {
    let refs: Vec<&Example> = data.iter().collect();
    let tl: Vec<&[f64]> = teacher.iter().map(|v| v.as_slice()).collect();
    let loss =
        |m: &ClassifierModel| backward(m, &refs, objective, Some(&tl), None).map(|r| r.0.total);
    let (_, grads) =
        backward(model, &refs, objective, Some(&tl), None).map_err(|e| e.to_string())?;
    let names: Vec<String> = model.trainable().into_iter().map(|(n, _)| n).collect();
    ensure(names.len() == grads.entries.len(), || {
        "gradient set misses tensors".into()
    })?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (t, name) in names.iter().enumerate() {
        let g = grads
            .get(name)
            .ok_or_else(|| format!("no gradient for {name}"))?;
        let mut fd = Vec::with_capacity(g.len());
        for k in 0..g.len() {
            let mut p = model.clone();
            p.trainable_mut()[t].1[k] += h;
            let mut q = model.clone();
            q.trainable_mut()[t].1[k] -= h;
            let d = (loss(&p).map_err(|e| e.to_string())? - loss(&q).map_err(|e| e.to_string())?)
                / (2.0 * h);
            fd.push(d);
        }
        let diff: f64 = fd
            .iter()
            .zip(g)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = norm(&fd).max(norm(g)).max(1e-8);
        let err = diff / scale;
        ensure(err < 1e-4, || {
            format!("{objective:?} {name}: relative error {err:.2e}")
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn criterion_5() -> Outcome {
    let mut rng = Rng::new(5);
    let moe = FfnKind::Moe {
        experts: 3,
        top_k: 2,
        router_noise: true,
    };
    let mut objectives = vec![Objective::Supervised { balance_coef: 0.1 }];
    for temperature in [1.0, 2.0, 4.0] {
        for alpha in [0.0, 0.25, 0.75] {
            objectives.push(Objective::Distill {
                alpha,
                temperature,
                mode: DistillMode::Soft,
                direction: KlDirection::TeacherToStudent,
            });
        }
        objectives.push(Objective::Distill {
            alpha: 0.5,
            temperature,
            mode: DistillMode::Soft,
            direction: KlDirection::StudentToTeacher,
        });
    }
    for alpha in [0.0, 0.25, 1.0] {
        objectives.push(Objective::Distill {
            alpha,
            temperature: 1.0,
            mode: DistillMode::Hard,
            direction: KlDirection::TeacherToStudent,
        });
    }
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for (ffn, sharing) in [
        (FfnKind::Dense, false),
        (FfnKind::Dense, true),
        (moe.clone(), true),
        (moe, false),
    ] {
        let mut model =
            ClassifierModel::random(&fd_arch(ffn, sharing), &mut rng).map_err(|e| e.to_string())?;
        jitter(&mut model, &mut rng);
        let data: Vec<Example> = (0..3)
            .map(|i| Example {
                tokens: gaussian(&mut rng, 3, 3, 1.0),
                label: i % 3,
            })
            .collect();
        let teacher: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..3).map(|_| rng.normal(1.5)).collect())
            .collect();
        for objective in &objectives {
            worst = worst.max(fd_error(&model, &data, objective, &teacher)?);
            runs += 1;
        }
    }
    Ok(format!(
        "{runs} model/objective pairs, worst relative error {worst:.1e}"
    ))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// `Σ_i softmax(Hᵀx)_i · e_i(x)` with every expert evaluated.
fn dense_mixture(layer: &MoeLayer, x: &[f64]) -> Vec<f64> {
    let e = layer.num_experts();
    let logits: Vec<f64> = (0..e)
        .map(|i| {
            (0..x.len())
                .map(|r| layer.router.weight.get(r, i) * x[r])
                .sum()
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let mut y = vec![0.0; x.len()];
    for (i, f) in layer.experts.iter().enumerate() {
        let p = (logits[i] - max).exp() / z;
        let hidden: Vec<f64> = (0..f.d_ff())
            .map(|j| gelu((0..x.len()).map(|r| f.w1.get(r, j) * x[r]).sum::<f64>() + f.b1[j]))
            .collect();
        for (c, yc) in y.iter_mut().enumerate() {
            let out: f64 = (0..f.d_ff())
                .map(|j| f.w2.get(j, c) * hidden[j])
                .sum::<f64>()
                + f.b2[c];
            *yc += p * out;
        }
    }
    y
}

fn criterion_6() -> Outcome {
    let mut rng = Rng::new(6);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..200 {
        let e = 2 + rng.below(15);
        let d = 1 + rng.below(32);
        let router =
            Router::new(gaussian(&mut rng, d, e, 3.0), 1, true).map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..d).map(|_| rng.normal(2.0)).collect();
        let noise = router.sample_noise(&mut rng);
        for probs in [
            router
                .probs_with_noise(&x, None)
                .map_err(|e| e.to_string())?,
            router
                .probs_with_noise(&x, Some(&noise))
                .map_err(|e| e.to_string())?,
        ] {
            let s: f64 = probs.iter().sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
            ensure((s - 1.0).abs() <= 1e-6, || {
                format!("gate probabilities sum to {s}")
            })?;
        }
    }

    for e in 2..=16 {
        for n in [1, 7, 64, 333] {
            let layer = MoeLayer::random(4, 6, e, 1, Activation::Gelu, &mut rng)
                .map_err(|e| e.to_string())?;
            let mut uniform = layer.clone();
            uniform.router.weight = Matrix::zeros(4, e);
            let mut outcome = RoutingOutcome::new(e);
            for _ in 0..n {
                let x: Vec<f64> = (0..4).map(|_| rng.normal(1.0)).collect();
                outcome.tokens.push(
                    uniform
                        .forward(&x, Gating::Routed(None))
                        .map_err(|e| e.to_string())?
                        .1,
                );
            }
            let b = balance_loss(&[outcome]).map_err(|e| e.to_string())?;
            ensure(b == 1.0, || {
                format!("uniform router, E = {e}, {n} tokens: balance loss {b:?}")
            })?;
        }
    }

    let mut worst_perm: f64 = 0.0;
    for _ in 0..50 {
        let e = 2 + rng.below(7);
        let tokens: Vec<TokenRoute> = (0..1 + rng.below(40))
            .map(|_| {
                let logits: Vec<f64> = (0..e).map(|_| rng.normal(2.0)).collect();
                let probs = ones::numerics::softmax(&logits);
                let selected = ones::model::rank_experts(&probs, 2.min(e));
                TokenRoute { probs, selected }
            })
            .collect();
        let base = balance_loss(&[RoutingOutcome {
            num_experts: e,
            tokens: tokens.clone(),
        }])
        .map_err(|e| e.to_string())?;
        let mut shuffled = tokens.clone();
        rng.shuffle(&mut shuffled);
        let mut relabel: Vec<usize> = (0..e).collect();
        rng.shuffle(&mut relabel);
        let relabelled: Vec<TokenRoute> = tokens
            .iter()
            .map(|t| {
                let mut probs = vec![0.0; e];
                for (i, &p) in t.probs.iter().enumerate() {
                    probs[relabel[i]] = p;
                }
                TokenRoute {
                    probs,
                    selected: t.selected.iter().map(|&i| relabel[i]).collect(),
                }
            })
            .collect();
        let split = shuffled.len() / 2;
        let variants = [
            vec![RoutingOutcome {
                num_experts: e,
                tokens: shuffled.clone(),
            }],
            vec![RoutingOutcome {
                num_experts: e,
                tokens: relabelled,
            }],
            vec![
                RoutingOutcome {
                    num_experts: e,
                    tokens: shuffled[split..].to_vec(),
                },
                RoutingOutcome {
                    num_experts: e,
                    tokens: shuffled[..split].to_vec(),
                },
            ],
        ];
        for v in &variants {
            let b = balance_loss(v).map_err(|e| e.to_string())?;
            worst_perm = worst_perm.max((b - base).abs());
            ensure((b - base).abs() <= 1e-12 * base.max(1.0), || {
                format!("permuted balance {b} vs {base}")
            })?;
        }
    }

    let mut worst_mix: f64 = 0.0;
    for e in 1..=8 {
        for _ in 0..10 {
            let d = 1 + rng.below(12);
            let h = 1 + rng.below(16);
            let mut layer = MoeLayer::random(d, h, e, e, Activation::Gelu, &mut rng)
                .map_err(|e| e.to_string())?;
            layer.router.weight = gaussian(&mut rng, d, e, 1.0);
            for f in &mut layer.experts {
                f.b1.iter_mut().for_each(|v| *v = rng.normal(0.3));
                f.b2.iter_mut().for_each(|v| *v = rng.normal(0.3));
            }
            let x: Vec<f64> = (0..d).map(|_| rng.normal(1.0)).collect();
            let (y, _) = layer
                .forward(&x, Gating::Routed(None))
                .map_err(|e| e.to_string())?;
            let want = dense_mixture(&layer, &x);
            for (a, b) in y.iter().zip(&want) {
                worst_mix = worst_mix.max((a - b).abs());
                ensure((a - b).abs() <= 1e-10, || {
                    format!("K = E = {e}: {a} vs {b}")
                })?;
            }
        }
    }
    Ok(format!(
        "max |Σp − 1| {worst_sum:.1e}; uniform balance = 1 for E 2..16; max permutation change {worst_perm:.1e}; \
         max K = E mixture error {worst_mix:.1e}"
    ))
}

fn criterion_7() -> Outcome {
    let mut rng = Rng::new(7);
    let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let mut worst_identity: f64 = 0.0;
    let mut slopes = Vec::new();
    let mut r2s = Vec::new();
    for bank_idx in 0..20 {
        let e = [2, 4, 8][bank_idx % 3];
        // shaped like the default model's MoE stages
        let d = 16 + rng.below(17);
        let h = 32 + rng.below(97);
        let mut layer = MoeLayer::random(d, h, e, 2.min(e), Activation::Gelu, &mut rng)
            .map_err(|e| e.to_string())?;
        layer.router.weight = gaussian(&mut rng, d, e, 1.0);
        for f in &mut layer.experts {
            f.b1.iter_mut().for_each(|v| *v = rng.normal(0.1));
            f.b2.iter_mut().for_each(|v| *v = rng.normal(0.1));
        }
        let tokens: Vec<Vec<f64>> = (0..120)
            .map(|_| (0..d).map(|_| rng.normal(1.0)).collect())
            .collect();
        let target = if bank_idx % 2 == 0 {
            NoiseTarget::FirstLayer
        } else {
            NoiseTarget::FullFfn
        };
        let rows = noise_scan(&layer, &grid, &tokens, target).map_err(|e| e.to_string())?;
        for w in rows.windows(2) {
            ensure(w[1].mean_noise_norm >= w[0].mean_noise_norm, || {
                format!(
                    "bank {bank_idx}: mean noise falls from {} at λ={} to {} at λ={}",
                    w[0].mean_noise_norm, w[0].lambda, w[1].mean_noise_norm, w[1].lambda
                )
            })?;
        }
        let (slope, r2) = noise_linearity(&rows);
        slopes.push(slope);
        r2s.push(r2);
        for &lambda in &[0.1, 0.5, 1.0] {
            for x in tokens.iter().take(30) {
                let dcmp = noise_decompose(&layer, lambda, x, target).map_err(|e| e.to_string())?;
                for ((s, n), g) in dcmp.signal.iter().zip(&dcmp.noise).zip(&dcmp.gathered) {
                    let scale = s.abs().max(n.abs()).max(g.abs());
                    let gap = (s + n - g).abs();
                    if scale > 0.0 {
                        worst_identity = worst_identity.max(gap / (f64::EPSILON * scale));
                    }
                    ensure(gap <= 2.0 * f64::EPSILON * scale, || {
                        format!("bank {bank_idx}: signal {s} + noise {n} misses gathered {g}")
                    })?;
                }
            }
        }
    }
    let min_r2 = r2s.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean_r2 = r2s.iter().sum::<f64>() / r2s.len() as f64;
    Ok(format!(
        "20 banks monotone; signal + noise = gathered within {worst_identity:.2} ulp-scale; \
         linearity (reported) mean R² {mean_r2:.3}, min R² {min_r2:.3}, slopes {:.3}..{:.3}",
        slopes.iter().cloned().fold(f64::INFINITY, f64::min),
        slopes.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    ))
}

fn criterion_8() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let (mut a, mut b, mut c) = (0, 0, 0);
    for seed in 0..5u64 {
        let mut cfg = ExperimentConfig::preset("default").map_err(|e| e.to_string())?;
        cfg.set_seed(seed);
        cfg.gather.methods = vec![GatherMethod::SvdKg];
        cfg.output_dir = dir.path().join(format!("seed{seed}"));
        let summary = run_pipeline(&cfg).map_err(|e| e.to_string())?;
        let acc = |v: &str| {
            summary
                .row(v)
                .map(|r| r.accuracy)
                .ok_or_else(|| format!("missing row {v}"))
        };
        let (teacher, dense, dense_long) = (acc("teacher")?, acc("dense")?, acc("dense-long")?);
        let (distill, switch, ones_svd) = (acc("distill")?, acc("switch")?, acc("ones-svdkg")?);
        let benefits = summary.row("ones-svdkg").and_then(|r| r.benefits);
        let pa = teacher >= dense;
        let pb = ones_svd >= distill;
        let pc = benefits.is_some_and(|x| x > 0.0);
        a += usize::from(pa);
        b += usize::from(pb);
        c += usize::from(pc);
        lines.push(format!(
            "    seed {seed}: teacher {teacher:.4} dense {dense:.4} ones-svdkg {ones_svd:.4} distill {distill:.4} \
             switch {switch:.4} benefits {} | dense-long {dense_long:.4} (reported)",
            benefits.map_or("n/a".into(), |x| format!("{x:.3}"))
        ));
        ensure(summary.teacher_unchanged, || {
            format!("seed {seed}: teacher checkpoint changed")
        })?;
    }
    let detail = format!(
        "(a) {a}/5 (b) {b}/5 (c) {c}/5 in {:.0}s\n{}",
        started.elapsed().as_secs_f64(),
        lines.join("\n")
    );
    ensure(a >= 3 && b >= 4 && c >= 4, || detail.clone())?;
    Ok(detail)
}

fn criterion_9() -> Outcome {
    let mut rng = Rng::new(9);
    for case in 0..10 {
        let d = 1 + rng.below(64);
        let h = 1 + rng.below(128);
        let e = 1 + rng.below(16);
        let k = 1 + rng.below(e);
        let dense = Ffn::zeros(d, h, Activation::Gelu);
        let layer =
            MoeLayer::random(d, h, e, k, Activation::Gelu, &mut rng).map_err(|e| e.to_string())?;
        // two FLOPs per multiply-accumulate: W1 is d·h, W2 is h·d, router is d·E
        let want_dense = (2 * d * h + 2 * h * d) as u64;
        let want_moe = (k * (2 * d * h + 2 * h * d) + 2 * d * e) as u64;
        let got_dense = flops_per_token(FfnLayerRef::Dense(&dense));
        let got_moe = flops_per_token(FfnLayerRef::Moe(&layer));
        ensure(
            got_dense == want_dense && dense_flops(d, h) == want_dense,
            || format!("case {case}: dense {got_dense} vs {want_dense}"),
        )?;
        ensure(
            got_moe == want_moe && moe_flops(d, h, e, k) == want_moe,
            || format!("case {case}: MoE {got_moe} vs {want_moe}"),
        )?;
        // ratio 2 + E/(2h) with K = 2, compared by cross-multiplication
        let m2 = moe_flops(d, h, e, 2) as u128;
        ensure(
            m2 * (2 * h as u128) == want_dense as u128 * (4 * h as u128 + e as u128),
            || format!("case {case}: K = 2 ratio is not 2 + E/(2h)"),
        )?;
        let arch = ModelArch {
            input_dim: 2,
            d_model: d,
            d_ff: h,
            seq_len: 2,
            num_classes: 2,
            blocks: 1 + rng.below(4),
            parameter_sharing: case % 2 == 0,
            activation: Activation::Gelu,
            ffn: FfnKind::Moe {
                experts: e,
                top_k: k,
                router_noise: true,
            },
        };
        let model = ClassifierModel::random(&arch, &mut rng).map_err(|e| e.to_string())?;
        ensure(
            model_ffn_flops(&model) == arch.blocks as u64 * want_moe,
            || format!("case {case}: model FLOPs"),
        )?;
    }
    Ok("10 random shapes match the hand-expanded rule; K = 2 ratio exact".into())
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::preset("smoke").map_err(|e| e.to_string())?;
    cfg.set_seed(11);
    cfg.output_dir = dir.path().join("run");
    let first_summary = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let first = read_tree(&cfg.output_dir);
    std::fs::remove_dir_all(&cfg.output_dir).map_err(|e| e.to_string())?;
    let second_summary = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let second = read_tree(&cfg.output_dir);
    ensure(first_summary == second_summary, || {
        "summaries differ between runs".into()
    })?;
    ensure(first.keys().eq(second.keys()), || {
        "runs wrote different file sets".into()
    })?;
    for (name, bytes) in &first {
        ensure(second[name] == *bytes, || {
            format!("{name} differs between runs")
        })?;
    }
    ensure(first_summary.teacher_unchanged, || {
        "pipeline changed the teacher".into()
    })?;

    let mut round_trips = 0;
    for name in first.keys().filter(|n| n.ends_with(".ckpt")) {
        let bytes = &first[name];
        let (model, meta) = decode_checkpoint(bytes).map_err(|e| e.to_string())?;
        let again =
            encode_checkpoint(&model, meta.provenance.clone()).map_err(|e| e.to_string())?;
        ensure(&again == bytes, || {
            format!("{name} does not round-trip bit-identically")
        })?;
        let (loaded, _) = load_checkpoint(&cfg.output_dir.join(name)).map_err(|e| e.to_string())?;
        ensure(loaded == model, || {
            format!("{name} loads differently from disk")
        })?;
        round_trips += 1;
    }

    let teacher = cfg.output_dir.join("teacher.ckpt");
    let before = file_sha256(&teacher).map_err(|e| e.to_string())?;
    let student = dir.path().join("cli/student.ckpt");
    run_gather(&teacher, &GatherConfig::svdkg(0.75), &student).map_err(|e| e.to_string())?;
    let distill = run_distill(
        &student,
        &teacher,
        &DistillOverrides {
            steps: Some(5),
            ..Default::default()
        },
        &dir.path().join("cli/distilled.ckpt"),
    )
    .map_err(|e| e.to_string())?;
    let after = file_sha256(&teacher).map_err(|e| e.to_string())?;
    ensure(before == after && distill.teacher_sha256 == before, || {
        "teacher hash changed".into()
    })?;

    Ok(format!(
        "{} files bit-identical across runs; {round_trips} checkpoints round-trip; teacher hash stable",
        first.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 metric fidelity", criterion_1),
        ("2 SVD-KG oracle equivalence", criterion_2),
        ("3 adaptive rank rule", criterion_3),
        ("4 Top-KG enumeration", criterion_4),
        ("5 gradient correctness", criterion_5),
        ("6 routing invariants", criterion_6),
        ("7 noise-scan property", criterion_7),
        ("8 end-to-end ordering", criterion_8),
        ("9 FLOPs accounting", criterion_9),
        ("10 determinism and persistence", criterion_10),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
