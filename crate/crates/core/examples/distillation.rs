//! Teacher/student distillation terms on two models that disagree.

use incdet::detector::{expand_classifier, prepare_scene, DetectorConfig, Model, Refiner};
use incdet::distill::{compute_threshold, logit_distillation_loss, rdd_loss, rfd_loss, NormKind};
use incdet::numeric::{SeededRng, Tape, Tensor};
use incdet::scene::{generate_scene, GeneratorConfig};

fn main() -> incdet::Result<()> {
    let cfg = DetectorConfig::default();
    let gen = GeneratorConfig::default();
    let teacher = Model::new(cfg.clone(), Refiner::Vote, 2, 10, 4, &mut SeededRng::new(1))?;
    let mut student = teacher.clone();
    expand_classifier(&mut student.params, 4, &mut SeededRng::new(2))?;
    // Perturb the student so the terms are non-zero.
    let mut rng = SeededRng::new(3);
    for (_, t) in student.params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.05 * rng.normal());
    }

    let batch: Vec<_> = (0..4)
        .map(|i| generate_scene(&gen, &[0, 1, 2, 3], &format!("d{i}"), &mut SeededRng::new(10 + i)))
        .map(|s| prepare_scene(&s?, &cfg))
        .collect::<incdet::Result<_>>()?;

    let tape = Tape::new();
    let mut pooled_s = Vec::new();
    let mut pooled_t = Vec::new();
    for prep in &batch {
        let t = teacher.infer(prep, None)?;
        let s = student.infer(prep, None)?;
        let sel = compute_threshold(&t.class_scores, &[0, 1], 1.2)?;
        let rdd = rdd_loss(tape.param(&s.boxes), &t.boxes, &sel, NormKind::Squared)?;
        let logits = tape.param(&s.class_scores);
        let dis = logit_distillation_loss(logits, &t.class_scores, 2.0)?;
        println!(
            "{}: tau {:.3}, {} of {} old-class proposals kept, box term {:.5}, logit term {:.5}",
            prep.scene_id,
            sel.tau,
            sel.indices.len(),
            sel.filtered,
            rdd.item(),
            dis.item()
        );
        pooled_s.extend(mean_row(&s.features));
        pooled_t.extend(mean_row(&t.features));
    }
    let d = pooled_s.len() / batch.len();
    let rfd = rfd_loss(
        tape.param(&Tensor::matrix(batch.len(), d, pooled_s)?),
        &Tensor::matrix(batch.len(), d, pooled_t)?,
        NormKind::Squared,
        64,
    )?;
    println!("relation term over {} samples: {:.6}", batch.len(), rfd.item());
    Ok(())
}

fn mean_row(t: &Tensor) -> Vec<f64> {
    (0..t.cols())
        .map(|c| (0..t.rows()).map(|r| t.row(r)[c]).sum::<f64>() / t.rows() as f64)
        .collect()
}
