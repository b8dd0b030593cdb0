// quick training-speed/accuracy probe used during development
use memvp_core::numkit::Activation;
use memvp_core::trainer::{gen_dataset, train, DatasetSpec, TrainJob};
use std::time::Instant;

fn env_f64(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}
fn env_usize(k: &str, d: usize) -> usize {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let spec = DatasetSpec { n_scenes: env_usize("SCENES", 300), ..DatasetSpec::desk() };
    let mut data = gen_dataset(&spec, 0).unwrap();
    if let Ok(only) = std::env::var("ONLY") {
        use memvp_core::trainer::QType;
        let want = match only.as_str() {
            "exists" => QType::Exists,
            "color" => QType::ColorAt,
            _ => QType::ShapeAt,
        };
        for split in [&mut data.train, &mut data.val, &mut data.test] {
            split.retain(|s| s.meta.qtype == want);
        }
    }

    let mut job = TrainJob::desk(env_usize("SEED", 0) as u64);
    job.train.epochs = env_usize("EPOCHS", 20);
    job.train.lr = env_f64("LR", job.train.lr);
    job.train.batch_size = env_usize("BATCH", job.train.batch_size);
    job.memvp.config.lambda = env_f64("LAMBDA", job.memvp.config.lambda);
    job.memvp.projector_init_std = env_f64("PSTD", job.memvp.projector_init_std);
    job.memvp.shared_pos_embeddings = env_usize("SHARED", 0) == 1;
    if env_usize("RELU", 0) == 1 {
        job.model.activation = Activation::Relu;
    }
    if env_usize("TWOFC", 0) == 1 {
        job.memvp.projector = memvp_core::memvp::ProjectorKind::TwoFc;
        job.memvp.projector_hidden = env_usize("HIDDEN", 32);
    }
    job.train.weight_decay = env_f64("WD", job.train.weight_decay);
    match std::env::var("VISUAL").as_deref() {
        Ok("none") => job.train.visual = memvp_core::trainer::VisualMode::None,
        Ok("global") => job.train.visual = memvp_core::trainer::VisualMode::Global,
        _ => {}
    }
    if let Ok(m) = std::env::var("M") {
        job.memvp.config.m = m.parse().unwrap();
    }
    if env_usize("SHARED", 0) == 1 {
        job.memvp.shared_pos_embeddings = true;
    }
    println!(
        "samples={} epochs={} lr={} lambda={} pstd={} act={:?}",
        data.train.len(), job.train.epochs, job.train.lr,
        job.memvp.config.lambda, job.memvp.projector_init_std, job.model.activation
    );
    let t0 = Instant::now();
    let out = train(&job, &data, 1).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    for m in out.metrics.iter().step_by(2).chain(out.metrics.last()) {
        println!("epoch {:>2} loss {:.4} val_acc {:.4}", m.epoch, m.train_loss, m.val_accuracy);
    }
    println!("elapsed: {dt:.2}s, best {:.4} @ {}", out.last.best_val_acc, out.last.best_epoch);
    let model = memvp_core::transformer::Model::new(
        out.last.model.config.clone(),
        out.last.model.weights.clone(),
    )
    .unwrap();
    for split in ["train", "val", "test"] {
        let report = memvp_core::trainer::evaluate(
            &model,
            &out.last.memvp,
            out.last.train_config.method,
            out.last.train_config.visual,
            data.split(split).unwrap(),
        )
        .unwrap();
        println!("{split}: acc {:.4} per-type {:?}", report.accuracy, report.per_type);
    }
}
