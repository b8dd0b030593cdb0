// dev probe: locate/distort audit rates on a trained desk model
use memvp_core::probe::{distort, locate, DistortionSpec, EntrySelection};
use memvp_core::trainer::{
    evaluate, gen_dataset, predict_answer, train, DatasetSpec, QType, TrainJob, VisualMode, Vocab,
};
use memvp_core::transformer::Model;

fn main() {
    let spec = DatasetSpec { n_scenes: 1000, ..DatasetSpec::desk() };
    let data = gen_dataset(&spec, 0).unwrap();
    let job = TrainJob::desk(0);
    let out = train(&job, &data, 1).unwrap();
    let model = Model::new(out.last.model.config.clone(), out.last.model.weights.clone()).unwrap();
    let state = &out.last.memvp;
    let vocab = Vocab::desk();
    let report = evaluate(&model, state, job.train.method, job.train.visual, &data.test).unwrap();
    println!("test acc {:.4}", report.accuracy);

    // locate audit: argmax entry at the answer position should be the slot
    let mut hits_ans = 0;
    let mut hits_loctok = 0;
    let mut total = 0;
    for s in data.test.iter().filter(|s| {
        matches!(s.meta.qtype, QType::ColorAt | QType::ShapeAt)
    }) {
        let map = locate(&model, state, s, VisualMode::Local).unwrap();
        let Some(want) = s.meta.slot_row else { continue };
        let slots = s.features.len();
        let row_ans = map.averaged.row(map.seq_len() - 1);
        let row_loc = map.averaged.row(3); // the locN token position
        let argmax = |row: &[f64]| -> usize {
            let mut best = 0;
            for i in 1..slots {
                if row[i] > row[best] {
                    best = i;
                }
            }
            best
        };
        if argmax(row_ans) == want {
            hits_ans += 1;
        }
        if argmax(row_loc) == want {
            hits_loctok += 1;
        }
        total += 1;
        if total >= 200 {
            break;
        }
    }
    println!("locate: ans-position {}/{}  loc-token {}/{}", hits_ans, total, hits_loctok, total);

    // distort audit: top-2 blocking flips yes -> not-yes on existence
    let mut flips_by = [0usize; 4];
    let mut considered = 0;
    for s in data.test.iter().filter(|s| s.meta.qtype == QType::Exists) {
        if s.answer != vocab.yes() {
            continue;
        }
        let original = predict_answer(&model, state, job.train.method, VisualMode::Local, s).unwrap();
        if original != vocab.yes() {
            continue;
        }
        let map = locate(&model, state, s, VisualMode::Local).unwrap();
        let ans_row = map.averaged.row(map.seq_len() - 1).to_vec();
        let top2 = |limit: usize| -> Vec<usize> {
            let mut idx: Vec<usize> = (0..limit).collect();
            idx.sort_by(|&a, &b| ans_row[b].partial_cmp(&ans_row[a]).unwrap().then(a.cmp(&b)));
            idx.into_iter().take(2).collect()
        };
        let variants: Vec<(&str, DistortionSpec)> = vec![
            ("sum-all-topk", DistortionSpec {
                positions: (0..s.question.len()).collect(),
                selection: EntrySelection::TopK(2),
            }),
            ("ansrow-all-entries", DistortionSpec {
                positions: (0..s.question.len()).collect(),
                selection: EntrySelection::Explicit(top2(map.entries())),
            }),
            ("ansrow-slot-entries", DistortionSpec {
                positions: (0..s.question.len()).collect(),
                selection: EntrySelection::Explicit(top2(s.features.len())),
            }),
            ("ansrow-anspos-only", DistortionSpec {
                positions: vec![s.question.len() - 1],
                selection: EntrySelection::Explicit(top2(map.entries())),
            }),
        ];
        for (i, (_, spec)) in variants.iter().enumerate() {
            let rep = distort(&model, state, s, VisualMode::Local, spec).unwrap();
            if rep.distorted_answer != rep.original_answer {
                flips_by[i] += 1;
            }
        }
        considered += 1;
        if considered >= 200 {
            break;
        }
    }
    println!(
        "distort over {considered}: sum-all {} ansrow-all {} ansrow-slot {} ansrow-anspos {}",
        flips_by[0], flips_by[1], flips_by[2], flips_by[3]
    );
}
