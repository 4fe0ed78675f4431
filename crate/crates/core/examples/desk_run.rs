//! Scratch dry run of the end-to-end pipeline at reduced scale.

use more_core::config::RunConfig;
use more_core::data::{gen_synthetic_triples, write_synthetic_dataset};
use more_core::eval::{auroc, precision_at_k, ScoredSet};
use more_core::pipeline::{
    build_prompt_bank, embed_samples, embed_text_queries, prepare_dataset, EmbedModality,
    PreparedSample,
};
use more_core::trainer::{pretrain, TrainConfig};

fn main() {
    let t0 = std::time::Instant::now();
    let mut cfg = RunConfig::default();
    cfg.data.per_class = 40;
    cfg.model.depth = 2;
    cfg.model.dim = 64;
    cfg.model.ecg_mid_channels = 32;
    cfg.model.proj_hidden = 64;
    cfg.model.proj_out = 32;
    cfg.train.batch_size = 16;
    cfg.train.accumulation_steps = 2;
    cfg.train.max_epochs = 10;
    cfg.train.lr = 1e-3;

    let dir = std::env::temp_dir().join("more_desk_run");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let synth = cfg.synth_config(7);
    let ds = gen_synthetic_triples(&synth).unwrap();
    let rows = write_synthetic_dataset(&dir, &ds).unwrap();
    println!("[{:?}] wrote {} triples", t0.elapsed(), rows.len());

    // Hold out the last 30 triples entirely.
    let split_at = rows.len() - 30;
    let train_rows = &rows[..split_at];
    let test_rows = &rows[split_at..];
    let prep_cfg = cfg.prepare_config();
    let prepared = prepare_dataset(train_rows, &dir, &prep_cfg).unwrap();
    println!("[{:?}] prepared {} train samples, vocab {}", t0.elapsed(), prepared.samples.len(), prepared.tokenizer.vocab_size());

    let model_cfg = cfg.model_config().unwrap();
    let train_cfg = TrainConfig {
        max_epochs: cfg.train.max_epochs,
        batch_size: cfg.train.batch_size,
        accumulation_steps: cfg.train.accumulation_steps,
        lr: cfg.train.lr,
        ..cfg.train_config()
    };
    let out = pretrain(&prepared, &model_cfg, &train_cfg).unwrap();
    for log in &out.history {
        println!(
            "epoch {:2}  train {:.4}  val {:.4}  tau {:.4}",
            log.epoch, log.train_loss, log.val_loss, log.tau
        );
    }
    println!("[{:?}] trained (best epoch {})", t0.elapsed(), out.best_epoch);

    // Held-out evaluation.
    let test = more_core::pipeline::prepare_eval_rows(
        test_rows,
        &dir,
        &prep_cfg,
        &prepared.tokenizer,
        &prepared.class_names,
    )
    .unwrap();
    let model = &out.model;
    let stats = (prepared.norm_mean, prepared.norm_std);
    let refs: Vec<&PreparedSample> = test.iter().collect();
    let img = embed_samples(model, &refs, stats, EmbedModality::Xray).unwrap();
    let ecg = embed_samples(model, &refs, stats, EmbedModality::Ecg).unwrap();
    let classes: Vec<(String, Vec<String>)> = prepared
        .class_names
        .iter()
        .map(|c| (c.clone(), vec![]))
        .collect();
    let bank = build_prompt_bank(model, &classes).unwrap();
    for (name, modality, emb) in [("xray", EmbedModality::Xray, &img), ("ecg", EmbedModality::Ecg, &ecg)] {
        let _ = modality;
        for (k, class) in prepared.class_names.iter().enumerate() {
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for (i, s) in test.iter().enumerate() {
                let zs = more_core::eval::zero_shot_classify(emb.row(i), &bank).unwrap();
                scores.push(zs[k]);
                labels.push(s.class_id == Some(k));
            }
            let set = ScoredSet::new(scores, labels).unwrap();
            println!("zero-shot {name} AUROC[{class}] = {:.3}", auroc(&set).unwrap());
        }
    }
    // Text -> image retrieval P@5.
    let queries: Vec<(String, String)> = test
        .iter()
        .map(|s| (s.subject_id.clone(), format!("{} {}", s.xray_note, s.ecg_note)))
        .collect();
    let qb = embed_text_queries(model, &queries).unwrap();
    let q_rows: Vec<Vec<f64>> = (0..qb.len()).map(|i| qb.row(i).to_vec()).collect();
    let q_classes: Vec<usize> = test.iter().map(|s| s.class_id.unwrap()).collect();
    let c_classes = q_classes.clone();
    let p5_img = precision_at_k(&q_rows, &q_classes, &img, &c_classes, 5).unwrap();
    let p5_ecg = precision_at_k(&q_rows, &q_classes, &ecg, &c_classes, 5).unwrap();
    println!("P@5 text->image {p5_img:.3}   text->ecg {p5_ecg:.3}");
    println!("[{:?}] done", t0.elapsed());
}
