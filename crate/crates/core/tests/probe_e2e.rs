use medie::pipeline::{cross_validate, PipelineTrainConfig};
use medie::schema::Schema;
use medie::synth::{generate, GenConfig};

#[test]
#[ignore]
fn probe_one_fold() {
    let schema = Schema::default();
    let gen = GenConfig {
        n_documents: 500,
        patients: 40,
        seed: 42,
        ..GenConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (corpus, ledger) = generate(&gen, &schema);
    eprintln!("generate: {:?}, relations {}", t0.elapsed(), ledger.total_relations());

    let plan = medie::training::make_folds(&corpus, 5, 7).unwrap();
    let (train_all, test) = plan.split(&corpus, 0);
    let (train, dev) = medie::training::split_dev(&train_all, 0.10, 99);
    eprintln!("train {} dev {} test {}", train.len(), dev.len(), test.len());

    let config = PipelineTrainConfig::desk_profile(1);
    let t1 = std::time::Instant::now();
    let (pipeline, outcomes) = medie::pipeline::train_pipeline(&train, &dev, &config, &schema).unwrap();
    eprintln!("train_pipeline: {:?}", t1.elapsed());
    for o in &outcomes {
        eprintln!(
            "stage {:?}: best epoch {} dev f1 {:.4} (epochs run {})",
            o.model.stage(), o.best_epoch, o.best_dev_f1, o.log.len()
        );
    }
    let t2 = std::time::Instant::now();
    let report = pipeline.evaluate(&test).unwrap();
    eprintln!("evaluate: {:?}", t2.elapsed());
    eprintln!(
        "fold 0: MER {:.4} MC {:.4} RE {:.4} unreachable {}",
        report.mer.f1(), report.mc.f1(), report.relations.overall.f1(), report.unreachable_gold
    );
    let _ = cross_validate; // keep import
}
