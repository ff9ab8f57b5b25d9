use medie::annotation::Corpus;
use medie::pipeline::PipelineTrainConfig;
use medie::schema::Schema;
use medie::synth::{generate, GenConfig};
use medie::training::{split_dev, train_stage, StageModel};

#[test]
#[ignore]
fn probe_re_errors() {
    let schema = Schema::default();
    let gen = GenConfig {
        n_documents: 500,
        patients: 40,
        seed: 42,
        ..GenConfig::default()
    };
    let (corpus, _) = generate(&gen, &schema);
    let plan = medie::training::make_folds(&corpus, 5, 7).unwrap();
    let (train_all, test) = plan.split(&corpus, 0);
    let (train, dev) = split_dev(&train_all, 0.10, 99);

    let config = PipelineTrainConfig::desk_profile(1);
    let out = train_stage(&train, &dev, &config.re, &schema, None).unwrap();
    eprintln!("RE best dev {:.4} at epoch {} ({} run)", out.best_dev_f1, out.best_epoch, out.log.len());
    let StageModel::Relation(model) = out.model else { panic!() };

    // decode test with gold entities/modalities (gold-input ablation)
    let mut fp_within = 0;
    let mut fp_cross = 0;
    let mut fn_within = 0;
    let mut fn_cross = 0;
    let mut fp_by_type: std::collections::BTreeMap<&str, usize> = Default::default();
    let mut fn_by_type: std::collections::BTreeMap<&str, usize> = Default::default();
    let mut pred_docs = Vec::new();
    for doc in &test.documents {
        let pred = model.decode_relations(doc, &doc.entities, 0.5, true).unwrap();
        let sentences = doc.sentences();
        let sent_of = |id: u32| {
            let e = doc.entity_by_id(id).unwrap();
            sentences.iter().position(|s| s.start <= e.span.start && e.span.end <= s.end).unwrap()
        };
        let gold: std::collections::BTreeSet<_> = doc.relations.iter().cloned().collect();
        let predset: std::collections::BTreeSet<_> = pred.iter().cloned().collect();
        for r in predset.difference(&gold) {
            *fp_by_type.entry(r.rtype.code()).or_default() += 1;
            if sent_of(r.source_id) == sent_of(r.target_id) { fp_within += 1 } else { fp_cross += 1 }
        }
        for r in gold.difference(&predset) {
            *fn_by_type.entry(r.rtype.code()).or_default() += 1;
            if sent_of(r.source_id) == sent_of(r.target_id) { fn_within += 1 } else { fn_cross += 1 }
        }
        let mut p = doc.clone();
        p.relations = pred;
        pred_docs.push(p);
    }
    let re = medie::evaluation::eval_re(&Corpus::new(pred_docs), &test).unwrap();
    eprintln!("gold-input test RE: P {:.4} R {:.4} F1 {:.4} (tp {} fp {} fn {})",
        re.overall.precision(), re.overall.recall(), re.overall.f1(),
        re.overall.tp, re.overall.fp, re.overall.false_negatives);
    eprintln!("FP within {fp_within} cross {fp_cross}; FN within {fn_within} cross {fn_cross}");
    eprintln!("FP by type: {fp_by_type:?}");
    eprintln!("FN by type: {fn_by_type:?}");
    let total_cross_gold: usize = test.documents.iter().map(|d| {
        let sentences = d.sentences();
        d.relations.iter().filter(|r| {
            let s = d.entity_by_id(r.source_id).unwrap();
            let t = d.entity_by_id(r.target_id).unwrap();
            let so = sentences.iter().position(|x| x.start <= s.span.start && s.span.end <= x.end).unwrap();
            let to = sentences.iter().position(|x| x.start <= t.span.start && t.span.end <= x.end).unwrap();
            so != to
        }).count()
    }).sum();
    eprintln!("gold cross-sentence relations in test: {total_cross_gold} of {}", test.relation_count());
}
