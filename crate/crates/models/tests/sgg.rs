use nesyaug_core::world::{generate_world, WorldSpec};
use nesyaug_core::SceneGraph;
use nesyaug_models::sgg::{evaluate, pair_geometry, train_sgg, ScoreMode, SggExample, SggHyper, SggModel, GEOM_DIM};
use nesyaug_models::ModelError;

fn examples(n: usize, seed: u64) -> Vec<SggExample> {
    generate_world(n, &WorldSpec::default(), seed)
        .into_iter()
        .map(|s| SggExample {
            image: s.image,
            graph: s.graph,
        })
        .collect()
}

fn hyper() -> SggHyper {
    SggHyper {
        epochs: 15,
        ..SggHyper::default()
    }
}

fn train(data: &[SggExample]) -> SggModel {
    let v = WorldSpec::default().vocab();
    train_sgg(data, v.objects.len(), v.predicates.len(), &hyper()).unwrap().0
}

fn boxes(g: &SceneGraph) -> Vec<nesyaug_core::BBox> {
    g.objects.iter().map(|o| o.bbox.unwrap()).collect()
}

#[test]
fn training_reduces_relation_loss_by_a_third() {
    let v = WorldSpec::default().vocab();
    let data = examples(200, 0);
    let (_, stats) = train_sgg(&data, v.objects.len(), v.predicates.len(), &hyper()).unwrap();
    assert!(stats.pairs > 0 && stats.objects > 0);
    assert!(
        stats.final_relation_loss < 0.7 * stats.initial_relation_loss,
        "{stats:?}"
    );
    assert!(stats.final_object_loss < 0.7 * stats.initial_object_loss, "{stats:?}");
}

#[test]
fn frequency_rows_are_distributions() {
    let model = train(&examples(100, 1));
    let table = model.frequency_table().unwrap();
    assert_eq!(table.len(), model.num_classes() * model.num_classes());
    for row in table {
        assert_eq!(row.len(), model.num_predicates() + 1);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert!(row.iter().all(|&p| p > 0.0));
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = examples(60, 2);
    let a = train(&data);
    let b = train(&data);
    assert_eq!(a.params().fingerprint().unwrap(), b.params().fingerprint().unwrap());
    let v = WorldSpec::default().vocab();
    let other = SggHyper {
        seed: 1,
        ..hyper()
    };
    let (c, _) = train_sgg(&data, v.objects.len(), v.predicates.len(), &other).unwrap();
    assert_ne!(a.params().fingerprint().unwrap(), c.params().fingerprint().unwrap());
}

#[test]
fn no_relations_means_nothing_to_train_on() {
    let v = WorldSpec::default().vocab();
    let mut data = examples(5, 3);
    for ex in &mut data {
        ex.graph.relations.clear();
    }
    let err = train_sgg(&data, v.objects.len(), v.predicates.len(), &hyper()).err();
    assert!(matches!(err, Some(ModelError::EmptyDataset)));
    assert!(matches!(
        train_sgg(&[], v.objects.len(), v.predicates.len(), &hyper()).err(),
        Some(ModelError::EmptyDataset)
    ));
}

#[test]
fn predictions_cover_every_ordered_pair() {
    let model = train(&examples(60, 4));
    let test = examples(10, 5);
    for ex in &test {
        let b = boxes(&ex.graph);
        for mode in [ScoreMode::Plain, ScoreMode::Tde] {
            let preds = model.predict(&ex.image, &b, mode).unwrap();
            assert_eq!(preds.len(), b.len() * (b.len() - 1));
            for p in &preds {
                assert_eq!(p.scores.len(), model.num_predicates());
                assert!(p.scores.iter().all(|s| (0.0..=1.0).contains(s)));
                assert!(p.scores.iter().sum::<f64>() <= 1.0 + 1e-9);
            }
        }
    }
    assert!(model.predict(&test[0].image, &[], ScoreMode::Tde).unwrap().is_empty());
}

#[test]
fn debiasing_changes_scores_but_not_pairs() {
    let model = train(&examples(60, 6));
    let ex = &examples(1, 7)[0];
    let b = boxes(&ex.graph);
    let plain = model.predict(&ex.image, &b, ScoreMode::Plain).unwrap();
    let tde = model.predict(&ex.image, &b, ScoreMode::Tde).unwrap();
    assert_eq!(plain.len(), tde.len());
    for (p, t) in plain.iter().zip(&tde) {
        assert_eq!((p.subject_box, p.object_box), (t.subject_box, t.object_box));
    }
    assert!(plain.iter().zip(&tde).any(|(p, t)| p.scores != t.scores));
    // Counterfactual logits share the class-pair context with the full ones.
    let classes: Vec<usize> = ex.graph.objects.iter().map(|o| o.class_id).collect();
    for (_, inp) in model.tde_inputs(&ex.image, &b, &classes).unwrap() {
        assert_eq!(inp.full_logits.len(), model.num_predicates() + 1);
        assert_eq!(inp.counterfactual_logits.len(), model.num_predicates() + 1);
    }
}

#[test]
fn evaluation_reports_bounded_recalls() {
    let v = WorldSpec::default().vocab();
    let model = train(&examples(200, 8));
    let test = examples(60, 9);
    for mode in [ScoreMode::Plain, ScoreMode::Tde] {
        let m = evaluate(&model, &test, mode, &v).unwrap();
        assert_eq!(m.recall.keys().copied().collect::<Vec<_>>(), vec![20, 50, 100]);
        for (k, r) in &m.recall {
            assert!((0.0..=1.0).contains(r));
            assert!(m.ng_recall[k] >= *r);
        }
        assert!(m.recall[&20] <= m.recall[&50] && m.recall[&50] <= m.recall[&100]);
        assert!(m.per_predicate.values().all(|r| (0.0..=1.0).contains(r)));
        assert!(m.per_predicate.keys().all(|p| v.predicates.index_of(p).is_some()));
    }
    // Geometry makes most relations learnable.
    let m = evaluate(&model, &test, ScoreMode::Plain, &v).unwrap();
    assert!(m.recall[&20] > 0.5, "{m:?}");
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let v = WorldSpec::default().vocab();
    let model = train(&examples(60, 10));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sgg.ckpt");
    model.save(&path, &v).unwrap();
    let loaded = SggModel::load(&path, &v).unwrap();
    let ex = &examples(1, 11)[0];
    let b = boxes(&ex.graph);
    assert_eq!(
        model.predict(&ex.image, &b, ScoreMode::Tde).unwrap(),
        loaded.predict(&ex.image, &b, ScoreMode::Tde).unwrap()
    );
    assert_eq!(model.frequency_table().unwrap(), loaded.frequency_table().unwrap());
}

#[test]
fn pair_geometry_is_antisymmetric_in_offsets() {
    let a = nesyaug_core::BBox::new(0.0, 0.0, 10.0, 10.0);
    let b = nesyaug_core::BBox::new(30.0, 20.0, 40.0, 50.0);
    let ab = pair_geometry(&a, &b, 64.0, 64.0);
    let ba = pair_geometry(&b, &a, 64.0, 64.0);
    assert_eq!(ab.len(), GEOM_DIM);
    assert!(ab.iter().all(|x| x.is_finite()));
    assert_ne!(ab, ba);
}
