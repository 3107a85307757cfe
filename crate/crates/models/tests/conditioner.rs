use candle_core::{DType, Device, Tensor};
use nesyaug_core::caption::{CaptionMapping, TokenSeq};
use nesyaug_core::manifest::GeneratorId;
use nesyaug_core::mask::NEG_INF;
use nesyaug_core::world::WorldSpec;
use nesyaug_core::{ObjectNode, RelationTriple, SceneGraph};
use nesyaug_models::conditioner::{satt_bias, Conditioner, ConditionerConfig, ConditionerDims};
use nesyaug_models::params::ParamStore;
use nesyaug_models::ModelError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 12;

fn graph(relations: &[(u32, usize, u32)]) -> SceneGraph {
    SceneGraph {
        objects: (0..3)
            .map(|id| ObjectNode {
                id,
                class_id: id as usize,
                attributes: vec![],
                bbox: None,
            })
            .collect(),
        relations: relations
            .iter()
            .map(|&(s, p, o)| RelationTriple {
                subject_id: s,
                predicate_id: p,
                object_id: o,
            })
            .collect(),
        image_size: None,
    }
}

fn mapping(tau: &[Option<usize>], endpoints: &[(u32, u32)]) -> CaptionMapping {
    let tokens = (0..tau.len()).map(|i| format!("t{i}")).collect();
    CaptionMapping {
        caption: TokenSeq::new(tokens, 77).unwrap(),
        tau: tau.to_vec(),
        relation_count: endpoints.len(),
        endpoints: endpoints.to_vec(),
    }
}

fn conditioner(zero_values: bool, seed: u64) -> (ParamStore, Conditioner) {
    let v = WorldSpec::default().vocab();
    let mut ps = ParamStore::new(DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = Conditioner::with_value_init(
        &mut ps,
        ConditionerDims::new(DIM, v.objects.len(), v.predicates.len()),
        zero_values,
        &mut rng,
    )
    .unwrap();
    (ps, c)
}

fn tokens(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, (n, DIM), &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    values(a)
        .iter()
        .zip(values(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn cfg(id: GeneratorId) -> ConditionerConfig {
    ConditionerConfig::for_generator(id)
}

fn set_zero(ps: &ParamStore, name: &str) {
    let var = ps.get(name).unwrap();
    var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
}

#[test]
fn config_flags_follow_generator_ids() {
    let flags: Vec<_> = GeneratorId::ALL
        .iter()
        .map(|&id| (cfg(id).use_sgc_mask, cfg(id).use_satt_mask, cfg(id).is_baseline()))
        .collect();
    assert_eq!(
        flags,
        vec![
            (false, false, true),
            (true, true, false),
            (true, false, false),
            (false, true, false),
            (false, false, false)
        ]
    );
}

#[test]
fn zero_graph_and_zero_values_leave_tokens_unchanged() {
    let (_, c) = conditioner(true, 1);
    let w = tokens(4, 2).unsqueeze(0).unwrap();
    let e = Tensor::zeros((1, 3, DIM), DType::F64, &Device::Cpu).unwrap();
    let out = c.sgc_attention(&w, &e, None).unwrap();
    assert_eq!(values(&out), values(&w));
}

#[test]
fn null_only_row_takes_its_update_from_the_null_relation() {
    let (ps, c) = conditioner(false, 3);
    let g = graph(&[(0, 0, 1), (1, 2, 2)]);
    let m = mapping(&[Some(0), None, Some(1)], &[(0, 1), (1, 2)]);
    let w = tokens(3, 4);
    let out = c.condition(&w, &g, cfg(GeneratorId::Config(2)), &m).unwrap();

    // Hand computation: softmax over a single open column is 1, so the
    // update is the value projection of the null row.
    let null = ps.get("cond.null_relation").unwrap().as_tensor().clone();
    let wv = ps.get("cond.sgc.v.weight").unwrap().as_tensor().clone();
    let expected = (w.narrow(0, 1, 1).unwrap() + null.matmul(&wv).unwrap()).unwrap();
    assert!(max_diff(&out.narrow(0, 1, 1).unwrap(), &expected) < 1e-12);
}

#[test]
fn mask_matters_on_one_relation_iff_some_token_is_unmapped() {
    let (_, c) = conditioner(false, 5);
    let g = graph(&[(0, 1, 1)]);
    let w = tokens(3, 6);
    let masked = cfg(GeneratorId::Config(2));
    let unmasked = cfg(GeneratorId::Config(4));

    let all_mapped = mapping(&[Some(0), Some(0), Some(0)], &[(0, 1)]);
    let a = c.condition(&w, &g, masked, &all_mapped).unwrap();
    let b = c.condition(&w, &g, unmasked, &all_mapped).unwrap();
    assert!(max_diff(&a, &b) < 1e-12);

    let one_unmapped = mapping(&[Some(0), None, Some(0)], &[(0, 1)]);
    let a = c.condition(&w, &g, masked, &one_unmapped).unwrap();
    let b = c.condition(&w, &g, unmasked, &one_unmapped).unwrap();
    assert!(max_diff(&a, &b) > 1e-6);
}

#[test]
fn identity_self_attention_mask_with_zero_values_is_a_no_op() {
    let (_, c) = conditioner(true, 7);
    let w = tokens(4, 8).unsqueeze(0).unwrap();
    let mut bias = vec![NEG_INF; 16];
    for i in 0..4 {
        bias[i * 4 + i] = 0.0;
    }
    let bias = Tensor::from_vec(bias, (1, 4, 4), &Device::Cpu).unwrap();
    let out = c.relational_self_attention(&w, &bias).unwrap();
    assert_eq!(values(&out), values(&w));
}

#[test]
fn zero_self_attention_mask_matches_reference_attention() {
    let (ps, c) = conditioner(false, 9);
    let n = 5;
    let w = tokens(n, 10);
    let bias = Tensor::zeros((1, n, n), DType::F64, &Device::Cpu).unwrap();
    let out = c.relational_self_attention(&w.unsqueeze(0).unwrap(), &bias).unwrap();

    // Reference: plain nested loops over the projected matrices.
    let proj = |name: &str| {
        let wt = ps.get(name).unwrap().as_tensor().clone();
        w.matmul(&wt).unwrap().to_vec2::<f64>().unwrap()
    };
    let (q, k, v) = (proj("cond.satt.q.weight"), proj("cond.satt.k.weight"), proj("cond.satt.v.weight"));
    let x = w.to_vec2::<f64>().unwrap();
    let mut expected = Vec::new();
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| (0..DIM).map(|d| q[i][d] * k[j][d]).sum::<f64>() / (DIM as f64).sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for d in 0..DIM {
            expected.push(x[i][d] + (0..n).map(|j| exps[j] / z * v[j][d]).sum::<f64>());
        }
    }
    let got = values(&out);
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn self_attention_runs_only_for_configurations_with_its_mask() {
    let g = graph(&[(0, 0, 1), (1, 2, 2)]);
    let m = mapping(&[Some(0), None, Some(1)], &[(0, 1), (1, 2)]);
    let w = tokens(3, 11);
    for (id, calls) in [
        (GeneratorId::Baseline, 0),
        (GeneratorId::Config(1), 1),
        (GeneratorId::Config(2), 0),
        (GeneratorId::Config(3), 1),
        (GeneratorId::Config(4), 0),
    ] {
        let (_, c) = conditioner(false, 12);
        let mm = if id == GeneratorId::Config(4) {
            CaptionMapping::unmapped(m.caption.clone())
        } else {
            m.clone()
        };
        c.condition(&w, &g, cfg(id), &mm).unwrap();
        assert_eq!(c.satt_calls(), calls, "{id}");
    }
}

#[test]
fn baseline_returns_tokens_untouched() {
    let (_, c) = conditioner(false, 13);
    let g = graph(&[(0, 0, 1)]);
    let m = mapping(&[Some(0), None], &[(0, 1)]);
    let w = tokens(2, 14);
    let out = c.condition(&w, &g, cfg(GeneratorId::Baseline), &m).unwrap();
    assert_eq!(values(&out), values(&w));
}

#[test]
fn configs_one_and_two_differ_only_through_self_attention() {
    let (_, c) = conditioner(false, 15);
    let g = graph(&[(0, 0, 1), (1, 2, 2)]);
    let m = mapping(&[Some(0), Some(0), None, Some(1)], &[(0, 1), (1, 2)]);
    let w = tokens(4, 16);
    let one = c.condition(&w, &g, cfg(GeneratorId::Config(1)), &m).unwrap();
    let two = c.condition(&w, &g, cfg(GeneratorId::Config(2)), &m).unwrap();
    let bias = satt_bias(&[&m], &[4], 4, DType::F64).unwrap();
    let via_satt = c.relational_self_attention(&two.unsqueeze(0).unwrap(), &bias).unwrap();
    assert!(max_diff(&one, &via_satt.squeeze(0).unwrap()) < 1e-12);
    assert!(max_diff(&one, &two) > 1e-6);
}

#[test]
fn config_one_equals_config_two_with_zero_self_attention_values() {
    let (ps, c) = conditioner(false, 17);
    set_zero(&ps, "cond.satt.v.weight");
    let g = graph(&[(0, 0, 1), (1, 2, 2)]);
    let m = mapping(&[Some(0), None, Some(1)], &[(0, 1), (1, 2)]);
    let w = tokens(3, 18);
    let one = c.condition(&w, &g, cfg(GeneratorId::Config(1)), &m).unwrap();
    let two = c.condition(&w, &g, cfg(GeneratorId::Config(2)), &m).unwrap();
    assert!(max_diff(&one, &two) < 1e-6);
}

#[test]
fn config_four_is_unmasked_attention_over_relation_rows() {
    let (_, c) = conditioner(false, 19);
    let g = graph(&[(0, 0, 1), (1, 2, 2)]);
    let m = CaptionMapping::unmapped(TokenSeq::new(vec!["x".into(), "y".into(), "z".into()], 77).unwrap());
    let w = tokens(3, 20);
    let out = c.condition(&w, &g, cfg(GeneratorId::Config(4)), &m).unwrap();
    let e = c.embed_triples(&g).unwrap().narrow(0, 0, 2).unwrap().unsqueeze(0).unwrap();
    let zero = Tensor::zeros((1, 3, 2), DType::F64, &Device::Cpu).unwrap();
    let reference = c.sgc_attention(&w.unsqueeze(0).unwrap(), &e, Some(&zero)).unwrap();
    assert!(max_diff(&out, &reference.squeeze(0).unwrap()) < 1e-12);
}

#[test]
fn triple_embedding_rows() {
    let (_, c) = conditioner(false, 21);
    assert_eq!(c.embed_triples(&graph(&[])).unwrap().dims(), &[1, DIM]);

    let same = c.embed_triples(&graph(&[(0, 0, 1), (0, 0, 1)])).unwrap();
    assert_eq!(values(&same.get(0).unwrap()), values(&same.get(1).unwrap()));

    // "left of" with subject and object swapped.
    let swapped = c.embed_triples(&graph(&[(0, 0, 1), (1, 0, 0)])).unwrap();
    assert!(max_diff(&swapped.get(0).unwrap(), &swapped.get(1).unwrap()) > 1e-6);
}

#[test]
fn unknown_predicate_is_a_vocabulary_mismatch() {
    let (_, c) = conditioner(false, 22);
    let err = c.embed_triples(&graph(&[(0, 99, 1)])).unwrap_err();
    assert!(matches!(err, ModelError::VocabMismatch(_)));
}

#[test]
fn mask_and_caption_must_agree_on_relation_count() {
    let (_, c) = conditioner(false, 23);
    let g = graph(&[(0, 0, 1), (1, 2, 2)]);
    let m = mapping(&[Some(0), None], &[(0, 1)]);
    let err = c.condition(&tokens(2, 24), &g, cfg(GeneratorId::Config(1)), &m).unwrap_err();
    assert!(matches!(err, ModelError::Shape(_)));
}

#[test]
fn output_shape_matches_input_for_every_configuration() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for trial in 0..40 {
        let (_, c) = conditioner(false, trial);
        let k = rng.random_range(0..=2usize);
        let rels: Vec<(u32, usize, u32)> = [(0, 0, 1), (1, 2, 2)][..k].to_vec();
        let endpoints: Vec<(u32, u32)> = rels.iter().map(|r| (r.0, r.2)).collect();
        let n = rng.random_range(k.max(1)..=6);
        let tau: Vec<Option<usize>> = (0..n)
            .map(|i| if i < k { Some(i) } else { None })
            .collect();
        let m = mapping(&tau, &endpoints);
        let w = tokens(n, trial);
        for id in GeneratorId::ALL {
            let mm = if id == GeneratorId::Config(4) {
                CaptionMapping::unmapped(m.caption.clone())
            } else {
                m.clone()
            };
            let out = c.condition(&w, &graph(&rels), cfg(id), &mm).unwrap();
            assert_eq!(out.dims(), &[n, DIM]);
            assert!(values(&out).iter().all(|x| x.is_finite()));
        }
    }
}
