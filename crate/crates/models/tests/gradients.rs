//! Analytic gradients against central finite differences at float64.

use candle_core::{DType, Device, Tensor, Var};
use nesyaug_core::caption::{CaptionMapping, TokenSeq};
use nesyaug_core::manifest::GeneratorId;
use nesyaug_core::world::WorldSpec;
use nesyaug_core::{ObjectNode, RelationTriple, SceneGraph};
use nesyaug_models::conditioner::{Conditioner, ConditionerConfig, ConditionerDims};
use nesyaug_models::diffusion::{CondInput, Generator, GeneratorConfig};
use nesyaug_models::params::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const RTOL: f64 = 1e-3;
/// Absolute floor for entries whose true gradient is zero.
const ATOL: f64 = 1e-8;

fn three_token_two_relation() -> (SceneGraph, CaptionMapping) {
    let g = SceneGraph {
        objects: (0..3)
            .map(|id| ObjectNode {
                id,
                class_id: id as usize,
                attributes: vec![],
                bbox: None,
            })
            .collect(),
        relations: vec![
            RelationTriple {
                subject_id: 0,
                predicate_id: 0,
                object_id: 1,
            },
            RelationTriple {
                subject_id: 1,
                predicate_id: 2,
                object_id: 2,
            },
        ],
        image_size: None,
    };
    let m = CaptionMapping {
        caption: TokenSeq::new(vec!["circle".into(), "above".into(), "square".into()], 77).unwrap(),
        tau: vec![Some(0), None, Some(1)],
        relation_count: 2,
        endpoints: vec![(0, 1), (1, 2)],
    };
    (g, m)
}

fn entries(var: &Var) -> Vec<f64> {
    var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn set_entries(var: &Var, data: Vec<f64>) {
    let shape = var.as_tensor().shape().clone();
    var.set(&Tensor::from_vec(data, shape, &Device::Cpu).unwrap()).unwrap();
}

/// Checks every entry of every named variable; returns how many were compared.
fn check_all(named: &[(String, Var)], loss: &dyn Fn() -> Tensor) -> usize {
    let grads = loss().backward().unwrap();
    let mut checked = 0;
    for (name, var) in named {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; var.as_tensor().elem_count()],
        };
        let base = entries(var);
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += H;
            set_entries(var, plus);
            let lp = loss().to_scalar::<f64>().unwrap();
            let mut minus = base.clone();
            minus[i] -= H;
            set_entries(var, minus);
            let lm = loss().to_scalar::<f64>().unwrap();
            set_entries(var, base.clone());
            let fd = (lp - lm) / (2.0 * H);
            let a = analytic[i];
            assert!(
                (a - fd).abs() <= RTOL * a.abs().max(fd.abs()) + ATOL,
                "{name}[{i}]: analytic {a} vs finite difference {fd}"
            );
            checked += 1;
        }
    }
    checked
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let v = WorldSpec::default().vocab();
    let dim = 12;
    let mut ps = ParamStore::new(DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = Conditioner::with_value_init(
        &mut ps,
        ConditionerDims::new(dim, v.objects.len(), v.predicates.len()),
        false,
        &mut rng,
    )
    .unwrap();
    let (g, m) = three_token_two_relation();
    let w: Vec<f64> = (0..3 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = Tensor::from_vec(w, (3, dim), &Device::Cpu).unwrap();
    let r: Vec<f64> = (0..3 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = Tensor::from_vec(r, (3, dim), &Device::Cpu).unwrap();

    for id in [GeneratorId::Config(1), GeneratorId::Config(3)] {
        let cfg = ConditionerConfig::for_generator(id);
        let loss = || {
            let out = c.condition(&w, &g, cfg, &m).unwrap();
            (out * &r).unwrap().sum_all().unwrap()
        };
        let checked = check_all(ps.named_vars(), &loss);
        assert_eq!(checked, ps.num_parameters());
    }
}

#[test]
fn diffusion_loss_gradients_match_finite_differences() {
    let v = WorldSpec::default().vocab();
    let cfg = GeneratorConfig {
        dim: 12,
        channels: 12,
        image_size: 8,
        patch: 2,
        blocks: 1,
        p_drop: 0.5,
        batch: 2,
        ..GeneratorConfig::default()
    };
    let gen = Generator::with_options(GeneratorId::Config(1), &v, cfg, DType::F64, false).unwrap();
    let (g, m) = three_token_two_relation();
    let input = CondInput {
        graph: g,
        caption: m.clone(),
        freeform: m.caption.clone(),
    };
    let inputs = [&input, &input];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0: Vec<f64> = (0..2 * 3 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x0 = Tensor::from_vec(x0, (2, 3, 8, 8), &Device::Cpu).unwrap();

    // Same timesteps, noise and dropout on every evaluation.
    let loss = || gen.ldm_loss(&x0, &inputs, &mut rng.clone()).unwrap();
    let checked = check_all(gen.params().named_vars(), &loss);
    assert_eq!(checked, gen.params().num_parameters());
}
