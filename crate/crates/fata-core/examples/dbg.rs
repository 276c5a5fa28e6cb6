use fata_core::adapt::{pretrain, run_scenario, AdaptConfig, Method, PretrainConfig};
use fata_core::data::{
    generate_pool, CorruptionSpec, Family, Scenario, StreamSpec, SyntheticTask, TaskKind,
};
use fata_core::model::FataModel;
use fata_core::nn::{
    Activation, InputShape, LayerOp, LayerSpec, LayerStack, ModelSpec, NormKind, ParamStore,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let task = SyntheticTask {
        kind: TaskKind::Blobs { dim: 8 },
        num_classes: 4,
        separation: 10.0,
        seed: 35,
    };
    let pool = generate_pool(&task, 128).unwrap();
    let spec = ModelSpec {
        input: InputShape::Vector { dim: 8 },
        layers: (0..3)
            .map(|_| LayerSpec {
                op: LayerOp::Linear,
                out_channels: 12,
                norm: Some(NormKind::Group { num_groups: 2 }),
                act: Activation::Gelu,
            })
            .collect(),
        num_classes: 4,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let stack = LayerStack::build(&spec, &mut store, &mut rng).unwrap();
    let model = FataModel::new(stack, 1).unwrap();
    let cfg = PretrainConfig { epochs: 5, lr: 0.02, momentum: 0.9, batch_size: 32, seed: 0 };
    let s = pretrain(&model, &mut store, &pool, &pool, &cfg).unwrap();
    println!("pretrain acc={:.3}", s.clean_accuracy);
    for sev in [0u8, 2, 4, 5] {
        let sspec = StreamSpec {
            scenario: Scenario::Normal,
            batch_size: 16,
            num_batches: None,
            corruption: CorruptionSpec { family: Family::GaussNoise, severity: sev, seed: 7 },
            seed: 13,
        };
        let mut st = store.clone();
        let acfg = AdaptConfig { lr: 0.01, method: Method::EntMinFata, seed: 8, ..Default::default() };
        let r = run_scenario(&model, &mut st, &pool, &sspec, &acfg).unwrap();
        println!(
            "sev={sev}: acc={:.3} selected={}/{} mean_ent={:.3}",
            r.accuracy, r.total_selected, r.total_samples, r.mean_prediction_entropy
        );
    }
}
