//! Scratch harness for choosing experiment defaults.

use fata_core::adapt::{pretrain, run_scenario, AdaptConfig, Method, PretrainConfig};
use fata_core::config::{default_experiment, ExperimentConfig};
use fata_core::data::{generate_pool, split_pool, Family, Scenario};
use fata_core::model::FataModel;
use fata_core::nn::{LayerStack, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build(cfg: &ExperimentConfig, seed: u64) -> (FataModel, ParamStore) {
    let spec = cfg.model.to_spec(&cfg.task).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stack = LayerStack::build(&spec, &mut store, &mut rng).unwrap();
    (FataModel::new(stack, cfg.model.aug_position).unwrap(), store)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.005);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let sep: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4.0);

    let mut cfg = default_experiment();
    cfg.task.separation = sep;
    cfg.pool_size = 1536;
    cfg.adapt.batch_size = 32;
    cfg.adapt.lr = lr;

    let methods = [Method::NoAdapt, Method::EntMin, Method::EntMinFata];
    let families = Family::ALL;

    let mut grand: Vec<Vec<f64>> = vec![vec![]; methods.len()];
    for seed in 0..seeds {
        let full = generate_pool(&cfg.task, cfg.pool_size + 512).unwrap();
        let (adapt_pool, valtrain) = split_pool(&full, cfg.pool_size);
        let (val, train) = split_pool(&valtrain, 256);
        let (model, mut store) = build(&cfg, seed);
        let ps = PretrainConfig { seed, ..cfg.pretrain.clone() };
        let sum = pretrain(&model, &mut store, &train, &val, &ps).unwrap();
        print!("seed {seed}: clean={:.3} | ", sum.clean_accuracy);

        for (mi, &method) in methods.iter().enumerate() {
            let mut accs = Vec::new();
            for family in families {
                let sspec = cfg.stream_spec(family, 5, seed);
                let mut st = store.clone();
                let acfg = AdaptConfig { method, seed, ..cfg.adapt.clone() };
                let r = run_scenario(&model, &mut st, &adapt_pool, &sspec, &acfg).unwrap();
                accs.push(r.accuracy);
                if method == Method::EntMinFata {
                    print!("[{} f={:.2}]", family.name(), r.selected_fraction);
                }
            }
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            grand[mi].push(mean);
            print!(" {}={:.3}", method.name(), mean);
        }
        println!();
    }
    println!("--- means over seeds (lr={lr}, sep={sep}) ---");
    for (mi, m) in methods.iter().enumerate() {
        let mean = grand[mi].iter().sum::<f64>() / grand[mi].len() as f64;
        println!("{}: {:.4}", m.name(), mean);
    }
    // batch1 sanity: GN model at batch 1
    let mut c1 = cfg.clone();
    c1.scenario = Scenario::Batch1;
    c1.num_batches = Some(512);
    c1.adapt.lr = lr / 2.0;
    let full = generate_pool(&c1.task, 1024).unwrap();
    let (adapt_pool, train) = split_pool(&full, 512);
    let (model, mut store) = build(&c1, 0);
    pretrain(&model, &mut store, &train, &train, &c1.pretrain).unwrap();
    for method in [Method::NoAdapt, Method::EntMinFata] {
        let sspec = c1.stream_spec(Family::GaussNoise, 5, 0);
        let mut st = store.clone();
        let acfg = AdaptConfig { method, seed: 0, batch_size: 1, ..c1.adapt.clone() };
        let r = run_scenario(&model, &mut st, &adapt_pool, &sspec, &acfg).unwrap();
        println!("batch1 {}: acc={:.3} selected={}", method.name(), r.accuracy, r.total_selected);
    }
}
