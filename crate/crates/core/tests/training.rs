use dlvm::sim::{default_generator, generate_population, TbCounts};
use dlvm::vi::{train, TrainConfig};
use dlvm::{Checkpoint, PopulationData};

fn recovery_data() -> PopulationData {
    let g = default_generator(11).unwrap();
    generate_population(96, &g, &TbCounts::training().items(), 21).unwrap().0
}

#[test]
fn smoothed_loss_settles_in_second_half() {
    let data = recovery_data();
    let cfg = TrainConfig { seed: 1, ..Default::default() };
    let res = train(&data, &cfg).unwrap();
    assert_eq!(res.loss_trace.len(), 8000);
    let blocks: Vec<f64> = res.loss_trace[4000..].chunks(200).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for w in blocks.windows(2) {
        assert!(w[1] <= w[0], "block means rose: {blocks:?}");
    }
    assert!(res.loss_trace[7999] < res.loss_trace[0]);
}

#[test]
fn training_is_bitwise_deterministic() {
    let g = default_generator(2).unwrap();
    let data = generate_population(12, &g, &TbCounts::training().items(), 3).unwrap().0;
    let cfg = TrainConfig { seed: 5, iterations: 300, ..Default::default() };
    let a = train(&data, &cfg).unwrap();
    let b = train(&data, &cfg).unwrap();
    assert!(a.loss_trace.iter().zip(&b.loss_trace).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.latents, b.latents);
    let c = train(&data, &TrainConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(a.loss_trace, c.loss_trace);
}

#[test]
fn checkpoint_survives_training_round_trip() {
    let g = default_generator(2).unwrap();
    let data = generate_population(5, &g, &TbCounts::training().items()[..60], 3).unwrap().0;
    let res = train(&data, &TrainConfig { seed: 5, iterations: 50, ..Default::default() }).unwrap();
    let ck = Checkpoint::from_weights(&res.weights, 5, serde_json::json!({"iterations": 50}));
    let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap().to_weights().unwrap();
    assert_eq!(back, res.weights);
}
