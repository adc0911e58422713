use diffcore::Graph;
use mrl::model::{Fusion, Layout, Model, ModelConfig, Net};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{pretrain_gradcheck, random_seq, tiny};

#[test]
fn pretrain_loss_gradients_match_finite_differences() {
    let worst = pretrain_gradcheck(&tiny(Fusion::CrossAttention, Layout::Sequential), 3);
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn fusion_and_layout_variants_have_correct_gradients() {
    for (fusion, layout) in [(Fusion::Add, Layout::Sequential), (Fusion::Concat, Layout::Parallel)] {
        let worst = pretrain_gradcheck(&tiny(fusion, layout), 11);
        assert!(worst < 1e-4, "{fusion:?}/{layout:?}: {worst}");
    }
}

/// Random model with every parameter perturbed so no sublayer is the identity.
fn perturbed(cfg: &ModelConfig, seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::new(cfg.clone(), seed).unwrap();
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    model
}

fn zero_positions(model: &mut Model<f64>) {
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".pt") || name.ends_with(".ps") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn pme_output(model: &Model<f64>, past: &Array3<f32>) -> Array3<f64> {
    let mut g = Graph::new();
    let vars = model.params.bind_where(&mut g, |_| false);
    let mut net = Net::new(&mut g, &vars, &model.config);
    let x = net.input(&[past]).unwrap();
    let e = net.embed_joints(x, "past_emb").unwrap();
    let h = net.pme_forward(e).unwrap();
    let shape = g.shape(h).to_vec();
    Array3::from_shape_vec((shape[1], shape[2], shape[3]), g.value(h).to_vec()).unwrap()
}

#[test]
fn encoder_commutes_with_joint_permutation() {
    use rand::seq::SliceRandom;
    let cfg = ModelConfig {
        joints: 6,
        ..tiny(Fusion::CrossAttention, Layout::Sequential)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for layout in [Layout::Sequential, Layout::Parallel] {
        let mut model = perturbed(&ModelConfig { layout, ..cfg.clone() }, 2);
        zero_positions(&mut model);
        for _ in 0..5 {
            let past = random_seq(cfg.past_frames, cfg.joints, &mut rng);
            let mut perm: Vec<usize> = (0..cfg.joints).collect();
            perm.shuffle(&mut rng);
            let permuted = Array3::from_shape_fn(past.dim(), |(t, j, k)| past[[t, perm[j], k]]);
            let a = pme_output(&model, &past);
            let b = pme_output(&model, &permuted);
            let worst = b
                .indexed_iter()
                .map(|((t, j, c), v)| (v - a[[t, perm[j], c]]).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-6, "{layout:?}: {worst}");
        }
    }
    // Joint encodings break the symmetry.
    let model = perturbed(&cfg, 2);
    let past = random_seq(cfg.past_frames, cfg.joints, &mut rng);
    let permuted = Array3::from_shape_fn(past.dim(), |(t, j, k)| past[[t, (j + 1) % cfg.joints, k]]);
    let a = pme_output(&model, &past);
    let b = pme_output(&model, &permuted);
    let moved = b
        .indexed_iter()
        .map(|((t, j, c), v)| (v - a[[t, (j + 1) % cfg.joints, c]]).abs())
        .fold(0.0, f64::max);
    assert!(moved > 1e-3);
}

#[test]
fn attention_weights_are_row_stochastic() {
    for fusion in [Fusion::CrossAttention, Fusion::Add, Fusion::Concat] {
        let cfg = tiny(fusion, Layout::Sequential);
        let model = perturbed(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pasts: Vec<_> = (0..2)
            .map(|_| random_seq(cfg.past_frames, cfg.joints, &mut rng))
            .collect();
        let mut g = Graph::new();
        let vars = model.params.bind_where(&mut g, |_| false);
        let mut net = Net::new(&mut g, &vars, &model.config);
        let x = net.input(&pasts.iter().collect::<Vec<_>>()).unwrap();
        net.predict_future(x).unwrap();
        let traces = std::mem::take(&mut net.traces);
        let per_block = if fusion == Fusion::CrossAttention { 4 } else { 2 };
        assert_eq!(traces.len(), 2 * cfg.pme_layers + per_block * cfg.fmp_layers);
        for trace in traces {
            let shape = g.shape(trace.weights).to_vec();
            let width = *shape.last().unwrap();
            for row in g.value(trace.weights).chunks(width) {
                assert!(row.iter().all(|&w| w >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{}", trace.name);
            }
        }
    }
}

#[test]
fn output_shapes_follow_joint_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..6 {
        let joints = rng.random_range(1..=32);
        let cfg = ModelConfig {
            joints,
            past_frames: rng.random_range(2..6),
            future_frames: rng.random_range(1..6),
            ..tiny(Fusion::CrossAttention, Layout::Sequential)
        };
        let model = Model::<f32>::new(cfg.clone(), 1).unwrap();
        let pasts: Vec<_> = (0..3).map(|_| random_seq(cfg.past_frames, joints, &mut rng)).collect();
        let (preds, feats) = model.predict_with_features(&pasts.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(preds.len(), 3);
        assert!(preds.iter().all(|p| p.dim() == (cfg.future_frames, joints, 3)));
        assert!(feats.iter().all(|f| f.len() == cfg.channels));
        let wrong = random_seq(cfg.past_frames, joints + 1, &mut rng);
        assert!(model.predict(&[&wrong]).is_err());
    }
}

#[test]
fn zero_weights_predict_the_head_bias() {
    let cfg = tiny(Fusion::CrossAttention, Layout::Sequential);
    let mut model = Model::<f32>::new(cfg.clone(), 0).unwrap();
    for (name, t) in model.params.iter_mut() {
        let fill = if name == "head.b" { 0.25 } else { 0.0 };
        t.data_mut().iter_mut().for_each(|v| *v = fill);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let past = random_seq(cfg.past_frames, cfg.joints, &mut rng);
    let pred = model.predict(&[&past]).unwrap().remove(0);
    assert!(pred.iter().all(|&v| v == 0.25));
}

#[test]
fn freshly_built_blocks_are_identities() {
    let cfg = tiny(Fusion::CrossAttention, Layout::Sequential);
    let model = Model::<f64>::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let past = random_seq(cfg.past_frames, cfg.joints, &mut rng);
    let mut g = Graph::new();
    let vars = model.params.bind_where(&mut g, |_| false);
    let mut net = Net::new(&mut g, &vars, &model.config);
    let x = net.input(&[&past]).unwrap();
    let e = net.embed_joints(x, "past_emb").unwrap();
    let h = net.pme_forward(e).unwrap();
    assert_eq!(g.value(e), g.value(h));
}

#[test]
fn prediction_gradient_reaches_the_past_embedding() {
    let cfg = tiny(Fusion::CrossAttention, Layout::Sequential);
    let model = perturbed(&cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let past = random_seq(cfg.past_frames, cfg.joints, &mut rng);
    let future = random_seq(cfg.future_frames, cfg.joints, &mut rng);
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g);
    let mut net = Net::new(&mut g, &vars, &model.config);
    let x = net.input(&[&past]).unwrap();
    let gt = net.input(&[&future]).unwrap();
    let out = net.predict_future(x).unwrap();
    let loss = mrl::training::finetune_loss_graph(&mut g, out.prediction, gt).unwrap();
    g.backward(loss).unwrap();
    let mut params = model.params.clone();
    params.zero_grad();
    params.accumulate_grads(&g, &vars).unwrap();
    for name in [
        "past_emb.w",
        "past_emb.pt",
        "pme.0.spatial.wq",
        "fmp.0.cross_temporal.wk",
    ] {
        let grad = params.get(name).unwrap().grad().unwrap();
        assert!(grad.iter().any(|v| v.abs() > 1e-9), "{name}");
    }
}
