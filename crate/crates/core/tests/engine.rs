mod common;

use std::sync::Arc;

use common::{all_bits, bits, randn, rng, RefMlp};
use lct_core::data::{synth_spirals, Batcher, ClassDataset};
use lct_core::engine::{one_hot, run_eager, Architecture, PartitionedModel, Preset, StepInput, Trainer};
use lct_core::error::Error;
use lct_core::nn::loss::sequence_cross_entropy;
use lct_core::nn::{Layer, LayerSpec, OptimConfig, Sequential};
use lct_core::tensor::{finite_diff_grad, relative_error, Eager, Graph, Tape, Tensor};

fn arch(preset: &str, n: usize) -> Architecture {
    let p = Preset::parse(preset, 0, 0).unwrap();
    Architecture::build(preset, &p, n, &[2], 3, None).unwrap()
}

fn spirals() -> ClassDataset {
    synth_spirals(100, 3, 0.05, 7).unwrap()
}

fn batches(data: &ClassDataset, size: usize, count: usize, seed: u64) -> Vec<StepInput> {
    let mut b = Batcher::new(data.len(), size, true, seed);
    let mut out = Vec::new();
    while out.len() < count {
        for idx in b.next_epoch() {
            let batch = data.gather(&idx).unwrap();
            out.push(StepInput::single(batch.x, batch.y));
        }
    }
    out.truncate(count);
    out
}

fn params_bits(t: &Trainer) -> Vec<u64> {
    let mut v = Vec::new();
    for s in t.stages() {
        v.extend(all_bits(s.group.params()));
        v.extend(all_bits(s.group_opt.slots()));
        if let Some(c) = &s.critic {
            v.extend(all_bits(c.params()));
            v.extend(all_bits(s.critic_opt.as_ref().unwrap().slots()));
        }
    }
    v
}

fn sgd(lr: f64) -> OptimConfig {
    OptimConfig::sgd(lr, 0.9, 5e-4)
}

#[test]
fn build_examples() {
    let p = Preset::parse("mlp-300-150-10", 0, 0).unwrap();
    let a = Architecture::build("mlp-300-150-10", &p, 1, &[1, 28, 28], 10, None).unwrap();
    let dense: Vec<Vec<usize>> = a
        .groups
        .iter()
        .map(|g| {
            g.iter()
                .filter_map(|l| match l {
                    LayerSpec::Dense { units, .. } => Some(*units),
                    _ => None,
                })
                .collect()
        })
        .collect();
    assert_eq!(dense, vec![vec![300], vec![150, 10]]);
    assert_eq!(a.n_critics(), 1);

    let bp = Architecture::build("mlp-300-150-10", &p, 0, &[1, 28, 28], 10, None).unwrap();
    assert_eq!((bp.n_groups(), bp.n_critics()), (1, 0));

    for n in [3, 4] {
        assert!(matches!(
            Architecture::build("mlp-300-150-10", &p, n, &[1, 28, 28], 10, None),
            Err(Error::Config { .. })
        ));
    }

    let lstm = Preset::parse("lstm-stack", 4, 8).unwrap();
    let a = Architecture::build("lstm-stack", &lstm, 3, &[20], 20, Some(4)).unwrap();
    assert_eq!(a.n_groups(), 4);
    for g in &a.groups {
        assert_eq!(g.iter().filter(|l| l.is_recurrent()).count(), 1);
    }
    for c in &a.critics {
        assert_eq!(c, &vec![LayerSpec::Dense { inputs: 8, units: 20 }]);
    }
}

#[test]
fn shapes_chain_across_groups_and_critics() {
    for (preset, shape, n) in [("mlp-32-16-8-3", vec![2], 2), ("tiny-cnn", vec![1, 8, 8], 2), ("tiny-cnn", vec![3, 12, 12], 3)] {
        let p = Preset::parse(preset, 0, 0).unwrap();
        let a = Architecture::build(preset, &p, n, &shape, 3, None).unwrap();
        let bounds = a.boundary_shapes().unwrap();
        let mut s = shape.clone();
        for (i, g) in a.groups.iter().enumerate() {
            assert_eq!(s, bounds[i]);
            for l in g {
                s = l.output_shape(&s).unwrap();
            }
        }
        assert_eq!(s, vec![3]);
    }
}

#[test]
fn identity_group_passes_input_through() {
    let mut model = PartitionedModel::init(arch("mlp-2-3", 1), 1);
    model.groups[0] = Sequential::new(vec![Layer {
        spec: LayerSpec::Dense { inputs: 2, units: 2 },
        params: vec![Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), Tensor::zeros(&[2])],
    }]);
    let x = randn(&[4, 2], &mut rng(2));
    assert_eq!(model.group_forward(0, vec![x.clone()]).unwrap(), vec![x]);
}

#[test]
fn chained_groups_equal_monolithic_forward() {
    let cases: Vec<(Architecture, Vec<Tensor>)> = vec![
        (arch("mlp-32-16-8-3", 3), vec![randn(&[5, 2], &mut rng(1))]),
        (
            Architecture::build("tiny-cnn", &Preset::TinyCnn, 2, &[1, 8, 8], 3, None).unwrap(),
            vec![randn(&[2, 1, 8, 8], &mut rng(2))],
        ),
        (
            Architecture::build("lstm-stack", &Preset::parse("lstm-stack", 3, 4).unwrap(), 2, &[5], 5, Some(3)).unwrap(),
            (0..3).map(|_| randn(&[2, 5], &mut rng(3))).collect(),
        ),
    ];
    for (a, xs) in cases {
        let model = PartitionedModel::init(a, 9);
        let mono = Sequential::new(model.groups.iter().flat_map(|g| g.layers.clone()).collect());
        let want = run_eager(&mono, xs.clone()).unwrap();
        let mut h = xs.clone();
        for i in 0..model.n_groups() {
            h = model.group_forward(i, h).unwrap();
        }
        for (a, b) in h.iter().zip(&want) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        assert_eq!(model.forward(xs).unwrap(), h);
    }
}

#[test]
fn critic_loss_examples() {
    let p = Preset::parse("mlp-16-10", 0, 0).unwrap();
    let a = Architecture::build("mlp-16-10", &p, 1, &[2], 10, None).unwrap();
    let mut model = PartitionedModel::init(a, 3);
    let x = randn(&[6, 2], &mut rng(4));
    let y = vec![vec![0, 1, 2, 3, 4, 9]];
    let h = model.group_forward(0, vec![x.clone()]).unwrap();

    let (per, mean) = model.critic_loss(0, h.clone(), &y).unwrap();
    let z = run_eager(&model.critics[0], h.clone()).unwrap();
    let direct = Eager::new().softmax_cross_entropy(&z[0], &y[0]).unwrap();
    assert_eq!(bits(&per), bits(&direct));
    assert_eq!(mean, Eager::new().mean(&direct).unwrap().item().unwrap());

    for p in model.critics[0].params_mut() {
        p.data_mut().fill(0.0);
    }
    let (per, _) = model.critic_loss(0, h.clone(), &y).unwrap();
    assert!(per.data().iter().all(|v| (v - 10f64.ln()).abs() < 1e-12));

    let w = model.critics[0].layers[0].params[0].data_mut();
    for r in 0..16 {
        w[r * 10] = 1e4;
    }
    let positive = vec![Tensor::full(&[6, 16], 1.0)];
    let (per, _) = model.critic_loss(0, positive, &[vec![0; 6]]).unwrap();
    assert!(per.data().iter().all(|v| *v < 1e-12));

    assert!(matches!(model.critic_loss(0, h, &[]), Err(Error::Contract(_))));
}

#[test]
fn zero_rates_leave_everything_unchanged() {
    let data = spirals();
    let model = PartitionedModel::init(arch("mlp-16-16-3", 2), 5);
    let mut t = Trainer::new(model, &OptimConfig::sgd(0.0, 0.9, 5e-4), &OptimConfig::adam(0.0));
    let before: Vec<u64> = t.stages().iter().flat_map(|s| all_bits(s.group.params().chain(s.critic.iter().flat_map(|c| c.params())))).collect();
    for b in batches(&data, 16, 3, 1) {
        t.step(b).unwrap();
    }
    let after: Vec<u64> = t.stages().iter().flat_map(|s| all_bits(s.group.params().chain(s.critic.iter().flat_map(|c| c.params())))).collect();
    assert_eq!(before, after);
}

#[test]
fn no_critics_is_plain_backpropagation() {
    let data = spirals();
    let model = PartitionedModel::init(arch("mlp-16-16-3", 0), 11);
    let mut reference = RefMlp::from_sequential(&model.groups[0]);
    let mut t = Trainer::new(model, &sgd(0.05), &OptimConfig::critic_default());
    for b in batches(&data, 20, 40, 2) {
        let want = reference.step(b.xs[0].data(), &b.targets[0], 0.05, 0.9, 5e-4);
        let rec = t.step(b).unwrap();
        assert_eq!(rec.heads.len(), 1);
        assert_eq!(rec.heads[0].loss.to_bits(), want.to_bits());
        let got: Vec<f64> = t.stages()[0].group.params().flat_map(|p| p.data().to_vec()).collect();
        assert_eq!(got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), reference.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn group_update_matches_hand_chain_rule() {
    let model = PartitionedModel::init(arch("mlp-8-3", 1), 6);
    let data = spirals();
    let b = data.gather(&[0, 50, 120, 199, 250]).unwrap();
    let (w1, b1) = (model.groups[0].layers[0].params[0].clone(), model.groups[0].layers[0].params[1].clone());
    let (wc, bc) = (model.critics[0].layers[0].params[0].clone(), model.critics[0].layers[0].params[1].clone());
    let lr = 0.1;
    let mut t = Trainer::new(model, &OptimConfig::sgd(lr, 0.9, 0.0), &OptimConfig::critic_default());
    t.step(StepInput::single(b.x.clone(), b.y.clone())).unwrap();

    let (rows, d, h, k) = (5, 2, 8, 3);
    let x = b.x.data();
    let mut z1 = vec![0.0; rows * h];
    for i in 0..rows {
        for j in 0..h {
            z1[i * h + j] = b1.data()[j] + (0..d).map(|p| x[i * d + p] * w1.data()[p * h + j]).sum::<f64>();
        }
    }
    let hid: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
    let mut dz1 = vec![0.0; rows * h];
    for i in 0..rows {
        let logits: Vec<f64> = (0..k)
            .map(|c| bc.data()[c] + (0..h).map(|p| hid[i * h + p] * wc.data()[p * k + c]).sum::<f64>())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let dz: Vec<f64> = (0..k).map(|c| (e[c] / s - if c == b.y[i] { 1.0 } else { 0.0 }) / rows as f64).collect();
        for p in 0..h {
            let dh: f64 = (0..k).map(|c| dz[c] * wc.data()[p * k + c]).sum();
            dz1[i * h + p] = if z1[i * h + p] > 0.0 { dh } else { 0.0 };
        }
    }
    let new_w1 = &t.stages()[0].group.layers[0].params[0];
    let new_b1 = &t.stages()[0].group.layers[0].params[1];
    for p in 0..d {
        for j in 0..h {
            let g: f64 = (0..rows).map(|i| x[i * d + p] * dz1[i * h + j]).sum();
            let want = w1.data()[p * h + j] - lr * g;
            assert!((new_w1.data()[p * h + j] - want).abs() < 1e-10);
        }
    }
    for j in 0..h {
        let g: f64 = (0..rows).map(|i| dz1[i * h + j]).sum();
        assert!((new_b1.data()[j] - (b1.data()[j] - lr * g)).abs() < 1e-10);
    }
}

/// Gradient of critic `i`'s mean loss with respect to group `i`, derived
/// on a frozen copy with its own tape.
fn frozen_group_gradient(model: &PartitionedModel, i: usize, x: &Tensor, y: &[usize]) -> Vec<Tensor> {
    let mut h = vec![x.clone()];
    for g in &model.groups[..i] {
        h = run_eager(g, h).unwrap();
    }
    let mut t = Tape::new();
    let inputs = vec![t.constant(h[0].clone())];
    let bound = model.groups[i].bind(&mut t);
    let mut st = vec![None; model.groups[i].layers.len()];
    let mut out = model.groups[i].forward(&mut t, &bound, inputs, &mut st).unwrap();
    if let Some(c) = model.critics.get(i) {
        let cb = c.bind_constants(&mut t);
        let mut cs = vec![None; c.layers.len()];
        out = c.forward(&mut t, &cb, out, &mut cs).unwrap();
    }
    let per = t.softmax_cross_entropy(&out[0], y).unwrap();
    let l = t.mean(&per).unwrap();
    t.backward(l).unwrap();
    bound.iter().flatten().map(|&v| t.grad(v).cloned().unwrap()).collect()
}

#[test]
fn group_deltas_match_frozen_copy() {
    let data = spirals();
    let model = PartitionedModel::init(arch("mlp-16-16-8-3", 2), 13);
    let frozen = model.clone();
    let lr = 0.05;
    let mut t = Trainer::new(model, &OptimConfig::sgd(lr, 0.9, 0.0), &OptimConfig::critic_default());
    let b = batches(&data, 32, 1, 4).remove(0);
    let (x, y) = (b.xs[0].clone(), b.targets[0].clone());
    t.step(b).unwrap();
    for i in 0..3 {
        let grads = frozen_group_gradient(&frozen, i, &x, &y);
        for ((old, new), g) in frozen.groups[i].params().zip(t.stages()[i].group.params()).zip(&grads) {
            for ((o, n), g) in old.data().iter().zip(new.data()).zip(g.data()) {
                assert!(((o - n) - lr * g).abs() < 1e-10, "group {i}");
            }
        }
    }
}

#[test]
fn critic_update_examples() {
    let data = spirals();
    let model = PartitionedModel::init(arch("mlp-16-3", 1), 17);
    let b = data.gather(&(0..12).map(|i| i * 25).collect::<Vec<_>>()).unwrap();
    let h = model.group_forward(0, vec![b.x.clone()]).unwrap();
    let targets = vec![b.y.clone()];
    let (own, _) = model.critic_loss(0, h.clone(), &targets).unwrap();

    let mut t = Trainer::new(model.clone(), &sgd(0.1), &OptimConfig::critic_default());
    let stage = &mut t.stages_mut()[0];
    let before = all_bits(stage.critic.as_ref().unwrap().params());
    let l = stage.critic_step(h.clone(), &targets, own.data()).unwrap();
    assert_eq!(l, 0.0);
    assert_eq!(all_bits(stage.critic.as_ref().unwrap().params()), before);

    let other = randn(&[12], &mut rng(3));
    let mut t = Trainer::new(model.clone(), &sgd(0.1), &OptimConfig::adam(0.0));
    let stage = &mut t.stages_mut()[0];
    stage.critic_step(h.clone(), &targets, other.data()).unwrap();
    assert_eq!(all_bits(stage.critic.as_ref().unwrap().params()), before);

    assert!(matches!(
        stage.critic_step(h.clone(), &targets, &other.data()[..5]),
        Err(Error::Dimension { .. })
    ));
    let input = StepInput::single(b.x.clone(), b.y.clone());
    let mut t = Trainer::new(model.clone(), &sgd(0.1), &OptimConfig::critic_default());
    t.stages_mut()[0].train_forward(7, input.xs.clone(), &input.targets).unwrap();
    assert!(matches!(t.stages_mut()[0].critic_update(8, other.data()), Err(Error::Pipeline(_))));

    let critic_params: Vec<Tensor> = model.critics[0].params().cloned().collect();
    let loss_at = |p: &[Tensor]| {
        let mut c = model.critics[0].clone();
        for (dst, src) in c.params_mut().zip(p) {
            dst.clone_from(src);
        }
        let z = run_eager(&c, h.clone())?;
        let mut g = Eager::new();
        let per = sequence_cross_entropy(&mut g, &z, &targets)?;
        g.l1_loss(&per, &other)?.item()
    };
    let mut tape = Tape::new();
    let inputs = vec![tape.constant(h[0].clone())];
    let bound = model.critics[0].bind(&mut tape);
    let mut cs = vec![None; 1];
    let z = model.critics[0].forward(&mut tape, &bound, inputs, &mut cs).unwrap();
    let per = sequence_cross_entropy(&mut tape, &z, &targets).unwrap();
    let tgt = tape.constant(other.clone());
    let root = tape.l1_loss(&per, &tgt).unwrap();
    tape.backward(root).unwrap();
    for (k, &v) in bound.iter().flatten().enumerate() {
        let fd = finite_diff_grad(
            |x| {
                let mut p = critic_params.clone();
                p[k] = x.clone();
                loss_at(&p)
            },
            &critic_params[k],
            1e-6,
        )
        .unwrap();
        for (a, n) in tape.grad(v).unwrap().data().iter().zip(fd.data()) {
            assert!(relative_error(*a, *n, 1e-8) < 1e-4);
        }
    }
}

#[test]
fn group_update_ignores_downstream_weights() {
    let data = spirals();
    let a = PartitionedModel::init(arch("mlp-16-16-8-3", 2), 21);
    let mut b = a.clone();
    for g in &mut b.groups[1..] {
        for p in g.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = -*v * 3.0);
        }
    }
    for p in b.critics[1].params_mut() {
        p.data_mut().fill(0.5);
    }
    let input = batches(&data, 16, 1, 9).remove(0);
    let mut ta = Trainer::new(a, &sgd(0.1), &OptimConfig::critic_default());
    let mut tb = Trainer::new(b, &sgd(0.1), &OptimConfig::critic_default());
    ta.step(input.clone()).unwrap();
    tb.step(input).unwrap();
    assert_eq!(all_bits(ta.stages()[0].group.params()), all_bits(tb.stages()[0].group.params()));
}

#[test]
fn critic_training_never_touches_main_parameters() {
    let data = spirals();
    let mut t = Trainer::new(PartitionedModel::init(arch("mlp-16-16-3", 1), 2), &sgd(0.1), &OptimConfig::critic_default());
    let input = batches(&data, 16, 1, 3).remove(0);
    let out = t.stages_mut()[0].train_forward(0, input.xs.clone(), &input.targets).unwrap();
    let snapshot: Vec<u64> = t.stages().iter().flat_map(|s| all_bits(s.group.params())).collect();
    let critic_before = all_bits(t.stages()[0].critic.as_ref().unwrap().params());
    let noise = randn(&[16], &mut rng(1));
    t.stages_mut()[0].critic_update(0, noise.data()).unwrap();
    let after: Vec<u64> = t.stages().iter().flat_map(|s| all_bits(s.group.params())).collect();
    assert_eq!(snapshot, after);
    assert_ne!(critic_before, all_bits(t.stages()[0].critic.as_ref().unwrap().params()));
    assert_eq!(out.losses.len(), 16);
}

#[test]
fn sequential_runs_are_reproducible() {
    let data = spirals();
    let run = || {
        let mut t = Trainer::new(PartitionedModel::init(arch("mlp-16-16-3", 1), 4), &sgd(0.1), &OptimConfig::critic_default());
        let recs: Vec<_> = batches(&data, 16, 10, 5).into_iter().map(|b| t.step(b).unwrap()).collect();
        (recs, params_bits(&t))
    };
    assert_eq!(run(), run());
}

#[test]
fn degenerate_pipeline_matches_sequential_schedule() {
    let data = spirals();
    let input = batches(&data, 16, 40, 6);
    let model = PartitionedModel::init(arch("mlp-16-16-8-3", 2), 8);
    let mut seq = Trainer::new(model.clone(), &sgd(0.1), &OptimConfig::critic_default());
    let want: Vec<_> = input.iter().cloned().map(|b| seq.step(b).unwrap()).collect();
    let mut dec = Trainer::new(model, &sgd(0.1), &OptimConfig::critic_default());
    let mut got = Vec::new();
    let report = dec.run_decoupled(input, 1, |r| got.push(r)).unwrap();
    assert_eq!(got, want);
    assert_eq!(params_bits(&dec), params_bits(&seq));
    assert_eq!(dec.steps_done(), 40);
    assert!(report.conserved());
}

#[test]
fn free_running_pipeline_conserves_messages() {
    let data = spirals();
    let input = batches(&data, 16, 60, 7);
    let mut t = Trainer::new(PartitionedModel::init(arch("mlp-16-16-8-3", 2), 8), &sgd(0.1), &OptimConfig::critic_default());
    let mut ids = Vec::new();
    let report = t.run_decoupled(input, 4, |r| ids.push(r.batch_id)).unwrap();
    assert_eq!(ids, (0..60).collect::<Vec<_>>());
    assert_eq!(report.batches, 60);
    assert_eq!(report.links.len(), 2);
    for link in &report.links {
        assert!(link.conserved());
        assert_eq!(link.forwarded, (0..60).collect::<Vec<_>>());
    }
    assert_eq!(report.workers.len(), 3);
    for w in &report.workers {
        assert_eq!(w.forward_steps, 60);
        let u = w.utilization();
        assert!((0.0..=1.0).contains(&u));
    }
    assert_eq!(report.workers[0].critic_steps, 60);
    assert_eq!(report.workers[2].critic_steps, 0);

    let more = batches(&data, 16, 5, 8);
    let mut ids = Vec::new();
    t.run_decoupled(more, 2, |r| ids.push(r.batch_id)).unwrap();
    assert_eq!(ids, (60..65).collect::<Vec<_>>());
}

#[test]
fn numeric_failures_name_worker_and_batch() {
    let data = spirals();
    let mut input = batches(&data, 8, 3, 1);
    input[2].xs[0].data_mut()[0] = f64::NAN;
    let model = PartitionedModel::init(arch("mlp-16-16-3", 1), 1);

    let mut t = Trainer::new(model.clone(), &sgd(0.1), &OptimConfig::critic_default());
    t.set_check_finite(true);
    let mut err = None;
    for b in input.clone() {
        if let Err(e) = t.step(b) {
            err = Some(e);
            break;
        }
    }
    match err {
        Some(Error::Worker { index, batch_id, source }) => {
            assert_eq!((index, batch_id), (0, 2));
            assert!(matches!(*source, Error::NonFinite { .. }));
        }
        other => panic!("unexpected {other:?}"),
    }

    let mut t = Trainer::new(model, &sgd(0.1), &OptimConfig::critic_default());
    t.set_check_finite(true);
    match t.run_decoupled(input, 2, |_| {}) {
        Err(Error::Worker { index: 0, batch_id: 2, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn bad_batches_rejected() {
    let mut t = Trainer::new(PartitionedModel::init(arch("mlp-16-3", 1), 1), &sgd(0.1), &OptimConfig::critic_default());
    let bad = StepInput {
        xs: vec![Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2])],
        targets: Arc::new(vec![vec![0, 1], vec![0, 1]]),
    };
    assert!(matches!(t.step(bad), Err(Error::Worker { .. })));
    let single = StepInput::single(Tensor::zeros(&[1, 2]), vec![2]);
    t.step(single).unwrap();
}

fn char_arch(vocab: usize, layers: usize, units: usize, n: usize, bptt: usize) -> Architecture {
    let p = Preset::parse("lstm-stack", layers, units).unwrap();
    Architecture::build("lstm-stack", &p, n, &[vocab], vocab, Some(bptt)).unwrap()
}

fn char_input(vocab: usize, batch: usize, steps: usize, seed: u64) -> StepInput {
    let mut r = rng(seed);
    use rand::Rng;
    let ids: Vec<Vec<usize>> = (0..=steps).map(|_| (0..batch).map(|_| r.random_range(0..vocab)).collect()).collect();
    StepInput {
        xs: ids[..steps].iter().map(|s| one_hot(s, vocab).unwrap()).collect(),
        targets: Arc::new(ids[1..].to_vec()),
    }
}

#[test]
fn single_step_recurrence_is_the_feedforward_update() {
    let model = PartitionedModel::init(char_arch(6, 2, 5, 1, 1), 3);
    let input = char_input(6, 4, 1, 2);
    let mut t = Trainer::new(model.clone(), &sgd(0.1), &OptimConfig::critic_default());
    let out = t.stages_mut()[0].train_forward(0, input.xs.clone(), &input.targets).unwrap();

    let group = &model.groups[0];
    let mut tape = Tape::new();
    let x = tape.constant(input.xs[0].clone());
    let bound = group.bind(&mut tape);
    let mut st = vec![None; group.layers.len()];
    let h = group.forward(&mut tape, &bound, vec![x], &mut st).unwrap();
    let cb = model.critics[0].bind_constants(&mut tape);
    let mut cs = vec![None; 1];
    let z = model.critics[0].forward(&mut tape, &cb, h, &mut cs).unwrap();
    let per = tape.softmax_cross_entropy(&z[0], &input.targets[0]).unwrap();
    assert_eq!(tape.value(&per).data(), &out.losses[..]);
    let l = tape.mean(&per).unwrap();
    tape.backward(l).unwrap();
    let mut expect = group.clone();
    let grads: Vec<Tensor> = bound.iter().flatten().map(|&v| tape.grad(v).cloned().unwrap()).collect();
    let mut opt = lct_core::nn::Optimizer::new(sgd(0.1), expect.params());
    opt.step(expect.params_mut(), &grads).unwrap();
    assert_eq!(all_bits(expect.params()), all_bits(t.stages()[0].group.params()));
}

#[test]
fn untrained_char_model_is_near_uniform() {
    let vocab = 40;
    let model = PartitionedModel::init(char_arch(vocab, 2, 16, 1, 8), 5);
    let input = char_input(vocab, 8, 8, 3);
    let logits = model.forward(input.xs.clone()).unwrap();
    let mut g = Eager::new();
    let per = sequence_cross_entropy(&mut g, &logits, &input.targets).unwrap();
    let per_step = g.mean(&per).unwrap().item().unwrap() / 8.0;
    let ln_v = (vocab as f64).ln();
    assert!((per_step - ln_v).abs() < 0.1 * ln_v, "{per_step} vs {ln_v}");
}

#[test]
fn sequence_loss_is_sum_of_step_losses() {
    let vocab = 7;
    let model = PartitionedModel::init(char_arch(vocab, 2, 6, 1, 5), 8);
    let input = char_input(vocab, 3, 5, 4);
    let h = model.group_forward(0, input.xs.clone()).unwrap();
    let (per, _) = model.critic_loss(0, h.clone(), &input.targets).unwrap();
    let z = run_eager(&model.critics[0], h).unwrap();
    for b in 0..3 {
        let mut total = 0.0;
        for (t, zt) in z.iter().enumerate() {
            let row = zt.row(b);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            total += s.ln() + m - row[input.targets[t][b]];
        }
        assert!((per.data()[b] - total).abs() < 1e-12);
    }

    let mut t = Trainer::new(model, &OptimConfig::adam(1e-3), &OptimConfig::critic_default());
    let rec = t.step(input.clone()).unwrap();
    assert_eq!(rec.heads[0].steps, 5);
    assert!(t.stages().iter().all(|s| s.has_state()));
    t.reset_state();
    assert!(t.stages().iter().all(|s| !s.has_state()));
    let short = StepInput {
        xs: input.xs[..4].to_vec(),
        targets: Arc::new(input.targets[..4].to_vec()),
    };
    match t.step(short) {
        Err(Error::Worker { source, .. }) => assert!(matches!(*source, Error::Contract(_))),
        other => panic!("unexpected {other:?}"),
    }
}
