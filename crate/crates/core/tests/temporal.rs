use fusenav::data::LabeledFrame;
use fusenav::model::*;
use fusenav::numeric::{adam_step, grad_check, rng, AdamState, GradCheckOptions, Graph, Mode, ParamRegistry, Tensor};
use fusenav::sim::CameraConfig;
use fusenav::verify::check_frames;
use fusenav::{Error, Graph64, ModelState64, ParamRegistry64, Tensor64};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_row(n: usize, seed: u64, scale: f64) -> Tensor64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[1, n], (0..n).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

fn model(seed: u64) -> ModelState64 {
    init_model(&ModelConfig::default(), seed).unwrap()
}

fn subset(from: &ParamRegistry64, prefix: &[&str], jitter: u64) -> ParamRegistry64 {
    let mut r = ChaCha8Rng::seed_from_u64(jitter);
    let mut reg = ParamRegistry::new();
    for (name, t) in from.iter().filter(|(n, _)| prefix.iter().any(|p| n.starts_with(p))) {
        let mut t = t.clone();
        t.data_mut().iter_mut().for_each(|x| *x += r.gen_range(-0.1..0.1));
        reg.insert(name, t).unwrap();
    }
    reg
}

#[test]
fn temporal_delta_examples() {
    let f = random_row(64, 1, 1.0);
    let mut g = Graph64::new();
    let v = g.constant(f.clone()).unwrap();
    let first = temporal_delta(&mut g, v, None).unwrap();
    assert_eq!(g.shape(first), &[1, 128]);
    assert_eq!(&g.value(first).data()[..64], f.data());
    assert!(g.value(first).data()[64..].iter().all(|&x| x == 0.0));

    let same = g.constant(f.clone()).unwrap();
    let d = temporal_delta(&mut g, v, Some(same)).unwrap();
    assert!(g.value(d).data()[64..].iter().all(|&x| x == 0.0));

    let short = g.constant(Tensor::zeros(&[1, 63])).unwrap();
    assert!(matches!(temporal_delta(&mut g, v, Some(short)), Err(Error::Dimension(_))));
}

fn gru(params: &ParamRegistry64, x: &Tensor64, h: &Tensor64) -> Tensor64 {
    let mut g = Graph64::new();
    let xv = g.constant(x.clone()).unwrap();
    let hv = g.constant(h.clone()).unwrap();
    let out = recurrent_step(&mut g, params, xv, hv).unwrap();
    g.value(out).clone()
}

#[test]
fn gru_of_zeros_is_zero() {
    let m = model(2);
    let h = gru(&m.params, &Tensor::zeros(&[1, 128]), &Tensor::zeros(&[1, 64]));
    assert!(h.data().iter().all(|&x| x == 0.0));
}

proptest! {
    #[test]
    fn gru_keeps_the_hidden_state_inside_the_unit_cube(seed in any::<u64>(), xs in 0.1f64..2.0, hs in 0.01f64..0.999) {
        let m = model(seed % 7);
        let mut h = random_row(64, seed, hs);
        for t in 0..4 {
            h = gru(&m.params, &random_row(128, seed ^ (t + 1), xs), &h);
            prop_assert!(h.data().iter().all(|v| v.abs() < 1.0));
        }
    }

    // large inputs saturate tanh and sigmoid to exactly ±1 in f64
    #[test]
    fn gru_hidden_state_never_leaves_the_closed_cube(seed in any::<u64>(), xs in 2.0f64..200.0, hs in 0.01f64..0.999) {
        let m = model(seed % 7);
        let mut h = random_row(64, seed, hs);
        for t in 0..4 {
            h = gru(&m.params, &random_row(128, seed ^ (t + 1), xs), &h);
            prop_assert!(h.data().iter().all(|v| v.abs() <= 1.0));
        }
    }
}

#[test]
fn three_unrolled_gru_steps_pass_grad_check() {
    let mut reg = subset(&model(3).params, &["gru."], 4);
    let xs: Vec<Tensor64> = (0..3).map(|t| random_row(128, 10 + t, 1.0)).collect();
    let probe = random_row(64, 20, 1.0);
    let rep = grad_check(
        &mut reg,
        |g, p| {
            let mut h = g.constant(Tensor::zeros(&[1, 64]))?;
            for x in &xs {
                let xv = g.constant(x.clone())?;
                h = recurrent_step(g, p, xv, h)?;
            }
            let k = g.constant(probe.clone())?;
            let y = g.mul(h, k)?;
            g.sum(y)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.passed, "{:?}", rep.worst());
}

fn attend(params: &ParamRegistry64, h: &Tensor64, window: &[Tensor64]) -> fusenav::Result<(Tensor64, Tensor64)> {
    let mut g = Graph64::new();
    let hv = g.constant(h.clone())?;
    let ws = window.iter().map(|w| g.constant(w.clone())).collect::<fusenav::Result<Vec<_>>>()?;
    let (out, alpha) = temporal_attention(&mut g, params, hv, &ws)?;
    Ok((g.value(out).clone(), g.value(alpha).clone()))
}

fn row_times(x: &Tensor64, m: &Tensor64) -> Vec<f64> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    (0..c).map(|j| (0..r).map(|i| x.data()[i] * m.data()[i * c + j]).sum()).collect()
}

#[test]
fn temporal_attention_examples() {
    let m = model(5);
    let h = random_row(64, 1, 0.9);
    let w0 = random_row(64, 2, 1.0);
    let (out, alpha) = attend(&m.params, &h, &[w0.clone()]).unwrap();
    assert_eq!(alpha.data(), &[1.0]);
    let want = row_times(&w0, m.params.get("tattn.v").unwrap());
    for (a, b) in out.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }

    let (same, alpha) = attend(&m.params, &h, &[w0.clone(), w0.clone(), w0.clone()]).unwrap();
    for (a, b) in same.data().iter().zip(out.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(alpha.data().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-12));

    let window: Vec<Tensor64> = (0..4).map(|i| random_row(64, 30 + i, 2.0)).collect();
    let (_, alpha) = attend(&m.params, &h, &window).unwrap();
    assert_eq!(alpha.shape(), &[1, 4]);
    assert!(alpha.data().iter().all(|&a| a > 0.0));
    assert!((alpha.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);

    assert!(matches!(attend(&m.params, &h, &[]), Err(Error::Contract(_))));
}

fn head(params: &ParamRegistry64, h: &Tensor64, c: &Tensor64, f: &Tensor64, mode: Mode) -> Tensor64 {
    let mut g = Graph64::new();
    let (hv, cv, fv) = (g.constant(h.clone()).unwrap(), g.constant(c.clone()).unwrap(), g.constant(f.clone()).unwrap());
    let out = decision_forward(&mut g, params, hv, cv, fv, &TemporalConfig::default(), 0.1, &mut rng::seeded(0), mode).unwrap();
    g.value(out).clone()
}

#[test]
fn decision_head_examples() {
    let mut m = model(6);
    let z64 = Tensor::zeros(&[1, 64]);
    let out = head(&m.params, &z64, &z64, &z64, Mode::Eval);
    assert_eq!(out.shape(), &[1, 5]);
    assert!(out.data().iter().all(|&x| x == 0.0));

    let nonzero = head(&m.params, &random_row(64, 1, 1.0), &random_row(64, 2, 1.0), &random_row(64, 3, 1.0), Mode::Eval);
    assert!(nonzero.data().iter().any(|&x| x != 0.0));
    m.params.get_mut("head.l2.w").unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
    let out = head(&m.params, &random_row(64, 1, 1.0), &random_row(64, 2, 1.0), &random_row(64, 3, 1.0), Mode::Train);
    assert!(out.data().iter().all(|&x| x == 0.0));
}

proptest! {
    #[test]
    fn decision_outputs_stay_inside_their_bounds(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut m = model(seed % 5);
        for name in ["head.l1.w", "head.l2.w", "head.l2.b"] {
            let t = m.params.get_mut(name).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            t.data_mut().iter_mut().for_each(|x| *x = r.gen_range(-scale..scale));
        }
        let cfg = TemporalConfig::default();
        for mode in [Mode::Eval, Mode::Train] {
            let out = head(&m.params, &random_row(64, seed, 1.0), &random_row(64, seed ^ 1, 5.0), &random_row(64, seed ^ 2, 1.0), mode);
            let d = out.data();
            prop_assert!(d[..2].iter().all(|v| v.abs() <= cfg.waypoint_range));
            prop_assert!(d[2..].iter().all(|v| v.abs() <= cfg.max_step));
        }
    }
}

#[test]
fn attention_and_head_pass_grad_check() {
    let mut reg = subset(&model(7).params, &["tattn.", "head."], 8);
    let h = random_row(64, 1, 0.8);
    let window: Vec<Tensor64> = (0..3).map(|i| random_row(64, 2 + i, 1.0)).collect();
    let fused = random_row(64, 9, 1.0);
    let rep = grad_check(
        &mut reg,
        |g, p| {
            let hv = g.constant(h.clone())?;
            let ws = window.iter().map(|w| g.constant(w.clone())).collect::<fusenav::Result<Vec<_>>>()?;
            let (ctx, _) = temporal_attention(g, p, hv, &ws)?;
            let fv = g.constant(fused.clone())?;
            let out = decision_forward(g, p, hv, ctx, fv, &TemporalConfig::default(), 0.0, &mut rng::seeded(0), Mode::Eval)?;
            let k = g.constant(random_row(5, 11, 1.0))?;
            let y = g.mul(out, k)?;
            g.sum(y)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.passed, "{:?}", rep.worst());
}

fn frames(n: usize, seed: u64) -> Vec<LabeledFrame> {
    check_frames(CameraConfig::default(), n, seed).unwrap()
}

fn run(m: &mut ModelState64, frames: &[LabeledFrame], seed: u64) -> Vec<(NavOutput, Tensor64, TemporalState<f64>)> {
    let cfg = ModelConfig::default();
    let mut r = rng::seeded(seed);
    let mut state = TemporalState::new(cfg.temporal.hidden_dim);
    let mut out = Vec::new();
    for lf in frames {
        let s = pipeline_step(&lf.frame, &state, &m.params, &mut m.buffers, &cfg, Mode::Eval, 0.0, &mut r).unwrap();
        state = s.state.clone();
        out.push((s.nav, s.fused.vector, s.state));
    }
    out
}

#[test]
fn pipeline_is_deterministic_and_stationary_on_repeats() {
    let fs = frames(6, 1);
    let mut a = model(1);
    let mut b = model(1);
    let ra = run(&mut a, &fs, 3);
    let rb = run(&mut b, &fs, 3);
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!(x.0, y.0);
        assert_eq!(x.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    let repeated = vec![fs[0].clone(), fs[0].clone()];
    let r = run(&mut a, &repeated, 0);
    // identical frames fuse to identical vectors, so the second delta is zero
    assert_eq!(r[0].1, r[1].1);
    assert_eq!(r[1].2.prev_fused.as_ref(), Some(&r[1].1));
}

#[test]
fn state_is_causal_bounded_and_windowed() {
    let fs = frames(7, 2);
    let mut m = model(2);
    let base = run(&mut m, &fs, 0);
    let mut altered = fs.clone();
    altered[5].frame.image = fusenav::data::Image::filled(altered[5].frame.image.width, altered[5].frame.image.height, [9, 9, 9]);
    altered[6].frame.cloud.points.truncate(10);
    let changed = run(&mut m, &altered, 0);
    for t in 0..5 {
        assert_eq!(base[t].0, changed[t].0, "frame {t} depends on the future");
    }
    assert_ne!(base[5].0, changed[5].0);

    for (t, (_, fused, state)) in base.iter().enumerate() {
        assert!(state.hidden.data().iter().all(|v| v.abs() < 1.0));
        assert_eq!(state.window.len(), (t + 1).min(4));
        assert_eq!(state.window.back(), Some(fused));
    }
    assert_eq!(base[6].2.window.front(), Some(&base[3].1));
}

#[test]
fn one_small_step_on_a_repeated_frame_lowers_the_loss() {
    let lf = frames(1, 4).remove(0);
    let seq = vec![lf.clone(), lf.clone()];
    let cfg = ModelConfig::default();
    let mut m = model(4);
    let loss = |m: &mut ModelState64, backward: bool| -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let mut state = TemporalState::<f64>::new(cfg.temporal.hidden_dim).to_graph(&mut g).unwrap();
        let mut r = rng::seeded(0);
        let mut terms = Vec::new();
        for f in &seq {
            let out = fusenav::model::pipeline::forward_frame(
                &mut g, &f.frame, &mut state, &m.params, &mut m.buffers, &cfg, Mode::Eval, 0.0, &mut r, &mut StageTimes::default(),
            )
            .unwrap();
            terms.push(frame_loss(&mut g, out.nav, f).unwrap());
        }
        let total = g.add(terms[0], terms[1]).unwrap();
        let value = g.scalar(total);
        if backward {
            m.params.zero_grads();
            g.backward(total, &mut m.params).unwrap();
        }
        value
    };
    let before = loss(&mut m, true);
    let mut adam = AdamState::default();
    adam_step(&mut m.params, &mut adam, 1e-3, 0.0).unwrap();
    let after = loss(&mut m, false);
    assert!(after < before, "{after} !< {before}");
}
