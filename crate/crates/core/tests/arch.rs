mod common;

use common::{conv1x1, dwconv, gelu, layer_norm, perturb, pv, random_tensor, relu, sigmoid, Img};
use demoire::arch::*;
use demoire::tensor::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build<B>(seed: u64, f: impl FnOnce(&mut Builder<'_>) -> demoire::Result<B>) -> (B, ParamStore<f64>) {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = {
        let mut b = Builder::new(&mut store, &mut rng);
        f(&mut b).unwrap()
    };
    (block, store.cast())
}

fn run(store: &ParamStore<f64>, f: impl FnOnce(&mut Tape<'_, f64>) -> demoire::Result<Var>) -> Tensor<f64> {
    let mut t = Tape::new(store);
    let v = f(&mut t).unwrap();
    t.value(v).clone()
}

fn set(store: &mut ParamStore<f64>, id: ParamId, v: f64) {
    store.tensor_mut(id).data_mut().iter_mut().for_each(|x| *x = v);
}

fn check_grads(store: &ParamStore<f64>, tol: f64, f: impl Fn(&mut Tape<'_, f64>) -> demoire::Result<Var>) {
    let opts = GradCheckOptions {
        max_probes: 1500,
        ..Default::default()
    };
    let rep = grad_check(store, f, &opts).unwrap();
    assert!(rep.passed(tol), "worst {:?}", rep.worst());
}

#[test]
fn conv_3_to_3_has_twelve_params() {
    let (_, store) = build(0, |b| Conv::new(b, "c", 3, 3));
    assert_eq!(store.num_scalars(), 12);
}

#[test]
fn default_param_budget() {
    let full = count_params(&DsdNetConfig::default()).unwrap();
    assert!((2_490_000..=3_050_000).contains(&full), "{full}");
    let doubled = DsdNetConfig {
        base_channels: 72,
        ..Default::default()
    };
    assert!(count_params(&doubled).unwrap() > 3 * full);
    let no_ycc = DsdNetConfig {
        variant: Variant::NoYcc,
        ..Default::default()
    };
    assert!(count_params(&no_ycc).unwrap() < full);
}

#[test]
fn param_names_enumerate_each_tensor_once() {
    for v in Variant::ALL {
        let cfg = DsdNetConfig { variant: v, ..DsdNetConfig::tiny() };
        let (_, store) = DsdNet::new(&cfg, 3).unwrap();
        let mut names: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n, "{v}");
    }
}

#[test]
fn config_validation() {
    let bad = DsdNetConfig {
        base_channels: 6,
        heads: vec![1, 4],
        ..DsdNetConfig::tiny()
    };
    assert!(bad.validate().is_err());
    let bad = DsdNetConfig {
        n_scales: 0,
        ..DsdNetConfig::tiny()
    };
    assert!(bad.validate().is_err());
    assert!(Variant::parse("no_sadm").is_ok());
    assert!(Variant::parse("bogus").is_err());
}

#[test]
fn forward_shapes_default_config() {
    let (net, store) = DsdNet::new(&DsdNetConfig::default(), 1).unwrap();
    let raw = Tensor::from_fn([1, 4, 64, 64], |[_, c, y, x]| ((c + y + 2 * x) % 7) as f32 / 7.0);
    let guide = Tensor::from_fn([1, 3, 64, 64], |[_, c, y, x]| ((c + 3 * y + x) % 5) as f32 / 5.0);
    let (srgb, aux, flops) = net.infer(&store, &raw, &guide).unwrap();
    assert_eq!(srgb.shape(), [1, 3, 128, 128]);
    assert_eq!(aux.shape(), [1, 3, 64, 64]);
    assert!(flops > 0);
    assert_eq!(net.invocations(), 1);
    assert_eq!(net.images_processed(), 1);
    assert_eq!(net.image_round_trips(), 0);
}

#[test]
fn forward_rejects_indivisible_size() {
    let (net, store) = DsdNet::new(&DsdNetConfig::tiny(), 1).unwrap();
    let raw = Tensor::zeros([1, 4, 15, 16]);
    let guide = Tensor::zeros([1, 3, 15, 16]);
    assert!(matches!(net.infer(&store, &raw, &guide), Err(demoire::Error::Shape(_))));
}

#[test]
fn initial_output_is_nearest_reconstruction() {
    let (net, store) = DsdNet::new(&DsdNetConfig::tiny(), 2).unwrap();
    let raw = Tensor::from_fn([1, 4, 8, 8], |[_, c, y, x]| (c * 64 + y * 8 + x) as f32 / 256.0);
    let guide = Tensor::zeros([1, 3, 8, 8]);
    let (srgb, aux, _) = net.infer(&store, &raw, &guide).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            let (py, px) = (y / 2, x / 2);
            let r = raw.at([0, 0, py, px]);
            let g = 0.5 * (raw.at([0, 1, py, px]) + raw.at([0, 2, py, px]));
            let b = raw.at([0, 3, py, px]);
            assert!((srgb.at([0, 0, y, x]) - r).abs() < 1e-6);
            assert!((srgb.at([0, 1, y, x]) - g).abs() < 1e-6);
            assert!((srgb.at([0, 2, y, x]) - b).abs() < 1e-6);
        }
    }
    assert!(aux.data().iter().all(|&v| v == 0.0));
}

#[test]
fn every_variant_runs_forward_and_backward() {
    for v in Variant::ALL {
        let cfg = DsdNetConfig { variant: v, ..DsdNetConfig::tiny() };
        let (net, store) = DsdNet::new(&cfg, 5).unwrap();
        let mut t = Tape::new(&store);
        let raw = t.constant(Tensor::full([2, 4, 8, 8], 0.3));
        let guide = t.constant(Tensor::full([2, 3, 8, 8], 0.2));
        let out = net.forward(&mut t, raw, guide).unwrap();
        assert_eq!(t.shape(out.srgb), [2, 3, 16, 16]);
        assert_eq!(t.shape(out.aux), [2, 3, 8, 8]);
        assert_eq!(out.image_round_trips, 0, "{v}");
        let target = Tensor::full([2, 3, 16, 16], 0.5);
        let loss = t.l1_loss(out.srgb, &target).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.iter().count() > 0, "{v}");
    }
}

#[test]
fn tiny_net_gradients() {
    let cfg = DsdNetConfig::tiny();
    let (net, store) = DsdNet::new(&cfg, 11).unwrap();
    let mut store: ParamStore<f64> = store.cast();
    perturb(&mut store, 0.05, 1);
    let raw = random_tensor([1, 4, 16, 16], 0.0, 1.0, 2);
    let guide = random_tensor([1, 3, 16, 16], -0.5, 1.0, 3);
    let t_rgb = random_tensor([1, 3, 32, 32], 0.0, 1.0, 4);
    let t_aux = random_tensor([1, 3, 16, 16], 0.0, 1.0, 5);
    check_grads(&store, 1e-3, |t| {
        let r = t.constant(raw.clone());
        let g = t.constant(guide.clone());
        let out = net.forward(t, r, g)?;
        let a = t.mse_loss(out.srgb, &t_rgb)?;
        let b = t.mse_loss(out.aux, &t_aux)?;
        t.add(a, b)
    });
}

fn gmlp_oracle(store: &ParamStore<f64>, g: &Gmlp, x: &Img) -> Img {
    let n = layer_norm(x, &pv(store, g.norm.gamma), &pv(store, g.norm.beta), 1e-6);
    let e = conv1x1(&n, &pv(store, g.expand.w), Some(&pv(store, g.expand.b.unwrap())));
    let h = e.c / 2;
    let d = dwconv(&e.channels(h, h), &pv(store, g.dw.w), 1);
    let prod = e.channels(0, h).zip(&d, |a, b| a * b);
    let p = conv1x1(&prod, &pv(store, g.project.w), Some(&pv(store, g.project.b.unwrap())));
    x.zip(&p, |a, b| a + b)
}

#[test]
fn gmlp_identity_at_init() {
    let (g, store) = build(1, |b| Gmlp::new(b, 8, 2.0));
    let x = random_tensor([1, 8, 4, 4], -1.0, 1.0, 0);
    let y = run(&store, |t| {
        let v = t.constant(x.clone());
        g.forward(t, v)
    });
    assert_eq!(y, x);
}

#[test]
fn gmlp_zero_dw_is_identity() {
    let (g, mut store) = build(1, |b| Gmlp::new(b, 8, 2.0));
    perturb(&mut store, 0.3, 9);
    set(&mut store, g.dw.w, 0.0);
    set(&mut store, g.project.b.unwrap(), 0.0);
    let x = random_tensor([1, 8, 4, 4], -1.0, 1.0, 0);
    let y = run(&store, |t| {
        let v = t.constant(x.clone());
        g.forward(t, v)
    });
    assert_eq!(y, x);
}

#[test]
fn gmlp_matches_composition_oracle() {
    let (g, mut store) = build(2, |b| Gmlp::new(b, 8, 2.0));
    perturb(&mut store, 0.3, 4);
    let x = random_tensor([1, 8, 4, 4], -1.0, 1.0, 1);
    let y = run(&store, |t| {
        let v = t.constant(x.clone());
        g.forward(t, v)
    });
    let want = gmlp_oracle(&store, &g, &Img::from_tensor(&x));
    assert!(want.max_diff(&y) < 1e-12);
}

#[test]
fn ss2d_and_cmb_identity_at_init() {
    let (c, store) = build(3, |b| Cmb::new(b, 8, 4, 2.0));
    let x = random_tensor([1, 8, 5, 3], -1.0, 1.0, 2);
    let y = run(&store, |t| {
        let v = t.constant(x.clone());
        c.forward(t, v)
    });
    assert_eq!(y, x);
}

#[test]
fn ss2d_single_pixel_scans_coincide() {
    let (s, mut store) = build(4, |b| Ss2d::new(b, 6, 4));
    perturb(&mut store, 0.2, 5);
    let d0 = s.directions[0].clone();
    for d in &s.directions[1..] {
        for (src, dst) in [
            (d0.delta_down.w, d.delta_down.w),
            (d0.delta_down.b.unwrap(), d.delta_down.b.unwrap()),
            (d0.delta_up.w, d.delta_up.w),
            (d0.delta_up.b.unwrap(), d.delta_up.b.unwrap()),
            (d0.b_proj.w, d.b_proj.w),
            (d0.b_proj.b.unwrap(), d.b_proj.b.unwrap()),
            (d0.c_proj.w, d.c_proj.w),
            (d0.c_proj.b.unwrap(), d.c_proj.b.unwrap()),
            (d0.a_log, d.a_log),
        ] {
            let v = store.tensor(src).clone();
            *store.tensor_mut(dst) = v;
        }
    }
    let x = random_tensor([1, 6, 1, 1], -1.0, 1.0, 3);
    let sum = run(&store, |t| {
        let v = t.constant(x.clone());
        s.scan_sum(t, v)
    });
    let one = run(&store, |t| {
        let v = t.constant(x.clone());
        let n = s.norm.forward(t, v)?;
        let u = s.in_proj.forward(t, n)?;
        let lo = d0.delta_down.forward(t, u)?;
        let hi = d0.delta_up.forward(t, lo)?;
        let delta = t.softplus(hi);
        let bm = d0.b_proj.forward(t, u)?;
        let cm = d0.c_proj.forward(t, u)?;
        let a = t.param(d0.a_log);
        t.selective_scan(u, delta, bm, cm, a, ScanOrder::RowForward)
    });
    for (a, b) in sum.data().iter().zip(one.data()) {
        assert!((a - 4.0 * b).abs() < 1e-12);
    }
}

#[test]
fn cmb_is_gmlp_after_ss2d() {
    let (c, mut store) = build(5, |b| Cmb::new(b, 8, 4, 2.0));
    perturb(&mut store, 0.1, 6);
    let x = random_tensor([1, 8, 4, 4], -1.0, 1.0, 4);
    let whole = run(&store, |t| {
        let v = t.constant(x.clone());
        c.forward(t, v)
    });
    let mid = run(&store, |t| {
        let v = t.constant(x.clone());
        c.ss2d.forward(t, v)
    });
    let steps = run(&store, |t| {
        let v = t.constant(mid.clone());
        c.gmlp.forward(t, v)
    });
    assert_eq!(whole, steps);
}

#[test]
fn cgb_identity_and_weight_range() {
    let (c, mut store) = build(6, |b| Cgb::new(b, 8));
    let x = random_tensor([1, 8, 6, 6], -1.0, 1.0, 5);
    let at_init = run(&store, |t| {
        let v = t.constant(x.clone());
        c.forward(t, v)
    });
    assert_eq!(at_init, x);

    perturb(&mut store, 0.3, 7);
    let mut t = Tape::new(&store);
    let v = t.constant(x.clone());
    let tr = c.trace(&mut t, v).unwrap();
    assert!(t.value(tr.weights).data().iter().all(|&w| w > 0.0 && w < 1.0));

    // All-ones attention and zero convolutions.
    for conv in [&c.in_proj, &c.fuse, &c.out_proj] {
        set(&mut store, conv.w, 0.0);
        set(&mut store, conv.b.unwrap(), 0.0);
    }
    for d in &c.dilated {
        set(&mut store, d.w, 0.0);
    }
    set(&mut store, c.excite.b.unwrap(), 40.0);
    let y = run(&store, |t| {
        let v = t.constant(x.clone());
        c.forward(t, v)
    });
    assert_eq!(y, x);
}

#[test]
fn attention_single_channel_heads_return_v() {
    let (tau, store) = build(0, |b| b.param("tau", [4, 1, 1, 1], Init::Const(0.7)));
    let q = random_tensor([1, 4, 3, 3], -1.0, 1.0, 1);
    let k = random_tensor([1, 4, 3, 3], -1.0, 1.0, 2);
    let v = random_tensor([1, 4, 3, 3], -1.0, 1.0, 3);
    let out = run(&store, |t| {
        let (q, k, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let tau = t.param(tau);
        Ok(channel_attention(t, q, k, vv, tau, 4)?.out)
    });
    assert_eq!(out, v);
}

#[test]
fn attention_matches_dense_oracle() {
    let (tau, mut store) = build(0, |b| b.param("tau", [1, 1, 1, 1], Init::Const(2.0)));
    perturb(&mut store, 0.5, 3);
    let q = random_tensor([1, 4, 2, 2], -1.0, 1.0, 4);
    let k = random_tensor([1, 4, 2, 2], -1.0, 1.0, 5);
    let v = random_tensor([1, 4, 2, 2], -1.0, 1.0, 6);
    let mut t = Tape::new(&store);
    let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let tv = t.param(tau);
    let a = channel_attention(&mut t, qv, kv, vv, tv, 1).unwrap();
    let (want, attn) = channel_attention_oracle(&store, tau, &q, &k, &v);
    assert!(want.max_diff(t.value(a.out)) < 1e-12);
    let got = t.value(a.attn);
    assert_eq!(got.shape(), [1, 1, 4, 4]);
    for i in 0..4 {
        for j in 0..4 {
            assert!((got.at([0, 0, i, j]) - attn[0][i][j]).abs() < 1e-12);
        }
    }
}

fn channel_attention_oracle(
    store: &ParamStore<f64>,
    tau: ParamId,
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
) -> (Img, Vec<Vec<Vec<f64>>>) {
    let taus = pv(store, tau);
    common::channel_attention(&Img::from_tensor(q), &Img::from_tensor(k), &Img::from_tensor(v), &taus, taus.len())
}

#[test]
fn gate_saturation() {
    let (g, mut store) = build(7, |b| DynamicGate::new(b, 4));
    let a = random_tensor([1, 4, 3, 3], -1.0, 1.0, 1);
    let b = random_tensor([1, 4, 3, 3], -1.0, 1.0, 2);
    let alpha = |store: &ParamStore<f64>| {
        run(store, |t| {
            let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
            g.forward(t, x, y)
        })
    };
    set(&mut store, g.c2.w, 0.0);
    set(&mut store, g.c2.b.unwrap(), 20.0);
    assert!(alpha(&store).data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    set(&mut store, g.c2.b.unwrap(), 0.0);
    assert!(alpha(&store).data().iter().all(|&v| v == 0.5));
}

fn sadm_trace_values(store: &ParamStore<f64>, s: &Sadm, fr: &Tensor<f64>, fy: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut t = Tape::new(store);
    let (a, b) = (t.constant(fr.clone()), t.constant(fy.clone()));
    let tr = s.trace(&mut t, a, b).unwrap();
    [
        tr.raw,
        tr.ycc,
        tr.alpha,
        tr.a_raw_to_ycc.out,
        tr.a_ycc_to_raw.out,
        tr.fused,
        tr.m_raw,
        tr.m_ycc,
        tr.a_raw_to_ycc.attn,
        tr.a_ycc_to_raw.attn,
    ]
    .iter()
    .map(|&v| t.value(v).clone())
    .collect()
}

#[test]
fn sadm_ranges_and_convexity() {
    let (s, mut store) = build(8, |b| Sadm::new(b, 8, 2, 2.0));
    perturb(&mut store, 0.3, 2);
    let fr = random_tensor([1, 8, 5, 5], -1.0, 1.0, 1);
    let fy = random_tensor([1, 8, 5, 5], -1.0, 1.0, 2);
    let v = sadm_trace_values(&store, &s, &fr, &fy);
    assert_eq!(v[0].shape(), fr.shape());
    assert_eq!(v[1].shape(), fy.shape());
    for gate in [&v[2], &v[6], &v[7]] {
        assert!(gate.data().iter().all(|&a| a > 0.0 && a < 1.0));
    }
    for attn in [&v[8], &v[9]] {
        for row in attn.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    for ((&f, &a1), &a2) in v[5].data().iter().zip(v[3].data()).zip(v[4].data()) {
        assert!(f >= a1.min(a2) - 1e-12 && f <= a1.max(a2) + 1e-12);
    }
}

#[test]
fn sadm_identity_with_zero_values() {
    let (s, mut store) = build(9, |b| Sadm::new(b, 8, 2, 2.0));
    perturb(&mut store, 0.3, 3);
    for kv in [&s.kv_raw, &s.kv_ycc] {
        let w = store.tensor_mut(kv.w).data_mut();
        w[8 * 8..].iter_mut().for_each(|v| *v = 0.0);
        store.tensor_mut(kv.b.unwrap()).data_mut()[8..].iter_mut().for_each(|v| *v = 0.0);
    }
    for conv in [&s.project, &s.ffn.expand, &s.ffn.project] {
        set(&mut store, conv.b.unwrap(), 0.0);
    }
    for m in [&s.mod_raw, &s.mod_ycc] {
        set(&mut store, m.c2.w, 0.0);
        set(&mut store, m.c2.b.unwrap(), 40.0);
    }
    let fr = random_tensor([1, 8, 4, 4], -1.0, 1.0, 1);
    let fy = random_tensor([1, 8, 4, 4], -1.0, 1.0, 2);
    let v = sadm_trace_values(&store, &s, &fr, &fy);
    assert!(v[0].max_abs_diff(&fr) < 1e-12);
    assert!(v[1].max_abs_diff(&fy) < 1e-12);
}

#[test]
fn sadm_tied_projections_make_fusion_gate_free() {
    let (s, mut store) = build(10, |b| Sadm::new(b, 8, 2, 2.0));
    perturb(&mut store, 0.3, 4);
    for (src, dst) in [
        (s.norm_raw.gamma, s.norm_ycc.gamma),
        (s.norm_raw.beta, s.norm_ycc.beta),
        (s.q_raw.w, s.q_ycc.w),
        (s.q_raw.b.unwrap(), s.q_ycc.b.unwrap()),
        (s.kv_raw.w, s.kv_ycc.w),
        (s.kv_raw.b.unwrap(), s.kv_ycc.b.unwrap()),
    ] {
        let v = store.tensor(src).clone();
        *store.tensor_mut(dst) = v;
    }
    let f = random_tensor([1, 8, 4, 4], -1.0, 1.0, 9);
    set(&mut store, s.gate.c2.b.unwrap(), 8.0);
    let hi = sadm_trace_values(&store, &s, &f, &f);
    set(&mut store, s.gate.c2.b.unwrap(), -8.0);
    let lo = sadm_trace_values(&store, &s, &f, &f);
    assert!(hi[2].data()[0] > 0.9 && lo[2].data()[0] < 0.1);
    assert!(hi[5].max_abs_diff(&lo[5]) < 1e-12);
}

#[test]
fn sadm_gradients() {
    let (s, mut store) = build(11, |b| Sadm::new(b, 8, 2, 2.0));
    perturb(&mut store, 0.2, 5);
    let fr = random_tensor([1, 8, 8, 8], -1.0, 1.0, 1);
    let fy = random_tensor([1, 8, 8, 8], -1.0, 1.0, 2);
    let tr = random_tensor([1, 8, 8, 8], -1.0, 1.0, 3);
    let ty = random_tensor([1, 8, 8, 8], -1.0, 1.0, 4);
    check_grads(&store, 1e-3, |t| {
        let (a, b) = (t.constant(fr.clone()), t.constant(fy.clone()));
        let (r, y) = s.forward(t, a, b)?;
        let l1 = t.mse_loss(r, &tr)?;
        let l2 = t.mse_loss(y, &ty)?;
        t.add(l1, l2)
    });
}

fn lcat_oracle(store: &ParamStore<f64>, l: &Lcat, fr: &Img, fy: &Img) -> (Img, Img) {
    let ln = |n: &Norm, x: &Img| layer_norm(x, &pv(store, n.gamma), &pv(store, n.beta), 1e-6);
    let cv = |c: &Conv, x: &Img| conv1x1(x, &pv(store, c.w), Some(&pv(store, c.b.unwrap())));
    let nr = ln(&l.norm_rgb, fr);
    let ny = ln(&l.norm_ycc, fy);
    let gate = cv(&l.gate.c2, &cv(&l.gate.c1, &nr).map(relu)).map(sigmoid);
    let fm = ny.zip(&gate, |a, b| a * b).zip(&nr, |a, b| a + b);
    let qk = cv(&l.qk, &fm);
    let v = cv(&l.v, &nr);
    let c = fr.c;
    let (att, _) = common::channel_attention(
        &qk.channels(0, c),
        &qk.channels(c, c),
        &v,
        &pv(store, l.temperature),
        l.heads,
    );
    let a = fr.zip(&cv(&l.project, &att), |x, y| x + y);
    let n = ln(&l.norm_ffn, &a);
    let e = cv(&l.ffn.expand, &n);
    let d = dwconv(&e, &pv(store, l.ffn.dw.w), 1);
    let h = d.c / 2;
    let m = d.channels(0, h).map(gelu).zip(&d.channels(h, h), |x, y| x * y);
    (a.zip(&cv(&l.ffn.project, &m), |x, y| x + y), gate)
}

#[test]
fn lcat_matches_composition_oracle() {
    let (l, mut store) = build(12, |b| Lcat::new(b, 8, 2, 2.0));
    perturb(&mut store, 0.3, 6);
    let fr = random_tensor([1, 8, 4, 4], -1.0, 1.0, 1);
    let fy = random_tensor([1, 8, 4, 4], -1.0, 1.0, 2);
    let mut t = Tape::new(&store);
    let (a, b) = (t.constant(fr.clone()), t.constant(fy.clone()));
    let tr = l.trace(&mut t, a, b).unwrap();
    let (want, gate) = lcat_oracle(&store, &l, &Img::from_tensor(&fr), &Img::from_tensor(&fy));
    assert!(want.max_diff(t.value(tr.out)) < 1e-12);
    assert!(gate.max_diff(t.value(tr.gate)) < 1e-12);
    assert!(t.value(tr.gate).data().iter().all(|&g| g > 0.0 && g < 1.0));
    for row in t.value(tr.attention.attn).data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn lcat_identity_at_init() {
    let (l, store) = build(13, |b| Lcat::new(b, 8, 2, 2.0));
    let fr = random_tensor([1, 8, 4, 4], -1.0, 1.0, 1);
    let fy = random_tensor([1, 8, 4, 4], -1.0, 1.0, 2);
    let y = run(&store, |t| {
        let (a, b) = (t.constant(fr.clone()), t.constant(fy.clone()));
        l.forward(t, a, b)
    });
    assert_eq!(y, fr);
}

#[test]
fn block_gradients() {
    let x = random_tensor([1, 8, 6, 6], -1.0, 1.0, 1);
    let y = random_tensor([1, 8, 6, 6], -1.0, 1.0, 2);
    let target = random_tensor([1, 8, 6, 6], -1.0, 1.0, 3);

    let (g, mut s) = build(20, |b| Gmlp::new(b, 8, 2.0));
    perturb(&mut s, 0.2, 1);
    check_grads(&s, 1e-3, |t| {
        let v = t.constant(x.clone());
        let o = g.forward(t, v)?;
        t.mse_loss(o, &target)
    });

    let (ss, mut s) = build(21, |b| Ss2d::new(b, 8, 4));
    perturb(&mut s, 0.2, 2);
    check_grads(&s, 1e-3, |t| {
        let v = t.constant(x.clone());
        let o = ss.forward(t, v)?;
        t.mse_loss(o, &target)
    });

    let (c, mut s) = build(22, |b| Cgb::new(b, 8));
    perturb(&mut s, 0.2, 3);
    check_grads(&s, 1e-3, |t| {
        let v = t.constant(x.clone());
        let o = c.forward(t, v)?;
        t.mse_loss(o, &target)
    });

    let (l, mut s) = build(23, |b| Lcat::new(b, 8, 2, 2.0));
    perturb(&mut s, 0.2, 4);
    check_grads(&s, 1e-3, |t| {
        let (a, b) = (t.constant(x.clone()), t.constant(y.clone()));
        let o = l.forward(t, a, b)?;
        t.mse_loss(o, &target)
    });
}

#[test]
fn cmb_gate_and_cross_attention_gradients() {
    let x = random_tensor([1, 8, 6, 6], -1.0, 1.0, 4);
    let y = random_tensor([1, 8, 6, 6], -1.0, 1.0, 5);
    let target = random_tensor([1, 8, 6, 6], -1.0, 1.0, 6);

    let (m, mut s) = build(24, |b| Cmb::new(b, 8, 4, 2.0));
    perturb(&mut s, 0.2, 5);
    check_grads(&s, 1e-3, |t| {
        let v = t.constant(x.clone());
        let o = m.forward(t, v)?;
        t.mse_loss(o, &target)
    });

    let (g, mut s) = build(25, |b| DynamicGate::new(b, 8));
    perturb(&mut s, 0.3, 6);
    let alpha_t = random_tensor([1, 1, 6, 6], 0.0, 1.0, 7);
    check_grads(&s, 1e-3, |t| {
        let (a, b) = (t.constant(x.clone()), t.constant(y.clone()));
        let o = g.forward(t, a, b)?;
        t.mse_loss(o, &alpha_t)
    });

    // Queries, keys and values are parameters here so their gradients are probed too.
    let (ids, s) = build(26, |b| {
        Ok([
            b.param("q", [1, 8, 4, 4], Init::TruncNormal(0.5))?,
            b.param("k", [1, 8, 4, 4], Init::TruncNormal(0.5))?,
            b.param("v", [1, 8, 4, 4], Init::TruncNormal(0.5))?,
            b.param("tau", [2, 1, 1, 1], Init::Const(1.5))?,
        ])
    });
    let out_t = random_tensor([1, 8, 4, 4], -1.0, 1.0, 8);
    check_grads(&s, 1e-3, |t| {
        let [q, k, v, tau] = ids.map(|id| t.param(id));
        let o = channel_attention(t, q, k, v, tau, 2)?;
        t.mse_loss(o.out, &out_t)
    });
}

/// Output of a per-pixel or local block on two crops offset by `shift`.
fn shifted_pair(
    store: &ParamStore<f64>,
    big: &Tensor<f64>,
    size: usize,
    shift: usize,
    f: &dyn Fn(&mut Tape<'_, f64>, Var) -> demoire::Result<Var>,
) -> (Tensor<f64>, Tensor<f64>) {
    let c = big.c();
    let crop = |o: usize| Tensor::from_fn([1, c, size, size], |[_, ch, y, x]| big.at([0, ch, y + o, x + o]));
    let a = run(store, |t| {
        let v = t.constant(crop(0));
        f(t, v)
    });
    let b = run(store, |t| {
        let v = t.constant(crop(shift));
        f(t, v)
    });
    (a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn local_paths_are_shift_equivariant(seed in 0u64..1000, shift in 1usize..3) {
        let shift = 2 * shift;
        let big = random_tensor([1, 4, 16, 16], -1.0, 1.0, seed);
        let (g, mut s) = build(seed, |b| Gmlp::new(b, 4, 2.0));
        let (gate, mut gs) = build(seed + 1, |b| DynamicGate::new(b, 2));
        perturb(&mut gs, 0.3, seed + 1);
        perturb(&mut s, 0.3, seed);
        let (a, b) = shifted_pair(&s, &big, 12, shift, &|t, v| g.forward(t, v));
        for ch in 0..4 {
            for y in 1..11 - shift {
                for x in 1..11 - shift {
                    let d = a.at([0, ch, y + shift, x + shift]) - b.at([0, ch, y, x]);
                    prop_assert!(d.abs() < 1e-12);
                }
            }
        }
        let (a, b) = shifted_pair(&gs, &big, 12, shift, &|t, v| {
            let halves = t.split_channels(v, 2)?;
            gate.forward(t, halves[0], halves[1])
        });
        for y in 0..12 - shift {
            for x in 0..12 - shift {
                let d = a.at([0, 0, y + shift, x + shift]) - b.at([0, 0, y, x]);
                prop_assert!(d.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..1000, heads in 1usize..4) {
        let c = 4 * heads;
        let (tau, mut store) = build(seed, |b| b.param("tau", [heads, 1, 1, 1], Init::Const(2.0)));
        perturb(&mut store, 1.0, seed);
        let q = random_tensor([1, c, 3, 4], -2.0, 2.0, seed + 1);
        let k = random_tensor([1, c, 3, 4], -2.0, 2.0, seed + 2);
        let mut t = Tape::new(&store);
        let (qv, kv) = (t.constant(q), t.constant(k));
        let tv = t.param(tau);
        let a = channel_attention(&mut t, qv, kv, kv, tv, heads).unwrap();
        for row in t.value(a.attn).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn net_is_batch_permutation_equivariant(seed in 0u64..1000) {
        let (net, store) = DsdNet::new(&DsdNetConfig::tiny(), seed).unwrap();
        let mut store: ParamStore<f64> = store.cast();
        perturb(&mut store, 0.05, seed);
        let a = random_tensor([1, 4, 4, 4], 0.0, 1.0, seed);
        let b = random_tensor([1, 4, 4, 4], 0.0, 1.0, seed + 1);
        let ga = random_tensor([1, 3, 4, 4], 0.0, 1.0, seed + 2);
        let gb = random_tensor([1, 3, 4, 4], 0.0, 1.0, seed + 3);
        let fwd = |r: Tensor<f64>, g: Tensor<f64>| {
            let mut t = Tape::new(&store);
            let (rv, gv) = (t.constant(r), t.constant(g));
            let o = net.forward(&mut t, rv, gv).unwrap();
            t.value(o.srgb).clone()
        };
        let ab = fwd(Tensor::stack(&[a.clone(), b.clone()]).unwrap(), Tensor::stack(&[ga.clone(), gb.clone()]).unwrap());
        let ba = fwd(Tensor::stack(&[b, a]).unwrap(), Tensor::stack(&[gb, ga]).unwrap());
        prop_assert!(ab.batch_item(0).max_abs_diff(&ba.batch_item(1)) < 1e-9);
        prop_assert!(ab.batch_item(1).max_abs_diff(&ba.batch_item(0)) < 1e-9);
    }
}
