use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use runet_core::gradcheck::{check_gradients, GradCheckOptions};
use runet_core::nn::unet::{Channels, Segment, SegmentSpec, UNetBackbone};
use runet_core::nn::{Bound, ParamStore};
use runet_core::{Error, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn channels(input: usize) -> Channels {
    Channels { base: 8, input }
}

fn segment<T: runet_core::Real>(level: usize, stages: usize, store: &mut ParamStore<T>) -> Segment {
    Segment::new(
        store,
        "seg.",
        &SegmentSpec {
            level,
            channels: channels(4),
            stages,
            out_channels: None,
            final_relu: true,
        },
        &mut rng(level as u64),
    )
    .unwrap()
}

#[test]
fn segments_preserve_spatial_size() {
    for level in 0..=4 {
        let mut store = ParamStore::<f32>::new();
        let seg = segment(level, 1, &mut store);
        let scale = 1 << level;
        for size in [64, 96, 128] {
            let s = size / scale;
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let x = tape.constant(Tensor::randn(vec![1, seg.in_channels, s, s], 1.0, &mut rng(1)));
            let y = seg.forward(&mut tape, &p, x).unwrap();
            assert_eq!(
                tape.value(y).shape(),
                &[1, channels(4).dec(level), s, s],
                "level {level}, input {size}"
            );
        }
    }
}

#[test]
fn deepest_segment_is_one_bottleneck_block() {
    let mut store = ParamStore::<f32>::new();
    let seg = segment(4, 2, &mut store);
    assert!(seg.encoders.is_empty() && seg.decoders.is_empty());
    assert_eq!(seg.in_channels, 64);
    assert_eq!(seg.out_channels, 128);
    assert_eq!(seg.bottleneck.stages.len(), 2);
    // Two 3x3 conv stages with group norm: 64->128 and 128->128.
    let expect = (9 * 64 * 128 + 128 + 2 * 128) + (9 * 128 * 128 + 128 + 2 * 128);
    assert_eq!(store.count(), expect);
}

#[test]
fn level_zero_segment_is_the_backbone_without_head() {
    let mut a = ParamStore::<f64>::new();
    let mut b = ParamStore::<f64>::new();
    let seg = Segment::new(
        &mut a,
        "",
        &SegmentSpec {
            level: 0,
            channels: channels(4),
            stages: 1,
            out_channels: None,
            final_relu: true,
        },
        &mut rng(3),
    )
    .unwrap();
    let net = UNetBackbone::new(&mut b, channels(4), 1, 1, &mut rng(3)).unwrap();
    assert_eq!(a.count() + 8 + 1, b.count());
    let x = Tensor::randn(vec![1, 4, 32, 32], 1.0, &mut rng(4));
    let mut t1 = Tape::new();
    let p1 = a.bind_frozen(&mut t1);
    let x1 = t1.constant(x.clone());
    let y1 = seg.forward(&mut t1, &p1, x1).unwrap();
    let mut t2 = Tape::new();
    let p2 = b.bind_frozen(&mut t2);
    let x2 = t2.constant(x);
    let y2 = net.features(&mut t2, &p2, x2).unwrap();
    assert_eq!(t1.value(y1), t2.value(y2));
}

#[test]
fn backbone_shapes_and_golden_count() {
    let mut store = ParamStore::<f32>::new();
    let net = UNetBackbone::new(&mut store, channels(4), 1, 1, &mut rng(0)).unwrap();
    // Enumerated by hand: encoder/bottleneck convs + GN, four transposed
    // convs, four decoder blocks on concatenated inputs, 1x1 head.
    let conv = |cin: usize, cout: usize| 9 * cin * cout + cout + 2 * cout;
    let up = |c: usize| 4 * c * (c / 2) + c / 2;
    let expect = conv(4, 8)
        + conv(8, 16)
        + conv(16, 32)
        + conv(32, 64)
        + conv(64, 128)
        + up(128)
        + conv(128, 64)
        + up(64)
        + conv(64, 32)
        + up(32)
        + conv(32, 16)
        + up(16)
        + conv(16, 8)
        + 8
        + 1;
    assert_eq!(store.count(), expect);
    assert_eq!(store.count(), 240_881);

    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.constant(Tensor::rand_uniform(vec![1, 4, 64, 64], 0.0, 1.0, &mut rng(1)));
    let y = net.forward(&mut tape, &p, x).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 64, 64]);

    let bad = tape.constant(Tensor::zeros(vec![1, 4, 40, 64]));
    match net.forward(&mut tape, &p, bad) {
        Err(Error::Shape { detail, .. }) => assert!(detail.contains("pad by 8 rows"), "{detail}"),
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn zero_parameters_give_the_head_bias() {
    let mut store = ParamStore::<f32>::new();
    let net = UNetBackbone::new(&mut store, channels(4), 1, 1, &mut rng(0)).unwrap();
    for p in store.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    let head_bias = store.id("head.bias").unwrap();
    store.value_mut(head_bias).data_mut()[0] = 0.375;
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.constant(Tensor::rand_uniform(vec![2, 4, 32, 32], 0.0, 1.0, &mut rng(2)));
    let y = net.forward(&mut tape, &p, x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.375));
}

#[test]
fn doubling_width_roughly_quadruples_parameters() {
    let count = |base: usize| {
        let mut store = ParamStore::<f32>::new();
        UNetBackbone::new(&mut store, Channels { base, input: 4 }, 1, 1, &mut rng(0)).unwrap();
        store.count() as f64
    };
    let ratio = count(16) / count(8);
    assert!((3.8..=4.0).contains(&ratio), "{ratio}");
}

#[test]
fn backbone_is_translation_covariant_in_the_interior() {
    // A textured square on a constant canvas, moved by 16 pixels. The canvas
    // is large enough that the square's receptive field never meets the
    // border region, so every layer's group statistics are taken over the
    // same multiset of values and only summation order differs.
    let mut store = ParamStore::<f64>::new();
    let net = UNetBackbone::new(&mut store, channels(3), 1, 1, &mut rng(7)).unwrap();
    let n = 384;
    let texture = Tensor::<f64>::rand_uniform(vec![3, 32, 32], 0.0, 1.0, &mut rng(8));
    let canvas = |oy: usize, ox: usize| {
        Tensor::from_fn(vec![1, 3, n, n], |i| {
            let (c, y, x) = (i / (n * n), (i / n) % n, i % n);
            if (oy..oy + 32).contains(&y) && (ox..ox + 32).contains(&x) {
                texture.data()[(c * 32 + y - oy) * 32 + x - ox]
            } else {
                0.2
            }
        })
    };
    let run = |x: Tensor<f64>| {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let y = net.forward(&mut tape, &p, xv).unwrap();
        tape.value(y).clone()
    };
    let a = run(canvas(176, 176));
    let b = run(canvas(192, 192));
    let mut worst = 0.0f64;
    for y in 96..272 {
        for x in 96..272 {
            let d = (a.data()[y * n + x] - b.data()[(y + 16) * n + x + 16]).abs();
            worst = worst.max(d);
        }
    }
    assert!(worst < 1e-9, "max interior difference {worst:e}");
    // The square really does change the output near it.
    assert!((a.data()[192 * n + 192] - a.data()[100 * n + 100]).abs() > 1e-3);
}

#[test]
fn initial_pre_activation_variance_is_controlled() {
    for (level, stages) in [(0, 1), (0, 2), (2, 1), (2, 2), (4, 2)] {
        let mut store = ParamStore::<f64>::new();
        let seg = Segment::new(
            &mut store,
            "",
            &SegmentSpec {
                level,
                channels: Channels { base: 8, input: 8 },
                stages,
                out_channels: None,
                final_relu: true,
            },
            &mut rng(11 + stages as u64),
        )
        .unwrap();
        let s = 64 >> level;
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::randn(vec![4, seg.in_channels, s, s], 1.0, &mut rng(12)));
        let mut trace = Vec::new();
        seg.forward_traced(&mut tape, &p, x, &mut trace).unwrap();
        assert!(!trace.is_empty());
        for (i, &v) in trace.iter().enumerate() {
            let d = tape.value(v).data();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
            assert!(
                (0.5..=2.0).contains(&var),
                "level {level}, {stages} stages, conv {i}: variance {var}"
            );
        }
    }
}

#[test]
fn level_three_segment_gradients() {
    // 32x32 features entering level 3 => 4x4 after the segment's own pooling.
    let mut store = ParamStore::<f64>::new();
    let seg = Segment::new(
        &mut store,
        "",
        &SegmentSpec {
            level: 3,
            channels: Channels { base: 2, input: 2 },
            stages: 1,
            out_channels: None,
            final_relu: false,
        },
        &mut rng(5),
    )
    .unwrap();
    for seed in 0..3 {
        let mut inputs = vec![Tensor::randn(vec![1, seg.in_channels, 32, 32], 1.0, &mut rng(seed))];
        inputs.extend(store.iter().map(|p| p.value.clone()));
        let w = Tensor::randn(vec![1, seg.out_channels, 32, 32], 1.0, &mut rng(seed + 50));
        let report = check_gradients(
            |t, v| {
                let bound = Bound::from_vars(v[1..].to_vec());
                let y = seg.forward(t, &bound, v[0])?;
                t.dot_const(y, &w)
            },
            &inputs,
            &GradCheckOptions {
                seed,
                coords_per_input: Some(6),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}
