mod common;

use std::fs;

use vesselseg::imaging::ProbabilityMap;
use vesselseg::model::{
    binarize, load_checkpoint, manifest, probability_maps, save_checkpoint, Checkpoint, DropoutSites,
    ParamKind, ParameterSet, UNet, UNetConfig,
};
use vesselseg::selfcheck::UNetLossGraph;
use vesselseg::tensor::gradcheck::{grad_check, GradCheckOptions};
use vesselseg::{Error, Mode, Tensor};

fn small(depth: usize, base: usize) -> UNetConfig {
    UNetConfig {
        depth,
        base_channels: base,
        ..UNetConfig::default()
    }
}

/// Parameter count derived block by block, independent of the manifest.
fn count_oracle(cfg: &UNetConfig) -> (usize, usize) {
    let block = |cin: usize, cout: usize| {
        let convs = cout * cin * 9 + cout + cout * cout * 9 + cout;
        (convs + 2 * 4 * cout, convs + 2 * 2 * cout)
    };
    let ch = |i: usize| cfg.base_channels << i;
    let mut total = (0, 0);
    let mut add = |(a, b): (usize, usize)| {
        total.0 += a;
        total.1 += b;
    };
    for i in 0..cfg.depth {
        add(block(if i == 0 { cfg.in_channels } else { ch(i - 1) }, ch(i)));
    }
    add(block(ch(cfg.depth - 1), ch(cfg.depth)));
    for i in 0..cfg.depth {
        let up = ch(i + 1) * ch(i) * 4 + ch(i);
        add((up, up));
        add(block(2 * ch(i), ch(i)));
    }
    let head = cfg.base_channels * cfg.out_channels + cfg.out_channels;
    add((head, head));
    total
}

#[test]
fn default_channel_ladder() {
    let cfg = UNetConfig::default();
    let ladder: Vec<usize> = (0..=cfg.depth).map(|i| cfg.stage_channels(i)).collect();
    assert_eq!(ladder, [64, 128, 256, 512, 1024]);
    let specs = manifest(&cfg);
    let dims = |name: &str| specs.iter().find(|s| s.name == name).unwrap().dims.clone();
    assert_eq!(dims("bottleneck.conv2.w"), [1024, 1024, 3, 3]);
    assert_eq!(dims("dec3.up.w"), [1024, 512, 2, 2]);
    assert_eq!(dims("dec3.conv1.w"), [512, 1024, 3, 3]);
    assert_eq!(dims("dec0.conv2.w"), [64, 64, 3, 3]);
    assert_eq!(dims("out.w"), [1, 64, 1, 1]);
}

#[test]
fn minimal_net_parameter_count() {
    let cfg = small(1, 1);
    let params = ParameterSet::<f32>::init(&cfg, 0).unwrap();
    assert_eq!(params.numel(), 150);
    let trainable: usize = params
        .iter()
        .filter(|(n, _)| ParameterSet::<f32>::is_trainable(n))
        .map(|(_, t)| t.numel())
        .sum();
    assert_eq!(trainable, 134);
    assert_eq!(count_oracle(&cfg), (150, 134));
}

#[test]
fn parameter_count_matches_oracle_across_configs() {
    for depth in 1..=4 {
        for base in [1, 2, 3, 8] {
            let cfg = small(depth, base);
            let specs = manifest(&cfg);
            let total: usize = specs.iter().map(|s| s.dims.iter().product::<usize>()).sum();
            let trainable: usize = specs
                .iter()
                .filter(|s| s.kind.trainable())
                .map(|s| s.dims.iter().product::<usize>())
                .sum();
            assert_eq!((total, trainable), count_oracle(&cfg), "depth {depth} base {base}");
        }
    }
}

#[test]
fn manifest_order_and_names() {
    let names: Vec<String> = manifest(&small(1, 1)).into_iter().map(|s| s.name).collect();
    assert_eq!(names.first().unwrap(), "enc0.conv1.w");
    assert_eq!(names.last().unwrap(), "out.b");
    let pos = |n: &str| names.iter().position(|m| m == n).unwrap();
    assert!(pos("enc0.bn2.rvar") < pos("bottleneck.conv1.w"));
    assert!(pos("bottleneck.bn2.rvar") < pos("dec0.up.w"));
    assert!(pos("dec0.up.b") < pos("dec0.conv1.w"));
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
}

#[test]
fn initialization_follows_he_normal() {
    let cfg = small(2, 16);
    let params = ParameterSet::<f64>::init(&cfg, 3).unwrap();
    let specs = manifest(&cfg);
    for spec in &specs {
        let t = params.get(&spec.name).unwrap();
        match spec.kind {
            ParamKind::Weight { fan_in } if t.numel() >= 4096 => {
                let n = t.numel() as f64;
                let mean = t.data().iter().sum::<f64>() / n;
                let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let target = 2.0 / fan_in as f64;
                assert!(mean.abs() < 4.0 * (target / n).sqrt(), "{} mean {mean}", spec.name);
                assert!((var / target - 1.0).abs() < 0.1, "{} var {var} vs {target}", spec.name);
            }
            ParamKind::Weight { .. } => {}
            ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => {
                assert!(t.data().iter().all(|&v| v == 0.0), "{}", spec.name)
            }
            ParamKind::Gamma | ParamKind::RunningVar => {
                assert!(t.data().iter().all(|&v| v == 1.0), "{}", spec.name)
            }
        }
    }
}

#[test]
fn same_seed_gives_identical_parameters() {
    let a = UNet::<f32>::build(small(2, 4), 17).unwrap();
    let b = UNet::<f32>::build(small(2, 4), 17).unwrap();
    let c = UNet::<f32>::build(small(2, 4), 18).unwrap();
    for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
        let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
    assert_ne!(a.params, c.params);
}

#[test]
fn output_shape_matches_input_across_depths() {
    for depth in 1..=4 {
        for size in [16usize, 32, 64] {
            let net = UNet::<f32>::build(small(depth, 2), 1).unwrap();
            let x = Tensor::full(&[2, 1, size, size], 0.5f32).unwrap();
            let y = net.predict(&x).unwrap();
            assert_eq!(y.dims(), &[2, 1, size, size]);
        }
    }
    let net = UNet::<f32>::build(small(4, 2), 1).unwrap();
    let x = Tensor::full(&[1, 1, 48, 80], 0.25f32).unwrap();
    assert_eq!(net.predict(&x).unwrap().dims(), &[1, 1, 48, 80]);
}

#[test]
fn full_resolution_input_keeps_its_shape() {
    let net = UNet::<f32>::build(small(4, 2), 5).unwrap();
    let mut rng = common::rng(5);
    let x = common::random_tensor(&mut rng, &[1, 1, 512, 512]);
    let x = Tensor::new(x.dims(), x.data().iter().map(|v| v.abs()).collect()).unwrap();
    let y = net.predict(&x).unwrap();
    assert_eq!(y.dims(), &[1, 1, 512, 512]);
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn indivisible_input_names_required_multiple() {
    let net = UNet::<f32>::build(small(3, 2), 1).unwrap();
    let x = Tensor::zeros(&[1, 1, 20, 16]).unwrap();
    match net.predict(&x) {
        Err(Error::Shape(msg)) => assert!(msg.contains("2^depth = 8"), "{msg}"),
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn zero_input_gives_open_unit_interval_output() {
    let mut net = UNet::<f32>::build(small(2, 4), 9).unwrap();
    let x = Tensor::zeros(&[1, 1, 32, 32]).unwrap();
    let y = net.forward(&x, Mode::Eval, 0).unwrap();
    assert!(y.data().iter().all(|&v| v.is_finite() && v > 0.0 && v < 1.0));
}

#[test]
fn forward_rejects_out_of_range_input() {
    let mut net = UNet::<f32>::build(small(1, 1), 0).unwrap();
    let x = Tensor::full(&[1, 1, 4, 4], 1.5f32).unwrap();
    assert!(matches!(net.forward(&x, Mode::Eval, 0), Err(Error::Parameter(_))));
}

#[test]
fn eval_forward_is_a_pure_function() {
    let mut net = UNet::<f32>::build(small(2, 4), 2).unwrap();
    let mut rng = common::rng(2);
    let x = common::random_tensor(&mut rng, &[2, 1, 32, 32]);
    let x = Tensor::new(x.dims(), x.data().iter().map(|v| v.abs()).collect()).unwrap();
    let before = net.params.clone();
    let a = net.forward(&x, Mode::Eval, 1).unwrap();
    let b = net.forward(&x, Mode::Eval, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(net.params, before);

    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let c = pool.install(|| net.predict(&x).unwrap());
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&c));
}

#[test]
fn train_forward_updates_running_statistics() {
    let mut net = UNet::<f32>::build(small(1, 2), 4).unwrap();
    let mut rng = common::rng(4);
    let x = common::random_tensor(&mut rng, &[2, 1, 8, 8]);
    let x = Tensor::new(x.dims(), x.data().iter().map(|v| v.abs()).collect()).unwrap();
    let before = net.params.require("enc0.bn1.rmean").unwrap().clone();
    let y = net.forward(&x, Mode::Train, 7).unwrap();
    assert_eq!(y.dims(), x.dims());
    assert_ne!(net.params.require("enc0.bn1.rmean").unwrap(), &before);
    assert!(net.params.require("enc0.bn1.rvar").unwrap().data().iter().all(|&v| v >= 0.0));
}

#[test]
fn binarize_examples() {
    let p = ProbabilityMap::new(3, 1, vec![0.49, 0.5, 0.51]).unwrap();
    assert_eq!(binarize(&p, 0.5).unwrap().data, [0, 1, 1]);
    let z = ProbabilityMap::new(2, 2, vec![0.0; 4]).unwrap();
    assert_eq!(binarize(&z, 0.5).unwrap().data, [0; 4]);
    assert_eq!(binarize(&p, 0.0).unwrap().data, [1, 1, 1]);
    assert!(matches!(binarize(&p, 1.5), Err(Error::Parameter(_))));
    assert!(matches!(binarize(&p, -0.1), Err(Error::Parameter(_))));
}

#[test]
fn probability_maps_split_the_batch() {
    let t = Tensor::new(&[2, 1, 1, 2], vec![0.1f32, 0.2, 0.3, 0.4]).unwrap();
    let maps = probability_maps(&t).unwrap();
    assert_eq!(maps.len(), 2);
    assert_eq!(maps[1].data, [0.3, 0.4]);
}

fn checkpoint(seed: u64) -> Checkpoint {
    let cfg = UNetConfig {
        dropout_sites: DropoutSites::AllBlocks,
        dropout_p: 0.25,
        ..small(2, 3)
    };
    let net = UNet::<f32>::build(cfg, seed).unwrap();
    Checkpoint {
        config: net.config,
        params: net.params,
        step: 42,
        input_size: (64, 48),
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ckpt = checkpoint(11);
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, ckpt.config);
    assert_eq!(back.step, 42);
    assert_eq!(back.input_size, (64, 48));
    for ((na, a), (nb, b)) in ckpt.params.iter().zip(back.params.iter()) {
        assert_eq!(na, nb);
        let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb, "{na}");
    }
    assert_eq!(back.to_bytes().unwrap(), fs::read(&path).unwrap());

    let x = Tensor::full(&[1, 1, 16, 16], 0.3f32).unwrap();
    let before = UNet::from_parts(ckpt.config.clone(), ckpt.params.clone()).unwrap().predict(&x).unwrap();
    let after = UNet::from_parts(back.config, back.params).unwrap().predict(&x).unwrap();
    assert_eq!(before, after);
}

#[test]
fn checkpoint_starts_with_magic_and_header_length() {
    let bytes = checkpoint(1).to_bytes().unwrap();
    assert_eq!(&bytes[..8], b"FVKCKPT1");
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
    assert!(header.contains("param=enc0.conv1.w 3,1,3,3"), "{header}");
    let floats = checkpoint(1).params.numel();
    assert_eq!(bytes.len(), 12 + len + 4 * floats);
}

#[test]
fn truncated_checkpoint_is_corrupt() {
    let bytes = checkpoint(2).to_bytes().unwrap();
    for cut in [bytes.len() - 1, bytes.len() - 4, 40, 10] {
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(Error::Corrupt(_)) => {}
            other => panic!("cut at {cut}: expected corruption error, got {other:?}"),
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt(_))));
}

#[test]
fn tampered_shape_names_the_parameter() {
    let bytes = checkpoint(3).to_bytes().unwrap();
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
    let tampered = header.replacen("param=enc1.conv2.w 6,6,3,3", "param=enc1.conv2.w 6,6,3,2", 1);
    assert_ne!(tampered, header);
    let mut out = bytes[..12].to_vec();
    out.extend_from_slice(tampered.as_bytes());
    out.extend_from_slice(&bytes[12 + len..]);
    match Checkpoint::from_bytes(&out) {
        Err(Error::Corrupt(msg)) => assert!(msg.contains("enc1.conv2.w"), "{msg}"),
        other => panic!("expected corruption error, got {other:?}"),
    }
}

#[test]
fn bad_magic_and_version_are_format_errors() {
    let mut bytes = checkpoint(4).to_bytes().unwrap();
    bytes[7] = b'2';
    match Checkpoint::from_bytes(&bytes) {
        Err(Error::Format(msg)) => assert!(msg.contains("version"), "{msg}"),
        other => panic!("expected format error, got {other:?}"),
    }
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
}

#[test]
fn end_to_end_gradient_in_single_precision() {
    let cfg = UNetConfig {
        depth: 1,
        base_channels: 2,
        ..UNetConfig::default()
    };
    let mut rng = common::rng(8);
    let image = common::random_tensor64(&mut rng, &[1, 1, 16, 16]);
    let image = Tensor::new(image.dims(), image.data().iter().map(|v| v.abs()).collect()).unwrap();
    let target = Tensor::from_fn(&[1, 1, 16, 16], |i| f64::from(u8::from((i * 7) % 5 == 0))).unwrap();
    let (graph, params) = UNetLossGraph::new(cfg, 8, target).unwrap();
    let mut probes = vec![image];
    probes.extend(params);
    // The numeric side runs in f64, so a small step keeps every probe
    // clear of relu kinks without amplifying rounding. The floor sits at
    // f32 resolution for a unit-scale loss: conv biases feeding batch norm
    // have exactly zero gradient, which f32 reports as rounding noise.
    let opts = GradCheckOptions {
        step: 1e-5,
        abs_floor: 1e-5,
        max_probes_per_input: None,
    };
    let rep = grad_check::<f32, _>(&graph, &probes, &opts).unwrap();
    assert!(rep.max_rel_error < 1e-2, "{rep:?}");
}

