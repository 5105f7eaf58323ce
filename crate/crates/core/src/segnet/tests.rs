use super::*;
use crate::autodiff::grad_check_sampled;

fn micro(kind: Option<BlockKind>, placement: Placement) -> NetConfig {
    NetConfig {
        in_channels: 1,
        n_classes: 2,
        encoder_channels: vec![2, 4],
        block_kind: kind,
        placement,
        r: Some(2),
        ..NetConfig::default()
    }
}

fn volume(c: usize, n: usize, rng: &mut Rng) -> Tensor {
    Tensor::uniform(Shape::new(c, n, n, n).unwrap(), rng, 0.0, 1.0)
}

#[test]
fn logits_keep_spatial_extents() {
    let mut rng = Rng::new(1);
    let net = SegNet::build(NetConfig::default(), &mut rng).unwrap();
    let out = net.predict(&volume(1, 8, &mut rng)).unwrap();
    assert_eq!(out.shape(), Shape::new(4, 8, 8, 8).unwrap());

    let net = SegNet::build(micro(Some(BlockKind::Cse), Placement::P4), &mut rng).unwrap();
    let x = Tensor::uniform(Shape::new(1, 4, 8, 12).unwrap(), &mut rng, 0.0, 1.0);
    assert_eq!(net.predict(&x).unwrap().shape(), Shape::new(2, 4, 8, 12).unwrap());
}

#[test]
fn rejects_bad_inputs() {
    let mut rng = Rng::new(2);
    let net = SegNet::build(micro(None, Placement::P0), &mut rng).unwrap();
    let odd = Tensor::zeros(Shape::new(1, 4, 6, 4).unwrap());
    assert!(matches!(net.predict(&odd), Err(Error::Shape(_))));
    let two = Tensor::zeros(Shape::new(2, 4, 4, 4).unwrap());
    assert!(matches!(net.predict(&two), Err(Error::Shape(_))));
}

#[test]
fn config_validation() {
    let bad = [
        NetConfig { n_classes: 1, ..NetConfig::default() },
        NetConfig { encoder_channels: vec![16], ..NetConfig::default() },
        NetConfig { encoder_channels: vec![0, 32], ..NetConfig::default() },
        NetConfig { block_kind: None, ..NetConfig::default() },
        NetConfig { r: Some(3), ..NetConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(SegNet::build(cfg.clone(), &mut Rng::new(0)), Err(Error::Config(_))), "{cfg:?}");
    }
    // A kind without placement is simply unused.
    let cfg = NetConfig { placement: Placement::P0, ..NetConfig::default() };
    assert_eq!(SegNet::build(cfg, &mut Rng::new(0)).unwrap().block_count(), 0);
}

#[test]
fn placement_block_counts() {
    let expected = [0, 3, 3, 1, 6, 4, 7];
    for (placement, n) in Placement::ALL.into_iter().zip(expected) {
        assert_eq!(placement.block_count(), n);
        let kind = (placement != Placement::P0).then_some(BlockKind::Pe);
        let net = SegNet::build(micro(kind, placement), &mut Rng::new(3)).unwrap();
        assert_eq!(net.block_count(), n, "{placement:?}");
        assert!(net.blocks().all(|(_, b)| b.config().kind == BlockKind::Pe));
    }
    let net = SegNet::build(micro(Some(BlockKind::Pe), Placement::P5), &mut Rng::new(3)).unwrap();
    let at: Vec<Position> = net.blocks().map(|(p, _)| p).collect();
    assert_eq!(at, [Position::Encoder1, Position::Encoder2, Position::Encoder3, Position::Bottleneck]);
}

#[test]
fn zeroed_blocks_act_as_half_gates() {
    let mut rng = Rng::new(4);
    let x = volume(1, 4, &mut rng);
    for kind in [BlockKind::Cse, BlockKind::Sse, BlockKind::Scse, BlockKind::Pe] {
        let mut with = SegNet::build(micro(Some(kind), Placement::P6), &mut Rng::new(9)).unwrap();
        let without = SegNet::build(micro(None, Placement::P0), &mut Rng::new(9)).unwrap();
        let block_ids: Vec<String> = with
            .params()
            .iter()
            .filter(|(n, _)| n.contains(".block."))
            .map(|(n, _)| n.to_string())
            .collect();
        let ids: Vec<ParamId> = with.params().ids().collect();
        for id in ids {
            if block_ids.iter().any(|n| n == with.params().name(id)) {
                with.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let got = with.predict(&x).unwrap();

        let mut tape = Tape::new();
        let p = without.params().bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let halved = without
            .forward_hooked(&mut tape, &p, xv, &mut |tape, _, u| Ok(tape.scale(u, 0.5)))
            .unwrap();
        assert_eq!(&got, tape.value(halved), "{kind:?}");
    }
}

#[test]
fn backbone_initialisation_is_shared_across_placements() {
    let a = SegNet::build(micro(None, Placement::P0), &mut Rng::new(5)).unwrap();
    let b = SegNet::build(micro(Some(BlockKind::Cbam), Placement::P6), &mut Rng::new(5)).unwrap();
    for (name, t) in a.params().iter() {
        let (_, u) = b.params().iter().find(|(n, _)| *n == name).unwrap();
        assert_eq!(t, u, "{name}");
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = Rng::new(6);
    let net = SegNet::build(micro(Some(BlockKind::Pe), Placement::P6), &mut rng).unwrap();
    let x = volume(1, 8, &mut rng);
    assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
}

#[test]
fn backbone_count_matches_hand_derivation() {
    let cfg = NetConfig::default().baseline();
    // conv3 → IN units at [16,32] widths, two up-convs and the classifier.
    let unit = |i: usize, o: usize| 27 * i * o + 2 * o;
    let hand = unit(1, 16) + unit(16, 32)
        + unit(32, 32) + unit(32, 64)
        + unit(64, 64) + unit(64, 128)
        + unit(128, 128) + unit(128, 256)
        + unit(384, 128) + unit(128, 128)
        + (27 * 128 * 64 + 64)
        + unit(128, 64) + unit(64, 64)
        + (27 * 64 * 32 + 32)
        + unit(64, 32) + unit(32, 32)
        + (32 * 4 + 4);
    assert_eq!(cfg.backbone_param_count(), hand);
    let net = SegNet::build(cfg, &mut Rng::new(0)).unwrap();
    assert_eq!(net.params().scalar_count(), hand);
    assert_eq!(net.param_report().block_overhead, 0);
    assert_eq!(net.param_report().overhead_fraction, 0.0);
}

#[test]
fn pe_overhead_sums_per_position_counts() {
    let net = SegNet::build(NetConfig::default(), &mut Rng::new(0)).unwrap();
    let pe = |c: usize| 2 * c * c / 8 + c + c / 8;
    let expected: usize = [32, 64, 128, 256, 128, 64, 32].into_iter().map(pe).sum();
    let report = net.param_report();
    assert_eq!(report.block_overhead, expected);
    assert_eq!(report.total, NetConfig::default().param_count());
    assert_eq!(report.backbone, NetConfig::default().backbone_param_count());
}

#[test]
fn overhead_ordering_across_kinds() {
    let base = NetConfig::default();
    let frac = |k: BlockKind| {
        let cfg = base.with_blocks(k, Placement::P6);
        cfg.block_param_count() as f64 / cfg.backbone_param_count() as f64
    };
    let sse = frac(BlockKind::Sse);
    let scse = frac(BlockKind::Scse);
    for k in [BlockKind::Cse, BlockKind::Pe, BlockKind::Cbam] {
        assert!(sse < frac(k) && frac(k) < scse, "{k:?}");
    }
    for k in BlockKind::ALL {
        assert!(frac(k) < 0.03, "{k:?}: {}", frac(k));
    }
}

#[test]
fn param_count_is_independent_of_seed() {
    let cfg = micro(Some(BlockKind::Scse), Placement::P4);
    let a = SegNet::build(cfg.clone(), &mut Rng::new(1)).unwrap();
    let b = SegNet::build(cfg.clone(), &mut Rng::new(2)).unwrap();
    assert_eq!(a.params().scalar_count(), b.params().scalar_count());
    assert_eq!(a.params().scalar_count(), cfg.param_count());
}

#[test]
fn micro_net_gradient_check() {
    let cfg = micro(Some(BlockKind::Pe), Placement::P6);
    let net = SegNet::build(cfg, &mut Rng::new(7)).unwrap();
    let weights = Tensor::uniform(Shape::new(2, 4, 4, 4).unwrap(), &mut Rng::new(8), -1.0, 1.0);
    let report = grad_check_sampled(
        |tape, vars| {
            let (x, params) = vars.split_first().unwrap();
            let p = Bound::from_vars(params.to_vec());
            let logits = net.forward(tape, &p, *x)?;
            let w = tape.constant(weights.clone());
            let weighted = tape.mul(logits, w)?;
            Ok(tape.sum(weighted))
        },
        |r| {
            let mut inputs = vec![volume(1, 4, r)];
            // Fresh norm affines and biases keep relu inputs off their kinks;
            // single-voxel instance norm would otherwise feed exact zeros.
            inputs.extend(net.params().iter().map(|(name, t)| match name.rsplit('.').next() {
                Some("gain") => Tensor::uniform(t.shape(), r, 0.5, 1.5),
                Some("bias" | "b1" | "b2") => Tensor::uniform(t.shape(), r, -1.0, 1.0),
                _ => t.clone(),
            }));
            inputs
        },
        &mut Rng::new(10),
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn config_json_roundtrip() {
    let cfg = NetConfig {
        r: Some(4),
        pe_pooling: PePooling::AvgAndMax,
        pe_aggregation: Aggregation::Mult,
        ..NetConfig::default()
    };
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<NetConfig>(&json).unwrap(), cfg);

    let none: NetConfig = serde_json::from_str(
        r#"{"in_channels":1,"n_classes":2,"encoder_channels":[8,16],"block_kind":"none","placement":"P0"}"#,
    )
    .unwrap();
    assert_eq!(none.block_kind, None);
    assert_eq!(none.pe_pooling, PePooling::Avg);
    assert!(serde_json::to_string(&none).unwrap().contains(r#""block_kind":"none""#));
    let bad = r#"{"in_channels":1,"n_classes":2,"encoder_channels":[8,16],"block_kind":"se","placement":"P0"}"#;
    assert!(serde_json::from_str::<NetConfig>(bad).is_err());
}

#[test]
fn digest_tracks_configuration() {
    let a = NetConfig::default();
    assert_eq!(a.digest(), a.clone().digest());
    assert_ne!(a.digest(), a.baseline().digest());
}

#[test]
fn weights_roundtrip_and_corruption() {
    let cfg = micro(Some(BlockKind::Scse), Placement::P6);
    let net = SegNet::build(cfg.clone(), &mut Rng::new(11)).unwrap();
    let bytes = write_weights(&net);
    let back = read_weights(&bytes, &cfg).unwrap();
    assert_eq!(back.params(), net.params());

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_weights(&bad, &cfg), Err(Error::Format { offset: 0, .. })));

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(read_weights(&bad, &cfg), Err(Error::Format { offset: 4, .. })));

    assert!(matches!(read_weights(&bytes, &cfg.baseline()), Err(Error::Compatibility)));

    let cut = &bytes[..bytes.len() - 3];
    match read_weights(cut, &cfg) {
        Err(Error::Format { offset, .. }) => assert!(offset as usize > 44 && (offset as usize) < cut.len()),
        other => panic!("expected format error, got {other:?}"),
    }

    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(read_weights(&long, &cfg), Err(Error::Format { offset, .. }) if offset as usize == bytes.len()));
}

#[test]
fn weights_file_layout() {
    let cfg = micro(None, Placement::P0);
    let net = SegNet::build(cfg.clone(), &mut Rng::new(12)).unwrap();
    let bytes = write_weights(&net);
    let names: usize = net.params().iter().map(|(n, _)| n.len()).sum();
    let expected = 4 + 4 + 32 + 4 + net.params().len() * (4 + 16) + names + 8 * net.params().scalar_count();
    assert_eq!(bytes.len(), expected);
    assert_eq!(&bytes[..4], b"R3DW");
    assert_eq!(&bytes[8..40], &cfg.digest());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    save_weights(&net, &path).unwrap();
    assert_eq!(load_weights(&path, &cfg).unwrap().params(), net.params());
}
