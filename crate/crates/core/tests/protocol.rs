use gtune_core::codec::QuantParams;
use gtune_core::decorrelation::DecorrelationConfig;
use gtune_core::model::train::{train_step, SegmentOptimizers};
use gtune_core::model::{build_model, LabeledBatch, ModelConfig, ModelPartition, Params, Split, Targets, TokenBatch};
use gtune_core::optim::AdamConfig;
use gtune_core::protocol::{
    account, decode_transcript, encode_transcript, Architecture, Direction, MessageKind, Phase, ProtocolConfig,
    ProtocolError, ProtocolMessage, Server, Session,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model_cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 40,
        d_model: 16,
        n_heads: 2,
        n_layers_total: 6,
        max_seq_len: 6,
        split: Split(1, 4, 1),
    }
}

fn cfg(arch: Architecture, quant: bool, lambda: f32) -> ProtocolConfig {
    ProtocolConfig {
        architecture: arch,
        session_id: 99,
        quant: quant.then_some(QuantParams {
            bits: 8,
            percentile: 99,
        }),
        decorrelation: DecorrelationConfig {
            lambda,
            ..DecorrelationConfig::default()
        },
        server_finetunes_backbone: true,
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        emulator_size: 2,
    }
}

fn batches(n: usize, seed: u64) -> Vec<LabeledBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let ids: Vec<u32> = (0..4 * 5).map(|_| rng.random_range(0..40)).collect();
            let targets = (0..4).map(|b| ids[b * 5] % 7).collect();
            LabeledBatch {
                tokens: TokenBatch::new(4, 5, ids).unwrap(),
                targets: Targets::Last(targets),
            }
        })
        .collect()
}

fn pretrained() -> ModelPartition {
    build_model(&model_cfg(), 11).unwrap()
}

#[test]
fn online_without_defenses_matches_monolithic_bitwise() {
    let base = pretrained();
    let data = batches(12, 1);
    let mut s = Session::open(cfg(Architecture::Online, false, 0.0), &base).unwrap();
    let mut mono = base.clone();
    let mut opt = SegmentOptimizers::new(
        cfg(Architecture::Online, false, 0.0).adam,
        &mono.input,
        &mono.backbone,
        &mono.output,
        [true; 3],
    );
    for (i, b) in data.iter().enumerate() {
        let rec = s.train_step(i as u32, b).unwrap();
        let l = train_step(
            &mut mono.input,
            &mut mono.backbone,
            &mut mono.output,
            &mut opt,
            b,
            &DecorrelationConfig::off(),
        )
        .unwrap();
        assert_eq!(rec.loss.total.to_bits(), l.total.to_bits(), "step {i}");
    }
    assert_eq!(s.client().input().unwrap(), &mono.input);
    assert_eq!(s.client().output().unwrap(), &mono.output);
    assert_eq!(s.server().backbone(), &mono.backbone);
}

#[test]
fn online_message_shape_and_quantized_savings() {
    let base = pretrained();
    let data = batches(3, 2);
    let mut q = Session::open(cfg(Architecture::Online, true, 5.0), &base).unwrap();
    let mut raw = Session::open(cfg(Architecture::Online, false, 5.0), &base).unwrap();
    for (i, b) in data.iter().enumerate() {
        let before = q.transcript().len();
        let rq = q.train_step(i as u32, b).unwrap();
        let kinds: Vec<MessageKind> = q.transcript()[before..].iter().map(|m| m.kind).collect();
        assert_eq!(
            kinds,
            vec![
                MessageKind::ActivationFrame,
                MessageKind::ActivationFrame,
                MessageKind::LossReport,
                MessageKind::GradientFrame,
                MessageKind::GradientFrame
            ]
        );
        let dirs: Vec<Direction> = q.transcript()[before..]
            .iter()
            .map(|m| m.direction().unwrap())
            .collect();
        assert_eq!(dirs[0], Direction::ClientToServer);
        assert_eq!(dirs[1], Direction::ServerToClient);
        assert_eq!(dirs[3], Direction::ClientToServer);
        assert_eq!(dirs[4], Direction::ServerToClient);
        let rr = raw.train_step(i as u32, b).unwrap();
        assert!(rq.loss.dcor.is_some());
        assert!(
            (rq.bytes as f64) < 0.30 * rr.bytes as f64 + 8.0,
            "{} vs {}",
            rq.bytes,
            rr.bytes
        );
    }
    let tensor_frames = q
        .transcript()
        .iter()
        .filter(|m| matches!(m.kind, MessageKind::ActivationFrame | MessageKind::GradientFrame))
        .count();
    assert_eq!(tensor_frames, 4 * data.len());
}

#[test]
fn gradfree_freezes_input_and_sends_two_frames() {
    let base = pretrained();
    let data = batches(100, 3);
    let mut s = Session::open(cfg(Architecture::Gradfree, true, 5.0), &base).unwrap();
    let mut online = Session::open(cfg(Architecture::Online, true, 5.0), &base).unwrap();
    for (i, b) in data.iter().enumerate() {
        let r = s.train_step(i as u32, b).unwrap();
        assert_eq!(r.messages, 2);
        if i < 3 {
            let o = online.train_step(i as u32, b).unwrap();
            assert!(r.bytes < o.bytes);
        }
    }
    assert_eq!(s.client().input().unwrap(), &base.input);
    assert_eq!(s.server().backbone(), &base.backbone);
    assert_ne!(s.client().output().unwrap(), &base.output);
    assert!(s.transcript().iter().all(|m| m.kind != MessageKind::GradientFrame));
}

#[test]
fn gradfree_matches_output_only_monolithic() {
    let base = pretrained();
    let data = batches(8, 4);
    let mut s = Session::open(cfg(Architecture::Gradfree, false, 0.0), &base).unwrap();
    let mut mono = base.clone();
    let mut opt = SegmentOptimizers::new(
        cfg(Architecture::Gradfree, false, 0.0).adam,
        &mono.input,
        &mono.backbone,
        &mono.output,
        [false, false, true],
    );
    for (i, b) in data.iter().enumerate() {
        let rec = s.train_step(i as u32, b).unwrap();
        let l = train_step(
            &mut mono.input,
            &mut mono.backbone,
            &mut mono.output,
            &mut opt,
            b,
            &DecorrelationConfig::off(),
        )
        .unwrap();
        assert_eq!(rec.loss.total.to_bits(), l.total.to_bits());
    }
    assert_eq!(s.client().output().unwrap(), &mono.output);
}

#[test]
fn gradfree_server_rejects_gradient_frames() {
    let base = pretrained();
    let mut server = Server::new(cfg(Architecture::Gradfree, false, 0.0), &base).unwrap();
    let open = ProtocolMessage {
        session_id: 99,
        sequence: 0,
        kind: MessageKind::Control,
        payload: vec![1],
    };
    server.handle(&open).unwrap();
    let mut online = Session::open(cfg(Architecture::Online, false, 0.0), &base).unwrap();
    online.train_step(0, &batches(1, 5)[0]).unwrap();
    let mut grad = online
        .transcript()
        .iter()
        .find(|m| m.kind == MessageKind::GradientFrame)
        .unwrap()
        .clone();
    grad.sequence = 1;
    assert!(matches!(server.handle(&grad), Err(ProtocolError::Invariant(_))));
}

#[test]
fn offline_trains_locally_with_constant_traffic() {
    let base = pretrained();
    let run = |n: usize| {
        let mut s = Session::open(cfg(Architecture::Offline, true, 5.0), &base).unwrap();
        let emu = s.client().emulator().unwrap().clone();
        for (i, b) in batches(n, 6).iter().enumerate() {
            let r = s.train_step(i as u32, b).unwrap();
            assert_eq!(r.messages, 0);
        }
        assert_eq!(s.client().emulator().unwrap(), &emu);
        assert_ne!(s.client().input().unwrap(), &base.input);
        let report = s.close().unwrap();
        (report, s)
    };
    let (small, s) = run(5);
    let (large, _) = run(10);
    assert_eq!(small.fine_tune_bytes, large.fine_tune_bytes);
    assert_eq!(small.by_phase.train, 0);
    assert_eq!(small.fine_tune_bytes, small.by_phase.transfer);
    let transfers = s
        .transcript()
        .iter()
        .filter(|m| m.kind == MessageKind::ModelTransfer)
        .count();
    assert_eq!(transfers, 1);
    assert_eq!(small.shared_layer_count, 4);
    assert_eq!(s.client().emulator().unwrap().kept, vec![0, 3]);
}

#[test]
fn offline_matches_adapter_plus_emulator_monolithic() {
    let base = pretrained();
    let data = batches(6, 7);
    let mut s = Session::open(cfg(Architecture::Offline, false, 0.0), &base).unwrap();
    let mut input = base.input.clone();
    let mut output = base.output.clone();
    let mut emu = gtune_core::model::build_emulator(&base.backbone, 2).unwrap();
    let mut opt = SegmentOptimizers::new(
        cfg(Architecture::Offline, false, 0.0).adam,
        &input,
        &emu.stack,
        &output,
        [true, false, true],
    );
    for (i, b) in data.iter().enumerate() {
        let rec = s.train_step(i as u32, b).unwrap();
        let l = train_step(
            &mut input,
            &mut emu.stack,
            &mut output,
            &mut opt,
            b,
            &DecorrelationConfig::off(),
        )
        .unwrap();
        assert_eq!(rec.loss.total.to_bits(), l.total.to_bits());
    }
    assert_eq!(s.client().input().unwrap(), &input);
}

#[test]
fn split_inference_uses_backbone_and_matches_monolithic() {
    let base = pretrained();
    let tokens = batches(1, 8)[0].tokens.clone();
    let mut s = Session::open(cfg(Architecture::Offline, false, 0.0), &base).unwrap();
    let before = s.transcript().len();
    let logits = s.infer(0, &tokens).unwrap();
    assert_eq!(s.transcript().len() - before, 2);
    assert!(s.transcript()[before..]
        .iter()
        .all(|m| m.phase().unwrap() == Phase::Inference));

    let mut tape = gtune_core::Tape::new();
    let b = base.bind_all(&mut tape, [false; 3]).unwrap();
    let (_, mono) = base.forward(&mut tape, &b, &tokens).unwrap();
    assert!(logits.bit_eq(tape.value(mono)));

    let emu_pred = s.client().predict_with_emulator(&tokens).unwrap();
    let v = model_cfg().vocab_size;
    let mut differs = false;
    let emu_logits = {
        let c = s.client();
        let mut t = gtune_core::Tape::new();
        let bi = c.input().unwrap().bind(&mut t, false).unwrap();
        let bm = c.emulator().unwrap().stack.bind(&mut t, false).unwrap();
        let bo = c.output().unwrap().bind(&mut t, false).unwrap();
        let f = c.input().unwrap().forward(&mut t, &bi, &tokens).unwrap();
        let m = c.emulator().unwrap().stack.forward(&mut t, &bm, f.out).unwrap();
        let l = c.output().unwrap().forward(&mut t, &bo, m).unwrap();
        t.value(l).clone()
    };
    for (a, b) in logits.data().iter().zip(emu_logits.data()) {
        differs |= a != b;
    }
    assert!(differs);
    assert_eq!(emu_pred.len(), tokens.batch);
    assert_eq!(logits.shape(), &[tokens.batch, tokens.seq, v]);
}

#[test]
fn accounting_identities_and_shared_layers() {
    let base = pretrained();
    let mut s = Session::open(cfg(Architecture::Online, true, 5.0), &base).unwrap();
    for (i, b) in batches(3, 9).iter().enumerate() {
        s.train_step(i as u32, b).unwrap();
    }
    s.infer(0, &batches(1, 10)[0].tokens).unwrap();
    let r = s.close().unwrap();
    let sum: u64 = s.transcript().iter().map(|m| m.payload.len() as u64).sum();
    assert_eq!(r.total_bytes, sum);
    assert_eq!(r.client_to_server + r.server_to_client, sum);
    let p = r.by_phase;
    assert_eq!(p.session + p.transfer + p.train + p.inference, sum);
    assert_eq!(r.by_kind.values().sum::<u64>(), sum);
    assert_eq!(r.shared_layer_count, 2);
    assert_eq!(r.message_counts["activation"], 3 * 2 + 2);
    assert_eq!(r.message_counts["gradient"], 3 * 2);
    assert_eq!(r.message_counts["control"], 2);
    assert_eq!(account(s.transcript()).unwrap(), r);
}

#[test]
fn sequences_are_gapless_per_direction() {
    let base = pretrained();
    let mut s = Session::open(cfg(Architecture::Online, true, 5.0), &base).unwrap();
    for (i, b) in batches(4, 12).iter().enumerate() {
        s.train_step(i as u32, b).unwrap();
    }
    for dir in [Direction::ClientToServer, Direction::ServerToClient] {
        let seqs: Vec<u64> = s
            .transcript()
            .iter()
            .filter(|m| m.direction().unwrap() == dir)
            .map(|m| m.sequence)
            .collect();
        assert_eq!(seqs, (0..seqs.len() as u64).collect::<Vec<_>>());
    }
}

#[test]
fn replayed_client_messages_reproduce_server() {
    let base = pretrained();
    let c = cfg(Architecture::Online, true, 5.0);
    let mut s = Session::open(c.clone(), &base).unwrap();
    for (i, b) in batches(5, 13).iter().enumerate() {
        s.train_step(i as u32, b).unwrap();
    }
    s.close().unwrap();
    let bytes = encode_transcript(s.transcript());
    let recorded = decode_transcript(&bytes).unwrap();
    assert_eq!(recorded, s.transcript());

    let mut fresh = Server::new(c, &base).unwrap();
    let mut produced = Vec::new();
    for m in &recorded {
        if m.direction().unwrap() == Direction::ClientToServer {
            produced.push(m.clone());
            produced.extend(fresh.handle(m).unwrap());
        }
    }
    assert_eq!(produced, recorded);
    assert_eq!(fresh.backbone(), s.server().backbone());
}

#[test]
fn out_of_order_and_foreign_messages_rejected() {
    let base = pretrained();
    let mut server = Server::new(cfg(Architecture::Online, false, 0.0), &base).unwrap();
    let mut m = ProtocolMessage {
        session_id: 99,
        sequence: 1,
        kind: MessageKind::Control,
        payload: vec![1],
    };
    assert!(matches!(
        server.handle(&m),
        Err(ProtocolError::OutOfOrder { expected: 0, got: 1 })
    ));
    m.sequence = 0;
    m.session_id = 5;
    assert!(matches!(server.handle(&m), Err(ProtocolError::WrongSession { .. })));
}

#[test]
fn server_never_sees_token_ids_or_embedding_rows() {
    let base = pretrained();
    // sentinel: a distinctive ascending id run repeated in every row
    let sentinel: Vec<u32> = vec![37, 38, 39, 36, 35];
    let data: Vec<LabeledBatch> = (0..4)
        .map(|_| LabeledBatch {
            tokens: TokenBatch::new(4, 5, sentinel.repeat(4)).unwrap(),
            targets: Targets::Last(vec![1, 2, 3, 4]),
        })
        .collect();
    for arch in [Architecture::Online, Architecture::Gradfree, Architecture::Offline] {
        for quant in [false, true] {
            let mut s = Session::open(cfg(arch, quant, 0.0), &base).unwrap();
            for (i, b) in data.iter().enumerate() {
                s.train_step(i as u32, b).unwrap();
            }
            s.infer(0, &data[0].tokens).unwrap();
            let emb = s.client().input().unwrap().named()[0].1.clone();
            let needles: Vec<Vec<u8>> = {
                let mut v = vec![
                    sentinel.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>(),
                    sentinel.iter().map(|&x| x as u8).collect(),
                    sentinel.iter().flat_map(|&x| (x as u16).to_le_bytes()).collect(),
                ];
                for &id in &sentinel {
                    let row = &emb.data()[id as usize * 16..(id as usize + 1) * 16];
                    v.push(row[..4].iter().flat_map(|x| x.to_le_bytes()).collect());
                }
                v
            };
            for m in s.transcript() {
                if m.direction().unwrap() != Direction::ClientToServer {
                    continue;
                }
                for n in &needles {
                    assert!(
                        !m.payload.windows(n.len()).any(|w| w == n.as_slice()),
                        "{arch:?} {:?}",
                        m.kind
                    );
                }
            }
        }
    }
}
