use keylab_core::ids::{AppId, KeyId};
use keylab_core::keystore::{Design, ReplayError, SupplyError};
use keylab_core::kmlink::{
    Direction, KmEvent, KmMessage, KmPair, KmPayload, KmRole, KmSettings, PairError,
    SupplyRecord, SupplyRequest, SupplyStatus,
};

fn raw(len: usize, salt: u8) -> Vec<u8> {
    (0..len).map(|i| (i as u8).wrapping_mul(31) ^ salt).collect()
}

fn pair(design: Design, default_bytes: usize, raw_keys: usize) -> KmPair {
    let mut p = KmPair::new(KmSettings::new(design, default_bytes), 100, 1).unwrap();
    for s in 0..raw_keys {
        p.ingest(&raw(1024, s as u8), s as u64).unwrap();
    }
    p.maintain().unwrap();
    assert!(p.digests_match());
    p
}

fn req(size_bits: u32, count: usize) -> SupplyRequest {
    SupplyRequest {
        app: AppId(1),
        size_bits,
        count,
    }
}

#[test]
fn hash_supply_is_byte_identical_on_the_responder() {
    for role in [KmRole::Master, KmRole::Slave] {
        let mut p = pair(Design::EncDecHash, 64, 40);
        let keys = p.sync_supply(role, &req(800, 3)).unwrap();
        assert_eq!(keys.len(), 3);
        for key in &keys {
            assert_eq!(key.material.len(), 100);
            let mirrored = p.side(role.peer()).take_deliverable(&key.uuid).unwrap();
            assert_eq!(&mirrored, key);
            assert!(p.side(role.peer()).take_deliverable(&key.uuid).is_none());
        }
        assert!(p.digests_match());
    }
}

#[test]
fn remainders_are_confirmed_on_both_sides() {
    let mut p = pair(Design::EncDecHash, 64, 40);
    for _ in 0..5 {
        p.sync_supply(KmRole::Master, &req(256, 1)).unwrap();
        assert!(p.digests_match());
    }
}

#[test]
fn queue_and_deque_supplies_mirror() {
    for design in [Design::ByteQueue, Design::AppSharedDeque] {
        let mut p = pair(design, 64, 40);
        for (i, size) in [256u32, 512, 1024, 512, 256].into_iter().enumerate() {
            let role = if i % 2 == 0 { KmRole::Master } else { KmRole::Slave };
            let keys = loop {
                match p.sync_supply(role, &req(size, 2)) {
                    Ok(keys) => break keys,
                    Err(PairError::Supply(SupplyError::NoDeque { .. })) => {
                        p.deliver_all().unwrap();
                    }
                    Err(e) => panic!("{design}: {e}"),
                }
            };
            for key in keys {
                assert_eq!(key.size_bits(), size as usize);
                assert_eq!(p.side(role.peer()).take_deliverable(&key.uuid).unwrap(), key);
            }
            assert!(p.digests_match(), "{design}");
        }
    }
}

#[test]
fn deque_requests_reuse_divisible_deques() {
    let mut p = pair(Design::AppSharedDeque, 64, 40);
    let err = p.sync_supply(KmRole::Master, &req(256, 1)).unwrap_err();
    assert_eq!(err, PairError::Supply(SupplyError::NoDeque { size_bits: 256 }));
    p.sync_supply(KmRole::Master, &req(256, 1)).unwrap();
    p.sync_supply(KmRole::Master, &req(512, 1)).unwrap();
    assert_eq!(p.master.deque_sizes(Direction::MasterToSlave), vec![256]);
    assert_eq!(p.slave.deque_sizes(Direction::MasterToSlave), vec![256]);
}

#[test]
fn slave_deque_is_created_by_the_master() {
    let mut p = pair(Design::AppSharedDeque, 64, 40);
    p.record_messages();
    assert!(p.sync_supply(KmRole::Slave, &req(384, 1)).is_err());
    p.deliver_all().unwrap();
    let kinds: Vec<_> = p.message_log().iter().map(|(r, m)| (*r, m.kind())).collect();
    assert_eq!(kinds[0].0, KmRole::Slave);
    assert!(matches!(
        p.message_log()[0].1.payload,
        KmPayload::CreateDeque { deque_id: None, .. }
    ));
    assert!(kinds.iter().skip(1).all(|(r, _)| *r == KmRole::Master));
    assert_eq!(p.slave.deque_sizes(Direction::SlaveToMaster), vec![384]);
    p.sync_supply(KmRole::Slave, &req(384, 1)).unwrap();
    assert!(p.digests_match());
}

#[test]
fn replay_of_a_consumed_key_is_rejected_and_rolled_back() {
    let mut p = pair(Design::EncDecHash, 64, 40);
    let before = p.master.mirror_digest();
    let supplied = p.master.supply(&req(1024, 1)).unwrap();
    let SupplyStatus::Pending { seq } = supplied.status else {
        panic!("hash supplies wait for the peer");
    };
    let mut out = p.master.drain_outbox();
    let KmPayload::SupplyCreate { record, .. } = &mut out[0].payload else {
        panic!("expected a supply message");
    };
    let SupplyRecord::Hash(recs) = record else {
        panic!("hash record");
    };
    recs[0].sources[1].id = KeyId(12345);
    p.slave.receive(out.remove(0)).unwrap();
    let events = p.deliver_all().unwrap();
    assert!(events.iter().any(|(role, e)| *role == KmRole::Master
        && matches!(e, KmEvent::Rejected { seq: s, reason: ReplayError::MissingKey(_), .. } if *s == seq)));
    assert_eq!(p.master.mirror_digest(), before);
    assert!(p.digests_match());
}

#[test]
fn wrong_design_record_is_rejected() {
    let bogus = KmMessage {
        msg_seq: 0,
        payload: KmPayload::SupplyCreate {
            direction: Direction::SlaveToMaster,
            record: SupplyRecord::Deque(vec![]),
        },
    };
    let mut fresh = KmPair::new(KmSettings::new(Design::ByteQueue, 64), 1, 1).unwrap();
    fresh.master.receive(bogus).unwrap();
    let reply = fresh.master.drain_outbox();
    assert!(matches!(reply[0].payload, KmPayload::Reject { supply_seq: 0, .. }));
}

#[test]
fn master_top_up_follows_water_marks() {
    let mut settings = KmSettings::new(Design::EncDecHash, 64);
    settings.working_set_bytes = 100 * 64;
    settings.low_water_fraction = 0.5;
    let mut p = KmPair::new(settings, 100, 1).unwrap();
    p.record_messages();
    p.ingest(&raw(64 * 210, 1), 0).unwrap();
    p.maintain().unwrap();
    let assigned: Vec<usize> = p
        .message_log()
        .iter()
        .filter_map(|(_, m)| match &m.payload {
            KmPayload::AssignPurpose { key_ids, .. } => Some(key_ids.len()),
            _ => None,
        })
        .collect();
    assert_eq!(assigned, vec![100, 100]);
    assert_eq!(p.master.common().len(), 10);
    assert_eq!(p.slave.common().len(), 10);

    // Drain the master's encryption store to 10 keys, then top up to 100
    // from what the common store has (10 keys): a shortfall.
    for _ in 0..90 {
        p.sync_supply(KmRole::Master, &req(512, 1)).unwrap();
    }
    let n = p.message_log().len();
    p.maintain().unwrap();
    let topped: Vec<usize> = p.message_log()[n..]
        .iter()
        .filter_map(|(_, m)| match &m.payload {
            KmPayload::AssignPurpose { key_ids, .. } => Some(key_ids.len()),
            _ => None,
        })
        .collect();
    assert_eq!(topped, vec![10]);
    assert!(p.master.stats().shortfalls >= 1);
    p.maintain().unwrap();
    assert!(p.digests_match());
}

#[test]
fn single_common_disjoint_selections_do_not_collide() {
    let mut p = pair(Design::SingleCommon, 64, 4);
    let a = p.master.supply(&req(512, 1)).unwrap();
    let events = p.deliver_all().unwrap();
    let b = p.slave.supply(&req(512, 1)).unwrap();
    let events2 = p.deliver_all().unwrap();
    assert!(events.iter().chain(&events2).all(|(_, e)| !matches!(e, KmEvent::Collision { .. })));
    let (SupplyStatus::Delivered(ka), SupplyStatus::Delivered(kb)) = (a.status, b.status) else {
        panic!("single design delivers at once");
    };
    assert_ne!(ka[0].material, kb[0].material);
    assert_eq!(p.slave.take_deliverable(&ka[0].uuid).unwrap(), ka[0]);
    assert!(p.digests_match());
}

/// Oracle for one key and one request per side: enumerate the orders in
/// which the two serves and the two reservation deliveries can happen. A
/// collision occurs exactly when both serves precede the delivery that would
/// have removed the key from the later server.
#[test]
fn single_key_simultaneous_requests_collide_exactly_once() {
    // Events: Ma = master serves, Sa = slave serves, Md = master's notice
    // delivered, Sd = slave's notice delivered. Md after Ma, Sd after Sa.
    let orders = [
        ["Ma", "Md", "Sa", "Sd"],
        ["Ma", "Sa", "Md", "Sd"],
        ["Ma", "Sa", "Sd", "Md"],
        ["Sa", "Sd", "Ma", "Md"],
        ["Sa", "Ma", "Sd", "Md"],
        ["Sa", "Ma", "Md", "Sd"],
    ];
    for order in orders {
        let mut p = pair(Design::SingleCommon, 1024, 1);
        assert_eq!(p.master.common().len(), 1);
        let mut pending_m: Vec<KmMessage> = Vec::new();
        let mut pending_s: Vec<KmMessage> = Vec::new();
        let mut served = 0;
        for step in order {
            match step {
                "Ma" => {
                    if p.master.supply(&req(8192, 1)).is_ok() {
                        served += 1;
                    }
                    pending_m = p.master.drain_outbox();
                }
                "Sa" => {
                    if p.slave.supply(&req(8192, 1)).is_ok() {
                        served += 1;
                    }
                    pending_s = p.slave.drain_outbox();
                }
                "Md" => pending_m.drain(..).for_each(|m| p.slave.receive(m).unwrap()),
                "Sd" => pending_s.drain(..).for_each(|m| p.master.receive(m).unwrap()),
                _ => unreachable!(),
            }
        }
        let collisions_by_side = [p.master.stats().collisions, p.slave.stats().collisions];
        let overlapped = served == 2;
        let expected = if overlapped { [1, 1] } else { [0, 0] };
        assert_eq!(collisions_by_side, expected, "order {order:?}");
        // Both sides observe the same event; it counts as one collision.
        let distinct = collisions_by_side.iter().any(|&c| c > 0) as u32;
        assert_eq!(distinct, overlapped as u32);
        assert!(p.digests_match());
    }
}

#[test]
fn single_common_serves_only_default_size() {
    let mut p = pair(Design::SingleCommon, 64, 1);
    assert!(matches!(
        p.master.supply(&req(256, 1)),
        Err(SupplyError::Invalid(_))
    ));
}

#[test]
fn slave_defers_assignments_for_keys_it_has_not_ingested() {
    let mut p = KmPair::new(KmSettings::new(Design::EncDecHash, 64), 100, 1).unwrap();
    p.master.ingest(&raw(1024, 1), 0).unwrap();
    p.master.maintain();
    p.deliver_all().unwrap();
    assert_eq!(p.slave.deferred_count(), 1);
    assert!(!p.digests_match());
    p.slave.ingest(&raw(1024, 1), 0).unwrap();
    assert_eq!(p.slave.deferred_count(), 0);
    assert!(p.digests_match());
}

#[test]
fn messages_survive_encoding_and_reordering() {
    let mut p = pair(Design::AppSharedDeque, 64, 10);
    let _ = p.master.supply(&req(512, 1));
    p.master.maintain();
    let _ = p.master.supply(&req(512, 1));
    let mut out = p.master.drain_outbox();
    assert!(out.len() >= 3);
    out.reverse();
    for m in out {
        let wire = m.encode();
        let again = KmMessage::decode(&wire).unwrap();
        p.slave.receive(again.clone()).unwrap();
        p.slave.receive(again).unwrap();
    }
    p.deliver_all().unwrap();
    assert!(p.digests_match());
}
