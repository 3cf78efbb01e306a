use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use openm2m::codec::{decode_do_request, DoRequest};
use openm2m::env::{ManualClock, SeededIds};
use openm2m::model::{ContextElement, DataElement, Triple};
use openm2m::notify::{Cause, Predicate, Subscription};
use openm2m::{Gateway, GatewayConfig, Runtime};
use proptest::prelude::*;
use rust_decimal::Decimal;
use uuid::Uuid;

fn gateway(seed: u64) -> Gateway {
    let clock = Arc::new(ManualClock::new(DateTime::<Utc>::UNIX_EPOCH));
    let rt = Runtime { clock, ids: Arc::new(SeededIds::new(seed)), local_delivery: true };
    Gateway::in_memory(GatewayConfig::default(), rt)
}

fn reading(entity: &str, triples: Vec<Triple>) -> ContextElement {
    ContextElement::new(DataElement::new(triples, vec![]).unwrap(), entity, "Sensor").unwrap()
}

fn subscribe(gw: &Gateway, target: &str, predicate: Predicate) -> Uuid {
    gw.subscribe(Subscription {
        sub_id: Uuid::new_v4(),
        subscriber: "local:test".into(),
        registrar: target.into(),
        target: target.into(),
        predicate,
    })
    .unwrap()
}

fn causes(gw: &Gateway, sub: Uuid) -> Vec<Cause> {
    gw.notifications().iter().filter(|n| n.sub_id == sub).map(|n| n.cause).collect()
}

/// Edge detector written out longhand: fire when the reading's side of the
/// band differs from the previous reading's side and the new side is outside.
fn band_oracle(low: f64, high: f64, readings: &[f64]) -> Vec<Cause> {
    let mut prev = 0i8;
    let mut out = Vec::new();
    for &v in readings {
        let side = if v > high { 1 } else if v < low { -1 } else { 0 };
        if side != prev && side != 0 {
            out.push(if side > 0 { Cause::Above } else { Cause::Below });
        }
        prev = side;
    }
    out
}

#[test]
fn band_walk_from_the_listing() {
    let gw = gateway(1);
    let sub = subscribe(&gw, "s", Predicate::Band { triple_name: "value".into(), low: 10.0, high: 20.0 });
    for v in [15.0, 25.0, 27.0, 18.0] {
        gw.append_element(reading("s", vec![Triple::number("value", v).unwrap()])).unwrap();
    }
    assert_eq!(causes(&gw, sub), [Cause::Above]);
    assert_eq!(band_oracle(10.0, 20.0, &[15.0, 25.0, 27.0, 18.0]), [Cause::Above]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn band_matches_edge_oracle(readings in prop::collection::vec(-5i32..35, 0..40)) {
        let gw = gateway(2);
        let sub = subscribe(&gw, "s", Predicate::Band { triple_name: "t".into(), low: 10.0, high: 20.0 });
        let other = subscribe(&gw, "other", Predicate::Band { triple_name: "t".into(), low: 10.0, high: 20.0 });
        let vals: Vec<f64> = readings.iter().map(|r| *r as f64).collect();
        for v in &vals {
            gw.append_element(reading("s", vec![Triple::number("t", *v).unwrap()])).unwrap();
        }
        prop_assert_eq!(causes(&gw, sub), band_oracle(10.0, 20.0, &vals));
        prop_assert!(causes(&gw, other).is_empty());
        let log = gw.log();
        for n in gw.notifications() {
            let logged = &log.entries[n.evidence.seq as usize - 1];
            prop_assert_eq!(logged.event_id, n.evidence.event_id);
        }
    }

    #[test]
    fn membership_equals_brute_force_scan(
        readings in prop::collection::vec((0u8..6, 0u8..3, 0u8..2), 0..30),
        explicit in prop::collection::btree_set("x[0-3]", 0..3),
        want_uom in 0u8..3,
        want_kind in prop::option::of(0u8..2),
    ) {
        const UOM: [&str; 3] = ["Cel", "K", "degF"];
        const KIND: [&str; 2] = ["air", "soil"];
        let gw = gateway(3);
        let mut attrs = vec![Triple::string("uom", UOM[want_uom as usize]).unwrap()];
        if let Some(k) = want_kind {
            attrs.push(Triple::string("kind", KIND[k as usize]).unwrap());
        }
        let g = gw.create_group(attrs.clone(), explicit.clone()).unwrap();
        let mut latest: BTreeMap<String, (u8, u8)> = BTreeMap::new();
        for (dev, uom, kind) in &readings {
            let id = format!("dev{dev}");
            gw.append_element(reading(&id, vec![
                Triple::string("uom", UOM[*uom as usize]).unwrap(),
                Triple::string("kind", KIND[*kind as usize]).unwrap(),
            ])).unwrap();
            latest.insert(id, (*uom, *kind));
        }
        let mut want: BTreeSet<String> = explicit;
        for (id, (uom, kind)) in latest {
            if uom == want_uom && want_kind.is_none_or(|k| k == kind) {
                want.insert(id);
            }
        }
        prop_assert_eq!(gw.members(g).unwrap(), want);
    }

    #[test]
    fn balance_is_fold_of_charges(charges in prop::collection::vec((0u8..3, 0i64..10_000), 0..40)) {
        let cfg = GatewayConfig { charge_per_event: Decimal::ZERO, ..GatewayConfig::default() };
        let gw = Gateway::in_memory(cfg, Runtime::default());
        let mut last = BTreeMap::new();
        for (acct, cents) in &charges {
            let a = format!("acct{acct}");
            gw.charge(&a, Decimal::new(*cents, 2), "bandwidth").unwrap();
            let b = gw.balance(&a);
            prop_assert!(b >= last.get(&a).copied().unwrap_or(Decimal::ZERO));
            last.insert(a, b);
        }
        for acct in 0..3u8 {
            let a = format!("acct{acct}");
            let sum: i64 = charges.iter().filter(|(x, _)| *x == acct).map(|(_, c)| c).sum();
            prop_assert_eq!(gw.balance(&a), Decimal::new(sum, 2));
        }
    }

    #[test]
    fn transactional_do_is_all_or_nothing(commands in 1usize..5, responders in 1usize..4, commit in any::<bool>()) {
        let gw = gateway(4);
        let requestor = Uuid::from_u128(1);
        gw.register_object(&requestor.to_string(), None, None).unwrap();
        let rs: Vec<Uuid> = (0..responders).map(|i| Uuid::from_u128(100 + i as u128)).collect();
        for r in &rs {
            gw.register_object(&r.to_string(), None, None).unwrap();
        }
        let txn = gw.begin_txn().unwrap();
        let req = DoRequest {
            requestor,
            commands: (0..commands).map(|i| format!("cmd{i}")).collect(),
            responders: rs.clone(),
            transaction_id: Some(txn.clone()),
        };
        prop_assert_eq!(gw.handle_do(&req).result, 200);
        for r in &rs {
            prop_assert!(gw.pending(&r.to_string()).unwrap().is_empty());
        }
        if commit {
            prop_assert!(gw.commit_txn(&txn, None).unwrap().is_committed());
        } else {
            gw.abort_txn(&txn).unwrap();
        }
        for r in &rs {
            let n = gw.pending(&r.to_string()).unwrap().len();
            prop_assert_eq!(n, if commit { commands } else { 0 });
        }
    }
}

#[test]
fn unsubscribed_never_fires() {
    let gw = gateway(5);
    let sub = subscribe(&gw, "s", Predicate::Alarm { triple_name: "alarm".into() });
    gw.append_element(reading("s", vec![Triple::boolean("alarm", true).unwrap()])).unwrap();
    gw.unsubscribe(sub).unwrap();
    gw.append_element(reading("s", vec![Triple::boolean("alarm", true).unwrap()])).unwrap();
    assert_eq!(causes(&gw, sub), [Cause::Alarm]);
    assert!(gw.unsubscribe(sub).is_err());
}

#[test]
fn duplicate_subscriptions_fire_separately() {
    let gw = gateway(6);
    let p = Predicate::Band { triple_name: "t".into(), low: 0.0, high: 1.0 };
    let a = subscribe(&gw, "s", p.clone());
    let b = subscribe(&gw, "s", p);
    assert_ne!(a, b);
    gw.append_element(reading("s", vec![Triple::number("t", 5.0).unwrap()])).unwrap();
    assert_eq!(causes(&gw, a), [Cause::Above]);
    assert_eq!(causes(&gw, b), [Cause::Above]);
}

#[test]
fn bad_band_rejected() {
    let gw = gateway(7);
    let r = gw.subscribe(Subscription {
        sub_id: Uuid::new_v4(),
        subscriber: "local:test".into(),
        registrar: "s".into(),
        target: "s".into(),
        predicate: Predicate::Band { triple_name: "t".into(), low: 2.0, high: 2.0 },
    });
    assert_eq!(r.unwrap_err().status(), 400);
}

#[test]
fn do_request_after_abort_is_rejected() {
    let gw = gateway(8);
    let req = decode_do_request(include_bytes!("fixtures/do_request.xml")).unwrap();
    gw.register_object(&req.requestor.to_string(), None, None).unwrap();
    gw.register_object(&req.responders[0].to_string(), None, None).unwrap();
    let txn = gw.begin_txn().unwrap();
    let req = DoRequest { transaction_id: Some(txn.clone()), ..req };
    assert_eq!(gw.handle_do(&req).result, 200);
    gw.abort_txn(&txn).unwrap();
    assert!(gw.pending(&req.responders[0].to_string()).unwrap().is_empty());
    assert_eq!(gw.handle_do(&req).result, 409);
}
