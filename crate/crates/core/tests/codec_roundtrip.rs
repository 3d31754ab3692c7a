use idlefleet_core::client_sim::{ExecutionResult, Outcome};
use idlefleet_core::scheduler::CrashReport;
use idlefleet_core::testbank::{Phase, TestSource};
use idlefleet_core::transport::{decode, encode, read_frame, ErrorCode, FrameError, Message};
use idlefleet_core::{BundlePatch, DeviceId, DeviceProfile, TestBundle, TestCase};
use proptest::prelude::*;

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ._#:\u{4e00}-\u{4e10}\"\\\\]{0,16}"
}

fn device() -> impl Strategy<Value = DeviceId> {
    (1u32..999_999).prop_map(|n| DeviceId::from(format!("dev-{n:06}").as_str()))
}

fn profile() -> impl Strategy<Value = DeviceProfile> {
    (
        "[A-Za-z]{1,8}",
        "[A-Za-z0-9 -]{1,10}",
        1u32..40,
        320u32..3000,
        320u32..3000,
    )
        .prop_map(|(b, m, l, w, h)| DeviceProfile::new(&b, &m, l, "soc", "en-US", (w, h)))
}

fn outcome() -> impl Strategy<Value = Outcome> {
    prop_oneof![
        Just(Outcome::Pass),
        Just(Outcome::Crash),
        Just(Outcome::SkippedCrash),
        (
            text(),
            text(),
            prop_oneof![Just(Phase::Before), Just(Phase::Test), Just(Phase::AfterClass)]
        )
            .prop_map(|(error_kind, message, failed_phase)| Outcome::Fail {
                error_kind,
                message,
                failed_phase
            }),
    ]
}

fn result() -> impl Strategy<Value = ExecutionResult> {
    (text(), text(), device(), outcome(), any::<u64>(), any::<u64>()).prop_map(
        |(test_id, target_api, device, outcome, batch_index, timestamp)| ExecutionResult {
            test_id,
            target_api,
            device,
            outcome,
            batch_index,
            timestamp,
        },
    )
}

fn patch() -> impl Strategy<Value = Option<BundlePatch>> {
    proptest::option::of(
        (1u64..100, proptest::collection::vec(0u32..50, 0..5)).prop_map(|(v, ids)| {
            let cases = ids
                .into_iter()
                .map(|i| TestCase::with_standard_lifecycle(&format!("c{i}"), "a.B#c", TestSource::Aosp, 2));
            BundlePatch::full(&TestBundle::new(v, cases))
        }),
    )
}

fn message() -> impl Strategy<Value = Message> {
    let code = prop_oneof![
        Just(ErrorCode::Malformed),
        Just(ErrorCode::StaleCursor),
        Just(ErrorCode::StaleBatch),
        Just(ErrorCode::NotReady),
    ];
    prop_oneof![
        profile().prop_map(|profile| Message::Register { profile }),
        device().prop_map(|device_id| Message::Registered { device_id }),
        (
            device(),
            0usize..100_000,
            any::<u64>(),
            proptest::option::of((any::<u64>(), 0usize..1000))
        )
            .prop_map(
                |(device_id, cursor_position, bundle_version, crash)| Message::BatchRequest {
                    device_id,
                    cursor_position,
                    bundle_version,
                    crash_report: crash.map(|(batch_index, crashed_at)| CrashReport {
                        batch_index,
                        crashed_at
                    }),
                }
            ),
        (
            any::<u64>(),
            0usize..100_000,
            proptest::collection::vec(text(), 0..8),
            patch()
        )
            .prop_map(
                |(batch_index, start_position, manifest, patch)| Message::BatchResponse {
                    batch_index,
                    start_position,
                    manifest,
                    patch
                }
            ),
        Just(Message::Done),
        (device(), any::<u64>(), proptest::collection::vec(result(), 0..6)).prop_map(
            |(device_id, batch_index, results)| Message::Results {
                device_id,
                batch_index,
                results
            }
        ),
        (0usize..10_000).prop_map(|accepted_count| Message::Ack { accepted_count }),
        (
            code,
            text(),
            proptest::option::of(any::<u64>()),
            proptest::option::of(0usize..1000)
        )
            .prop_map(
                |(code, message, current_batch_index, expected_position)| Message::Error {
                    code,
                    message,
                    current_batch_index,
                    expected_position
                }
            ),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn encode_decode_roundtrip(m in message()) {
        let frame = encode(&m);
        prop_assert_eq!(decode(&frame).unwrap(), m.clone());
        // encoding is canonical
        prop_assert_eq!(encode(&decode(&frame).unwrap()), frame);
    }

    #[test]
    fn frames_split_cleanly_from_a_stream(ms in proptest::collection::vec(message(), 1..6)) {
        let stream: Vec<u8> = ms.iter().flat_map(encode).collect();
        let mut reader = stream.as_slice();
        let mut back = Vec::new();
        while let Some(frame) = read_frame(&mut reader).unwrap() {
            back.push(decode(&frame).unwrap());
        }
        prop_assert_eq!(back, ms);
    }

    #[test]
    fn truncated_frames_are_rejected(m in message(), cut in 1usize..8) {
        let frame = encode(&m);
        let cut = cut.min(frame.len());
        prop_assert!(decode(&frame[..frame.len() - cut]).is_err());
    }
}

#[test]
fn length_prefix_is_big_endian() {
    let frame = encode(&Message::Done);
    let len = u32::from_be_bytes([frame[0], frame[1], frame[2], frame[3]]) as usize;
    assert_eq!(len, frame.len() - 4);
    assert_eq!(&frame[4..], br#"{"protocol_version":1,"type":"DONE"}"#);
}

#[test]
fn oversized_prefix_rejected() {
    let frame = u32::MAX.to_be_bytes();
    assert!(matches!(decode(&frame), Err(FrameError::TooLarge(_))));
}
