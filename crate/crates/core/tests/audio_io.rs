mod common;

use lsc::audio::{encode_wav, frame_signal, parse_wav, read_wav, AudioBuffer};
use lsc::Error;
use proptest::prelude::*;

fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn golden_wav_decodes_bit_exactly() {
    let audio = read_wav(&fixture("golden.wav")).unwrap();
    let expected: Vec<f64> = std::fs::read_to_string(fixture("golden.txt"))
        .unwrap()
        .lines()
        .map(|l| l.parse::<i16>().unwrap() as f64 / 32768.0)
        .collect();
    assert_eq!(audio.sample_rate_hz, 8000);
    assert_eq!(audio.samples, expected);
}

#[test]
fn golden_wav_reencodes_to_the_same_bytes() {
    let bytes = std::fs::read(fixture("golden.wav")).unwrap();
    assert_eq!(encode_wav(&parse_wav(&bytes).unwrap()), bytes);
}

#[test]
fn one_second_gives_98_overlapping_frames() {
    let audio = parse_wav(&common::pcm16_wav(&common::tone_second(), 16_000)).unwrap();
    let fm = frame_signal(&audio, 25.0, 10.0).unwrap();
    assert_eq!(fm.num_frames(), 98);
    assert_eq!(fm.frame_len, 400);
    assert_eq!(fm.frame_len - fm.hop, 240);
    for t in 0..fm.num_frames() {
        assert_eq!(fm.frame(t), &audio.samples[t * 160..t * 160 + 400]);
    }
}

#[test]
fn truncated_data_chunk_names_its_offset() {
    let mut bytes = common::pcm16_wav(&[1, 2, 3], 16_000);
    bytes.truncate(bytes.len() - 1);
    match parse_wav(&bytes) {
        Err(e @ Error::Format { .. }) => {
            assert!(e.to_string().contains("byte offset"), "{e}");
            assert_eq!(e.exit_code(), 3);
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn stereo_is_rejected_at_the_channel_field() {
    let mut bytes = common::pcm16_wav(&[0; 4], 16_000);
    bytes[22] = 2;
    match parse_wav(&bytes) {
        Err(Error::UnsupportedFormat { offset, field, .. }) => {
            assert_eq!(offset, 22);
            assert!(field.contains("channel"), "{field}");
        }
        other => panic!("expected unsupported format, got {other:?}"),
    }
}

proptest! {
    #[test]
    fn pcm16_round_trip(samples in prop::collection::vec(any::<i16>(), 0..300), rate in 1u32..96_000) {
        let bytes = common::pcm16_wav(&samples, rate);
        let audio = parse_wav(&bytes).unwrap();
        prop_assert_eq!(audio.samples.len(), samples.len());
        for (a, s) in audio.samples.iter().zip(&samples) {
            prop_assert_eq!(*a, *s as f64 / 32768.0);
        }
        prop_assert_eq!(encode_wav(&audio), bytes);
    }

    #[test]
    fn frame_count_matches_formula(n in 400usize..5000) {
        let audio = AudioBuffer::new(vec![0.0; n], 16_000).unwrap();
        let fm = frame_signal(&audio, 25.0, 10.0).unwrap();
        prop_assert_eq!(fm.num_frames(), (n - 400) / 160 + 1);
    }
}
