use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seld_core::accdoa::{angle_deg, angles_from_doa};
use seld_core::features::{
    encode_static, extract, hann_window, intensity_vectors, mean_iv_direction, read_wav, stft, write_wav,
    FeatureTensor, MelBank, MultichannelAudio, N_BINS, N_MELS, SAMPLE_RATE, WIN_LEN,
};
use seld_core::infertools::AcsTransform;

fn sine(freq: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()).collect()
}

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

fn scratch(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("seld-core-features-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn one_kilohertz_sine_peaks_at_bin_forty() {
    let mono = sine(1000.0, 4800);
    let mut a = MultichannelAudio::silence(4800);
    a.channels[0] = mono.clone();
    let spec = stft(&a).unwrap();
    let t = 3;
    let peak = (0..N_BINS).max_by(|&i, &j| spec.at(0, t, i).norm().total_cmp(&spec.at(0, t, j).norm())).unwrap();
    assert_eq!(peak, 40);

    // direct DFT of the same windowed frame
    let w = hann_window();
    let frame: Vec<f64> = (0..WIN_LEN).map(|n| mono[480 * t + n] * w[n]).collect();
    for k in [0, 39, 40, 41, 200] {
        let (mut re, mut im) = (0.0, 0.0);
        for (n, &x) in frame.iter().enumerate() {
            let ph = -2.0 * std::f64::consts::PI * (k * n) as f64 / WIN_LEN as f64;
            re += x * ph.cos();
            im += x * ph.sin();
        }
        let got = spec.at(0, t, k);
        assert!((got.re - re).abs() < 1e-9 && (got.im - im).abs() < 1e-9, "bin {k}");
    }
}

#[test]
fn white_noise_energy_reaches_every_mel_band() {
    let mut a = MultichannelAudio::silence(960);
    a.channels[0] = noise(960, 1);
    let spec = stft(&a).unwrap();
    let power: Vec<f64> = (0..N_BINS).map(|k| spec.at(0, 0, k).norm_sqr()).collect();
    let bank = MelBank::standard();
    let mut mel = vec![0.0; N_MELS];
    bank.project(&power, &mut mel);
    assert!(mel.iter().all(|&e| e > 0.0));
}

#[test]
fn frontal_source_intensity_points_forward() {
    let a = encode_static(&noise(24_000, 2), 0.0, 0.0);
    let f = extract(&a, &MelBank::standard()).unwrap();
    assert_eq!(f.frames(), 50);
    assert!(angle_deg(mean_iv_direction(&f), [1.0, 0.0, 0.0]) < 1.0);
}

#[test]
fn intensity_direction_tracks_source_direction() {
    let bank = MelBank::standard();
    for (az, el) in [(90.0, 0.0), (-135.0, 20.0), (45.0, -30.0)] {
        let a = encode_static(&noise(12_000, 3), f64::to_radians(az), f64::to_radians(el));
        let f = extract(&a, &bank).unwrap();
        let want = seld_core::accdoa::doa_from_angles(az, el);
        assert!(angle_deg(mean_iv_direction(&f), want) < 2.0, "az {az} el {el}");
    }
}

#[test]
fn negating_y_mirrors_azimuth() {
    let bank = MelBank::standard();
    let mono = noise(12_000, 4);
    let a = encode_static(&mono, f64::to_radians(40.0), 0.0);
    let flip = AcsTransform { neg_y: true, ..AcsTransform::IDENTITY };
    let f = extract(&flip.apply_audio(&a), &bank).unwrap();
    let (az, _) = angles_from_doa(mean_iv_direction(&f));
    assert!((az + 40.0).abs() < 1.0, "azimuth {az}");
    let mirrored = extract(&encode_static(&mono, f64::to_radians(-40.0), 0.0), &bank).unwrap();
    assert_eq!(f, mirrored);
}

#[test]
fn channel_swaps_commute_with_feature_extraction() {
    let bank = MelBank::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut a = MultichannelAudio::silence(4800);
    for ch in a.channels.iter_mut() {
        ch.iter_mut().for_each(|s| *s = rng.gen_range(-0.3..0.3));
    }
    let base = extract(&a, &bank).unwrap();
    for t in AcsTransform::all() {
        let via_audio = extract(&t.apply_audio(&a), &bank).unwrap();
        let via_features = t.apply_features(&base);
        let err = via_audio
            .data
            .data()
            .iter()
            .zip(via_features.data.data())
            .map(|(x, y)| (x - y).abs() as f64)
            .fold(0.0, f64::max);
        assert!(err <= 1e-9, "transform {} differs by {err}", t.id());
    }
}

#[test]
fn intensity_vectors_are_zero_for_silence_and_bounded_otherwise() {
    let bank = MelBank::standard();
    let a = encode_static(&sine(700.0, 4800), 1.0, 0.2);
    let iv = intensity_vectors(&stft(&a).unwrap(), &bank);
    assert!(iv.data().iter().all(|v| v.abs() <= 1.0 + 1e-9));
}

#[test]
fn wav_and_feature_cache_round_trip() {
    let a = encode_static(&noise(4800, 6), 0.3, 0.1);
    let wav = scratch("clip.wav");
    write_wav(&wav, &a).unwrap();
    let back = read_wav(&wav).unwrap();
    assert_eq!(back.num_samples(), 4800);
    for (x, y) in a.channels.iter().flatten().zip(back.channels.iter().flatten()) {
        assert!((x - y).abs() < 1e-7);
    }
    let f = extract(&back, &MelBank::standard()).unwrap();
    let cache = scratch("clip.feat");
    f.save(&cache).unwrap();
    assert_eq!(FeatureTensor::load(&cache).unwrap(), f);
}

#[test]
fn five_second_clip_fills_one_window() {
    let f = extract(&MultichannelAudio::silence(5 * SAMPLE_RATE as usize), &MelBank::standard()).unwrap();
    assert_eq!(f.data.shape(), &[7, 250, 64]);
    assert_eq!(f.window(200, 100).frames(), 100);
}
