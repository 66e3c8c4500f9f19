use proptest::prelude::*;
use spectral_ged::autodiff::{Graph, Tensor};
use spectral_ged::checkpoint;
use spectral_ged::dsp::{istft_overlap_add, stft_complex, StftConfig, Waveform};
use spectral_ged::eval::{frechet_gaussian, GaussianStats};
use spectral_ged::ged::{
    ged_population_estimate, kernel_to_distance, minibatch_ged_loss, mmd2_ustat, FnMetric, GedLossConfig,
    PowerDistance,
};
use spectral_ged::models::GeneratorParams;
use spectral_ged::optim::AdamConfig;
use spectral_ged::spectral::{DistanceConfig, MultiScaleDistance};
use spectral_ged::wav::{wav_decode, wav_encode};

fn small_distance() -> MultiScaleDistance {
    MultiScaleDistance::new(DistanceConfig::with_windows(vec![16, 64, 128]).with_oversample(2), 8000).unwrap()
}

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

fn rows(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn distance_is_a_symmetric_nonnegative_discrepancy(a in signal(256), b in signal(256)) {
        let d = small_distance();
        let ab = d.distance(&a, &b).unwrap();
        let ba = d.distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
        prop_assert_eq!(d.distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn distance_ignores_polarity(a in signal(256)) {
        let d = small_distance();
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        prop_assert!(d.distance(&a, &neg).unwrap() < 1e-9);
    }

    #[test]
    fn graph_distance_matches_plain_path(a in signal(256), b in signal(256)) {
        let d = small_distance();
        let mut g = Graph::new();
        let va = g.constant(vec![256], a.clone()).unwrap();
        let vb = g.constant(vec![256], b.clone()).unwrap();
        let n = d.distance_node(&mut g, va, vb).unwrap();
        let plain = d.distance(&a, &b).unwrap();
        prop_assert!((g.scalar(n) - plain).abs() <= 1e-9 * plain.max(1.0));
    }

    #[test]
    fn stft_round_trip_interior(x in signal(256), k in prop::sample::select(vec![8usize, 16, 32, 64])) {
        let w = Waveform::new(x.clone(), 8000).unwrap();
        let frames = stft_complex(&w, &StftConfig::new(k).with_oversample(1)).unwrap();
        let y = istft_overlap_add(&frames, k, k / 2).unwrap();
        let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for n in k..x.len() - k {
            prop_assert!((y[n] - x[n]).abs() / scale < 1e-10);
        }
    }

    #[test]
    fn wav_round_trip_within_one_step(x in prop::collection::vec(-1.0f64..1.0, 1..300), rate in 1u32..96_000) {
        let w = Waveform::new(x.clone(), rate).unwrap();
        let back = wav_decode(&wav_encode(&w), std::path::Path::new("mem.wav")).unwrap();
        prop_assert_eq!(back.sample_rate_hz(), rate);
        for (a, b) in x.iter().zip(back.samples()) {
            prop_assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>(), 1..40), split in 0usize..40) {
        let split = split.min(values.len());
        let mut p = GeneratorParams::new();
        p.insert("a", Tensor::new(vec![split], values[..split].to_vec()).unwrap());
        p.insert("b.weight", Tensor::new(vec![1, values.len() - split], values[split..].to_vec()).unwrap());
        let back = checkpoint::decode(&checkpoint::encode(&p).unwrap(), std::path::Path::new("mem")).unwrap();
        prop_assert!(back.same_layout(&p));
        for ((_, a), (_, b)) in p.iter().zip(back.iter()) {
            let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn minibatch_loss_decomposes(xs in rows(5, 3), ys in rows(5, 3), yps in rows(5, 3)) {
        let m = PowerDistance::euclidean();
        let full = minibatch_ged_loss(&xs, &ys, &yps, GedLossConfig { repulsive: true }, &m).unwrap();
        prop_assert!((full.total - (full.attract - full.repulse)).abs() < 1e-12);
        let attract_only = minibatch_ged_loss(&xs, &ys, &yps, GedLossConfig { repulsive: false }, &m).unwrap();
        prop_assert_eq!(attract_only.repulse, 0.0);
        prop_assert_eq!(attract_only.total, full.attract);
    }

    #[test]
    fn mmd_equals_energy_estimate_for_constant_diagonal_kernels(xs in rows(4, 2), ys in rows(6, 2), bw in 0.3f64..3.0) {
        let kernel = |a: &Vec<f64>, b: &Vec<f64>| {
            let d2: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
            (-d2 / (2.0 * bw * bw)).exp()
        };
        let mmd = mmd2_ustat(&xs, &ys, kernel).unwrap();
        let metric = FnMetric(|a: &Vec<f64>, b: &Vec<f64>| kernel_to_distance(kernel, a, b));
        let ged = ged_population_estimate::<Vec<f64>, _>(&xs, &ys, &metric).unwrap();
        prop_assert!((mmd - ged).abs() < 1e-12);
    }

    #[test]
    fn frechet_is_symmetric_and_zero_on_self(a in rows(12, 3), b in rows(12, 3)) {
        let sa = GaussianStats::from_samples(&a, false).unwrap();
        let sb = GaussianStats::from_samples(&b, false).unwrap();
        let ab = frechet_gaussian(&sa, &sb).unwrap();
        let ba = frechet_gaussian(&sb, &sa).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-7 * ab.max(1.0));
        prop_assert!(frechet_gaussian(&sa, &sa).unwrap() < 1e-7);
    }

    #[test]
    fn warmup_is_monotone(t in 1u64..20_000) {
        let cfg = AdamConfig::default();
        prop_assert!(cfg.lr_at(t) <= cfg.lr_at(t + 1));
        prop_assert!(cfg.lr_at(t) <= cfg.lr);
        let decayed = AdamConfig::toy().with_cosine_decay(1000);
        prop_assert!(decayed.lr_at(t + 1) <= decayed.lr_at(t));
    }
}
