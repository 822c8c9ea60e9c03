//! Whole-run properties of the sampler on the student network.

use samegibbs::datagen::{forward_sample, mask};
use samegibbs::formats::koller_network;
use samegibbs::metrics::kl_avg;
use samegibbs::{AccumulatorMode, DataMatrix, InMemorySource, MSchedule, Sampler, SamplerConfig, StreamKey};

fn student_data(cases: usize, hide: f64, seed: u64) -> DataMatrix {
    let (net, truth) = koller_network();
    mask(&forward_sample(&net, &truth, cases, StreamKey::new(seed)), hide, StreamKey::new(seed + 1)).unwrap()
}

/// Standard deviation, over the last passes, of one CPT entry.
fn late_spread(m: usize, data: &DataMatrix) -> f64 {
    let (net, _) = koller_network();
    let cfg = SamplerConfig {
        same_m: MSchedule::constant(m),
        minibatch_size: 1_000,
        num_passes: 80,
        seed: 4,
        ..SamplerConfig::default()
    };
    let mut draws = Vec::new();
    Sampler::new(net, cfg)
        .unwrap()
        .run_with(&mut InMemorySource::new(data), None, |st, rec| {
            if rec.pass > 40 {
                draws.push(st.current_cpts.row(3, 1)[0]);
            }
        })
        .unwrap();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt()
}

#[test]
fn replication_sharpens_the_parameter_posterior() {
    let data = student_data(4_000, 0.5, 1);
    let (s1, s8) = (late_spread(1, &data), late_spread(8, &data));
    // a posterior raised to the 8th power is roughly sqrt(8) times narrower
    assert!(s8 < s1 / 2.0, "m=1 spread {s1}, m=8 spread {s8}");
}

#[test]
fn counts_cover_every_case_and_replica() {
    let (net, _) = koller_network();
    let data = student_data(2_345, 0.4, 3);
    let cfg = SamplerConfig {
        same_m: "1x2,3x2".parse().unwrap(),
        minibatch_size: 500,
        num_passes: 4,
        ..SamplerConfig::default()
    };
    let mut checked = 0;
    Sampler::new(net.clone(), cfg)
        .unwrap()
        .run_with(&mut InMemorySource::new(&data), None, |st, rec| {
            let m = if rec.pass <= 2 { 1.0 } else { 3.0 };
            // at the end of a pass the moving sum holds exactly one pass of counts
            if rec.pass != 3 {
                for v in 0..net.num_vars() {
                    assert_eq!(st.total_counts.total(v), m * 2_345.0, "pass {} var {v}", rec.pass);
                }
                assert!(st.moving_sum_residual() < 1e-9);
                checked += 1;
            }
        })
        .unwrap();
    assert_eq!(checked, 3);
}

#[test]
fn accumulators_reach_similar_estimates() {
    let (net, truth) = koller_network();
    let data = student_data(10_000, 0.5, 5);
    let kl = |accumulator| {
        let cfg = SamplerConfig {
            minibatch_size: 2_000,
            num_passes: 60,
            accumulator,
            same_m: MSchedule::constant(3),
            seed: 6,
            ..SamplerConfig::default()
        };
        let out = Sampler::new(net.clone(), cfg).unwrap().run(&mut InMemorySource::new(&data), Some(&truth)).unwrap();
        kl_avg(&truth, &out.cpts).unwrap()
    };
    let (moving, exp) = (kl(AccumulatorMode::MovingSum), kl(AccumulatorMode::Exponential));
    assert!(moving < 0.01 && exp < 0.01, "moving {moving}, exponential {exp}");
}

#[test]
fn map_estimate_on_complete_data_is_the_smoothed_frequency() {
    let (net, truth) = koller_network();
    let data = student_data(3_000, 0.0, 7);
    let cfg = SamplerConfig { minibatch_size: 3_000, num_passes: 1, map_estimate: true, ..SamplerConfig::default() };
    let out = Sampler::new(net.clone(), cfg).unwrap().run(&mut InMemorySource::new(&data), Some(&truth)).unwrap();
    // independent count of P(X2 = 1 | X0 = 1)
    let (mut hit, mut total) = (0.0, 0.0);
    for c in 0..data.num_cases() {
        if data.get(0, c) == Some(1) {
            total += 1.0;
            if data.get(2, c) == Some(1) {
                hit += 1.0;
            }
        }
    }
    let expected = (hit + 1.0) / (total + 2.0);
    assert!((out.cpts.row(2, 1)[1] - expected).abs() < 1e-12);
}
