use audiodistill::dsp::{self, StftConfig, Window};
use audiodistill::mat::Mat;
use audiodistill::reconstruct::{griffin_lim, MagnitudeSpec};
use std::f64::consts::TAU;

#[test]
fn probe() {
    let cfg = StftConfig::new(160, 80, 256, Window::Hann).unwrap();
    for freq in [440.0, 1000.0] {
        let x: Vec<f64> = (0..4000).map(|t| 0.6 * (TAU * freq * t as f64 / 8000.0).sin()).collect();
        let a = MagnitudeSpec { mags: dsp::stft(&x, &cfg).unwrap().magnitude(), config: cfg };
        for seed in [1234u64, 7, 99] {
            let res = griffin_lim(&a, 200, seed);
            let h = &res.residual_history;
            println!(
                "f{freq} seed{seed}: r1={:.4} r10={:.4} r30={:.4} r60={:.4} r100={:.4} r200={:.4}",
                h[0], h[9], h[29], h[59], h[99], h[199]
            );
        }
    }
    // hop/4 variant for comparison
    let cfg2 = StftConfig::new(160, 40, 256, Window::Hann).unwrap();
    let x: Vec<f64> = (0..4000).map(|t| 0.6 * (TAU * 440.0 * t as f64 / 8000.0).sin()).collect();
    let a = MagnitudeSpec { mags: dsp::stft(&x, &cfg2).unwrap().magnitude(), config: cfg2 };
    let res = griffin_lim(&a, 60, 1234);
    let h = &res.residual_history;
    println!("hop40: r1={:.4} r10={:.4} r30={:.4} r60={:.4}", h[0], h[9], h[29], h[59]);
}
