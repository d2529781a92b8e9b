//! Acceptance gates for the crate, numbered and independent: exact property
//! checks first, then scaled-down statistical campaigns whose tolerances are
//! deliberately loose (tens of realizations instead of the thousand-seed
//! production campaigns, and smaller Fock spaces).
//!
//! Each test prints one `criterion NN (...): PASS/FAIL (...)` line; run with
//! `-- --nocapture` to see the lines for passing tests too. Criterion 14
//! drives the dissipative integrator at large dimension for the better part
//! of an hour and is ignored by default; include it with `cargo test -- --ignored`.

use std::sync::OnceLock;

use kerr_echo::ensemble::{fit_power_law, run_ensemble};
use kerr_echo::fock::{vacuum, DensityMatrix, FockDim};
use kerr_echo::io;
use kerr_echo::linalg::max_abs_diff;
use kerr_echo::metrology::{optimize_bias, MetrologyRecord};
use kerr_echo::presets::preset;
use kerr_echo::propagator::{
    evolve_lindblad_with, evolve_unitary_channel_with, evolve_unitary_with, EvolveOptions,
};
use kerr_echo::protocol::{
    derivative_probabilities, prepare_probe, run_protocol, FluctuationScope, LossScope, PovmKind,
    ProtocolConfig,
};
use kerr_echo::pulse::{constant_train, sample_train, FluctuationSpec, PulseKind};
use kerr_echo::wigner::{wigner_grid, wigner_point};
use kerr_echo::C64;

/// Prints the one-line verdict and panics on failure so the harness reports
/// the test red.
fn report(tag: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("criterion {tag}: {verdict} ({detail})");
    assert!(ok, "criterion {tag}: {detail}");
}

/// Closed-system configuration with no readout noise; tests override fields.
fn unitary_config(d: usize, kind: PulseKind, epsilon: f64, tau: f64, chi_t: f64) -> ProtocolConfig {
    ProtocolConfig {
        d,
        kind,
        epsilon,
        tau,
        chi_t,
        kappa: 0.0,
        eps_dp: 0.0,
        povm: PovmKind::Binary,
        seed: 0,
        fluctuation: None,
        fluctuation_scope: FluctuationScope::Both,
        loss_scope: LossScope::Both,
    }
}

#[test]
fn criterion_01_echo_identity() {
    // A perfect reversal returns the vacuum exactly: at theta = 0 with no
    // loss and no readout noise, the ground-state outcome must be certain.
    let mut config = preset("fig2a").unwrap();
    config.eps_dp = 0.0;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        config.seed = seed;
        let outcome = run_protocol(&config, 0.0).unwrap();
        worst = worst.max((outcome.probs[0] - 1.0).abs());
    }
    report("01 (echo identity)", worst < 1e-8, &format!("max |p0 - 1| = {worst:.3e} over 20 seeds"));
}

#[test]
fn criterion_02_displacement_oracle() {
    // With the Kerr term switched off, a constant drive of area u*T displaces
    // the vacuum into a coherent state with mean photon number (u*T)^2.
    let dim = FockDim::new(64).unwrap();
    let train = constant_train(PulseKind::SinglePhoton, 1.5, 0.0, 0.1, 1.0).unwrap();
    let opts = EvolveOptions { kerr_scale: 0.0, ..Default::default() };
    let (state, _) = evolve_unitary_with(&vacuum(dim), &train, &opts).unwrap();
    let (n_mean, _) = state.number_moments();
    let err = (n_mean - 2.25).abs();
    report("02 (displacement oracle)", err < 1e-6, &format!("|<n> - 2.25| = {err:.3e}"));
}

#[test]
fn criterion_03_decay_oracle() {
    // Pure decay, no Hamiltonian: |1><1| loses population as e^{-kappa t}.
    let dim = FockDim::new(8).unwrap();
    let idle = constant_train(PulseKind::SinglePhoton, 0.0, 0.0, 0.05, 0.5).unwrap();
    let opts = EvolveOptions { kerr_scale: 0.0, ..Default::default() };
    let one = DensityMatrix::number_projector(dim, 1).unwrap();
    let (decayed, _) = evolve_lindblad_with(&one, &idle, 1.0, &opts).unwrap();
    let p1_err = (decayed.populations()[1] - (-0.5f64).exp()).abs();
    let trace_err = (decayed.trace().re - 1.0).abs();

    // At kappa = 0 the integrator must reproduce the exact unitary channel
    // on a genuine random schedule.
    let d32 = FockDim::new(32).unwrap();
    let drive = sample_train(PulseKind::SinglePhoton, 2.0, 0.1, 0.5, 7).unwrap();
    let rho0 = DensityMatrix::vacuum(d32);
    let (via_ode, _) = evolve_lindblad_with(&rho0, &drive, 0.0, &EvolveOptions::default()).unwrap();
    let (via_expm, _) = evolve_unitary_channel_with(&rho0, &drive, &EvolveOptions::default()).unwrap();
    let route_gap = max_abs_diff(via_ode.matrix(), via_expm.matrix());

    report(
        "03 (decay oracle)",
        p1_err < 1e-7 && trace_err < 1e-9 && route_gap < 1e-8,
        &format!(
            "|p1 - e^(-1/2)| = {p1_err:.3e}, trace defect {trace_err:.3e}, \
             kappa=0 vs unitary {route_gap:.3e}"
        ),
    );
}

#[test]
fn criterion_04_derivative_oracle() {
    // The exact outcome derivatives against central finite differences, over
    // small configurations of both drive kinds.
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let (kind, epsilon) = if seed % 2 == 0 {
            (PulseKind::SinglePhoton, 1.0 + 0.25 * seed as f64)
        } else {
            (PulseKind::TwoPhoton, 0.4 + 0.12 * seed as f64)
        };
        let mut config = unitary_config(24, kind, epsilon, 0.1, 0.5);
        config.eps_dp = 1e-3;
        config.seed = seed;
        let theta0 = 0.15 + 0.04 * seed as f64;
        let exact = derivative_probabilities(&config, theta0).unwrap();
        let h = 1e-5;
        let lo = run_protocol(&config, theta0 - h).unwrap().probs;
        let hi = run_protocol(&config, theta0 + h).unwrap().probs;
        for (k, &e) in exact.iter().enumerate() {
            let fd = (hi[k] - lo[k]) / (2.0 * h);
            worst = worst.max((e - fd).abs() / e.abs().max(1e-3));
        }
    }
    report(
        "04 (derivative oracle)",
        worst < 1e-5,
        &format!("max relative gap {worst:.3e} over 10 configurations"),
    );
}

#[test]
fn criterion_05_cfi_bounded_by_qfi() {
    // The classical information of any readout cannot exceed the quantum
    // bound of the probe, realization by realization.
    let config = unitary_config(128, PulseKind::SinglePhoton, 30.0, 0.1, 1.5);
    let summary = run_ensemble(&config, 50, 0).unwrap();
    assert!(summary.excluded.is_empty(), "excluded: {:?}", summary.excluded);
    let mut worst = f64::NEG_INFINITY;
    for r in &summary.records {
        let qfi = r.qfi.expect("noiseless probes carry the quantum bound");
        worst = worst.max(r.cfi_max / qfi);
    }
    report(
        "05 (information bound)",
        worst <= 1.0 + 1e-6,
        &format!("max I_c/I_q = {worst:.9} over 50 noiseless realizations"),
    );
}

#[test]
fn criterion_06_parity_conservation() {
    // The pair drive only ever moves photons two at a time: probes stay in
    // the even sector and the middle ternary outcome stays empty.
    let mut config = preset("fig3a_two").unwrap();
    config.eps_dp = 0.0;
    config.povm = PovmKind::Ternary;
    let mut worst_odd = 0.0f64;
    let mut worst_p1 = 0.0f64;
    for seed in 0..20 {
        config.seed = seed;
        let (probe, _) = prepare_probe(&config).unwrap();
        let odd: f64 = probe.populations().iter().skip(1).step_by(2).sum();
        worst_odd = worst_odd.max(odd);
        let outcome = run_protocol(&config, 0.2).unwrap();
        worst_p1 = worst_p1.max(outcome.probs[1]);
    }
    report(
        "06 (parity conservation)",
        worst_odd < 1e-8 && worst_p1 < 1e-8,
        &format!("max odd population {worst_odd:.3e}, max p1 {worst_p1:.3e} over 20 seeds"),
    );
}

#[test]
fn criterion_07_phase_space_gates() {
    let two_over_pi = 2.0 / std::f64::consts::PI;
    let d16 = FockDim::new(16).unwrap();
    let vac_err = (wigner_point(&DensityMatrix::vacuum(d16), C64::new(0.0, 0.0)).unwrap()
        - two_over_pi)
        .abs();
    let grid = wigner_grid(&DensityMatrix::vacuum(FockDim::new(8).unwrap()), 5.0, 101).unwrap();
    let mass_err = (grid.total_mass() - 1.0).abs();
    let one = DensityMatrix::number_projector(d16, 1).unwrap();
    let neg_err = (wigner_point(&one, C64::new(0.0, 0.0)).unwrap() + two_over_pi).abs();
    report(
        "07 (phase-space gates)",
        vac_err < 1e-9 && mass_err < 1e-3 && neg_err < 1e-9,
        &format!(
            "vacuum peak off by {vac_err:.3e}, grid mass off by {mass_err:.3e}, \
             single-photon core off by {neg_err:.3e}"
        ),
    );
}

#[test]
fn criterion_08_fit_oracle() {
    // Exact power-law data must come back bit-clean from both fit modes.
    let points: Vec<(f64, f64)> =
        (0..12).map(|i| { let x = 2.0 * 1.6f64.powi(i); (x, 2.17 * x.powf(1.95)) }).collect();
    let (a, b) = fit_power_law(&points, false).unwrap();
    let (aw, bw) = fit_power_law(&points, true).unwrap();
    let worst =
        (a - 2.17).abs().max((b - 1.95).abs()).max((aw - 2.17).abs()).max((bw - 1.95).abs());
    report("08 (fit oracle)", worst < 1e-9, &format!("max parameter error {worst:.3e}"));
}

#[test]
fn criterion_09_worker_count_determinism() {
    // Identical seeds through pools of different width must serialize to the
    // same bytes.
    let mut config = preset("fig3a_single").unwrap();
    config.d = 64;
    config.epsilon = 4.0;
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let summary = pool.install(|| run_ensemble(&config, 6, 3)).unwrap();
        io::records_csv(&summary.records).unwrap()
    };
    let narrow = run(1);
    let wide = run(3);
    report(
        "09 (worker-count determinism)",
        narrow == wide && narrow.lines().count() == 7,
        &format!("{} CSV bytes, byte-identical across pool widths", narrow.len()),
    );
}

#[test]
fn criterion_10_quantum_enhancement() {
    // Scaled-down brightness campaign: the mean optimal gain must sit well
    // above the shot-noise line.
    let mut config = preset("fig2a").unwrap();
    config.d = 600;
    let summary = run_ensemble(&config, 20, 0).unwrap();
    report(
        "10 (quantum enhancement)",
        summary.mean_gain > 5.0,
        &format!(
            "mean gain {:.2} (std {:.2}) over {} kept of 20",
            summary.mean_gain,
            summary.std_gain,
            summary.records.len()
        ),
    );
}

/// Shared brightness sweep for criteria 11 and 12: four drive scales, ten
/// realizations each, dimensions sized so every realization clears the
/// truncation guard.
static BRIGHTNESS: OnceLock<Result<Vec<MetrologyRecord>, String>> = OnceLock::new();

fn brightness_campaign() -> &'static [MetrologyRecord] {
    let result = BRIGHTNESS.get_or_init(|| {
        let cells = [(25.0, 256), (50.0, 448), (75.0, 512), (100.0, 600)];
        let mut records = Vec::new();
        for (epsilon, d) in cells {
            let mut config = preset("fig2a").unwrap();
            config.d = d;
            config.epsilon = epsilon;
            let summary = run_ensemble(&config, 10, 0).map_err(|e| e.to_string())?;
            if !summary.excluded.is_empty() {
                return Err(format!(
                    "cell epsilon={epsilon} d={d} excluded {} realizations",
                    summary.n_excluded()
                ));
            }
            records.extend(summary.records);
        }
        Ok(records)
    });
    match result {
        Ok(records) => records,
        Err(e) => panic!("brightness campaign failed: {e}"),
    }
}

#[test]
fn criterion_11_information_scaling() {
    let records = brightness_campaign();
    let points: Vec<(f64, f64)> = records.iter().map(|r| (r.n_mean, r.cfi_max)).collect();
    let (a, b) = fit_power_law(&points, false).unwrap();
    report(
        "11 (information scaling)",
        (1.6..=2.1).contains(&b),
        &format!("I_c = {a:.2} <n>^{b:.3} over {} realizations", points.len()),
    );
}

#[test]
fn criterion_12_bias_point_scaling() {
    let records = brightness_campaign();
    let points: Vec<(f64, f64)> = records.iter().map(|r| (r.n_mean, r.theta_b)).collect();
    let (c, e) = fit_power_law(&points, true).unwrap();
    report(
        "12 (bias-point scaling)",
        (-1.2..=-0.6).contains(&e),
        &format!("theta_b = {c:.3} <n>^{e:.3} over {} realizations", points.len()),
    );
}

/// Mean optimal gain over 10 drive seeds; at nonzero noise, each drive seed
/// is crossed with 10 independent noise seeds.
fn noisy_mean_gain(base: &ProtocolConfig, rel: f64) -> f64 {
    let mut gains = Vec::new();
    for drive_seed in 0..10u64 {
        let mut config = base.clone();
        config.seed = drive_seed;
        if rel == 0.0 {
            config.fluctuation = None;
            gains.push(optimize_bias(&config).unwrap().gain_max);
        } else {
            for noise_seed in 0..10u64 {
                config.fluctuation =
                    Some(FluctuationSpec { delta_eps: rel * base.epsilon, seed: 1000 + noise_seed });
                gains.push(optimize_bias(&config).unwrap().gain_max);
            }
        }
    }
    gains.iter().sum::<f64>() / gains.len() as f64
}

#[test]
fn criterion_13_fluctuation_robustness() {
    // Amplitude noise at the percent level must not collapse the gain: the
    // noisy waveform is echoed as played, so a fluctuated run is just another
    // random drive, not a broken reversal.
    let mut ok = true;
    let mut detail = String::new();
    for (name, d) in [("fig3a_single", 384), ("fig3a_two", 256)] {
        let mut base = preset(name).unwrap();
        base.d = d;
        let g0 = noisy_mean_gain(&base, 0.0);
        let g2 = noisy_mean_gain(&base, 0.02);
        let g5 = noisy_mean_gain(&base, 0.05);
        ok &= (g5 - g0).abs() <= 0.5 * g0;
        detail += &format!("{name}: mean gain {g0:.2} -> {g2:.2} -> {g5:.2} at 0/2/5%; ");
    }
    report("13 (drive-noise robustness)", ok, detail.trim_end_matches("; "));
}

#[test]
#[ignore = "extended suite: integrates the dissipative path at scale, slow"]
fn criterion_14_loss_resilience() {
    // With photon loss on both passes the gain must survive above the
    // shot-noise line and information must still grow faster than linearly
    // in brightness, if shallower than the closed-system square law.
    let cells = [(20.0, 80), (40.0, 160), (60.0, 224)];
    let mut records = Vec::new();
    let mut detail = String::new();
    for (epsilon, d) in cells {
        let mut config = preset("fig3b_loss").unwrap();
        config.d = d;
        config.epsilon = epsilon;
        let summary = run_ensemble(&config, 8, 0).unwrap();
        detail += &format!(
            "eps={epsilon}: kept {} of 8, mean gain {:.2}; ",
            summary.records.len(),
            summary.mean_gain
        );
        records.extend(summary.records);
    }
    let points: Vec<(f64, f64)> = records.iter().map(|r| (r.n_mean, r.cfi_max)).collect();
    let (a, b) = fit_power_law(&points, false).unwrap();
    let mean_gain = records.iter().map(|r| r.gain_max).sum::<f64>() / records.len() as f64;
    report(
        "14 (loss resilience)",
        (1.0..=1.8).contains(&b) && mean_gain > 1.0,
        &format!("{detail}fit I_c = {a:.2} <n>^{b:.3}, pooled mean gain {mean_gain:.2}"),
    );
}

#[test]
fn criterion_15_stabilization_trend() {
    // Once the scramble has saturated, longer preparation stops adding
    // realization-to-realization spread: the gain histogram at T=2 must be
    // no wider than at T=0.5.
    let mut config = preset("fig2a").unwrap();
    config.d = 448;
    config.epsilon = 50.0;
    let spread = |chi_t: f64| {
        let mut c = config.clone();
        c.chi_t = chi_t;
        let summary = run_ensemble(&c, 15, 0).unwrap();
        assert!(summary.excluded.is_empty(), "T={chi_t}: {} excluded", summary.n_excluded());
        summary.std_gain
    };
    let early = spread(0.5);
    let late = spread(2.0);
    report(
        "15 (stabilization trend)",
        late <= early,
        &format!("gain spread {late:.2} at T=2 vs {early:.2} at T=0.5"),
    );
}
