use std::fs;
use std::io::BufReader;

use nsms_core::config::{InitialVelocity, Preset, SimConfig};
use nsms_core::driver::{check_suite, reference_incompressible, run_simulation, sweep_epsilon};
use nsms_core::forcing::{Forcing, SpaceProfile};
use nsms_core::grid::{grad, read_snapshot, Bc, ScalarField};
use nsms_core::species::densities_of;
use nsms_core::Error;

fn short(preset: Preset, n: usize, steps: usize) -> SimConfig {
    let base = SimConfig::preset(preset);
    SimConfig {
        extents: base.extents.iter().map(|_| n).collect(),
        t_final: base.tau() * steps as f64,
        steps,
        ..base
    }
}

#[test]
fn heat_reduction_entropy_decreases_strictly() {
    let cfg = SimConfig { lambda: Some(0.0), ..short(Preset::HeatReduction, 32, 40) };
    let spec = cfg.mixture().unwrap();
    let mut gradients = vec![f64::INFINITY];
    let out = nsms_core::driver::run_with_observer(&cfg, nsms_core::driver::FlowModel::ArtificialCompressibility, |_, _, w| {
        let rho = densities_of(w, &spec)?;
        let r1 = ScalarField::new(w.grid, Bc::Neumann, rho.values.clone())?;
        gradients.push(grad(&r1).norm_sq().sqrt());
        Ok(())
    })
    .unwrap();
    for (pair, g) in out.ledger.rows.windows(2).zip(&gradients[1..]) {
        if *g < 1e-10 {
            break;
        }
        assert!(pair[1].entropy < pair[0].entropy, "step {}: entropy did not decrease", pair[1].k);
    }
}

#[test]
fn incompressible_reference_in_1d_keeps_zero_velocity() {
    let cfg = SimConfig {
        forcing: Forcing::Constant(SpaceProfile::Vortex { amplitude: 3.0 }),
        ..short(Preset::HeatReduction, 16, 5)
    };
    let out = reference_incompressible(&cfg).unwrap();
    assert!(out.flow.u.comps[0].iter().all(|v| v.abs() <= 1e-12));
    assert!(out.ledger.rows.iter().all(|r| r.energy <= 1e-24));
}

#[test]
fn snapshots_are_written_at_the_requested_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimConfig {
        output_dir: Some(dir.path().to_path_buf()),
        snapshot_every: 2,
        ..short(Preset::Standard2d, 8, 4)
    };
    run_simulation(&cfg).unwrap();
    for k in [0, 2, 4] {
        for name in ["u", "p", "rho"] {
            let path = dir.path().join(format!("{name}_{k:06}.snap"));
            let snap = read_snapshot(BufReader::new(fs::File::open(&path).unwrap())).unwrap();
            assert_eq!(snap.name, name);
            assert_eq!(snap.grid.extents(), &[8, 8]);
        }
    }
    assert!(!dir.path().join("u_000001.snap").exists());
}

#[test]
fn config_file_roundtrip_for_every_preset() {
    for preset in Preset::ALL {
        let cfg = SimConfig {
            velocity: InitialVelocity::Zero,
            ..SimConfig::preset(preset)
        };
        let text = cfg.to_text();
        let back = SimConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }
}

#[test]
fn config_rejects_unknown_and_duplicate_keys() {
    assert!(matches!(SimConfig::parse("grid.colour = red"), Err(Error::Config(_))));
    assert!(matches!(SimConfig::parse("scheme.eps = 1\nscheme.eps = 2"), Err(Error::Config(_))));
}

#[test]
fn sweep_requires_decreasing_eps() {
    let cfg = short(Preset::Standard2d, 8, 2);
    assert!(sweep_epsilon(&cfg, &[1e-2, 1e-1, 1e-3]).is_err());
    assert!(sweep_epsilon(&cfg, &[1e-1, 1e-2]).is_err());
}

#[test]
fn small_sweep_reduces_divergence() {
    let cfg = short(Preset::Standard2d, 12, 10);
    let sweep = sweep_epsilon(&cfg, &[1e-1, 1e-2, 1e-3]).unwrap();
    assert!(sweep.div_monotone(), "{}", sweep.to_table());
}

#[test]
fn check_suite_passes_on_every_preset() {
    for preset in Preset::ALL {
        for c in check_suite(&SimConfig::preset(preset)).unwrap() {
            assert!(c.passed, "{}: {} ({})", preset.name(), c.name, c.detail);
        }
    }
}
