use mfsde::model::{builtin_example, KernelForm, Problem};
use mfsde::particle::{simulate_particles, simulate_particles_with_streams, ParticleConfig};
use mfsde::sde::{simulate_ensemble, EnsembleOptions, Interaction, Recording};

#[test]
fn zero_kernel_matches_independent_paths() {
    let p = builtin_example(2).unwrap().without_interaction();
    let cfg = ParticleConfig::new(25, 4, 16, 8);
    let particles = simulate_particles(&p, &cfg).unwrap();
    let paths = simulate_ensemble(&p, Interaction::None, &EnsembleOptions::new(100, 16, 8).recording(Recording::Final)).unwrap();
    assert_eq!(particles.final_states(), paths.final_states());
    assert_eq!(particles.level_states(0), paths.level_states(0));
}

#[test]
fn relabelling_particles_permutes_the_output() {
    let p = builtin_example(1).unwrap().with_general_kernel();
    let cfg = ParticleConfig::new(12, 2, 8, 3);
    let ids: Vec<u64> = (0..24).collect();
    let mut shuffled = ids.clone();
    shuffled[..12].reverse();
    shuffled[12..].rotate_left(5);
    let a = simulate_particles_with_streams(&p, &cfg, &ids).unwrap().final_states();
    let b = simulate_particles_with_streams(&p, &cfg, &shuffled).unwrap().final_states();
    for (slot, &id) in shuffled.iter().enumerate() {
        let (x, y) = (b[slot], a[id as usize]);
        assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
    }
}

#[test]
fn interaction_uses_the_empirical_mean() {
    // K(x, y) = y with no drift or noise: every particle moves by kappa times the
    // ensemble mean, so the mean grows by (1 + kappa) per step.
    let p = Problem::builder(1, 1, 1.0)
        .drift(|_, _, out| out[0] = 0.0)
        .kernel(KernelForm::General, |_, _, y, out| out[0] = y[0])
        .constant_diffusion(vec![0.0])
        .gaussian_initial(vec![1.0], vec![0.5])
        .build()
        .unwrap();
    let cfg = ParticleConfig::new(40, 1, 4, 17);
    let e = simulate_particles(&p, &cfg).unwrap();
    let x0 = e.level_states(0).unwrap();
    let x4 = e.final_states();
    let m0 = x0.iter().sum::<f64>() / 40.0;
    let m4 = x4.iter().sum::<f64>() / 40.0;
    assert!((m4 - m0 * 1.25f64.powi(4)).abs() < 1e-12);
    for (a, b) in x0.iter().zip(&x4) {
        assert!((b - a - (m4 - m0)).abs() < 1e-12);
    }
}

#[test]
fn trials_are_independent_replications() {
    let p = builtin_example(1).unwrap();
    let two = simulate_particles(&p, &ParticleConfig::new(10, 2, 8, 5)).unwrap().final_states();
    let first = simulate_particles_with_streams(&p, &ParticleConfig::new(10, 1, 8, 5), &(0..10).collect::<Vec<_>>()).unwrap().final_states();
    let second = simulate_particles_with_streams(&p, &ParticleConfig::new(10, 1, 8, 5), &(10..20).collect::<Vec<_>>()).unwrap().final_states();
    assert_eq!(&two[..10], &first[..]);
    assert_eq!(&two[10..], &second[..]);
}

#[test]
fn stream_count_must_match() {
    let p = builtin_example(1).unwrap();
    assert!(simulate_particles_with_streams(&p, &ParticleConfig::new(4, 2, 4, 0), &[0, 1, 2]).is_err());
}
