//! End-to-end behaviour of the adversarial trainer on a tiny configuration.

use gaunet_core::critic::{Critic, CriticConfig};
use gaunet_core::dataset::{make_synthetic_dataset, Dataset};
use gaunet_core::generator::{Generator, GeneratorConfig};
use gaunet_core::nn::{Ctx, RenormLimits};
use gaunet_core::rng::stream;
use gaunet_core::training::{decode_checkpoint, encode_checkpoint, LossMode, TrainConfig, TrainState, Trainer};

struct Setup {
    gen: Generator,
    critic: Critic,
    data: Dataset,
    subset: Vec<usize>,
}

fn setup() -> Setup {
    let gen = Generator::new(GeneratorConfig {
        input_size: 16,
        base_filters: 2,
        num_blocks: 2,
        latent_dim: 4,
        latent_channels: 2,
        ..Default::default()
    })
    .unwrap();
    let critic = Critic::new(CriticConfig {
        input_size: 16,
        growth_rate: 2,
        num_dense_blocks: 2,
        layers_per_block: 1,
        ..Default::default()
    })
    .unwrap();
    let data = make_synthetic_dataset(2, 6, 16, 0.05, 3).unwrap();
    let subset = (0..data.len()).collect();
    Setup {
        gen,
        critic,
        data,
        subset,
    }
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        n_critic: 2,
        total_steps: 10,
        seed,
        ..Default::default()
    }
}

fn trainer(s: &Setup, cfg: TrainConfig) -> Trainer<'_, Generator, Critic> {
    Trainer::new(&s.gen, &s.critic, cfg, &s.data, &s.subset).unwrap()
}

fn run_steps(t: &Trainer<'_, Generator, Critic>, state: &mut TrainState<f64>, n: usize) {
    for _ in 0..n {
        t.step(state).unwrap();
    }
}

#[test]
fn identical_seeds_give_identical_loss_prefixes() {
    let s = setup();
    let t = trainer(&s, config(11));
    let mut a = t.init_state::<f64>();
    let mut b = t.init_state::<f64>();
    run_steps(&t, &mut a, 10);
    run_steps(&t, &mut b, 10);
    assert_eq!(a.history, b.history);
    assert_eq!(a, b);

    let other = trainer(&s, config(12));
    let mut c = other.init_state::<f64>();
    run_steps(&other, &mut c, 2);
    assert_ne!(a.history[..2], c.history[..]);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let s = setup();
    let t = trainer(&s, config(5));
    let mut straight = t.init_state::<f64>();
    run_steps(&t, &mut straight, 6);

    let mut first = t.init_state::<f64>();
    run_steps(&t, &mut first, 3);
    let bytes = encode_checkpoint(&first, "resume");
    drop(first);
    let (mut resumed, _) = decode_checkpoint::<f64>(&bytes).unwrap();
    run_steps(&t, &mut resumed, 3);
    assert_eq!(resumed.history, straight.history);
    assert_eq!(resumed, straight);
}

#[test]
fn each_update_leaves_the_other_network_untouched() {
    let s = setup();
    let t = trainer(&s, config(2));
    let mut state = t.init_state::<f64>();
    let mut ctx = Ctx::train(stream(0, "frozen"), RenormLimits::BATCH_NORM);

    let gen_before = state.generator.fingerprint();
    let critic_before = state.critic.fingerprint();
    t.critic_update(&mut state, &mut ctx).unwrap();
    assert_eq!(state.generator.fingerprint(), gen_before);
    assert_eq!(state.gen_opt, t.init_state::<f64>().gen_opt);
    assert_ne!(state.critic.fingerprint(), critic_before);

    let critic_after = state.critic.fingerprint();
    t.generator_update(&mut state, &mut ctx).unwrap();
    assert_eq!(state.critic.fingerprint(), critic_after);
    assert_ne!(state.generator.fingerprint(), gen_before);
}

#[test]
fn critic_objective_falls_against_a_frozen_generator() {
    let s = setup();
    let mut cfg = config(4);
    cfg.adam.alpha = 1e-3;
    let t = trainer(&s, cfg);
    let mut state = t.init_state::<f64>();
    let mut ctx = Ctx::train(stream(1, "critic-only"), RenormLimits::BATCH_NORM);
    let objectives: Vec<f64> = (0..40)
        .map(|_| t.critic_update(&mut state, &mut ctx).unwrap().0)
        .collect();
    let head: f64 = objectives[..8].iter().sum::<f64>() / 8.0;
    let tail: f64 = objectives[32..].iter().sum::<f64>() / 8.0;
    assert!(tail < head, "first {head}, last {tail}");
}

#[test]
fn likelihood_mode_has_no_penalty() {
    let s = setup();
    let mut cfg = config(8);
    cfg.loss_mode = LossMode::Cgan;
    let t = trainer(&s, cfg);
    let mut state = t.init_state::<f64>();
    for _ in 0..3 {
        let r = t.step(&mut state).unwrap();
        assert_eq!(r.gp, 0.0);
        assert!(r.critic_loss.is_finite() && r.gen_loss.is_finite());
        assert!(r.critic_loss > 0.0 && r.gen_loss > 0.0);
    }
}

#[test]
fn too_few_samples_per_class_rejected() {
    let s = setup();
    let one_each = [0usize, 1];
    assert!(Trainer::new(&s.gen, &s.critic, config(0), &s.data, &one_each).is_err());
    let mut bad = config(0);
    bad.batch_size = 1;
    assert!(Trainer::new(&s.gen, &s.critic, bad, &s.data, &s.subset).is_err());
}
