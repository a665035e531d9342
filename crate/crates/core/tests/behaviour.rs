use ctxrepulse::gmmflow::{evaluate, sample_batch, CadsParams, Method, MixtureWorld};
use ctxrepulse::linalg::ContextBatch;
use ctxrepulse::repulsion::{BlockSelector, Interval, RepulsionConfig};
use ctxrepulse::steering::{steer_toydit, Space, SteeringSpec};
use ctxrepulse::toydit::{PromptEncoding, StepContext, TokenState, ToyDiT, ToyDiTConfig};
use ctxrepulse::vendi::batch_diversity;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn text_vendi(states: &[TokenState]) -> f64 {
    let rows: Vec<Vec<f64>> = states.iter().map(|s| s.text.clone()).collect();
    batch_diversity(&ContextBatch::from_rows(&rows).unwrap()).unwrap().score
}

#[test]
fn text_tokens_drift_from_prompt_with_depth() {
    let n = 200;
    let mut enriched = 0;
    for seed in 0..n {
        let model = ToyDiT::new(ToyDiTConfig {
            weight_seed: seed,
            ..ToyDiTConfig::default()
        })
        .unwrap();
        let prompt = PromptEncoding::new(model.config(), 0, seed);
        let state = TokenState::new(model.config(), &prompt, seed).unwrap();
        let out = model.forward_with(&[state], &mut |_, _| Ok(())).unwrap();
        let c: Vec<f64> = (0..3).map(|l| cosine(&out.snapshots[l][0].text, &prompt.tokens)).collect();
        if c[0] > c[1] && c[1] > c[2] {
            enriched += 1;
        }
    }
    assert!(enriched * 100 >= 95 * n, "{enriched}/{n}");
}

#[test]
fn text_repulsion_raises_final_text_diversity() {
    let model = ToyDiT::new(ToyDiTConfig::default()).unwrap();
    let prompt = PromptEncoding::new(model.config(), 7, 0);
    for blocks in [BlockSelector::Explicit(vec![0]), BlockSelector::Explicit(vec![3]), BlockSelector::All] {
        for eta in [1e-2, 1e-1, 1.0] {
            let rep = RepulsionConfig::normalized(eta, 1).with_blocks(blocks.clone());
            for seed in 0..20 {
                let states: Vec<TokenState> = (0..4)
                    .map(|i| TokenState::new(model.config(), &prompt, seed * 10 + i).unwrap())
                    .collect();
                let off = model.forward_with_hooks(&states, None, StepContext::SINGLE).unwrap();
                let on = model.forward_with_hooks(&states, Some(&rep), StepContext::SINGLE).unwrap();
                let (a, b) = (text_vendi(&off.final_states), text_vendi(&on.final_states));
                assert!(b > a + 1e-6, "blocks {blocks} eta {eta} seed {seed}: {a} -> {b}");
            }
        }
    }
}

#[test]
fn toy_steering_endpoints() {
    let model = ToyDiT::new(ToyDiTConfig::default()).unwrap();
    let cfg = model.config().clone();
    let (source, target) = (PromptEncoding::new(&cfg, 1, 0), PromptEncoding::new(&cfg, 2, 0));
    let plain = model
        .forward_with(&[TokenState::new(&cfg, &source, 5).unwrap()], &mut |_, _| Ok(()))
        .unwrap();

    let zero = steer_toydit(&model, &source, 5, &target, 9, &SteeringSpec::new(0.0, Space::Contextual).unwrap()).unwrap();
    assert_eq!(zero.steered, plain);

    let one = steer_toydit(&model, &source, 5, &target, 9, &SteeringSpec::new(1.0, Space::Contextual).unwrap()).unwrap();
    for (s, t) in one.steered.snapshots.iter().zip(&one.target.snapshots) {
        assert_eq!(s[0].text, t[0].text);
    }

    let half = steer_toydit(&model, &source, 5, &target, 9, &SteeringSpec::new(0.5, Space::Contextual).unwrap()).unwrap();
    let last = |o: &ctxrepulse::toydit::ForwardOutput| o.final_states[0].text.clone();
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    assert!(d(&last(&half.steered), &last(&half.target)) < d(&last(&plain), &last(&half.target)));
}

#[test]
fn toy_steering_over_late_blocks_leaves_early_snapshots() {
    let model = ToyDiT::new(ToyDiTConfig::default()).unwrap();
    let cfg = model.config().clone();
    let (source, target) = (PromptEncoding::new(&cfg, 1, 0), PromptEncoding::new(&cfg, 2, 0));
    let plain = model
        .forward_with(&[TokenState::new(&cfg, &source, 5).unwrap()], &mut |_, _| Ok(()))
        .unwrap();
    let spec = SteeringSpec::new(0.7, Space::Latent)
        .unwrap()
        .with_interval(Interval::new(0.5, 1.0).unwrap());
    let out = steer_toydit(&model, &source, 5, &target, 9, &spec).unwrap();
    for l in 0..cfg.total_blocks() / 2 {
        assert_eq!(out.steered.snapshots[l], plain.snapshots[l]);
    }
    assert_ne!(out.steered.final_states, plain.final_states);
}

#[test]
fn unguided_sampler_covers_every_mode() {
    let world = MixtureWorld::new(8, 4.0, 0.25, 0.0, 64).unwrap();
    let prompts = vec![vec![0.0; 8]; 64];
    for seed in 0..50 {
        let m = evaluate(&sample_batch(&world, &prompts, &Method::None, seed).unwrap(), &world).unwrap();
        assert_eq!(m.mode_coverage, 8, "seed {seed}");
        assert!(m.off_manifold_rate < 0.05, "seed {seed}: {}", m.off_manifold_rate);
    }
}

#[test]
fn sampling_is_reproducible_and_seed_dependent() {
    let world = MixtureWorld::default();
    let prompts = vec![world.one_hot_prompt(0, 10.0); 8];
    let method = Method::Contextual(MixtureWorld::default_repulsion());
    let a = sample_batch(&world, &prompts, &method, 11).unwrap();
    assert_eq!(a, sample_batch(&world, &prompts, &method, 11).unwrap());
    assert_ne!(a, sample_batch(&world, &prompts, &method, 12).unwrap());
    assert_eq!(a[0].latents.len(), world.n_steps + 1);
    assert_eq!(a[0].times.len(), world.n_steps + 1);
    assert_eq!(a[0].times[0], 1.0);
    assert_eq!(*a[0].times.last().unwrap(), 0.0);
}

#[test]
fn sample_trajectories_do_not_depend_on_batch_neighbours_without_repulsion() {
    let world = MixtureWorld::default();
    let prompts = vec![world.one_hot_prompt(3, 10.0); 6];
    let full = sample_batch(&world, &prompts, &Method::None, 4).unwrap();
    let prefix = sample_batch(&world, &prompts[..3], &Method::None, 4).unwrap();
    assert_eq!(&full[..3], &prefix[..]);
}

#[test]
fn cads_noise_spreads_the_collapsed_batch() {
    let world = MixtureWorld::default();
    let prompts = vec![world.one_hot_prompt(0, 10.0); 8];
    let cads = Method::Cads(CadsParams::new(4.0, Interval::new(0.0, 0.25).unwrap()));
    let (mut base, mut noisy) = (0.0, 0.0);
    for seed in 0..10 {
        base += evaluate(&sample_batch(&world, &prompts, &Method::None, seed).unwrap(), &world).unwrap().vendi_rbf;
        noisy += evaluate(&sample_batch(&world, &prompts, &cads, seed).unwrap(), &world).unwrap().vendi_rbf;
    }
    assert!(noisy > base, "{base} vs {noisy}");
}
