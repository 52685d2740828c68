use super::*;
use crate::boxsim::{SimConfig, Simulator, NUM_VALVES};
use crate::mpo::UNIT_STD_RAW;
use crate::replay::Transition;
use crate::tasks::{TaskId, TaskSpec};
use crate::tensor::{write_tensors, MlpParams};
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_env() -> TaskEnv {
    let sc = SimConfig {
        episode_len: 20,
        reset_steps: 5,
        ..SimConfig::default()
    };
    let sim = Simulator::new(sc.clone()).unwrap();
    TaskEnv::new(sim, TaskSpec::new(TaskId::Hover, &sc)).unwrap()
}

fn random_dataset(env: &mut TaskEnv, episodes: usize, seed: u64) -> ReplayBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = ReplayBuffer::new(episodes * 20).unwrap();
    for ep in 0..episodes {
        let mut obs = env.reset(seed * 1000 + ep as u64);
        for step in 0..20 {
            let a: [f64; NUM_VALVES] = std::array::from_fn(|_| rng.gen());
            let st = env.step(&a).unwrap();
            buf.push(Transition {
                obs: obs.iter().map(|&v| v as f32).collect(),
                action: a.map(|v| v as f32),
                reward: st.reward as f32,
                next_obs: st.obs.iter().map(|&v| v as f32).collect(),
                done: st.done,
                pixels: st.pixels.iter().map(|&v| v as f32).collect(),
                episode: ep as u32,
                step,
            });
            obs = st.obs;
        }
    }
    buf
}

fn small_mpo() -> MpoConfig {
    MpoConfig {
        policy_hidden: vec![16],
        critic_hidden: vec![16],
        target_period: 10,
        replay_capacity: 1000,
        batch_size: 16,
        ..MpoConfig::default()
    }
}

fn small_crr() -> CrrConfig {
    CrrConfig {
        batch_size: 16,
        eval_period: 10,
        eval_episodes: 1,
        ..CrrConfig::default()
    }
}

fn unit_policy(obs_dim: usize, mean_bias: f64) -> Policy {
    let mut net = MlpParams::zeros(&[obs_dim, 3, 2 * NUM_VALVES]);
    net.bias_mut(1).data_mut()[..NUM_VALVES].fill(mean_bias);
    net.bias_mut(1).data_mut()[NUM_VALVES..].fill(UNIT_STD_RAW);
    Policy { net, obs_half: 349.5 }
}

fn log_prob(policy: &Policy, obs: &[f64], action: &[f64]) -> f64 {
    let (m, l) = policy.distribution(&Tensor::row(obs.to_vec())).unwrap();
    (0..NUM_VALVES)
        .map(|d| {
            let z = unsquash(action[d]);
            let (mu, ls) = (m.data()[d], l.data()[d]);
            -0.5 * ((z - mu) / ls.exp()).powi(2) - ls - 0.5 * (2.0 * std::f64::consts::PI).ln()
        })
        .sum()
}

#[test]
fn constant_critic_has_zero_advantage() {
    let mut net = MlpParams::zeros(&[4 + NUM_VALVES, 5, 1]);
    net.bias_mut(1).data_mut()[0] = -2.5;
    let critic = Critic { net };
    let policy = unit_policy(4, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let obs = Tensor::matrix(3, 4, (0..12).map(|i| 50.0 * i as f64).collect()).unwrap();
    let acts = Tensor::matrix(3, NUM_VALVES, (0..27).map(|i| i as f64 / 27.0).collect()).unwrap();
    let a = advantages(&critic, &policy, &obs, &acts, 7, &mut rng).unwrap();
    assert_eq!(a, vec![0.0; 3]);
}

#[test]
fn linear_critic_advantage_under_a_symmetric_policy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let critic = Critic {
        net: MlpParams::init(&[2 + NUM_VALVES, 1], 1.0, &mut rng),
    };
    // Zero mean before squashing: the action law is symmetric about 0.5.
    let policy = unit_policy(2, 0.0);
    let obs = Tensor::matrix(2, 2, vec![100.0, 300.0, 650.0, 20.0]).unwrap();
    let acts = Tensor::matrix(2, NUM_VALVES, (0..18).map(|_| rng.gen()).collect()).unwrap();
    let m = 200_000;
    let a = advantages(&critic, &policy, &obs, &acts, m, &mut rng).unwrap();
    let obs_n = normalize_obs(&obs, 349.5);
    let q = critic.q(&obs_n, &acts).unwrap();
    let q_mid = critic.q(&obs_n, &Tensor::full(&[2, NUM_VALVES], 0.5)).unwrap();
    // Monte-Carlo error: action sd < 0.3 per dim, scaled by the weights.
    let w = critic.net.tensors()[0].data();
    let sd: f64 = (2..2 + NUM_VALVES).map(|i| (2.0 * 0.3 * w[i]).powi(2)).sum::<f64>().sqrt();
    for i in 0..2 {
        let exact = q[i] - q_mid[i];
        assert!((a[i] - exact).abs() < 5.0 * sd / (m as f64).sqrt(), "{} vs {exact}", a[i]);
    }
}

#[test]
fn advantage_is_deterministic_under_a_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let critic = Critic::init(3, &[8], &mut rng);
    let policy = Policy::init(3, &[8], 349.5, &mut rng);
    let obs = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 400.0, 500.0, 600.0]).unwrap();
    let acts = Tensor::full(&[2, NUM_VALVES], 0.3);
    let a = advantages(&critic, &policy, &obs, &acts, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = advantages(&critic, &policy, &obs, &acts, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert!(advantages(&critic, &policy, &obs, &acts, 0, &mut rng).is_err());
}

#[test]
fn weight_law_examples() {
    let w = crr_weights(&[-3.0, 0.0, 2.5], 1e9, 20.0);
    assert!(w.iter().all(|v| (v - 1.0).abs() < 1e-6));
    let beta = 0.7;
    let w = crr_weights(&[beta * 20f64.ln(), beta * 20f64.ln() + 1e-3, 0.0], beta, 20.0);
    assert!((w[0] - 20.0).abs() < 1e-12);
    assert_eq!(w[1], 20.0);
    assert_eq!(w[2], 1.0);
}

proptest! {
    #[test]
    fn weights_stay_in_the_half_open_range(
        adv in proptest::collection::vec(-1e6f64..1e6, 1..50),
        beta in 1e-3f64..1e3,
        w_max in 1.0f64..100.0,
    ) {
        for w in crr_weights(&adv, beta, w_max) {
            prop_assert!(w > 0.0 && w <= w_max);
        }
    }
}

#[test]
fn single_transition_loss_is_weighted_nll() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let policy = Policy::init(4, &[6], 349.5, &mut rng);
    let obs = vec![10.0, 200.0, 350.0, 690.0];
    let act: Vec<f64> = (0..NUM_VALVES).map(|_| rng.gen()).collect();
    let (loss, _) = crr_policy_loss(
        &policy,
        &Tensor::row(obs.clone()),
        &Tensor::row(act.clone()),
        &[2.75],
    )
    .unwrap();
    let expected = -2.75 * log_prob(&policy, &obs, &act);
    assert!((loss - expected).abs() < 1e-10 * expected.abs(), "{loss} vs {expected}");
}

#[test]
fn huge_temperature_loss_is_behaviour_cloning() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let policy = Policy::init(4, &[6], 349.5, &mut rng);
    let critic = Critic::init(4, &[6], &mut rng);
    let obs = Tensor::matrix(8, 4, (0..32).map(|_| rng.gen_range(0.0..699.0)).collect()).unwrap();
    let acts = Tensor::matrix(8, NUM_VALVES, (0..72).map(|_| rng.gen()).collect()).unwrap();
    let adv = advantages(&critic, &policy, &obs, &acts, 4, &mut rng).unwrap();
    let w = crr_weights(&adv, 1e9, 20.0);
    let (crr, _) = crr_policy_loss(&policy, &obs, &acts, &w).unwrap();
    let bc: f64 = -(0..8)
        .map(|i| log_prob(&policy, obs.row_slice(i), acts.row_slice(i)))
        .sum::<f64>()
        / 8.0;
    assert!((crr - bc).abs() < 1e-6, "{crr} vs {bc}");
}

#[test]
fn policy_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let policy = Policy::init(3, &[5], 349.5, &mut rng);
    let obs = Tensor::matrix(4, 3, (0..12).map(|_| rng.gen_range(0.0..699.0)).collect()).unwrap();
    let acts = Tensor::matrix(4, NUM_VALVES, (0..36).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap();
    let w = [0.5, 1.0, 3.0, 0.1];
    let (_, grads) = crr_policy_loss(&policy, &obs, &acts, &w).unwrap();
    let h = 1e-6;
    for (t, g) in grads.iter().enumerate() {
        for k in (0..g.len()).step_by(5) {
            let mut p = policy.clone();
            p.net.tensors_mut()[t].data_mut()[k] += h;
            let up = crr_policy_loss(&p, &obs, &acts, &w).unwrap().0;
            p.net.tensors_mut()[t].data_mut()[k] -= 2.0 * h;
            let down = crr_policy_loss(&p, &obs, &acts, &w).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g.data()[k]).abs() < 1e-5 * (1.0 + fd.abs()), "{fd} vs {}", g.data()[k]);
        }
    }
}

#[test]
fn policy_loss_rejects_bad_batches() {
    let policy = unit_policy(2, 0.0);
    let empty = Tensor::zeros(&[0, 2]);
    assert!(matches!(
        crr_policy_loss(&policy, &empty, &Tensor::zeros(&[0, NUM_VALVES]), &[]),
        Err(Error::InsufficientData(_))
    ));
    let one = Tensor::zeros(&[1, 2]);
    assert!(crr_policy_loss(&policy, &one, &Tensor::full(&[1, NUM_VALVES], 0.5), &[1.0, 1.0]).is_err());
}

#[test]
fn huge_temperature_run_tracks_behaviour_cloning() {
    let mut env = tiny_env();
    let data = random_dataset(&mut env, 4, 6);
    let mpo = small_mpo();
    let crr = CrrConfig { beta: 1e9, ..small_crr() };
    let mut a = LearnerState::new(&mpo, env.obs_dim(), 349.5, 10).unwrap();
    let mut b = a.clone();
    for _ in 0..200 {
        let la = crr_step(&mut a, &mpo, &crr, &data).unwrap().policy_loss;
        let lb = bc_step(&mut b, &mpo, &crr, &data).unwrap();
        assert!((la - lb).abs() < 1e-6, "{la} vs {lb}");
    }
}

fn state_bytes(s: &LearnerState) -> Vec<u8> {
    let mut v = Vec::new();
    write_tensors(&mut v, &s.to_tensors()).unwrap();
    v
}

#[test]
fn offline_training_evaluates_on_schedule_and_is_reproducible() {
    let mut env = tiny_env();
    let data = random_dataset(&mut env, 3, 7);
    let mpo = small_mpo();
    let crr = small_crr();
    let run = |steps: u64| {
        let mut env = tiny_env();
        let mut s = LearnerState::new(&mpo, env.obs_dim(), 349.5, 11).unwrap();
        let mut snaps = Vec::new();
        let recs = offline_train(&mut s, &mpo, &crr, &data, steps, &mut env, 500, |st, _| {
            snaps.push(state_bytes(st));
            Ok(())
        })
        .unwrap();
        (s, recs, snaps)
    };
    let (s1, r1, c1) = run(35);
    let (s2, r2, c2) = run(35);
    assert_eq!(r1.len(), 3);
    assert_eq!(r1.iter().map(|r| r.learner_steps).collect::<Vec<_>>(), vec![10, 20, 30]);
    assert_eq!(r1, r2);
    assert_eq!(c1, c2);
    assert_eq!(state_bytes(&s1), state_bytes(&s2));
    assert_eq!(s1.updates, 35);
}

#[test]
fn offline_training_resumes_to_the_same_state() {
    let mut env = tiny_env();
    let data = random_dataset(&mut env, 3, 8);
    let mpo = small_mpo();
    let crr = small_crr();
    let mut straight = LearnerState::new(&mpo, env.obs_dim(), 349.5, 12).unwrap();
    let all = offline_train(&mut straight, &mpo, &crr, &data, 40, &mut env, 1, |_, _| Ok(())).unwrap();

    let mut first = LearnerState::new(&mpo, env.obs_dim(), 349.5, 12).unwrap();
    let mut part = offline_train(&mut first, &mpo, &crr, &data, 20, &mut env, 1, |_, _| Ok(())).unwrap();
    let mut resumed = LearnerState::from_tensors(&mpo, first.to_tensors()).unwrap();
    part.extend(offline_train(&mut resumed, &mpo, &crr, &data, 40, &mut env, 1, |_, _| Ok(())).unwrap());
    assert_eq!(part, all);
    assert_eq!(resumed, straight);
}

#[test]
fn offline_training_rejects_empty_data() {
    let mut env = tiny_env();
    let mpo = small_mpo();
    let mut s = LearnerState::new(&mpo, env.obs_dim(), 349.5, 0).unwrap();
    let empty = ReplayBuffer::new(4).unwrap();
    let r = offline_train(&mut s, &mpo, &small_crr(), &empty, 10, &mut env, 0, |_, _| Ok(()));
    assert!(matches!(r, Err(Error::InsufficientData(_))));
}

#[test]
fn repeated_transition_is_cloned() {
    let mut env = tiny_env();
    let obs = env.reset(3);
    let action = [0.9, 0.1, 0.5, 0.7, 0.2, 0.8, 0.35, 0.6, 0.05];
    let st = env.step(&action).unwrap();
    let mut data = ReplayBuffer::new(64).unwrap();
    for _ in 0..64 {
        data.push(Transition {
            obs: obs.iter().map(|&v| v as f32).collect(),
            action: action.map(|v| v as f32),
            reward: st.reward as f32,
            next_obs: st.obs.iter().map(|&v| v as f32).collect(),
            done: false,
            pixels: st.pixels.iter().map(|&v| v as f32).collect(),
            episode: 0,
            step: 0,
        });
    }
    let logged: Vec<f64> = data.get(0).unwrap().action.iter().map(|&v| v as f64).collect();
    let logged_obs: Vec<f64> = data.get(0).unwrap().obs.iter().map(|&v| v as f64).collect();
    let mpo = small_mpo();
    let crr = CrrConfig { eval_period: 25, eval_episodes: 1, ..small_crr() };
    let mut s = LearnerState::new(&mpo, env.obs_dim(), 349.5, 13).unwrap();
    let mut lls = vec![log_prob(&s.policy, &logged_obs, &logged)];
    offline_train(&mut s, &mpo, &crr, &data, 250, &mut env, 0, |st, _| {
        lls.push(log_prob(&st.policy, &logged_obs, &logged));
        Ok(())
    })
    .unwrap();
    assert_eq!(lls.len(), 11);
    assert!(lls.windows(2).all(|w| w[1] > w[0]), "{lls:?}");
}

#[test]
fn learned_actions_stay_near_the_data() {
    let mut env = tiny_env();
    // Behaviour concentrated around one valve pattern.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut data = ReplayBuffer::new(400).unwrap();
    for ep in 0..20 {
        let mut obs = env.reset(ep);
        for step in 0..20 {
            let a: [f64; NUM_VALVES] = std::array::from_fn(|d| {
                let v: f64 = if d % 2 == 0 { 0.8 } else { 0.2 };
                v + rng.gen_range(-0.05..0.05)
            });
            let st = env.step(&a).unwrap();
            data.push(Transition {
                obs: obs.iter().map(|&v| v as f32).collect(),
                action: a.map(|v| v as f32),
                reward: st.reward as f32,
                next_obs: st.obs.iter().map(|&v| v as f32).collect(),
                done: st.done,
                pixels: st.pixels.iter().map(|&v| v as f32).collect(),
                episode: ep as u32,
                step,
            });
            obs = st.obs;
        }
    }
    let mpo = MpoConfig { batch_size: 64, ..small_mpo() };
    let crr = CrrConfig { batch_size: 64, eval_period: 10_000, ..small_crr() };
    let mut s = LearnerState::new(&mpo, env.obs_dim(), 349.5, 15).unwrap();
    offline_train(&mut s, &mpo, &crr, &data, 1500, &mut env, 0, |_, _| Ok(())).unwrap();

    let batch = data.sample_dense(64, &mut rng).unwrap();
    let (mean, _) = s.policy.distribution(&batch.obs).unwrap();
    let policy_actions = mean.map(squash);
    let d_policy = mean_nn_distance(&policy_actions, &batch.action, false).unwrap();
    let d_self = mean_nn_distance(&batch.action, &batch.action, true).unwrap();
    assert!(d_policy <= 2.0 * d_self, "{d_policy} vs {d_self}");
}

#[test]
fn nn_distance_examples() {
    let r = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![0.0, 1.0]]).unwrap();
    let q = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
    assert_eq!(mean_nn_distance(&q, &r, false).unwrap(), 0.0);
    assert_eq!(mean_nn_distance(&q, &r, true).unwrap(), 1.0);
    assert_eq!(mean_nn_distance(&r, &r, true).unwrap(), (1.0 + 18f64.sqrt() + 1.0) / 3.0);
}

#[test]
fn config_round_trip_and_validation() {
    let c = CrrConfig { beta: 0.3, w_max: 5.0, eval_period: 77, ..CrrConfig::default() };
    let mut back = CrrConfig::default();
    for e in kv::parse(&c.to_kv_string("")).unwrap() {
        back.set(&e).unwrap();
    }
    assert_eq!(back, c);
    assert_eq!(CRR_KEYS.len(), 6);
    for bad in ["beta = 0", "w_max = 0.5", "baseline_samples = 0", "eval_period = 0"] {
        let mut c = CrrConfig::default();
        c.set(&kv::parse(bad).unwrap()[0]).unwrap();
        assert!(c.validate().is_err(), "{bad}");
    }
    assert!(matches!(
        CrrConfig::default().set(&kv::parse("binary = 1").unwrap()[0]),
        Err(Error::UnknownKey(_))
    ));
}
