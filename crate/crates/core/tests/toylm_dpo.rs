//! DPO objective, gradients, training and gradient profiles on pairs built
//! from the synthetic benchmark.

use faithkit::canonical::tokenize;
use faithkit::model::{ErrorType, PreferencePair};
use faithkit::perturb::{build_pairs, Perturber, ResponseInput};
use faithkit::synthgen::{build_dataset, GeneratorConfig};
use faithkit::toylm::{
    dpo_loss, dpo_loss_grad, encode_pair, evidence_loss, finite_difference_check, load_checkpoint, per_token_gradient_profile, preference_accuracy,
    random_control_pair, save_checkpoint, total_loss, total_loss_grad, train, DpoConfig, EncodedPair, ToyModel, ToyModelConfig, TrainConfig, Vocab,
};
use faithkit::{ToyModelF32, ToyModelF64};

fn pairs(n_samples: usize, types: &[ErrorType]) -> Vec<PreferencePair> {
    let cfg = GeneratorConfig { n_documents: 30, n_samples, rng_seed: 4, ..Default::default() };
    let ds = build_dataset(&cfg).unwrap();
    let prompts: Vec<String> = ds.samples.iter().map(|s| s.pair_prompt()).collect();
    let inputs: Vec<ResponseInput> = ds.samples.iter().zip(&prompts).map(|(s, p)| ResponseInput { id: &s.id, prompt: p, analysis: &s.analysis }).collect();
    build_pairs(&Perturber::default(), &inputs, types, 4).unwrap().pairs
}

fn encode(ps: &[PreferencePair]) -> (Vocab, Vec<EncodedPair>) {
    let texts: Vec<Vec<String>> = ps.iter().flat_map(|p| [tokenize(&p.prompt), p.chosen.clone(), p.rejected.clone()]).collect();
    let vocab = Vocab::build(texts.iter().map(Vec::as_slice));
    let enc = ps.iter().map(|p| encode_pair(p, &vocab).unwrap()).collect();
    (vocab, enc)
}

fn tiny(vocab: &Vocab, seed: u64) -> ToyModelF64 {
    ToyModel::init(ToyModelConfig { vocab_size: vocab.len(), layers: 1, model_dim: 16, heads: 2, context_len: 256, seed }).unwrap()
}

#[test]
fn loss_identities_on_real_pairs() {
    let (vocab, enc) = encode(&pairs(13, &ErrorType::ALL));
    let m = tiny(&vocab, 1);
    let other = tiny(&vocab, 2);
    let zero = DpoConfig { lambda: 0.0, ..Default::default() };
    for p in &enc {
        assert!(!p.citations.is_empty());
        assert!((dpo_loss(&m, &m, p, 0.1).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
        let a = total_loss(&other, &m, p, &zero).unwrap();
        let b = dpo_loss(&other, &m, p, 0.1).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(evidence_loss(&m, &p.prompt, &p.citations).unwrap() > 0.0);
    }
}

#[test]
fn total_loss_gradient_matches_central_differences() {
    let (vocab, enc) = encode(&pairs(13, &ErrorType::ALL));
    let policy = tiny(&vocab, 5);
    let reference = tiny(&vocab, 6);
    let cfg = DpoConfig::default();
    let p = &enc[0];
    let refs = (faithkit::toylm::logprob(&reference, &p.prompt, &p.chosen).unwrap().0, faithkit::toylm::logprob(&reference, &p.prompt, &p.rejected).unwrap().0);
    let mut g = vec![0.0; policy.n_params()];
    total_loss_grad(&policy, refs, p, &cfg, 1.0, &mut g).unwrap();
    let loss = |params: &[f64]| total_loss(&ToyModel::with_params(policy.config, params.to_vec()).unwrap(), &reference, p, &cfg).unwrap();
    let rep = finite_difference_check(&policy.params, &g, loss, 40, 1e-5, 17);
    assert_eq!(rep.checked.len(), 40);
    assert!(rep.max_rel_error <= 1e-4, "{}", rep.max_rel_error);

    let mut gd = vec![0.0; policy.n_params()];
    dpo_loss_grad(&policy, refs, p, cfg.beta, 1.0, &mut gd).unwrap();
    let dpo_only = |params: &[f64]| dpo_loss(&ToyModel::with_params(policy.config, params.to_vec()).unwrap(), &reference, p, cfg.beta).unwrap();
    assert!(finite_difference_check(&policy.params, &gd, dpo_only, 40, 1e-5, 18).max_rel_error <= 1e-4);
}

#[test]
fn phase_one_is_exactly_zero() {
    let (vocab, enc) = encode(&pairs(13, &ErrorType::ALL));
    let m = tiny(&vocab, 3);
    for (i, p) in enc.iter().enumerate().take(20) {
        let prof = per_token_gradient_profile(&m, p).unwrap();
        assert!(prof.phase1_max <= 1e-9, "{}", prof.phase1_max);
        assert_eq!(prof.per_token_delta_norms.len(), p.chosen.len().max(p.rejected.len()));
        let ctl = per_token_gradient_profile(&m, &random_control_pair(p, &vocab, i as u64)).unwrap();
        assert!(ctl.phase1_max <= 1e-9);
        // summed non-detail norm is bounded by count times max
        let first = p.positions[0];
        let pbar: Vec<f64> = (first + 1..prof.per_token_delta_norms.len()).filter(|t| !p.positions.contains(t)).map(|t| prof.per_token_delta_norms[t]).collect();
        let max = pbar.iter().copied().fold(0.0, f64::max);
        assert!(pbar.iter().sum::<f64>() <= pbar.len() as f64 * max + 1e-12);
    }
}

#[test]
fn training_is_seeded_and_leaves_the_reference_alone() {
    let (vocab, enc) = encode(&pairs(26, &[ErrorType::Threshold]));
    let reference: ToyModelF32 = tiny(&vocab, 9).cast();
    let snapshot = reference.clone();
    let cfg = TrainConfig { dpo: DpoConfig { epochs: 2, learning_rate: 5e-3, ..Default::default() }, batch_size: 4, seed: 3 };
    let mut a = reference.clone();
    let mut b = reference.clone();
    let ra = train(&mut a, &reference, &enc, &cfg).unwrap();
    let rb = train(&mut b, &reference, &enc, &cfg).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.params, b.params);
    assert_eq!(reference.params, snapshot.params);
    assert_ne!(a.params, reference.params);
    assert!(ra.loss_curve[1] < ra.initial_loss);
    assert!(preference_accuracy(&a, &enc).unwrap() >= preference_accuracy(&reference, &enc).unwrap());
}

#[test]
fn checkpoints_round_trip() {
    let (vocab, _) = encode(&pairs(13, &[ErrorType::Unit]));
    let m = tiny(&vocab, 12);
    let dir = std::env::temp_dir().join(format!("faithkit-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    save_checkpoint(&path, &m, &vocab).unwrap();
    let (back, v2): (ToyModelF64, Vocab) = load_checkpoint(&path).unwrap();
    assert_eq!(back.params, m.params);
    assert_eq!(back.config, m.config);
    assert_eq!(v2, vocab);
    std::fs::write(&path, b"garbage").unwrap();
    assert!(load_checkpoint::<f64>(&path).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}
