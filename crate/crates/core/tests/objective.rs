use std::collections::BTreeMap;

use decred::decoding::CtcPrefixScorer;
use decred::model::{DecoderForwardOutput};
use decred::objective::{ctc_loss, ctc_loss_var, decred_loss_value, label_smoothed_ce, TrainingTarget};
use decred::tensor::{grad_check, Tape, Tensor};
use decred::vocab::EOS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-normalised random log-probabilities, `[t, v]`.
fn log_probs(t: usize, v: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let mut data = Vec::with_capacity(t * v);
    for _ in 0..t {
        let row: Vec<f64> = (0..v).map(|_| rng.random_range(-2.5..2.5)).collect();
        let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|x| x - lse));
    }
    Tensor::new(vec![t, v], data).unwrap()
}

/// Probability of every collapsed label sequence, by enumerating all `v^t`
/// frame paths.
fn path_enumeration(lp: &Tensor<f64>) -> BTreeMap<Vec<usize>, f64> {
    let (t, v) = lp.dims2().unwrap();
    let mut out = BTreeMap::new();
    let mut path = vec![0usize; t];
    loop {
        let mut logp = 0.0;
        let mut labels = Vec::new();
        let mut prev = None;
        for (i, &k) in path.iter().enumerate() {
            logp += lp.data()[i * v + k];
            if k != 0 && prev != Some(k) {
                labels.push(k);
            }
            prev = Some(k);
        }
        *out.entry(labels).or_insert(0.0) += logp.exp();
        let mut i = 0;
        while i < t {
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == t {
            return out;
        }
    }
}

fn sequences(alphabet: &[usize], max_len: usize) -> Vec<Vec<usize>> {
    let mut all = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for &a in alphabet {
                let mut e: Vec<usize> = s.clone();
                e.push(a);
                next.push(e);
            }
        }
        all.extend(next.iter().cloned());
        frontier = next;
    }
    all
}

#[test]
fn ctc_loss_matches_brute_force_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut compared = 0;
    for v in 2..=4 {
        let labels: Vec<usize> = (1..v).collect();
        for t in 1..=6 {
            for _ in 0..3 {
                let lp = log_probs(t, v, &mut rng);
                let table = path_enumeration(&lp);
                for target in sequences(&labels, 3) {
                    let p = table.get(&target).copied().unwrap_or(0.0);
                    let got = ctc_loss(&lp, &target).unwrap();
                    if p == 0.0 {
                        assert!(got.loss.is_infinite() && !got.alignable());
                        assert!(got.grad.iter().all(|g| *g == 0.0));
                    } else {
                        assert!(
                            (got.loss + p.ln()).abs() < 1e-6,
                            "V={v} T={t} target {target:?}: {} vs {}",
                            got.loss,
                            -p.ln()
                        );
                    }
                    compared += 1;
                }
            }
        }
    }
    assert!(compared > 1000);
}

#[test]
fn prefix_scores_match_enumeration_and_telescope() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // EOS (id 3) closes a prefix, so labels stay below it.
    let labels = [1, 2];
    for v in 3..=4 {
        for t in 1..=6 {
            for _ in 0..3 {
                let lp = log_probs(t, v, &mut rng);
                let table = path_enumeration(&lp);
                let scorer = CtcPrefixScorer::new(&lp).unwrap();
                for target in sequences(&labels, 3) {
                    let mut state = scorer.init();
                    let mut sum = 0.0;
                    for (n, &k) in target.iter().enumerate() {
                        let (inc, next) = scorer.step(&state, k).unwrap();
                        let prefix = &target[..=n];
                        let oracle: f64 = table
                            .iter()
                            .filter(|(seq, _)| seq.starts_with(prefix))
                            .map(|(_, p)| p)
                            .sum();
                        if oracle == 0.0 {
                            assert_eq!(next.score, f64::NEG_INFINITY);
                        } else {
                            assert!((next.score - oracle.ln()).abs() < 1e-6);
                        }
                        sum += inc;
                        state = next;
                    }
                    let (inc, done) = scorer.step(&state, EOS).unwrap();
                    sum += inc;
                    let complete = -ctc_loss(&lp, &target).unwrap().loss;
                    if complete == f64::NEG_INFINITY {
                        assert_eq!(done.score, f64::NEG_INFINITY);
                        assert_eq!(sum, f64::NEG_INFINITY);
                    } else {
                        assert!((done.score - complete).abs() < 1e-6);
                        assert!((sum - complete).abs() < 1e-6, "telescoped {sum} vs {complete}");
                        assert!((scorer.sequence_score(&target).unwrap() - complete).abs() < 1e-9);
                    }
                }
            }
        }
    }
}

#[test]
fn ctc_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (t, v, target) in [(5, 4, vec![1, 2]), (6, 3, vec![1, 1]), (4, 4, vec![3]), (7, 5, vec![2, 4, 2])] {
        let x = Tensor::from_fn(&[t, v], |_| rng.random_range(-1.5..1.5));
        let f = |tape: &mut Tape<f64>, x| {
            let lp = tape.log_softmax(x, 1)?;
            Ok(ctc_loss_var(tape, lp, &target)?.expect("alignable").0)
        };
        let r = grad_check(f, &x, 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{t}x{v} {target:?}: {:.2e}", r.max_rel_error);
    }
}

#[test]
fn ctc_gradient_is_negative_occupancy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lp = log_probs(6, 4, &mut rng);
    let target = [1, 2, 1];
    let got = ctc_loss(&lp, &target).unwrap();
    let h = 1e-6;
    for i in 0..lp.numel() {
        let mut plus = lp.clone();
        plus.data_mut()[i] += h;
        let mut minus = lp.clone();
        minus.data_mut()[i] -= h;
        let numeric = (ctc_loss(&plus, &target).unwrap().loss - ctc_loss(&minus, &target).unwrap().loss) / (2.0 * h);
        assert!((numeric - got.grad[i]).abs() < 1e-6);
    }
    // Occupancies of each frame sum to one.
    for row in got.grad.chunks(4) {
        assert!((row.iter().sum::<f64>() + 1.0).abs() < 1e-9);
    }
}

/// Cross-entropy against the smoothed target, written from the definition.
fn ce_oracle(logits: &[Vec<f64>], targets: &[usize], keep: &[bool], eps: f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for ((row, &y), &k) in logits.iter().zip(targets).zip(keep) {
        if !k {
            continue;
        }
        let v = row.len() as f64;
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        for (c, x) in row.iter().enumerate() {
            let q = if c == y { 1.0 - eps + eps / v } else { eps / v };
            total -= q * (x.exp() / z).ln();
        }
        n += 1.0;
    }
    total / n
}

#[test]
fn smoothed_cross_entropy_matches_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..50 {
        let n = 1 + trial % 5;
        let logits: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..6).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
        let mut keep: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        keep[0] = true;
        let mut tape = Tape::<f64>::new();
        let flat: Vec<f64> = logits.iter().flatten().copied().collect();
        let x = tape.leaf(Tensor::new(vec![n, 6], flat).unwrap());
        let ce = label_smoothed_ce(&mut tape, x, &targets, &keep, 0.1).unwrap();
        let want = ce_oracle(&logits, &targets, &keep, 0.1);
        assert!((tape.value(ce).item() - want).abs() < 1e-12);
    }
    // Uniform logits: every row scores ln V regardless of smoothing.
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[3, 6]));
    let ce = label_smoothed_ce(&mut tape, x, &[0, 1, 2], &[true; 3], 0.1).unwrap();
    assert!((tape.value(ce).item() - 6f64.ln()).abs() < 1e-12);
}

#[test]
fn smoothed_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_fn(&[4, 6], |_| rng.random_range(-2.0..2.0));
    let f = |t: &mut Tape<f64>, x| label_smoothed_ce(t, x, &[1, 5, 0, 3], &[true, false, true, true], 0.1);
    assert!(grad_check(f, &x, 1e-5, 1e-4).unwrap().passed);
}

#[test]
fn decred_loss_is_the_weighted_sum_of_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let target = TrainingTarget {
        decoder_input: vec![2, 7, 8],
        decoder_target: vec![7, 8, 3],
        keep: vec![true, true, true],
        ctc_target: vec![7, 8],
        use_attention: true,
    };
    let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..3).map(|_| (0..10).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
    };
    let (l2, l4) = (rows(&mut rng), rows(&mut rng));
    let tensor = |r: &Vec<Vec<f64>>| Tensor::new(vec![3, 10], r.iter().flatten().copied().collect()).unwrap();
    let out = DecoderForwardOutput {
        hidden_by_layer: BTreeMap::new(),
        logits_by_classifier: BTreeMap::from([(2, tensor(&l2)), (4, tensor(&l4))]),
    };
    let betas = BTreeMap::from([(2, 0.4), (4, 0.6)]);
    let got = decred_loss_value(&out, &target, &betas, 0.1).unwrap();
    let want = 0.4 * ce_oracle(&l2, &target.decoder_target, &target.keep, 0.1)
        + 0.6 * ce_oracle(&l4, &target.decoder_target, &target.keep, 0.1);
    assert!((got - want).abs() < 1e-12);

    let only_final = decred_loss_value(&out, &target, &BTreeMap::from([(2, 0.0), (4, 1.0)]), 0.1).unwrap();
    let want = ce_oracle(&l4, &target.decoder_target, &target.keep, 0.1);
    assert!((only_final - want).abs() < 1e-12);
    assert!(decred_loss_value(&out, &target, &BTreeMap::from([(3, 1.0)]), 0.1).is_err());
}
