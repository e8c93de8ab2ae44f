use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN3: f64 = 1.0986122886681098;

/// n=1, L=2, D=1 with unary scores (0, ln 3).
fn two_label_unary() -> (CrfModel, Vec<Vec<f64>>) {
    let mut m = CrfModel::zeros(2, 1);
    m.set_emission(1, 0, LN3);
    (m, vec![vec![1.0]])
}

fn random_model(rng: &mut ChaCha8Rng, labels: usize, dim: usize) -> CrfModel {
    let mut m = CrfModel::zeros(labels, dim);
    for p in m.params_mut() {
        *p = rng.random_range(-2.0..2.0);
    }
    m
}

fn random_seq(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect()
}

/// Score computed term by term from the public accessors.
fn brute_score(m: &CrfModel, emb: &[Vec<f64>], y: &[usize]) -> f64 {
    let mut s = m.start_scores()[y[0]] + m.end_scores()[*y.last().unwrap()];
    for i in 0..y.len() {
        let w = m.emission_row(y[i]);
        s += w.iter().zip(&emb[i]).map(|(a, b)| a * b).sum::<f64>() + m.emission_bias()[y[i]];
        if i > 0 {
            s += m.transition(y[i - 1], y[i]);
        }
    }
    s
}

fn all_sequences(n: usize, l: usize) -> Vec<Vec<usize>> {
    let total = l.pow(n as u32);
    (0..total)
        .map(|mut k| {
            let mut y = vec![0; n];
            for slot in y.iter_mut().rev() {
                *slot = k % l;
                k /= l;
            }
            y
        })
        .collect()
}

#[test]
fn log_partition_closed_forms() {
    let (m, x) = two_label_unary();
    assert!((m.log_partition(&x).unwrap() - 4f64.ln()).abs() < 1e-12);
    let zero = CrfModel::zeros(2, 3);
    let x2 = vec![vec![0.3, -1.0, 2.0]; 2];
    assert!((zero.log_partition(&x2).unwrap() - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn marginals_closed_forms() {
    let (m, x) = two_label_unary();
    let t = m.marginals(&x).unwrap();
    assert!((t.row(0)[0] - 0.25).abs() < 1e-12);
    assert!((t.row(0)[1] - 0.75).abs() < 1e-12);
    let zero = CrfModel::zeros(4, 2);
    let t = zero.marginals(&vec![vec![1.0, 2.0]; 3]).unwrap();
    for row in t.rows() {
        for p in row {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }
}

#[test]
fn viterbi_closed_forms() {
    let (m, x) = two_label_unary();
    assert_eq!(m.viterbi(&x).unwrap().labels, vec![1]);
    let zero = CrfModel::zeros(3, 2);
    let p = zero.viterbi(&vec![vec![1.0, -1.0]; 5]).unwrap();
    assert_eq!(p.labels, vec![0; 5]);
    assert_eq!(p.score, 0.0);
}

#[test]
fn viterbi_beats_greedy_on_transition_dominated_instance() {
    // both tokens prefer label 1 locally, but any transition out of label 1
    // costs 3, so the best path starts in label 0.
    let mut m = CrfModel::zeros(2, 2);
    m.set_emission(0, 0, 0.0);
    m.set_emission(1, 0, 0.5);
    m.set_emission(0, 1, 0.0);
    m.set_emission(1, 1, 0.4);
    m.set_transition(1, 0, -3.0);
    m.set_transition(1, 1, -3.0);
    let x = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let unary = m.emissions(&x).unwrap();
    let greedy: Vec<usize> = unary.iter().map(|r| if r[1] > r[0] { 1 } else { 0 }).collect();
    assert_eq!(greedy, vec![1, 1]);
    let path = m.viterbi(&x).unwrap();
    assert_eq!(path.labels, vec![0, 1]);
    let best = all_sequences(2, 2)
        .into_iter()
        .map(|y| brute_score(&m, &x, &y))
        .fold(f64::NEG_INFINITY, f64::max);
    assert!((path.score - best).abs() < 1e-12);
}

#[test]
fn uniform_model_loss_is_ln2() {
    let m = CrfModel::zeros(2, 1);
    let (loss, _) = m.nll_and_gradient(&[vec![0.7]], &[0]).unwrap();
    assert!((loss - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn invalid_label_and_dims() {
    let m = CrfModel::zeros(2, 2);
    assert!(matches!(
        m.nll_and_gradient(&[vec![0.0, 0.0]], &[2]),
        Err(Error::InvalidLabel { label: 2, count: 2 })
    ));
    assert!(matches!(m.log_partition(&[vec![0.0]]), Err(Error::DimMismatch { .. })));
    assert!(matches!(m.viterbi::<Vec<f64>>(&[]), Err(Error::EmptyInput(_))));
}

#[test]
fn matches_enumeration_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let l = rng.random_range(1..=4);
        let d = rng.random_range(1..=3);
        let m = random_model(&mut rng, l, d);
        let x = random_seq(&mut rng, n, d);
        let seqs = all_sequences(n, l);
        let scores: Vec<f64> = seqs.iter().map(|y| brute_score(&m, &x, y)).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        assert!((m.log_partition(&x).unwrap() - log_z).abs() < 1e-8);

        let table = m.marginals(&x).unwrap();
        for i in 0..n {
            for c in 0..l {
                let p: f64 = seqs
                    .iter()
                    .zip(&scores)
                    .filter(|(y, _)| y[i] == c)
                    .map(|(_, s)| (s - log_z).exp())
                    .sum();
                assert!((table.row(i)[c] - p).abs() < 1e-8);
            }
            assert!((table.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let path = m.viterbi(&x).unwrap();
        assert!((path.score - max).abs() < 1e-9);
        assert!((brute_score(&m, &x, &path.labels) - max).abs() < 1e-9);
        assert!(scores.iter().all(|s| *s <= log_z + 1e-12));
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let eps = 1e-5;
    for _ in 0..30 {
        let n = rng.random_range(1..=5);
        let l = rng.random_range(1..=4);
        let d = rng.random_range(1..=3);
        let m = random_model(&mut rng, l, d);
        let x = random_seq(&mut rng, n, d);
        let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..l)).collect();
        let (_, Gradient(g)) = m.nll_and_gradient(&x, &gold).unwrap();
        for (k, &gk) in g.iter().enumerate() {
            let mut plus = m.clone();
            plus.params_mut()[k] += eps;
            let mut minus = m.clone();
            minus.params_mut()[k] -= eps;
            let lp = plus.log_partition(&x).unwrap() - plus.score(&x, &gold).unwrap();
            let lm = minus.log_partition(&x).unwrap() - minus.score(&x, &gold).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (fd - gk).abs() / fd.abs().max(gk.abs()).max(1e-6);
            assert!(rel < 1e-4 || (fd - gk).abs() < 1e-8, "param {k}: fd {fd} vs {gk}");
        }
    }
}

#[test]
fn unary_shift_at_one_position_leaves_marginals_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let l = rng.random_range(2..=4);
        let n = 4;
        // last feature is an indicator for position `pos`
        let mut m = random_model(&mut rng, l, 3);
        for c in 0..l {
            m.set_emission(c, 2, 0.0);
        }
        let pos = rng.random_range(0..n);
        let mut x = random_seq(&mut rng, n, 3);
        for (i, row) in x.iter_mut().enumerate() {
            row[2] = if i == pos { 1.0 } else { 0.0 };
        }
        let before = m.marginals(&x).unwrap();
        let shift = rng.random_range(-5.0..5.0);
        for c in 0..l {
            m.set_emission(c, 2, shift);
        }
        let after = m.marginals(&x).unwrap();
        for (a, b) in before.rows().iter().zip(after.rows()) {
            for (p, q) in a.iter().zip(b) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }
}
