use intervalrec::baselines::*;
use intervalrec::dataset::*;
use intervalrec::seed;
use intervalrec::synthetic::*;
use intervalrec::tensor::Matrix;
use proptest::prelude::*;
use rand::Rng;

fn items(n: usize) -> Vec<String> {
    (0..n).map(|k| format!("it{k:02}")).collect()
}

fn small(variant: Variant, s: u64) -> RankerModel {
    let cfg = RankerConfig { d: 6, max_len: 8, clip_days: 5, blocks: 2, seed: s, ..RankerConfig::new(variant) };
    let ids = items(12);
    let mut m = RankerModel::init(cfg, ids.iter().map(String::as_str)).unwrap();
    // Move biases and norms off their defaults so the oracle sees them.
    let mut rng = seed::rng(s ^ 0xabc);
    for p in &mut m.params {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    m
}

fn seq(s: u64, n: usize) -> UserSequence {
    let mut rng = seed::rng(s);
    let mut t = 1_600_000_000i64;
    let events = (0..n)
        .map(|_| {
            t += rng.gen_range(0..9) * SECONDS_PER_DAY + rng.gen_range(0..1000);
            let k = rng.gen_range(0..12);
            (format!("it{k:02}"), String::new(), t)
        })
        .collect();
    UserSequence::from_events(format!("u{s}"), events)
}

// Loop-based reference encoders.

fn p(m: &RankerModel, name: &str) -> Matrix {
    m.param(name).unwrap().clone()
}

fn vecmat(x: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.cols()).map(|c| (0..w.rows()).map(|r| x[r] * w.get(r, c)).sum()).collect()
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn ln(x: &[f64], g: &Matrix, b: &Matrix) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().enumerate().map(|(c, v)| (v - mean) / (var + 1e-5).sqrt() * g.get(0, c) + b.get(0, c)).collect()
}

fn oracle(m: &RankerModel, s: &UserSequence) -> Vec<Vec<f64>> {
    let d = m.config.d;
    let table = p(m, "items");
    let x: Vec<Vec<f64>> = s.items.iter().map(|i| table.row(m.item_row(i).unwrap()).to_vec()).collect();
    let n = x.len();
    match m.config.variant {
        Variant::Recurrent => {
            let g = |n: &str| p(m, &format!("gru.{n}"));
            let mut h = vec![0.0; d];
            let mut out = Vec::new();
            for xt in &x {
                let (xz, xr, xn) = (vecmat(xt, &g("Wz")), vecmat(xt, &g("Wr")), vecmat(xt, &g("Wn")));
                let (hz, hr, hn) = (vecmat(&h, &g("Uz")), vecmat(&h, &g("Ur")), vecmat(&h, &g("Un")));
                let mut next = vec![0.0; d];
                for c in 0..d {
                    let z = sig(xz[c] + g("bz").get(0, c) + hz[c]);
                    let r = sig(xr[c] + g("br").get(0, c) + hr[c]);
                    let cand = (xn[c] + g("bn").get(0, c) + r * hn[c]).tanh();
                    next[c] = (1.0 - z) * cand + z * h[c];
                }
                h = next;
                out.push(h.clone());
            }
            out
        }
        _ => {
            let pos = p(m, "positions");
            let mut h: Vec<Vec<f64>> =
                (0..n).map(|i| (0..d).map(|c| x[i][c] * (d as f64).sqrt() + pos.get(i, c)).collect()).collect();
            for b in 0..m.config.blocks {
                let w = |n: &str| p(m, &format!("block{b}.{n}"));
                let a_in: Vec<Vec<f64>> = h.iter().map(|r| ln(r, &w("ln1.g"), &w("ln1.b"))).collect();
                let q: Vec<Vec<f64>> = a_in.iter().map(|r| vecmat(r, &w("Wq"))).collect();
                let k: Vec<Vec<f64>> = a_in.iter().map(|r| vecmat(r, &w("Wk"))).collect();
                let v: Vec<Vec<f64>> = a_in.iter().map(|r| vecmat(r, &w("Wv"))).collect();
                for i in 0..n {
                    let mut logits = Vec::new();
                    for j in 0..=i {
                        let mut l = dotv(&q[i], &k[j]);
                        if m.config.variant == Variant::TimeAwareSelfAttn {
                            let days = ((s.timestamps[i] - s.timestamps[j]).abs() / SECONDS_PER_DAY) as usize;
                            l += dotv(&q[i], w("R").row(days.min(m.config.clip_days)));
                        }
                        logits.push(l / (d as f64).sqrt());
                    }
                    let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in 0..d {
                        h[i][c] += (0..=i).map(|j| e[j] / z * v[j][c]).sum::<f64>();
                    }
                }
                for r in h.iter_mut() {
                    let f_in = ln(r, &w("ln2.g"), &w("ln2.b"));
                    let mut hid = vecmat(&f_in, &w("W1"));
                    for (c, v) in hid.iter_mut().enumerate() {
                        *v = gelu(*v + w("b1").get(0, c));
                    }
                    let o = vecmat(&hid, &w("W2"));
                    for c in 0..d {
                        r[c] += o[c] + w("b2").get(0, c);
                    }
                }
            }
            h.iter().map(|r| ln(r, &p(m, "final.g"), &p(m, "final.b"))).collect()
        }
    }
}

#[test]
fn encoders_match_loop_oracles() {
    for v in Variant::ALL {
        for s in 0..5 {
            let m = small(v, s);
            let u = seq(100 + s, 1 + s as usize);
            let got = m.encode_all(&u).unwrap();
            let want = oracle(&m, &u);
            for (i, row) in want.iter().enumerate() {
                for (c, w) in row.iter().enumerate() {
                    assert!((got.get(i, c) - w).abs() < 1e-6, "{v} seed {s} ({i},{c}): {} vs {w}", got.get(i, c));
                }
            }
        }
    }
}

#[test]
fn recurrent_single_step_from_zero_state() {
    let m = small(Variant::Recurrent, 3);
    let u = seq(7, 1);
    let h = m.encode(&u).unwrap();
    for (a, b) in h.iter().zip(&oracle(&m, &u)[0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn equal_timestamps_reduce_to_plain_attention() {
    let ta = small(Variant::TimeAwareSelfAttn, 4);
    let mut sa = RankerModel::init(RankerConfig { variant: Variant::SelfAttn, ..ta.config.clone() }, items(12).iter().map(String::as_str)).unwrap();
    for (n, p) in sa.names.clone().iter().zip(sa.params.iter_mut()) {
        *p = ta.param(n).unwrap().clone();
    }
    let mut u = seq(9, 6);
    let t0 = u.timestamps[0];
    u.timestamps.iter_mut().for_each(|t| *t = t0);
    // The zero-gap bias is constant along each attention row.
    let (a, b) = (ta.encode_all(&u).unwrap(), sa.encode_all(&u).unwrap());
    assert!(a.max_abs_diff(&b) < 1e-12, "{}", a.max_abs_diff(&b));
    let c = candidates(&ta, 3, 5);
    assert_eq!(ta.predict(&u, &c).unwrap(), sa.predict(&u, &c).unwrap());
}

#[test]
fn attention_variants_are_causal() {
    for v in [Variant::SelfAttn, Variant::TimeAwareSelfAttn] {
        let m = small(v, 5);
        let u = seq(11, 7);
        let full = m.encode_all(&u).unwrap();
        for r in 0..u.len() {
            let mut other = u.clone();
            for k in r + 1..u.len() {
                other.items[k] = format!("it{:02}", (k * 5) % 12);
                other.timestamps[k] += 40 * SECONDS_PER_DAY * k as i64;
            }
            let pert = m.encode_all(&other).unwrap();
            for i in 0..=r {
                assert_eq!(full.row(i), pert.row(i), "{v} r={r} i={i}");
            }
            assert_eq!(m.encode(&u.prefix(r + 1)).unwrap(), full.row(r).to_vec());
        }
    }
}

fn candidates(m: &RankerModel, target: usize, s: u64) -> CandidateSet {
    let ids = items(12);
    let mut rng = seed::rng(s);
    let options = LETTERS
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let id = if i == target { ids[0].clone() } else { ids[rng.gen_range(1..12)].clone() };
            CandidateOption { letter: l, item_id: id, title: String::new() }
        })
        .collect();
    let _ = m;
    CandidateSet { options, ground_truth_letter: LETTERS[target] }
}

#[test]
fn scoring_matches_loop_and_errors() {
    let m = small(Variant::SelfAttn, 6);
    let c = candidates(&m, 4, 1);
    let user: Vec<f64> = (0..6).map(|k| k as f64 * 0.3 - 0.7).collect();
    let got = m.score_candidates(&user, &c).unwrap();
    let table = m.param("items").unwrap();
    for (o, g) in c.options.iter().zip(&got) {
        let row = table.row(m.item_row(&o.item_id).unwrap());
        let mut want = 0.0;
        for k in 0..6 {
            want += user[k] * row[k];
        }
        assert_eq!(*g, want);
    }
    let scaled: Vec<f64> = user.iter().map(|x| x * 3.5).collect();
    let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
    assert_eq!(argmax(&got), argmax(&m.score_candidates(&scaled, &c).unwrap()));

    let mut bad = c.clone();
    bad.options[0].item_id = "nope".into();
    assert!(matches!(m.score_candidates(&user, &bad), Err(intervalrec::Error::Vocabulary(_))));
    let empty = UserSequence::from_events("e", vec![]);
    assert!(matches!(m.encode(&empty), Err(intervalrec::Error::InvalidInput(_))));
}

#[test]
fn orthogonal_candidate_wins() {
    let mut m = small(Variant::Recurrent, 7);
    let table = m.param_mut("items").unwrap();
    for r in 0..table.rows() {
        table.row_mut(r).fill(0.0);
        table.set(r, r % 6, if r < 6 { 1.0 } else { 0.0 });
    }
    let c = candidates(&m, 9, 2);
    let user = m.param("items").unwrap().row(0).to_vec();
    let scores = m.score_candidates(&user, &c).unwrap();
    let best = (0..20).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
    assert_eq!(c.options[best].item_id, "it00");
}

#[test]
fn sequence_gradients_match_finite_differences() {
    for v in Variant::ALL {
        let m = small(v, 8);
        let u = seq(21, 5);
        let negs: Vec<Vec<usize>> = (0..4).map(|t| vec![(t * 3 + 1) % 12, (t * 7 + 2) % 12]).collect();
        let (_, _, grads) = m.sequence_loss_and_grad(&u, &negs).unwrap();
        let mut rng = seed::rng(99);
        for (k, g) in grads.iter().enumerate() {
            for _ in 0..3 {
                let idx = rng.gen_range(0..g.len());
                let eps = 1e-5;
                let mut plus = m.clone();
                plus.params[k].data_mut()[idx] += eps;
                let mut minus = m.clone();
                minus.params[k].data_mut()[idx] -= eps;
                let fd = (plus.sequence_loss_and_grad(&u, &negs).unwrap().0 - minus.sequence_loss_and_grad(&u, &negs).unwrap().0) / (2.0 * eps);
                let a = g.data()[idx];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(err < 1e-4 || (a - fd).abs() < 1e-8, "{v} {} [{idx}]: {a} vs {fd}", m.names[k]);
            }
        }
    }
}

fn corpus_examples(c: &SyntheticCorpus, part: &[SyntheticExample]) -> (Vec<UserSequence>, Vec<RankerExample>) {
    (
        part.iter().map(|e| e.full_sequence(&c.catalog)).collect(),
        part.iter().map(|e| RankerExample { history: e.history.clone(), candidates: e.candidates.clone() }).collect(),
    )
}

fn ranker(v: Variant, c: &SyntheticCorpus, epochs: usize, lr: f64) -> RankerModel {
    let cfg = RankerConfig { epochs, lr, ..RankerConfig::new(v) };
    RankerModel::init(cfg, c.catalog.iter().map(|(id, _)| id)).unwrap()
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let c = single_pattern_corpus(&SyntheticConfig { users: 40, ..SyntheticConfig::default() }).unwrap();
    let (seqs, ex) = corpus_examples(&c, &c.examples);
    for v in Variant::ALL {
        let m = ranker(v, &c, 2, 0.0);
        let st = train_ranker(m.clone(), &seqs, &ex, None).unwrap();
        assert_eq!(st.model.params, m.params);
        assert_eq!(st.epochs, 2);
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let c = interval_corpus(&SyntheticConfig { users: 60, ..SyntheticConfig::default() }).unwrap();
    let (seqs, ex) = corpus_examples(&c, &c.examples);
    let run = || train_ranker(ranker(Variant::TimeAwareSelfAttn, &c, 2, 1e-3), &seqs, &ex[..20], None).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let bytes = a.best.to_tensors().unwrap().to_bytes().unwrap();
    let back = RankerModel::from_tensors(&intervalrec::checkpoint::NamedTensors::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, a.best);
}

#[test]
fn every_variant_overfits_a_single_pattern() {
    let c = single_pattern_corpus(&SyntheticConfig { users: 200, ..SyntheticConfig::default() }).unwrap();
    let (train, val, test) = c.split(100, 50);
    let (seqs, _) = corpus_examples(&c, train);
    let (_, val) = corpus_examples(&c, val);
    let (_, test) = corpus_examples(&c, test);
    for v in Variant::ALL {
        let st = train_ranker(ranker(v, &c, 20, 1e-3), &seqs, &val, Some(1.0)).unwrap();
        assert_eq!(hit_rate(&st.best, &test).unwrap(), 1.0, "{v}");
    }
}

#[test]
fn variant_names_parse() {
    for v in Variant::ALL {
        assert_eq!(Variant::parse(v.name()).unwrap(), v);
        assert_eq!(Variant::parse(v.method()).unwrap(), v);
    }
    assert!(Variant::parse("lstm").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scores_are_finite_and_argmax_scale_free(s in any::<u64>(), n in 1usize..8, lambda in 0.01f64..100.0) {
        for v in Variant::ALL {
            let m = small(v, s % 1000);
            let u = seq(s, n);
            let user = m.encode(&u).unwrap();
            prop_assert!(user.iter().all(|x| x.is_finite()));
            let c = candidates(&m, (s % 20) as usize, s);
            let a = m.score_candidates(&user, &c).unwrap();
            let scaled: Vec<f64> = user.iter().map(|x| x * lambda).collect();
            let b = m.score_candidates(&scaled, &c).unwrap();
            let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
            prop_assert_eq!(argmax(&a), argmax(&b));
        }
    }
}
