use std::collections::BTreeSet;

use intervalrec::benchmark::*;
use intervalrec::dataset::*;
use intervalrec::seed;
use intervalrec::Error;
use proptest::prelude::*;
use rand::Rng;

fn stats(values: &[Option<f64>]) -> Vec<UserStatistic> {
    values.iter().enumerate().map(|(k, v)| UserStatistic { user_id: format!("u{k:03}"), value: *v }).collect()
}

fn rec(user: &str, method: &str, pred: &str, target: char) -> PredictionRecord {
    PredictionRecord::new(user, method, pred, target)
}

#[test]
fn hit_rate_examples() {
    let all: Vec<_> = (0..5).map(|k| rec(&format!("u{k}"), "m", "C", 'C')).collect();
    assert_eq!(hit_rate_at_1(&all).unwrap(), 1.0);

    let mut recs: Vec<_> = (0..1000).map(|k| rec(&format!("u{k}"), "m", if k < 617 { "B" } else { "D" }, 'B')).collect();
    assert_eq!(hit_rate_at_1(&recs).unwrap(), 0.617);
    assert_eq!(format_percent(hit_rate_at_1(&recs).unwrap()), "61.7%");
    assert_eq!(Count::of(&recs).percent().unwrap(), "61.7%");

    // An unparseable answer whose first character is the target is a miss.
    recs[0] = rec("u0", "m", "B.", 'B');
    assert!(!recs[0].valid);
    assert_eq!(hit_rate_at_1(&recs).unwrap(), 0.616);
    assert_eq!(validity_ratio(&recs).unwrap(), 0.999);

    assert!(matches!(hit_rate_at_1(&[]), Err(Error::UndefinedMetric(_))));
    assert!(matches!(validity_ratio(&[]), Err(Error::UndefinedMetric(_))));
}

#[test]
fn diff_reproduces_reference_cells() {
    let a = diff_metric(0.552, 0.437).unwrap();
    assert!((a * 100.0 - -20.8).abs() <= 0.1, "{a}");
    assert_eq!(format_signed_percent(a), "-20.8%");
    let b = diff_metric(0.561, 0.562).unwrap();
    assert!((b * 100.0 - 0.2).abs() <= 0.1, "{b}");
    assert_eq!(format_signed_percent(b), "+0.2%");
    assert_eq!(diff_metric(0.4, 0.4).unwrap(), 0.0);
    assert!(matches!(diff_metric(0.0, 0.3), Err(Error::UndefinedMetric(_))));

    // Same values reached through rendered cells.
    let warm = Count { hits: 552, total: 1000 };
    let cold = Count { hits: 437, total: 1000 };
    assert_eq!(format_signed_percent(cell_diff(&warm, &cold).unwrap()), "-20.8%");
}

#[test]
fn twenty_users_by_count() {
    let values: Vec<Option<f64>> = (1..=20).map(|c| Some(c as f64)).collect();
    let p = partition_users(&stats(&values), Perspective::User, 0.35).unwrap();
    let names = |r: std::ops::RangeInclusive<usize>| r.map(|c| format!("u{:03}", c - 1)).collect::<BTreeSet<_>>();
    assert_eq!(p.warm, names(14..=20));
    assert_eq!(p.cold, names(1..=7));
    assert_eq!(p.thresholds, (Some(14.0), Some(7.0)));
}

#[test]
fn identical_statistics_use_user_id_order() {
    let s = stats(&vec![Some(3.0); 10]);
    let p = partition_users(&s, Perspective::Item, 0.35).unwrap();
    assert_eq!(p.warm, ["u000", "u001", "u002"].map(String::from).into());
    assert_eq!(p.cold, ["u007", "u008", "u009"].map(String::from).into());
    assert_eq!(p, partition_users(&s, Perspective::Item, 0.35).unwrap());
}

#[test]
fn short_intervals_are_warm() {
    // Daily buyers, yearly buyers, and one user with no interval.
    let mut values = vec![Some(1.0), Some(1.0), Some(1.0), Some(365.0), Some(365.0), Some(365.0), None];
    values.insert(3, Some(30.0));
    let p = partition_users(&stats(&values), Perspective::Interval, 0.35).unwrap();
    assert_eq!(p.warm, ["u000", "u001"].map(String::from).into());
    assert_eq!(p.cold, ["u005", "u006"].map(String::from).into());
    assert_eq!(p.excluded, vec!["u007".to_string()]);
    assert_eq!(p.bucket("u007"), "excluded");
    assert_eq!(p.bucket("u003"), "middle");
}

fn log_from(users: &[Vec<i64>]) -> InteractionLog {
    let mut rows = Vec::new();
    for (u, ts) in users.iter().enumerate() {
        for (k, &t) in ts.iter().enumerate() {
            rows.push(Interaction {
                user_id: format!("u{u:03}"),
                item_id: format!("i{}", (u + k) % 30),
                item_title: format!("Item {}", (u + k) % 30),
                timestamp: t,
            });
        }
    }
    // Two filler users with disjoint items keep every user at 19 or more
    // eligible negatives.
    for (u, range) in [("zfill1", 30..60), ("zfill2", 60..90)] {
        for i in range {
            rows.push(Interaction { user_id: u.into(), item_id: format!("i{i}"), item_title: format!("Item {i}"), timestamp: i * SECONDS_PER_DAY });
        }
    }
    InteractionLog::new(rows)
}

fn random_users(s: u64, n: usize) -> Vec<Vec<i64>> {
    let mut rng = seed::rng(s);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(3..9);
            let step = rng.gen_range(1..200);
            let mut t = rng.gen_range(0..1000) * SECONDS_PER_DAY;
            (0..len)
                .map(|_| {
                    t += rng.gen_range(0..=step) * SECONDS_PER_DAY;
                    t
                })
                .collect()
        })
        .collect()
}

fn dataset(users: &[Vec<i64>]) -> PreparedDataset {
    PreparedDataset::prepare(&log_from(users), PrepareConfig { seed: 0, core: 1 }).unwrap()
}

#[test]
fn statistics_from_a_prepared_dataset() {
    let users = vec![
        vec![0, SECONDS_PER_DAY, 2 * SECONDS_PER_DAY],
        vec![0, 100 * SECONDS_PER_DAY, 300 * SECONDS_PER_DAY, 301 * SECONDS_PER_DAY],
    ];
    let d = dataset(&users);
    let get = |p| user_statistics(&d, p).into_iter().map(|s| s.value.unwrap()).collect::<Vec<_>>();
    assert_eq!(get(Perspective::User), vec![3.0, 4.0, 30.0, 30.0]);
    assert_eq!(get(Perspective::Interval), vec![1.0, 301.0 / 3.0, 1.0, 1.0]);
    let pops: Vec<f64> = d
        .splits
        .iter()
        .map(|a| d.catalog.popularity(&a.example(Split::Test).1.item_id) as f64)
        .collect();
    assert_eq!(get(Perspective::Item), pops);
}

fn methods_records(d: &PreparedDataset, methods: &[&str], s: u64) -> Vec<PredictionRecord> {
    let mut rng = seed::rng(s);
    let mut out = Vec::new();
    for m in methods {
        for c in &d.candidates {
            let truth = c.test.ground_truth_letter;
            let pred = if rng.gen_bool(0.5) { truth } else { LETTERS[rng.gen_range(0..20)] };
            out.push(PredictionRecord::new(c.user_id.clone(), *m, pred.to_string(), truth));
        }
    }
    out
}

#[test]
fn report_cells_counts_and_determinism() {
    let d = dataset(&random_users(3, 40));
    let parts: Vec<_> = Perspective::ALL
        .iter()
        .map(|&p| partition_users(&user_statistics(&d, p), p, WARM_COLD_FRACTION).unwrap())
        .collect();
    let recs = methods_records(&d, &["A", "B"], 1);
    check_targets(&d, &recs).unwrap();
    let r = emit_report(&recs, &parts, Some("abc".into()), vec![0]).unwrap();
    assert_eq!(r.cell_count(), 2 * (1 + 3 * 3));
    assert_eq!(r.methods.iter().map(|m| m.method.as_str()).collect::<Vec<_>>(), vec!["A", "B"]);

    // Cells recomputed directly from the records.
    for m in &r.methods {
        let mine: Vec<&PredictionRecord> = recs.iter().filter(|x| x.method == m.method).collect();
        for c in &m.partitions {
            let p = parts.iter().find(|p| p.perspective == c.perspective).unwrap();
            let hits = |set: &BTreeSet<String>| mine.iter().filter(|x| set.contains(&x.user_id) && x.predicted_letter == x.target_letter.to_string()).count();
            assert_eq!((c.warm.hits, c.warm.total), (hits(&p.warm), p.warm.len()));
            assert_eq!((c.cold.hits, c.cold.total), (hits(&p.cold), p.cold.len()));
        }
    }

    let files = report_files(&r, &parts).unwrap();
    let again = report_files(&emit_report(&recs, &parts, Some("abc".into()), vec![0]).unwrap(), &parts).unwrap();
    assert_eq!(files, again);
    assert!(files[0].1.contains("| A | "));
    assert_eq!(files[1].1.lines().count(), 1 + 2 * (1 + 3 * 3));
    assert_eq!(files[2].1.lines().count(), 1 + 3 * 42);

    let one = emit_report(&recs, &[], None, vec![]).unwrap();
    assert_eq!(one.cell_count(), 2);
}

#[test]
fn missing_predictions_are_reported() {
    let d = dataset(&random_users(4, 20));
    let p = partition_users(&user_statistics(&d, Perspective::User), Perspective::User, 0.35).unwrap();
    let mut recs = methods_records(&d, &["M"], 2);
    let dropped = p.cold.iter().next().unwrap().clone();
    recs.retain(|r| r.user_id != dropped);
    match emit_report(&recs, &[p], None, vec![]) {
        Err(Error::IncompleteReport { method, users }) => {
            assert_eq!(method, "M");
            assert_eq!(users, vec![dropped]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn dumps_round_trip_and_reject_inconsistent_flags() {
    let dir = std::env::temp_dir().join(format!("intervalrec-bench-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("dump.jsonl");
    let recs = vec![rec("u1", "GRU4Rec", "A", 'A'), rec("u2", "GRU4Rec", "Z", 'B')];
    write_dump(&path, &recs).unwrap();
    assert_eq!(read_dump(&path).unwrap(), recs);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("{\"user_id\":\"u1\",\"method\":\"GRU4Rec\",\"predicted_letter\":\"A\",\"target_letter\":\"A\",\"valid\":true}"));
    std::fs::write(&path, text.replace("\"valid\":false", "\"valid\":true")).unwrap();
    assert!(read_dump(&path).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn partition_sizes_and_quantile_oracle(s in any::<u64>(), n in 1usize..200, levels in 1u32..50, pi in 0usize..3) {
        let mut rng = seed::rng(s);
        let values: Vec<Option<f64>> = (0..n).map(|_| Some(rng.gen_range(0..levels) as f64)).collect();
        let perspective = Perspective::ALL[pi];
        let st = stats(&values);
        let p = partition_users(&st, perspective, 0.35).unwrap();
        let k = (35 * n) / 100;
        prop_assert!(p.warm.len().abs_diff(k) <= 1 && p.cold.len().abs_diff(k) <= 1);
        prop_assert!(p.warm.is_disjoint(&p.cold));

        // Rank oracle: a user's position is the number of users ahead of it.
        let ahead = |a: &UserStatistic, b: &UserStatistic| {
            let (x, y) = (a.value.unwrap(), b.value.unwrap());
            let better = if perspective == Perspective::Interval { x < y } else { x > y };
            better || (x == y && a.user_id < b.user_id)
        };
        for u in &st {
            let rank = st.iter().filter(|o| ahead(o, u)).count();
            prop_assert_eq!(p.warm.contains(&u.user_id), rank < p.warm.len());
            prop_assert_eq!(p.cold.contains(&u.user_id), rank >= n - p.cold.len());
        }
    }

    #[test]
    fn diff_sign_and_identity(w in 0.001f64..1.0, c in 0.0f64..1.0) {
        prop_assert_eq!(diff_metric(w, w).unwrap(), 0.0);
        let d = diff_metric(w, c).unwrap();
        prop_assert_eq!(d > 0.0, c > w);
        prop_assert_eq!(d < 0.0, c < w);
    }

    #[test]
    fn hit_rate_bounds_and_union(s in any::<u64>(), a in 1usize..50, b in 1usize..50) {
        let mut rng = seed::rng(s);
        let mk = |n: usize, rng: &mut rand_chacha::ChaCha8Rng, tag: &str| -> Vec<PredictionRecord> {
            (0..n).map(|k| rec(&format!("{tag}{k}"), "m", &LETTERS[rng.gen_range(0..3)].to_string(), 'A')).collect()
        };
        let x = mk(a, &mut rng, "x");
        let y = mk(b, &mut rng, "y");
        let (hx, hy) = (hit_rate_at_1(&x).unwrap(), hit_rate_at_1(&y).unwrap());
        prop_assert!((0.0..=1.0).contains(&hx));
        let both: Vec<_> = x.iter().chain(&y).cloned().collect();
        let weighted = (hx * a as f64 + hy * b as f64) / (a + b) as f64;
        prop_assert!((hit_rate_at_1(&both).unwrap() - weighted).abs() < 1e-12);
    }

    #[test]
    fn interval_partition_ignores_timestamp_shift(s in any::<u64>(), who in 0usize..30, shift in 1i64..5000) {
        let users = random_users(s, 30);
        let mut moved = users.clone();
        for t in &mut moved[who] {
            *t += shift * SECONDS_PER_DAY;
        }
        let part = |u: &[Vec<i64>]| {
            let d = dataset(u);
            partition_users(&user_statistics(&d, Perspective::Interval), Perspective::Interval, 0.35).unwrap()
        };
        let (a, b) = (part(&users), part(&moved));
        prop_assert_eq!(a.warm, b.warm);
        prop_assert_eq!(a.cold, b.cold);
    }
}
