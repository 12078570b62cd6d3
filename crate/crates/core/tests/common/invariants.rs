//! Module invariants as seeded property checks. Each returns `Err` with the
//! shrunk counterexample on failure.

use std::collections::BTreeSet;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

use darca::experiment::{
    crossval_splits, emit_report, parse_report_csv, Experiment, ExperimentConfig, Mode, ReportFormat, Selector,
};
use darca::metrics::{dice, mae, pearson};
use darca::phantom::{self, LIVER};
use darca::rca::{score_with_transforms, Reference};
use darca::register::{register_affine, similarity, AffineTransform, Metric, RegConfig};
use darca::segmodel::{adapt_finetune, adapt_scratch, train, SegmenterModel, Template};
use darca::select::{select_from_scores, SelectionStrategy};
use darca::volgrid::{
    normalize_zscore, read_labels, read_volume, resample, write_labels, write_volume, Domain, Geometry, Interp,
    LabelMap, Volume,
};

use super::{labeled, reg, small_dataset, small_params};

pub type Check = fn() -> Result<(), String>;

/// Every invariant, by name.
pub const ALL: &[(&str, Check)] = &[
    ("volume_io_round_trip", volume_io_round_trip),
    ("labels_io_round_trip", labels_io_round_trip),
    ("nearest_resample_adds_no_labels", nearest_resample_adds_no_labels),
    ("zscore_idempotent", zscore_idempotent),
    ("identity_resample", identity_resample),
    ("dice_symmetric_bounded_exact", dice_symmetric_bounded_exact),
    ("dice_matches_counting", dice_matches_counting),
    ("pearson_affine_invariant", pearson_affine_invariant),
    ("mae_symmetric", mae_symmetric),
    ("ncc_intensity_invariant", ncc_intensity_invariant),
    ("registration_deterministic_and_descending", registration_deterministic_and_descending),
    ("rca_is_max_and_monotone", rca_is_max_and_monotone),
    ("selection_best_is_worst_of_negated", selection_best_is_worst_of_negated),
    ("selection_best_worst_union", selection_best_worst_union),
    ("selection_rank_invariant", selection_rank_invariant),
    ("selection_random_uniform", selection_random_uniform),
    ("prior_normalized", prior_normalized),
    ("finetune_freezes_prior", finetune_freezes_prior),
    ("scratch_without_target_is_train", scratch_without_target_is_train),
    ("train_order_and_duplication", train_order_and_duplication),
    ("model_io_round_trip", model_io_round_trip),
    ("phantom_seeds_independent", phantom_seeds_independent),
    ("splits_partition", splits_partition),
    ("harness_isolation_and_degenerate_rows", harness_isolation_and_degenerate_rows),
    ("report_csv_round_trip", report_csv_round_trip),
];

fn runner(cases: u32) -> TestRunner {
    let cfg = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

fn geometry(max_dim: usize) -> impl Strategy<Value = Geometry> {
    (
        [1..=max_dim, 1..=max_dim, 1..=max_dim],
        [0.5..3.0f64, 0.5..3.0f64, 0.5..3.0f64],
        [-20.0..20.0f64, -20.0..20.0f64, -20.0..20.0f64],
    )
        .prop_map(|(d, s, o)| Geometry::new(d, s, o).unwrap())
}

fn volume(max_dim: usize) -> impl Strategy<Value = Volume> {
    geometry(max_dim).prop_flat_map(|g| {
        prop::collection::vec(-1e3f32..1e3, g.len()).prop_map(move |v| Volume::new(g, v).unwrap())
    })
}

fn labels(max_dim: usize, max_label: u8) -> impl Strategy<Value = LabelMap> {
    geometry(max_dim).prop_flat_map(move |g| {
        prop::collection::vec(0..=max_label, g.len()).prop_map(move |v| LabelMap::new(g, v).unwrap())
    })
}

fn label_pair(max_dim: usize) -> impl Strategy<Value = (LabelMap, LabelMap)> {
    geometry(max_dim).prop_flat_map(|g| {
        (
            prop::collection::vec(0..3u8, g.len()),
            prop::collection::vec(0..3u8, g.len()),
        )
            .prop_map(move |(a, b)| (LabelMap::new(g, a).unwrap(), LabelMap::new(g, b).unwrap()))
    })
}

/// Distinct-id score lists.
fn scores(min: usize, max: usize) -> impl Strategy<Value = Vec<(String, f64)>> {
    prop::collection::vec(-5.0..5.0f64, min..=max)
        .prop_map(|v| v.into_iter().enumerate().map(|(i, s)| (format!("id{i:02}"), s)).collect())
}

fn id_set(ids: &[String]) -> BTreeSet<String> {
    ids.iter().cloned().collect()
}

pub fn volume_io_round_trip() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("v.mha");
    run(48, volume(6), |v| {
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        prop_assert_eq!(back.geometry(), v.geometry());
        let bits = |x: &Volume| x.voxels().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&v));
        Ok(())
    })
}

pub fn labels_io_round_trip() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("m.mha");
    run(48, labels(6, 5), |m| {
        write_labels(&m, &path).unwrap();
        prop_assert_eq!(read_labels(&path).unwrap(), m);
        Ok(())
    })
}

pub fn nearest_resample_adds_no_labels() -> Result<(), String> {
    run(64, (labels(6, 4), geometry(8)), |(m, g)| {
        let out = resample(&m, &g, Interp::Nearest).unwrap();
        let input: BTreeSet<u8> = m.label_set().iter().copied().collect();
        // samples outside the input grid read as background
        prop_assert!(out.label_set().iter().all(|l| input.contains(l) || *l == 0));
        Ok(())
    })
}

pub fn zscore_idempotent() -> Result<(), String> {
    run(64, volume(6), |v| {
        let (_, sd) = v.mean_std();
        prop_assume!(sd > 1e-3);
        let once = normalize_zscore(&v).unwrap();
        let twice = normalize_zscore(&once).unwrap();
        prop_assert!(once.mean().abs() < 1e-6, "mean {}", once.mean());
        for (a, b) in once.voxels().iter().zip(twice.voxels()) {
            prop_assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        Ok(())
    })
}

pub fn identity_resample() -> Result<(), String> {
    run(48, (volume(6), labels(6, 3)), |(v, m)| {
        prop_assert_eq!(&resample(&v, v.geometry(), Interp::Linear).unwrap(), &v);
        prop_assert_eq!(&resample(&v, v.geometry(), Interp::Nearest).unwrap(), &v);
        prop_assert_eq!(&resample(&m, m.geometry(), Interp::Nearest).unwrap(), &m);
        Ok(())
    })
}

pub fn dice_symmetric_bounded_exact() -> Result<(), String> {
    run(128, (label_pair(6), 0..3u8), |((a, b), l)| {
        let ab = dice(&a, &b, l).unwrap();
        let ba = dice(&b, &a, l).unwrap();
        prop_assert_eq!(ab, ba);
        let same = a.voxels().iter().zip(b.voxels()).all(|(&x, &y)| (x == l) == (y == l));
        match ab.value {
            Some(d) => {
                prop_assert!((0.0..=1.0).contains(&d));
                prop_assert_eq!(d == 1.0, same);
            }
            None => prop_assert!(a.count(l) == 0 && b.count(l) == 0),
        }
        let self_score = dice(&a, &a, l).unwrap();
        prop_assert!(self_score.value.is_none() || self_score.value == Some(1.0));
        Ok(())
    })
}

pub fn dice_matches_counting() -> Result<(), String> {
    run(64, (label_pair(12), 0..3u8), |((a, b), l)| {
        let na = a.voxels().iter().filter(|&&x| x == l).count();
        let nb = b.voxels().iter().filter(|&&x| x == l).count();
        let both = (0..a.voxels().len())
            .filter(|&i| a.voxels()[i] == l && b.voxels()[i] == l)
            .count();
        let expected = (na + nb > 0).then(|| 2.0 * both as f64 / (na + nb) as f64);
        prop_assert_eq!(dice(&a, &b, l).unwrap().value, expected);
        Ok(())
    })
}

pub fn pearson_affine_invariant() -> Result<(), String> {
    let data = prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 3..40);
    run(128, (data, 0.1..10.0f64, -10.0..10.0f64), |(xy, s, c)| {
        let xs: Vec<f64> = xy.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = xy.iter().map(|p| p.1).collect();
        let r = pearson(&xs, &ys);
        prop_assume!(r.is_ok());
        let r = r.unwrap();
        let xs2: Vec<f64> = xs.iter().map(|x| s * x + c).collect();
        let ys2: Vec<f64> = ys.iter().map(|y| s * y - c).collect();
        prop_assert!((pearson(&xs2, &ys).unwrap() - r).abs() < 1e-9);
        prop_assert!((pearson(&xs, &ys2).unwrap() - r).abs() < 1e-9);
        Ok(())
    })
}

pub fn mae_symmetric() -> Result<(), String> {
    let data = prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 1..30);
    run(128, (data, any::<bool>()), |(xy, equal)| {
        let xs: Vec<f64> = xy.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = if equal { xs.clone() } else { xy.iter().map(|p| p.1).collect() };
        let a = mae(&xs, &ys).unwrap();
        prop_assert_eq!(a, mae(&ys, &xs).unwrap());
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a == 0.0, xs == ys);
        Ok(())
    })
}

pub fn ncc_intensity_invariant() -> Result<(), String> {
    let pair = geometry(6).prop_flat_map(|g| {
        (
            prop::collection::vec(-10.0f32..10.0, g.len()),
            prop::collection::vec(-10.0f32..10.0, g.len()),
        )
            .prop_map(move |(a, b)| (Volume::new(g, a).unwrap(), Volume::new(g, b).unwrap()))
    });
    run(96, (pair, 0.5..4.0f64, -5.0..5.0f64), |((a, b), s, c)| {
        prop_assume!(a.mean_std().1 > 0.1 && b.mean_std().1 > 0.1);
        let base = similarity(&a, &b, Metric::Ncc).unwrap();
        let scaled = Volume::new(*b.geometry(), b.voxels().iter().map(|&v| (s * v as f64 + c) as f32).collect())
            .unwrap();
        let shifted = similarity(&a, &scaled, Metric::Ncc).unwrap();
        prop_assert!((base - shifted).abs() < 1e-6, "{base} vs {shifted}");
        Ok(())
    })
}

pub fn registration_deterministic_and_descending() -> Result<(), String> {
    let (p, _) = small_params();
    run(6, (0..1000u64, 0..1000u64, 0..1000u64), |(a, b, seed)| {
        let (fixed, _) = phantom::generate_subject(&p, a).unwrap();
        let (moving, _) = phantom::generate_subject(&p, b).unwrap();
        let cfg = RegConfig::fast(seed);
        let r1 = register_affine(&moving, &fixed, &cfg).unwrap();
        let r2 = register_affine(&moving, &fixed, &cfg).unwrap();
        prop_assert_eq!(&r1, &r2);
        prop_assert!(r1.final_metric <= r1.metric_at_identity);
        Ok(())
    })
}

pub fn rca_is_max_and_monotone() -> Result<(), String> {
    let (p, _) = small_params();
    let shift = (-8.0..8.0f64, -8.0..8.0f64, -8.0..8.0f64).prop_map(|(x, y, z)| AffineTransform::translation([x, y, z]));
    let case = (0..1000u64, prop::collection::vec((0..1000u64, shift), 1..5), 0..3usize);
    run(24, case, |(seg_seed, refs, grade)| {
        let (_, truth) = phantom::generate_subject(&p, seg_seed).unwrap();
        let seg = if grade == 0 {
            truth
        } else {
            phantom::graded_segmentation(&truth, LIVER, seg_seed + grade as u64).0
        };
        let references: Vec<Reference> = refs
            .iter()
            .enumerate()
            .map(|(i, (s, _))| {
                let (v, m) = phantom::generate_subject(&p, *s).unwrap();
                Reference::new(format!("r{i}"), v, m).unwrap()
            })
            .collect();
        let transforms: Vec<AffineTransform> = refs.iter().map(|(_, t)| *t).collect();
        let mut last = 0.0;
        for k in 1..=references.len() {
            let e = score_with_transforms("x", &seg, &references[..k], &transforms[..k], LIVER).unwrap();
            prop_assert!((0.0..=1.0).contains(&e.predicted_dsc));
            let max = e.per_reference.iter().map(|s| s.dsc).fold(f64::MIN, f64::max);
            prop_assert_eq!(e.predicted_dsc, max);
            prop_assert!(e.predicted_dsc >= last);
            last = e.predicted_dsc;
        }
        Ok(())
    })
}

pub fn selection_best_is_worst_of_negated() -> Result<(), String> {
    run(256, (scores(1, 20), 1..10usize), |(s, n)| {
        prop_assume!(n <= s.len());
        let neg: Vec<(String, f64)> = s.iter().map(|(id, v)| (id.clone(), -v)).collect();
        let best = select_from_scores(&SelectionStrategy::best(n), &s).unwrap();
        let worst = select_from_scores(&SelectionStrategy::worst(n), &neg).unwrap();
        // ties break by id in both directions, so compare only tie-free inputs
        let distinct: BTreeSet<u64> = s.iter().map(|(_, v)| v.to_bits()).collect();
        prop_assume!(distinct.len() == s.len());
        prop_assert_eq!(id_set(&best.chosen_ids), id_set(&worst.chosen_ids));
        Ok(())
    })
}

pub fn selection_best_worst_union() -> Result<(), String> {
    run(256, (scores(2, 20), 1..10usize), |(s, n)| {
        prop_assume!(2 * n <= s.len());
        let both = select_from_scores(&SelectionStrategy::best_worst(n), &s).unwrap();
        let best = select_from_scores(&SelectionStrategy::best(n), &s).unwrap();
        let worst = select_from_scores(&SelectionStrategy::worst(n), &s).unwrap();
        let (b, w) = (id_set(&best.chosen_ids), id_set(&worst.chosen_ids));
        prop_assert!(b.is_disjoint(&w));
        prop_assert_eq!(both.chosen_ids.len(), 2 * n);
        prop_assert_eq!(id_set(&both.chosen_ids), b.union(&w).cloned().collect::<BTreeSet<_>>());
        Ok(())
    })
}

pub fn selection_rank_invariant() -> Result<(), String> {
    let strategy = prop_oneof![
        (1..6usize).prop_map(SelectionStrategy::best),
        (1..6usize).prop_map(SelectionStrategy::worst),
        (1..4usize).prop_map(SelectionStrategy::best_worst),
        ((1..6usize), any::<u64>()).prop_map(|(n, s)| SelectionStrategy::random(n, s)),
        Just(SelectionStrategy::all()),
    ];
    run(256, (scores(8, 20), strategy, 0..3usize), |(s, st, f)| {
        let g = |x: f64| match f {
            0 => x.exp(),
            1 => 3.0 * x + 7.0,
            _ => x.powi(3) + x,
        };
        let mapped: Vec<(String, f64)> = s.iter().map(|(id, v)| (id.clone(), g(*v))).collect();
        let a = select_from_scores(&st, &s).unwrap();
        let b = select_from_scores(&st, &mapped).unwrap();
        prop_assert_eq!(a.chosen_ids, b.chosen_ids);
        prop_assert_eq!(a.sides, b.sides);
        Ok(())
    })
}

/// Reproducible, and each of three ids drawn with frequency in [0.31, 0.36]
/// over 10,000 seeds.
pub fn selection_random_uniform() -> Result<(), String> {
    let s: Vec<(String, f64)> = ["a", "b", "c"].iter().map(|id| (id.to_string(), 0.5)).collect();
    let mut counts = [0usize; 3];
    let draws = 10_000;
    for seed in 0..draws {
        let plan = select_from_scores(&SelectionStrategy::random(1, seed), &s).map_err(|e| e.to_string())?;
        let again = select_from_scores(&SelectionStrategy::random(1, seed), &s).map_err(|e| e.to_string())?;
        if plan != again {
            return Err(format!("seed {seed} not reproducible"));
        }
        counts[(plan.chosen_ids[0].as_bytes()[0] - b'a') as usize] += 1;
    }
    for (i, c) in counts.iter().enumerate() {
        let f = *c as f64 / draws as f64;
        if !(0.31..=0.36).contains(&f) {
            return Err(format!("id {i} drawn with frequency {f}"));
        }
    }
    Ok(())
}

fn check_prior(m: &SegmenterModel) -> Result<(), TestCaseError> {
    m.validate().map_err(|e| TestCaseError::fail(e.to_string()))?;
    let n = m.prior[0].voxels().len();
    for i in 0..n {
        let sum: f64 = m.prior.iter().map(|p| p.voxels()[i] as f64).sum();
        prop_assert!((sum - 1.0).abs() < 1e-6, "voxel {i} sums to {sum}");
    }
    let outside: f64 = m.outside_prior.iter().sum();
    prop_assert!((outside - 1.0).abs() < 1e-6);
    Ok(())
}

pub fn prior_normalized() -> Result<(), String> {
    let (s, t) = small_params();
    run(4, (1..4usize, 1..3usize, 0.0..=1.0f64, 0..1000u64), |(ns, nt, blend, seed)| {
        let src: Vec<_> = (0..ns).map(|i| labeled(&format!("s{i}"), &s, seed + i as u64)).collect();
        let tgt: Vec<_> = (0..nt).map(|i| labeled(&format!("t{i}"), &t, seed + 100 + i as u64)).collect();
        let tpl = Template::first_by_id(&src).unwrap();
        let base = train(&src, &tpl, &reg()).unwrap();
        check_prior(&base)?;
        check_prior(&adapt_scratch(&src, &[], &tpl, &reg()).unwrap())?;
        check_prior(&adapt_scratch(&src, &tgt, &tpl, &reg()).unwrap())?;
        check_prior(&adapt_finetune(&base, &tgt, blend).unwrap())?;
        Ok(())
    })
}

pub fn finetune_freezes_prior() -> Result<(), String> {
    let (s, t) = small_params();
    let src: Vec<_> = (0..2).map(|i| labeled(&format!("s{i}"), &s, i)).collect();
    let base = train(&src, &Template::first_by_id(&src).unwrap(), &reg()).map_err(|e| e.to_string())?;
    let pool: Vec<_> = (0..4).map(|i| labeled(&format!("t{i}"), &t, 50 + i)).collect();
    run(16, (prop::sample::subsequence((0..4usize).collect::<Vec<_>>(), 0..=4), 0.0..=1.0f64), |(pick, blend)| {
        let chosen: Vec<_> = pick.iter().map(|&i| pool[i].clone()).collect();
        // an empty selection is only valid without blending
        let blend = if chosen.is_empty() { 0.0 } else { blend };
        let tuned = adapt_finetune(&base, &chosen, blend).unwrap();
        let bits = |m: &SegmenterModel| {
            m.prior.iter().flat_map(|p| p.voxels().iter().map(|v| v.to_bits())).collect::<Vec<_>>()
        };
        prop_assert_eq!(bits(&tuned), bits(&base));
        prop_assert_eq!(&tuned.outside_prior, &base.outside_prior);
        prop_assert_eq!(&tuned.template, &base.template);
        if blend == 0.0 || chosen.is_empty() {
            prop_assert_eq!(&tuned.appearance, &base.appearance);
        }
        Ok(())
    })
}

fn models_close(a: &SegmenterModel, b: &SegmenterModel, tol: f64) -> Result<(), TestCaseError> {
    prop_assert_eq!(&a.classes, &b.classes);
    prop_assert_eq!(&a.template, &b.template);
    for (pa, pb) in a.prior.iter().zip(&b.prior) {
        for (x, y) in pa.voxels().iter().zip(pb.voxels()) {
            prop_assert!((x - y).abs() as f64 <= tol);
        }
    }
    for (ga, gb) in a.appearance.iter().zip(&b.appearance) {
        prop_assert_eq!(ga.count, gb.count);
        prop_assert!((ga.mean - gb.mean).abs() <= tol && (ga.variance - gb.variance).abs() <= tol);
    }
    Ok(())
}

pub fn scratch_without_target_is_train() -> Result<(), String> {
    let (s, _) = small_params();
    run(4, (1..4usize, 0..1000u64), |(n, seed)| {
        let src: Vec<_> = (0..n).map(|i| labeled(&format!("s{i}"), &s, seed + i as u64)).collect();
        let tpl = Template::first_by_id(&src).unwrap();
        let a = train(&src, &tpl, &reg()).unwrap();
        let b = adapt_scratch(&src, &[], &tpl, &reg()).unwrap();
        models_close(&a, &b, 1e-12)
    })
}

pub fn train_order_and_duplication() -> Result<(), String> {
    let (s, _) = small_params();
    let src: Vec<_> = (0..4).map(|i| labeled(&format!("s{i}"), &s, 70 + i)).collect();
    let tpl = Template::first_by_id(&src).unwrap();
    let base = train(&src, &tpl, &reg()).map_err(|e| e.to_string())?;
    let order = Just((0..4usize).collect::<Vec<_>>()).prop_shuffle();
    run(6, (order, 1..3usize), |(order, copies)| {
        let shuffled: Vec<_> = (0..copies).flat_map(|_| order.iter().map(|&i| src[i].clone())).collect();
        let m = train(&shuffled, &tpl, &reg()).unwrap();
        models_close(&m, &base, 1e-9)
    })
}

pub fn model_io_round_trip() -> Result<(), String> {
    let (s, t) = small_params();
    let src: Vec<_> = (0..2).map(|i| labeled(&format!("s{i}"), &s, 10 + i)).collect();
    let base = train(&src, &Template::first_by_id(&src).unwrap(), &reg()).map_err(|e| e.to_string())?;
    let tgt = vec![labeled("t0", &t, 20)];
    run(4, 0.0..=1.0f64, |blend| {
        let m = adapt_finetune(&base, &tgt, blend).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        prop_assert_eq!(SegmenterModel::load(dir.path()).unwrap(), m);
        Ok(())
    })
}

pub fn phantom_seeds_independent() -> Result<(), String> {
    let (s, _) = small_params();
    run(4, (0..1000u64, 1..4usize), |(seed, n)| {
        let few = phantom::generate_subjects(&s, seed, n, Domain::Source, "s").unwrap();
        let more = phantom::generate_subjects(&s, seed, n + 1, Domain::Source, "s").unwrap();
        prop_assert_eq!(&few[..], &more[..n]);
        let again = phantom::generate_subjects(&s, seed, n, Domain::Source, "s").unwrap();
        prop_assert_eq!(few, again);
        Ok(())
    })
}

pub fn splits_partition() -> Result<(), String> {
    run(128, (2..40usize, 2..8usize, any::<u64>()), |(n, k, seed)| {
        prop_assume!(k <= n);
        let ids: Vec<String> = (0..n).map(|i| format!("x{i:02}")).collect();
        let splits = crossval_splits(&ids, k, seed).unwrap();
        prop_assert_eq!(splits.len(), k);
        let mut seen = BTreeSet::new();
        for (f, (train, test)) in splits.iter().enumerate() {
            prop_assert_eq!(test.len(), n / k + usize::from(f < n % k));
            prop_assert_eq!(train.len() + test.len(), n);
            prop_assert!(id_set(train).is_disjoint(&id_set(test)));
            for id in test {
                prop_assert!(seen.insert(id.clone()));
            }
        }
        prop_assert_eq!(seen, id_set(&ids));
        prop_assert_eq!(crossval_splits(&ids, k, seed).unwrap(), splits);
        Ok(())
    })
}

/// On a small cohort: no fold-test subject is selected or trained on, and
/// every n=0 row equals the baseline row.
pub fn harness_isolation_and_degenerate_rows() -> Result<(), String> {
    let data = small_dataset(4, 9, 5);
    let strategy = prop_oneof![
        (1..=3usize).prop_map(SelectionStrategy::best),
        (1..=3usize).prop_map(SelectionStrategy::worst),
        (1..=2usize).prop_map(SelectionStrategy::best_worst),
        (1..=3usize).prop_map(|n| SelectionStrategy::random(n, 0)),
        Just(SelectionStrategy::all()),
    ];
    let mode = prop_oneof![Just(Mode::Scratch), Just(Mode::Finetune), Just(Mode::PseudoFinetune)];
    let selector = prop_oneof![Just(Selector::Rca), Just(Selector::Real), Just(Selector::Random)];
    let cells = prop::collection::vec((strategy, mode, selector), 1..4);
    run(3, (cells, 0..100u64), |(cells, seed)| {
        let cfg = ExperimentConfig {
            seed,
            n_references: 3,
            random_repeats: 2,
            ..ExperimentConfig::default()
        };
        let exp = Experiment::new(cfg, &data).unwrap();
        let base = exp.baseline_row().unwrap();
        for (st, mode, sel) in &cells {
            exp.strategy_row(st, *sel, *mode).unwrap();
            let zero = SelectionStrategy { n: 0, ..*st };
            if st.kind != darca::select::StrategyKind::All {
                let row = exp.strategy_row(&zero, *sel, *mode).unwrap();
                prop_assert_eq!(&row.stat, &base.stat);
                prop_assert_eq!(&row.values, &base.values);
            }
        }
        exp.iterative_rows(1).unwrap();
        let report = exp.report(false).unwrap();
        prop_assert!(report.provenance.check_isolation().is_ok());
        for f in &report.provenance.folds {
            let test = id_set(&f.test_ids);
            for c in &f.cells {
                prop_assert!(c.selected.iter().chain(&c.target_training).all(|id| !test.contains(id)));
            }
        }
        Ok(())
    })
}

pub fn report_csv_round_trip() -> Result<(), String> {
    let data = small_dataset(3, 6, 9);
    let cfg = ExperimentConfig {
        folds: 2,
        n_references: 2,
        random_repeats: 1,
        ..ExperimentConfig::default()
    };
    let exp = Experiment::new(cfg, &data).map_err(|e| e.to_string())?;
    for n in [1, 2] {
        exp.strategy_row(&SelectionStrategy::best(n), Selector::Rca, Mode::Finetune)
            .map_err(|e| e.to_string())?;
    }
    let mut report = exp.report(false).map_err(|e| e.to_string())?;
    let csv = emit_report(&report, ReportFormat::Csv);
    report.rows = parse_report_csv(&csv).map_err(|e| e.to_string())?;
    let again = emit_report(&report, ReportFormat::Csv);
    if csv != again {
        return Err(format!("csv changed on round trip:\n{csv}\nvs\n{again}"));
    }
    Ok(())
}
