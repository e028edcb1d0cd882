use neuroloc::artifact::{read_artifact, write_artifact};
use neuroloc::attribution::{mask_from_scores, ClampSchedule, Quadrature, ScoreMap, ScoreMeta, Spread};
use neuroloc::data::{parse_jsonl, to_jsonl, Records, Schema, TaskSample};
use neuroloc::metrics::{coincidence_rate, ipp, random_overlap, set_metrics};
use neuroloc::neurons::NeuronMask;
use proptest::prelude::*;

const LAYERS: usize = 4;
const WIDTH: usize = 16;

fn mask_pair() -> impl Strategy<Value = (NeuronMask, NeuronMask)> {
    let n = LAYERS * WIDTH;
    (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)).prop_map(|(a, b)| {
        (
            NeuronMask::from_bits(LAYERS, WIDTH, a).unwrap(),
            NeuronMask::from_bits(LAYERS, WIDTH, b).unwrap(),
        )
    })
}

fn score_map(scores: Vec<f64>) -> ScoreMap {
    ScoreMap {
        layers: LAYERS,
        width: WIDTH,
        scores,
        meta: ScoreMeta {
            method: "test".into(),
            steps: 1,
            quadrature: Quadrature::Right,
            schedule: ClampSchedule::LayerShared,
            position: "last".into(),
            samples: 1,
            skipped: 0,
            dataset: String::new(),
            model: String::new(),
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn overlap_and_iou_algebra((a, b) in mask_pair()) {
        match (set_metrics(&a, &b), set_metrics(&b, &a)) {
            (Ok(ab), Ok(ba)) => {
                prop_assert!(ab.iou <= ab.overlap + 1e-15);
                prop_assert_eq!(ab.overlap, ba.overlap);
                prop_assert_eq!(ab.iou, ba.iou);
                prop_assert!((0.0..=1.0).contains(&ab.overlap));
                prop_assert!((0.0..=1.0).contains(&ab.iou));
            }
            (Err(e), Err(_)) => {
                prop_assert!(a.is_empty() || b.is_empty());
                prop_assert_eq!(e.kind(), "undefined_metric");
            }
            _ => prop_assert!(false, "asymmetric definedness"),
        }
    }

    #[test]
    fn self_overlap_is_one((a, _) in mask_pair()) {
        prop_assume!(!a.is_empty());
        let m = set_metrics(&a, &a).unwrap();
        prop_assert_eq!(m.overlap, 1.0);
        prop_assert_eq!(m.iou, 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn sigma_monotonicity(scores in prop::collection::vec(-5.0f64..5.0, LAYERS * WIDTH), stddev in any::<bool>()) {
        let spread = if stddev { Spread::Stddev } else { Spread::Variance };
        let map = score_map(scores);
        let m3 = mask_from_scores(&map, 3.0, spread).unwrap();
        let m6 = mask_from_scores(&map, 6.0, spread).unwrap();
        let m12 = mask_from_scores(&map, 12.0, spread).unwrap();
        prop_assert!(m6.is_subset_of(&m3).unwrap());
        prop_assert!(m12.is_subset_of(&m6).unwrap());
    }

    #[test]
    fn ipp_is_located_minus_best(located in 0.0f64..1.0, random in prop::collection::vec(0.0f64..1.0, 1..8)) {
        let best = random.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(ipp(located, &random).unwrap(), located - best);
    }

    #[test]
    fn coincidence_symmetry(pairs in prop::collection::vec(mask_pair(), 1..6)) {
        prop_assume!(pairs.iter().all(|(a, b)| !a.is_empty() && !b.is_empty()));
        let framings = vec![
            pairs.iter().map(|p| p.0.clone()).collect::<Vec<_>>(),
            pairs.iter().map(|p| p.1.clone()).collect::<Vec<_>>(),
        ];
        let c12 = coincidence_rate(&framings, 1, 2).unwrap();
        let c21 = coincidence_rate(&framings, 2, 1).unwrap();
        prop_assert_eq!(c12.literal, c21.literal);
        prop_assert!((c12.pairwise_overlap - c21.pairwise_overlap).abs() < 1e-12);
        let c11 = coincidence_rate(&framings, 1, 1).unwrap();
        prop_assert!((0.0..=1.0).contains(&c11.literal));
    }

    #[test]
    fn task_jsonl_roundtrip(items in prop::collection::vec(("[a-z ]{1,12}", "[0-9]{1,3}"), 1..10)) {
        let samples: Vec<TaskSample> = items
            .iter()
            .map(|(p, a)| TaskSample::from_text(&format!("{p}="), a, "t").unwrap())
            .collect();
        let records = Records::Tasks(samples);
        let back = parse_jsonl(&to_jsonl(&records), Schema::Task).unwrap();
        prop_assert_eq!(back, records);
    }
}

#[test]
fn random_overlap_matches_monte_carlo() {
    use rand::{seq::index::sample, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let (n, na, nb) = (LAYERS * WIDTH, 10, 20);
    let trials = 20_000;
    let mut sum = 0.0;
    for _ in 0..trials {
        let a = NeuronMask::from_bits(LAYERS, WIDTH, {
            let mut v = vec![false; n];
            sample(&mut rng, n, na).into_iter().for_each(|i| v[i] = true);
            v
        })
        .unwrap();
        let b = NeuronMask::from_bits(LAYERS, WIDTH, {
            let mut v = vec![false; n];
            sample(&mut rng, n, nb).into_iter().for_each(|i| v[i] = true);
            v
        })
        .unwrap();
        sum += set_metrics(&a, &b).unwrap().overlap;
    }
    let mc = sum / trials as f64;
    assert!((mc - random_overlap(na, nb, n)).abs() < 0.01, "{mc} vs {}", random_overlap(na, nb, n));
}

#[test]
fn mask_artifact_roundtrip_and_kind_check() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    let m = NeuronMask::from_bits(LAYERS, WIDTH, (0..LAYERS * WIDTH).map(|i| i % 3 == 0).collect()).unwrap();
    write_artifact(&p, "mask", &m).unwrap();
    let back: NeuronMask = read_artifact(&p, "mask").unwrap();
    assert_eq!(back, m);
    assert!(read_artifact::<NeuronMask>(&p, "score_map").is_err());
}
