//! Property tests for cross-module invariants.

use std::collections::BTreeSet;

use proptest::prelude::*;

use scenario_forge::canonical::content_id;
use scenario_forge::decompose::{decompose_log, ModeThresholds};
use scenario_forge::density::ParameterDensity;
use scenario_forge::genscen::{quintic_step, synthesize_trajectories, to_driving_log, SynthesisConfig};
use scenario_forge::ingest::resample_log;
use scenario_forge::mining::{ClassDocument, SlotData};
use scenario_forge::rng::derive_seed;
use scenario_forge::road::builtin_library;
use scenario_forge::scenario::{ActivityParams, ActorRole, Channel, Mode, ScenarioClass};
use scenario_forge::simulate::{rect_corners, rect_distance, rects_overlap, EgoState, to_ego_frame};
use scenario_forge::synthetic::two_overtakes_log;
use scenario_forge::tags::{default_taxonomy, TagRef};

fn lon_class(mode: Mode) -> ClassDocument {
    ClassDocument {
        class: ScenarioClass {
            name: "prop".to_string(),
            required_tags: BTreeSet::new(),
            activity_pattern: vec![(ActorRole::Target, Channel::Longitudinal, mode)],
        },
        pattern: "lead-braking".to_string(),
        scenario_ids: vec![],
        slots: vec![SlotData {
            role: ActorRole::Target,
            channel: Channel::Longitudinal,
            mode,
            field_names: ActivityParams::field_names(mode)
                .iter()
                .map(|s| s.to_string())
                .collect(),
            rows: vec![],
            density: None,
        }],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Content ids are deterministic and key-order independent.
    #[test]
    fn content_id_is_stable(tags in proptest::collection::btree_set("[a-z]{1,8}", 0..6)) {
        let a = content_id(&tags).unwrap();
        let b = content_id(&tags).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), 16);
        prop_assert!(a.chars().all(|c| c.is_ascii_hexdigit()));
    }

    /// Derived sub-seeds are deterministic and index-sensitive.
    #[test]
    fn derive_seed_is_deterministic(seed in any::<u64>(), i in 0u64..1000, j in 1000u64..2000) {
        prop_assert_eq!(derive_seed(seed, i), derive_seed(seed, i));
        prop_assert_ne!(derive_seed(seed, i), derive_seed(seed, j));
    }

    /// The quintic blend is monotone with clamped endpoints.
    #[test]
    fn quintic_step_is_monotone(u1 in 0.0f64..1.0, u2 in 0.0f64..1.0) {
        let (lo, hi) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
        prop_assert!(quintic_step(lo) <= quintic_step(hi) + 1e-12);
        prop_assert_eq!(quintic_step(0.0), 0.0);
        prop_assert_eq!(quintic_step(1.0), 1.0);
    }

    /// KDE densities are non-negative, and the proposal with c=1 is the
    /// density itself.
    #[test]
    fn kde_nonnegative_and_proposal_degenerates(
        points in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..40),
        probe in (-100.0f64..100.0, -100.0f64..100.0),
    ) {
        let rows: Vec<Vec<f64>> = points.iter().map(|&(a, b)| vec![a, b]).collect();
        let Ok(kde) = ParameterDensity::fit(vec!["a".to_string(), "b".to_string()], rows) else {
            // Degenerate spread is a legitimate fit error, not a property
            // violation.
            return Ok(());
        };
        let x = [probe.0, probe.1];
        let d = kde.eval(&x);
        prop_assert!(d >= 0.0 && d.is_finite());
        prop_assert!((kde.eval_proposal(&x, 1.0) - d).abs() <= 1e-12 * d.max(1e-300));
    }

    /// Importance weights of tail-biased draws are positive and finite.
    #[test]
    fn tail_bias_weights_are_positive(seed in any::<u64>(), c in 1.1f64..4.0) {
        let rows = (0..50).map(|i| vec![(i as f64) * 0.37 % 7.0]).collect();
        let kde = ParameterDensity::fit(vec!["x".to_string()], rows).unwrap();
        for w in kde.sample_tail_biased(100, c, seed) {
            prop_assert!(w.weight > 0.0 && w.weight.is_finite());
        }
    }

    /// Tag subtree semantics: every tag matches itself and its ancestors'
    /// queries; same-layer mutual exclusion holds in the default taxonomy.
    #[test]
    fn tag_matches_ancestors(idx in 0usize..3) {
        let taxonomy = default_taxonomy();
        let (tree, child, parent, sibling) = [
            ("weather", "heavy-rain", "rain", "fog"),
            ("road", "motorway-2lane", "motorway", "urban"),
            ("target-maneuver", "cut-in", "target-maneuver", "overtaking"),
        ][idx];
        let assigned = BTreeSet::from([TagRef::new(tree, child)]);
        prop_assert!(taxonomy.tag_matches(&TagRef::new(tree, child), &assigned).unwrap());
        prop_assert!(taxonomy.tag_matches(&TagRef::new(tree, parent), &assigned).unwrap());
        prop_assert!(!taxonomy.tag_matches(&TagRef::new(tree, sibling), &assigned).unwrap());
    }

    /// Rectangle distance is symmetric, translation invariant, and zero
    /// exactly when the overlap test fires (touching excepted).
    #[test]
    fn rect_distance_properties(
        x in -20.0f64..20.0, y in -10.0f64..10.0,
        h1 in -3.2f64..3.2, h2 in -3.2f64..3.2,
        tx in -100.0f64..100.0, ty in -100.0f64..100.0,
    ) {
        let a = rect_corners(0.0, 0.0, h1, 4.5, 1.8);
        let b = rect_corners(x, y, h2, 4.5, 1.8);
        let d = rect_distance(&a, &b);
        prop_assert!((d - rect_distance(&b, &a)).abs() <= 1e-12);
        let at = rect_corners(tx, ty, h1, 4.5, 1.8);
        let bt = rect_corners(x + tx, y + ty, h2, 4.5, 1.8);
        prop_assert!((d - rect_distance(&at, &bt)).abs() <= 1e-6);
        if rects_overlap(&a, &b) {
            prop_assert_eq!(d, 0.0);
        } else {
            prop_assert!(d >= 0.0);
        }
    }

    /// The ego-frame transform maps the ego itself to the origin and
    /// rotates its own velocity vector onto the forward axis.
    #[test]
    fn ego_frame_fixes_ego(
        x in -100.0f64..100.0, y in -100.0f64..100.0,
        heading in -3.14f64..3.14, v in 0.0f64..40.0,
    ) {
        let ego = EgoState { x, y, heading, v, a: 0.0 };
        let (rx, ry, rvx, rvy) =
            to_ego_frame(&ego, x, y, v * heading.cos(), v * heading.sin());
        prop_assert!(rx.abs() < 1e-9 && ry.abs() < 1e-9);
        prop_assert!((rvx - v).abs() < 1e-9 && rvy.abs() < 1e-9);
    }

    /// Resampling onto a uniform grid preserves endpoint values and yields
    /// a uniform time base.
    #[test]
    fn resample_grid_is_uniform(dt in 0.02f64..0.5) {
        let log = two_overtakes_log();
        let out = resample_log(&log, dt).unwrap();
        for track in &out.actors {
            let s = &track.samples;
            prop_assert!(s.len() >= 2);
            for w in s.windows(2) {
                prop_assert!((w[1].t - w[0].t - dt).abs() < 1e-9);
            }
            let src = log.actor(&track.actor).unwrap();
            prop_assert!((s[0].x - src.samples[0].x).abs() < 1e-9);
        }
    }
}

proptest! {
    // Synthesis + decomposition per case is comparatively expensive.
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Decomposed activities tile each actor/channel timeline without gaps,
    /// and adjacent activities never share a mode.
    #[test]
    fn activities_tile_the_timeline(
        duration in 1.0f64..5.0,
        accel in 1.0f64..4.0,
        v_start in 10.0f64..28.0,
    ) {
        let class = lon_class(Mode::Braking);
        let delta_v = -(accel * duration).min(v_start - 2.0);
        let cfg = SynthesisConfig::default();
        let ts = synthesize_trajectories(
            &class,
            &[vec![delta_v, duration, v_start]],
            &builtin_library()[0],
            &cfg,
        ).unwrap();
        let log = to_driving_log(&ts, cfg.dt);
        let decomp = decompose_log(&log, &ModeThresholds::default()).unwrap();
        for d in decomp.actors.values() {
            for channel in [Channel::Longitudinal, Channel::Lateral] {
                let acts: Vec<_> = d
                    .activities
                    .iter()
                    .filter(|a| a.channel == channel)
                    .collect();
                prop_assert!(!acts.is_empty());
                prop_assert!((acts[0].t_start - log.t_start()).abs() < 1e-9);
                prop_assert!((acts.last().unwrap().t_end - log.t_end()).abs() < 1e-9);
                for w in acts.windows(2) {
                    prop_assert!((w[1].t_start - w[0].t_end).abs() < 1e-9);
                    prop_assert_ne!(w[0].mode, w[1].mode);
                }
            }
        }
    }
}
