use super::*;
use crate::replay::LogHeader;
use crate::tasks::TaskId;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn tr(header: &LogHeader, episode: u32, step: u32, balls: &[[f64; 2]], goal: Option<[f64; 2]>) -> Transition {
    let mut obs = vec![0.0f32; header.obs_len()];
    if let Some(g) = goal {
        let n = obs.len();
        obs[n - 2] = g[0] as f32;
        obs[n - 1] = g[1] as f32;
    }
    Transition {
        obs: obs.clone(),
        action: [0.5; 9],
        reward: 0.0,
        next_obs: obs,
        done: step == 999,
        pixels: balls.iter().flat_map(|b| [b[0] as f32, b[1] as f32]).collect(),
        episode,
        step,
    }
}

fn hover_log(episodes: u32, steps: u32, pos: impl Fn(u32, u32) -> [f64; 2]) -> EpisodeLog {
    let header = LogHeader::new(TaskId::Hover, 3, 4);
    let mut log = EpisodeLog::new(header);
    for e in 0..episodes {
        for s in 0..steps {
            let p = pos(e, s);
            log.transitions.push(tr(&header, e, s, &[p, [10.0, 690.0], [690.0, 690.0]], None));
        }
    }
    log
}

fn reach_log(episodes: &[([f64; 2], Box<dyn Fn(u32) -> [f64; 2]>)]) -> EpisodeLog {
    let header = LogHeader::new(TaskId::Reach, 1, 4);
    let mut log = EpisodeLog::new(header);
    for (e, (goal, ball)) in episodes.iter().enumerate() {
        for s in 0..1000 {
            log.transitions.push(tr(&header, e as u32, s, &[ball(s)], Some(*goal)));
        }
    }
    log
}

#[test]
fn fixed_ball_lights_one_bin() {
    let log = hover_log(3, 50, |_, _| [123.0, 456.0]);
    let h = visit_heatmap(&[log], BallColor::Orange, 2, VISIT_BIN_PX).unwrap();
    assert_eq!((h.rows, h.cols), (20, 20));
    let norm = h.normalized(Normalization::Max);
    let (r, c) = h.bin_of(123.0, 456.0);
    assert_eq!((r, c), (13, 3));
    for (i, v) in norm.iter().enumerate() {
        assert_eq!(*v, if i == r * 20 + c { 1.0 } else { 0.0 });
    }
    assert_eq!(h.total(), 100.0);
}

#[test]
fn uniform_positions_fill_bins_evenly() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut h = Heatmap::new(70.0, EXTENT_PX).unwrap();
    let n = 1_000_000;
    for _ in 0..n {
        h.add(rng.gen_range(0.0..700.0), rng.gen_range(0.0..700.0), 1.0);
    }
    assert_eq!(h.values.len(), 100);
    let mean = h.total() / 100.0;
    let var = h.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0;
    assert!(var.sqrt() / mean < 0.05);
    assert_eq!(h.total(), n as f64);
}

#[test]
fn visit_map_errors() {
    let log = hover_log(2, 5, |_, _| [1.0, 1.0]);
    assert!(matches!(
        visit_heatmap(std::slice::from_ref(&log), BallColor::Orange, 3, 35.0),
        Err(Error::InsufficientData(_))
    ));
    let mut one_ball = EpisodeLog::new(LogHeader::new(TaskId::Reach, 1, 4));
    one_ball.transitions.push(tr(&one_ball.header, 0, 0, &[[1.0, 1.0]], Some([5.0, 5.0])));
    assert!(visit_heatmap(&[one_ball], BallColor::Purple, 1, 35.0).is_err());
    assert!(Heatmap::new(0.0, 700.0).is_err());
}

#[test]
fn last_k_spans_several_logs() {
    let a = hover_log(2, 10, |_, _| [5.0, 5.0]);
    let b = hover_log(2, 10, |_, _| [600.0, 600.0]);
    let h = visit_heatmap(&[a, b], BallColor::Orange, 3, 35.0).unwrap();
    assert_eq!(h.get(0, 0), 10.0);
    assert_eq!(h.get(17, 17), 20.0);
}

#[test]
fn boundary_pixels_go_to_the_higher_bin() {
    let h = Heatmap::new(35.0, EXTENT_PX).unwrap();
    assert_eq!(h.bin_of(35.0, 0.0), (0, 1));
    assert_eq!(h.bin_of(34.999, 70.0), (2, 0));
    assert_eq!(h.bin_of(699.0, 699.0), (19, 19));
    assert_eq!(h.bin_of(700.0, -3.0), (0, 19));
    let r = Heatmap::new(REACH_BIN_PX, EXTENT_PX).unwrap();
    assert_eq!((r.rows, r.cols), (9, 9));
    assert_eq!(r.bin_of(640.0, 80.0), (1, 8));
}

proptest! {
    #[test]
    fn binning_is_exhaustive_and_exclusive(bin in 1.0f64..200.0) {
        let mut h = Heatmap::new(bin, EXTENT_PX).unwrap();
        for x in 0..700 {
            h.add(x as f64, (699 - x) as f64, 1.0);
        }
        prop_assert_eq!(h.total_count(), 700);
        prop_assert_eq!(h.total(), 700.0);
        for x in 0..700 {
            let (_, c) = h.bin_of(x as f64, 0.0);
            prop_assert!(c as f64 * bin <= x as f64 && (x as f64) < (c + 1) as f64 * bin);
        }
    }
}

#[test]
fn perfect_tracker_gives_a_black_map() {
    let goals = [[100.0, 100.0], [400.0, 650.0], [600.0, 300.0]];
    let eps: Vec<([f64; 2], Box<dyn Fn(u32) -> [f64; 2]>)> =
        goals.iter().map(|&g| (g, Box::new(move |_| g) as Box<dyn Fn(u32) -> [f64; 2]>)).collect();
    let h = reach_error_heatmap(&[reach_log(&eps)], REACH_BIN_PX).unwrap();
    assert!(h.values.iter().all(|&v| v == 0.0));
    assert!(h.normalized(Normalization::MinMax).iter().all(|&v| v == 0.0));
    assert_eq!(h.total_count(), 3);
}

#[test]
fn error_map_uses_the_last_two_hundred_steps() {
    // Goal in bin (2, 3); far off for the first 800 steps, then a 60-80-100
    // triangle away.
    let goal = [250.0, 170.0];
    let eps: Vec<([f64; 2], Box<dyn Fn(u32) -> [f64; 2]>)> = vec![(
        goal,
        Box::new(move |s| if s < 800 { [690.0, 690.0] } else { [goal[0] + 60.0, goal[1] - 80.0] }),
    )];
    let log = reach_log(&eps);
    let h = reach_error_heatmap(std::slice::from_ref(&log), REACH_BIN_PX).unwrap();
    for r in 0..h.rows {
        for c in 0..h.cols {
            assert_eq!(h.get(r, c), if (r, c) == (2, 3) { 100.0 } else { 0.0 });
        }
    }

    // Hand-computed mixed tail: 100 steps at 30 px, 100 steps at 50 px.
    let eps: Vec<([f64; 2], Box<dyn Fn(u32) -> [f64; 2]>)> = vec![(
        goal,
        Box::new(move |s| match s {
            0..=799 => [0.0, 0.0],
            800..=899 => [goal[0] + 30.0, goal[1]],
            _ => [goal[0], goal[1] + 50.0],
        }),
    )];
    let (err, g) = episode_reach_error(&reach_log(&eps).episode(0), 0).unwrap();
    assert_eq!(err, 40.0);
    assert_eq!(g, goal);
}

#[test]
fn same_bin_errors_accumulate() {
    let eps: Vec<([f64; 2], Box<dyn Fn(u32) -> [f64; 2]>)> = vec![
        ([250.0, 170.0], Box::new(|_| [250.0 + 3.0, 170.0 + 4.0])),
        ([300.0, 230.0], Box::new(|_| [300.0 - 6.0, 230.0 - 8.0])),
        ([650.0, 20.0], Box::new(|_| [650.0, 20.0 + 12.0])),
    ];
    let h = reach_error_heatmap(&[reach_log(&eps)], REACH_BIN_PX).unwrap();
    assert_eq!(h.get(2, 3), 15.0);
    assert_eq!(h.counts[2 * h.cols + 3], 2);
    assert_eq!(h.get(0, 8), 12.0);
    // Mass conservation against the per-episode errors.
    assert_eq!(h.total(), 5.0 + 10.0 + 12.0);
    let mean = h.count_normalized();
    assert_eq!(mean.get(2, 3), 7.5);
    let norm = h.normalized(Normalization::MinMax);
    assert_eq!(norm[2 * h.cols + 3], 1.0);
    assert_eq!(norm[0], 0.0);
}

#[test]
fn error_map_needs_goals() {
    let log = hover_log(1, 10, |_, _| [1.0, 1.0]);
    assert!(matches!(reach_error_heatmap(&[log], 80.0), Err(Error::InsufficientData(_))));
}

#[test]
fn moving_average_examples() {
    assert!(moving_average(&[0.3; 25], 10).iter().all(|v| (v - 0.3).abs() < 1e-15));
    let v: Vec<f64> = (0..30).map(|i| (i * i) as f64).collect();
    assert_eq!(moving_average(&v, 1), v);
    // Ramp: the trailing mean of i over a full window is i - (w - 1) / 2.
    let ramp: Vec<f64> = (0..50).map(|i| 2.0 * i as f64 + 1.0).collect();
    let s = moving_average(&ramp, 10);
    for (i, &v) in s.iter().enumerate() {
        let lo = (i + 1).saturating_sub(10);
        let expected = 2.0 * (lo + i) as f64 / 2.0 + 1.0;
        assert!((v - expected).abs() < 1e-12, "{i}: {v} vs {expected}");
    }
}

#[test]
fn curves_reduce_across_seeds() {
    let a = vec![(1000.0, 1.0), (2000.0, 3.0), (3000.0, 5.0)];
    let b = vec![(1000.0, 3.0), (2000.0, 1.0), (3000.0, 5.0), (4000.0, 9.0)];
    let c = reward_curve(&[a, b], 1).unwrap();
    assert_eq!(c.steps, vec![1000.0, 2000.0, 3000.0]);
    assert_eq!(c.mean, vec![2.0, 2.0, 5.0]);
    assert_eq!(c.min, vec![1.0, 1.0, 5.0]);
    assert_eq!(c.max, vec![3.0, 3.0, 5.0]);
    assert!(c.to_csv().starts_with("env_steps,mean,min,max\n1000,2,1,3\n"));
    assert!(reward_curve(&[], 10).is_err());
    assert!(c.to_ppm(64, 32).starts_with(b"P6\n64 32\n255\n"));
}

#[test]
fn curve_csv_reports_line_numbers() {
    let rows = parse_curve_csv("env_steps,mean_return\n1000,0.5\n2000,0.75,extra\n").unwrap();
    assert_eq!(rows, vec![(1000.0, 0.5), (2000.0, 0.75)]);
    let err = parse_curve_csv("env_steps,mean_return\n1000,0.5\n2000,abc\n").unwrap_err();
    assert!(matches!(&err, Error::Malformed(m) if m.contains("line 3")), "{err}");
    assert!(parse_curve_csv("env_steps,mean\n1000\n").unwrap_err().to_string().contains("line 2"));
    assert!(matches!(parse_curve_csv("header only\n"), Err(Error::InsufficientData(_))));
}

fn hash_dir(paths: &[PathBuf]) -> String {
    let mut h = Sha256::new();
    for p in paths {
        h.update(fs::read(p).unwrap());
        h.update(fs::read(p.with_extension("csv")).unwrap());
    }
    hex::encode(h.finalize())
}

#[test]
fn frames_follow_the_stride_and_stay_in_bounds() {
    let log = hover_log(2, 1000, |_, s| [(s % 700) as f64, 699.0 - (s % 700) as f64]);
    let dir = tempfile::tempdir().unwrap();
    let paths = render_frames(&log, 1, 100, 20.0, dir.path()).unwrap();
    assert_eq!(paths.len(), 10);
    assert!(paths[3].ends_with("frame_0300.ppm"));
    let bytes = fs::read(&paths[0]).unwrap();
    let header = b"P6\n700 700\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 700 * 700 * 3);
    let csv = fs::read_to_string(paths[1].with_extension("csv")).unwrap();
    assert_eq!(csv, "object,x,y\norange,100,599\npurple,10,690\ngreen,690,690\n");

    let again = tempfile::tempdir().unwrap();
    let paths2 = render_frames(&log, 1, 100, 20.0, again.path()).unwrap();
    assert_eq!(hash_dir(&paths), hash_dir(&paths2));
    assert!(matches!(render_frames(&log, 7, 100, 20.0, dir.path()), Err(Error::InsufficientData(_))));
}

#[test]
fn frames_mark_the_goal() {
    let eps: Vec<([f64; 2], Box<dyn Fn(u32) -> [f64; 2]>)> = vec![([350.0, 350.0], Box::new(|_| [100.0, 100.0]))];
    let dir = tempfile::tempdir().unwrap();
    let paths = render_frames(&reach_log(&eps), 0, 500, 20.0, dir.path()).unwrap();
    assert_eq!(paths.len(), 2);
    let bytes = fs::read(&paths[0]).unwrap();
    let px = |x: usize, y: usize| {
        let i = 15 + 3 * (y * 700 + x);
        [bytes[i], bytes[i + 1], bytes[i + 2]]
    };
    assert_eq!(px(350, 350), [255, 255, 255]);
    assert_eq!(px(100, 100), ball_rgb(BallColor::Orange));
    assert_eq!(px(0, 699), [0, 0, 0]);
    assert!(fs::read_to_string(paths[0].with_extension("csv")).unwrap().contains("goal,350,350"));
}

#[test]
fn discs_clip_at_the_border() {
    let mut img = Image::new(10, 10);
    img.disc(9.0, 0.0, 4.0, [1, 2, 3]);
    img.disc(-50.0, -50.0, 3.0, [9, 9, 9]);
    assert_eq!(img.rgb.len(), 300);
    assert_eq!(&img.rgb[27..30], &[1, 2, 3]);
    assert!(!img.rgb.contains(&9));
}

#[test]
fn heatmap_files_pair_image_and_csv() {
    let log = hover_log(1, 20, |_, s| [s as f64 * 30.0, 300.0]);
    let h = visit_heatmap(&[log], BallColor::Orange, 1, 35.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("visits");
    h.write(&stem, Normalization::Max).unwrap();
    let csv = fs::read_to_string(stem.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 401);
    let total: f64 = csv.lines().skip(1).map(|l| l.split(',').nth(4).unwrap().parse::<f64>().unwrap()).sum();
    assert_eq!(total, 20.0);
    assert_eq!(fs::read(stem.with_extension("ppm")).unwrap().len(), 15 + 200 * 200 * 3);
}
