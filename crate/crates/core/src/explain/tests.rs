use rand::Rng;

use super::*;
use crate::corpus::{Gender, Region};
use crate::model::{ClassifierConfig, ConvBlock, Layer};
use crate::seed;

fn net(w: u32, h: u32, blocks: &[(usize, usize, bool)], head: Vec<usize>, classes: usize, s: u64) -> Network {
    Network::new(ClassifierConfig {
        input_width: w,
        input_height: h,
        conv_blocks: blocks.iter().map(|&(filters, kernel, pool)| ConvBlock { filters, kernel, pool }).collect(),
        head,
        class_names: (0..classes).map(|c| format!("c{c}")).collect(),
        weight_init_seed: s,
    })
    .unwrap()
}

fn input(net: &Network, s: u64) -> Vec<f64> {
    let mut rng = seed::rng(s);
    (0..net.input_shape().len()).map(|_| rng.gen::<f64>()).collect()
}

fn key() -> GroupKey {
    GroupKey::new("local", "ORIG", Region::GlobalSouth, Gender::Female)
}

#[test]
fn zero_activations_give_zero_map() {
    let mut n = net(8, 8, &[(3, 3, true), (4, 3, false)], vec![5], 2, 1);
    if let Some(Layer::Conv(_)) = n.layers().get(3) {
    } else {
        panic!("expected second conv at layer 3");
    }
    let params = n.params_mut();
    // second conv's weight and bias are tensors 2 and 3
    for p in params.into_iter().skip(2).take(2) {
        p.fill(0.0);
    }
    let m = gradcam_input(&n, &input(&n, 1), 0, None, "r").unwrap();
    assert!(m.grid.iter().all(|v| *v == 0.0));
    assert!(m.upsampled.iter().all(|v| *v == 0.0));
}

#[test]
fn closed_form_two_by_two() {
    let mut n = net(2, 2, &[(1, 1, false)], vec![], 2, 0);
    {
        let mut p = n.params_mut();
        p[0].copy_from_slice(&[1.0, -0.5, 0.25]); // conv weight, one per input channel
        p[1][0] = 0.1; // conv bias
        p[2].copy_from_slice(&[0.3, -0.2, 0.5, 0.1, -1.0, 0.4, 0.2, 0.0]); // dense [class][pixel]
    }
    // CHW input planes (r, g, b) over pixels (0,0), (1,0), (0,1), (1,1)
    let x = [0.9, 0.1, 0.5, 0.3, 0.2, 0.8, 0.4, 0.6, 0.1, 0.7, 0.3, 0.2];
    let a: Vec<f64> = (0..4).map(|i| (1.0 * x[i] - 0.5 * x[4 + i] + 0.25 * x[8 + i] + 0.1f64).max(0.0)).collect();
    for (target, row) in [(0usize, [0.3, -0.2, 0.5, 0.1]), (1, [-1.0, 0.4, 0.2, 0.0])] {
        let w = row.iter().sum::<f64>() / 4.0;
        let expect: Vec<f64> = a.iter().map(|v| (w * v).max(0.0)).collect();
        let m = gradcam_input(&n, &x, target, None, "toy").unwrap();
        assert_eq!(m.channel_weights.len(), 1);
        assert!((m.channel_weights[0] - w).abs() < 1e-15);
        for (g, e) in m.grid.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "{:?} vs {expect:?}", m.grid);
        }
        assert_eq!(m.upsampled, min_max_normalize(&expect));
    }
}

#[test]
fn channel_weights_match_finite_differences() {
    let n = net(12, 12, &[(3, 3, true), (4, 3, true), (5, 3, false)], vec![6], 3, 5);
    let x = input(&n, 2);
    let idx = n.conv_output_index(2).unwrap();
    let base = n.trace(&x).unwrap();
    let shape = n.shape(idx - 1);
    let plane = shape.h * shape.w;
    for target in 0..3 {
        let m = gradcam_input(&n, &x, target, None, "r").unwrap();
        let h = 1e-5;
        for k in 0..shape.c {
            let shifted = |d: f64| {
                let mut a = base.acts[idx].clone();
                a[k * plane..(k + 1) * plane].iter_mut().for_each(|v| *v += d);
                n.trace_from(idx, a).unwrap().logits()[target]
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h) / plane as f64;
            let an = m.channel_weights[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-3, "target {target} channel {k}: {an} vs {fd}");
        }
    }
}

#[test]
fn map_ignores_other_class_logits() {
    let mut n = net(8, 8, &[(3, 3, true), (4, 3, false)], vec![5], 3, 7);
    let x = input(&n, 3);
    let before = gradcam_input(&n, &x, 1, None, "r").unwrap();
    {
        let mut p = n.params_mut();
        let last = p.len() - 2;
        let width = p[last].len() / 3;
        for (i, v) in p[last].iter_mut().enumerate() {
            if i / width != 1 {
                *v = *v * -3.0 + 0.7;
            }
        }
        let bias = p.len() - 1;
        p[bias].iter_mut().for_each(|b| *b += 5.0);
    }
    let after = gradcam_input(&n, &x, 1, None, "r").unwrap();
    assert_eq!(before.grid, after.grid);
    assert_eq!(before.upsampled, after.upsampled);
}

#[test]
fn invariants_on_random_nets() {
    for s in 0..5 {
        let n = net(16, 20, &[(4, 3, true), (4, 3, true)], vec![8], 2, s);
        for block in [0, 1] {
            let m = gradcam_input(&n, &input(&n, 10 + s), (s % 2) as usize, Some(block), "r").unwrap();
            assert!(m.grid.iter().all(|v| *v >= 0.0));
            assert_eq!((m.width, m.height), (16, 20));
            let max = m.upsampled.iter().copied().fold(0.0, f64::max);
            if m.grid.iter().any(|v| *v > 0.0) {
                assert!((max - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(max, 0.0);
            }
        }
    }
    let n = net(8, 8, &[(2, 3, true)], vec![3], 2, 0);
    assert!(matches!(gradcam_input(&n, &input(&n, 0), 2, None, "r"), Err(Error::LabelMismatch(_))));
    assert!(matches!(gradcam_input(&n, &input(&n, 0), 0, Some(1), "r"), Err(Error::NoConvLayer)));
}

fn random_map(s: u64, w: usize, h: usize) -> SaliencyMap {
    let mut rng = seed::rng(s);
    let grid: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
    let up: Vec<f64> = (0..w * h).map(|_| rng.gen::<f64>()).collect();
    SaliencyMap {
        grid,
        grid_width: 2,
        grid_height: 2,
        upsampled: min_max_normalize(&up),
        width: w,
        height: h,
        target_class: 1,
        record_id: format!("rec{s}"),
        count: 1,
        channel_weights: vec![],
    }
}

#[test]
fn group_average_examples() {
    let a = random_map(1, 6, 5);
    let one = group_average_map(std::slice::from_ref(&a), &key()).unwrap();
    assert_eq!(one.upsampled, a.upsampled);
    assert_eq!(one.count, 1);

    let mut zero = random_map(2, 6, 5);
    zero.upsampled.fill(0.0);
    let two = group_average_map(&[a.clone(), zero], &key()).unwrap();
    for (x, y) in two.upsampled.iter().zip(&a.upsampled) {
        assert!((x - y).abs() < 1e-12);
    }

    let maps: Vec<_> = (0..7).map(|s| random_map(s, 6, 5)).collect();
    let avg = group_average_map(&maps, &key()).unwrap();
    let mut mean = vec![0.0; 30];
    for i in 0..30 {
        for m in &maps {
            mean[i] += m.upsampled[i];
        }
        mean[i] /= 7.0;
    }
    let (lo, hi) = mean.iter().fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(*v), h.max(*v)));
    for (x, m) in avg.upsampled.iter().zip(&mean) {
        assert!((x - (m - lo) / (hi - lo)).abs() < 1e-6);
    }
    assert_eq!(avg.record_id, "group:local/ORIG/GS/F");

    let mut shuffled = maps.clone();
    shuffled.reverse();
    shuffled.swap(0, 3);
    assert_eq!(group_average_map(&shuffled, &key()).unwrap(), avg);
}

#[test]
fn group_average_errors() {
    assert!(matches!(group_average_map(&[], &key()), Err(Error::EmptyGroup)));
    let a = random_map(1, 6, 5);
    let b = random_map(2, 5, 6);
    assert!(matches!(group_average_map(&[a, b], &key()), Err(Error::DimMismatch(_))));
}

fn frame_map(f: impl Fn(usize, usize) -> f64) -> SaliencyMap {
    let (w, h) = (200, 256);
    SaliencyMap {
        grid: vec![0.0; 4],
        grid_width: 2,
        grid_height: 2,
        upsampled: (0..w * h).map(|i| f(i % w, i / w)).collect(),
        width: w,
        height: h,
        target_class: 0,
        record_id: "m".into(),
        count: 1,
        channel_weights: vec![],
    }
}

#[test]
fn uniform_map_gives_area_fractions() {
    // forehead rows 26..=89; nose rows 90..=153 × cols 70..=129; mouth rows 154..=191 × cols 60..=139
    let total = 200.0 * 256.0;
    let expect = [64.0 * 200.0, 64.0 * 60.0, 38.0 * 80.0];
    for (zero, m) in [(false, frame_map(|_, _| 0.7)), (true, frame_map(|_, _| 0.0))] {
        let p = region_profile(&m);
        assert!((p.forehead - expect[0] / total).abs() < 1e-12, "zero map: {zero}");
        assert!((p.nose - expect[1] / total).abs() < 1e-12);
        assert!((p.mouth - expect[2] / total).abs() < 1e-12);
        assert!((p.forehead + p.nose + p.mouth + p.periphery - 1.0).abs() < 1e-9);
    }
}

#[test]
fn single_nose_pixel() {
    let p = region_profile(&frame_map(|x, y| if (x, y) == (100, 120) { 1.0 } else { 0.0 }));
    assert_eq!(p.nose, 1.0);
    assert_eq!(p.dominant(), Zone::Nose);
}

#[test]
fn gaussian_bump_on_nose() {
    let g = |x: usize, y: usize| {
        let (dx, dy) = (x as f64 + 0.5 - 100.0, y as f64 + 0.5 - 121.6);
        (-(dx * dx + dy * dy) / (2.0 * 12.0 * 12.0)).exp()
    };
    let m = frame_map(g);
    let p = region_profile(&m);
    assert_eq!(p.dominant(), Zone::Nose);
    let mut nose = 0.0;
    let mut all = 0.0;
    for y in 0..256 {
        for x in 0..200 {
            all += g(x, y);
            if (90..=153).contains(&y) && (70..=129).contains(&x) {
                nose += g(x, y);
            }
        }
    }
    assert!((p.nose - nose / all).abs() < 1e-9);
    assert!(p.nose > p.forehead && p.nose > p.mouth && p.nose > p.periphery);
}

#[test]
fn exports_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let n = net(8, 8, &[(2, 3, true)], vec![3], 2, 4);
    let img = crate::ImageBuffer::from_fn(8, 8, |x, y| [(x * 20) as u8, (y * 20) as u8, 90]);
    let m = gradcam(&n, &img, 0, None, "r").unwrap();
    let overlay = heat_overlay(&img, &m).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (8, 8));
    let path = dir.path().join("maps.npz");
    save_npz(&[("r", &m)], &path).unwrap();
    let mut npz = ndarray_npy::NpzReader::new(std::fs::File::open(&path).unwrap()).unwrap();
    let up: ndarray::Array2<f64> = npz.by_name("r_upsampled").unwrap();
    assert_eq!(up.dim(), (8, 8));
    assert_eq!(up.as_slice().unwrap(), m.upsampled.as_slice());
    let grid = compose_grid(&[img.clone(), overlay, img], 2, 2).unwrap();
    assert_eq!((grid.width(), grid.height()), (2 * 10 + 2, 2 * 10 + 2));
}
