mod common;

use proptest::prelude::*;
use rand::Rng;
use vesselseg::eda::{
    correlation_histogram, mean_image, mean_mask, pairwise_correlation, pixel_histogram, write_stats,
};
use vesselseg::imaging::{read_netpbm, BinaryMask, ImageU8};
use vesselseg::synthetic::fundus_pair;
use vesselseg::Error;

fn gray(w: usize, h: usize, data: Vec<u8>) -> ImageU8 {
    ImageU8::gray(w, h, data).unwrap()
}

fn random_image(seed: u64, w: usize, h: usize, channels: usize) -> ImageU8 {
    let mut rng = common::rng(seed);
    ImageU8::new(w, h, channels, (0..w * h * channels).map(|_| rng.random()).collect()).unwrap()
}

#[test]
fn mean_rounds_half_up() {
    let m = mean_image(&[gray(2, 2, vec![0; 4]), gray(2, 2, vec![255; 4])]).unwrap();
    assert_eq!(m.data, vec![128; 4]);
    let m = mean_image(&[gray(1, 1, vec![1]), gray(1, 1, vec![2]), gray(1, 1, vec![2])]).unwrap();
    assert_eq!(m.data, vec![2]);
}

#[test]
fn mean_of_copies_is_idempotent() {
    let img = random_image(4, 7, 5, 3);
    assert_eq!(mean_image(std::slice::from_ref(&img)).unwrap(), img);
    assert_eq!(mean_image(&vec![img.clone(); 6]).unwrap(), img);
}

#[test]
fn mean_rejects_mixed_shapes() {
    let err = mean_image(&[random_image(1, 4, 4, 1), random_image(2, 4, 5, 1)]).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
    let err = mean_image(&[random_image(1, 4, 4, 1), random_image(2, 4, 4, 3)]).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
    assert!(mean_image(&[]).is_err());
}

#[test]
fn mean_mask_scales_vessel_frequency() {
    let a = BinaryMask::new(2, 1, vec![1, 0]).unwrap();
    let b = BinaryMask::new(2, 1, vec![1, 1]).unwrap();
    assert_eq!(mean_mask(&[a, b]).unwrap().data, vec![255, 128]);
}

#[test]
fn histogram_cases() {
    let h = pixel_histogram(&[gray(2, 2, vec![0; 4])]).unwrap();
    assert_eq!(h.counts[0], 4);
    assert_eq!(h.counts[1..].iter().sum::<u64>(), 0);
    let ramp = pixel_histogram(&[gray(16, 16, (0..=255).collect())]).unwrap();
    assert!(ramp.counts.iter().all(|&c| c == 1));
    let imgs = [random_image(1, 5, 3, 3), random_image(2, 5, 3, 3)];
    assert_eq!(pixel_histogram(&imgs).unwrap().total, 2 * 5 * 3 * 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn histograms_add_over_partitions(seed in any::<u64>(), n in 2usize..6, cut in 1usize..5) {
        let cut = cut.min(n - 1);
        let imgs: Vec<ImageU8> = (0..n as u64).map(|i| random_image(seed ^ i, 6, 4, 1)).collect();
        let whole = pixel_histogram(&imgs).unwrap();
        let parts = pixel_histogram(&imgs[..cut]).unwrap() + pixel_histogram(&imgs[cut..]).unwrap();
        prop_assert_eq!(whole.total, whole.counts.iter().sum::<u64>());
        prop_assert_eq!(whole, parts);
    }

    #[test]
    fn correlation_matrix_is_symmetric_and_bounded(seed in any::<u64>(), n in 2usize..6) {
        let imgs: Vec<(String, ImageU8)> =
            (0..n as u64).map(|i| (i.to_string(), random_image(seed.wrapping_add(i), 8, 8, 3))).collect();
        let m = pairwise_correlation(&imgs).unwrap();
        for i in 0..n {
            prop_assert_eq!(m.get(i, i), 1.0);
            for j in 0..n {
                prop_assert_eq!(m.get(i, j), m.get(j, i));
                prop_assert!((-1.0..=1.0).contains(&m.get(i, j)));
            }
        }
    }
}

/// Two-pass textbook Pearson coefficient.
fn pearson(a: &[u8], b: &[u8]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn correlation_special_cases() {
    let x = random_image(8, 16, 16, 1);
    let inverted = gray(16, 16, x.data.iter().map(|v| 255 - v).collect());
    let other = random_image(9, 16, 16, 1);
    let m = pairwise_correlation(&[
        ("x".into(), x.clone()),
        ("copy".into(), x.clone()),
        ("inv".into(), inverted),
        ("other".into(), other.clone()),
    ])
    .unwrap();
    assert_eq!(m.get(0, 1), 1.0);
    assert_eq!(m.get(0, 2), -1.0);
    assert!((m.get(0, 3) - pearson(&x.data, &other.data)).abs() < 1e-12);

    let half = gray(16, 16, x.data.iter().map(|v| v / 2).collect());
    let affine = gray(16, 16, half.data.iter().map(|v| 2 * v + 1).collect());
    let m = pairwise_correlation(&[("half".into(), half), ("affine".into(), affine)]).unwrap();
    assert!((m.get(0, 1) - 1.0).abs() < 1e-12);
}

#[test]
fn zero_variance_names_the_image() {
    let imgs = vec![("01".to_string(), random_image(1, 4, 4, 1)), ("flat".to_string(), gray(4, 4, vec![7; 16]))];
    match pairwise_correlation(&imgs) {
        Err(Error::UndefinedMetric(msg)) => assert!(msg.contains("flat"), "{msg}"),
        other => panic!("expected undefined correlation, got {other:?}"),
    }
}

#[test]
fn correlation_histogram_excludes_the_diagonal() {
    let imgs: Vec<(String, ImageU8)> = (0..5).map(|i| (i.to_string(), random_image(i, 8, 8, 1))).collect();
    let m = pairwise_correlation(&imgs).unwrap();
    let bins = correlation_histogram(&m, 20).unwrap();
    assert_eq!(bins.len(), 20);
    assert_eq!(bins.iter().map(|b| b.2).sum::<u64>(), 10);
    assert_eq!((bins[0].0, bins[19].1), (-1.0, 1.0));
}

#[test]
fn stats_outputs() {
    let (images, masks): (Vec<_>, Vec<_>) = (0..3)
        .map(|i| {
            let (img, mask) = fundus_pair(32, 24, i);
            ((format!("{i:02}"), img), mask)
        })
        .unzip();
    let dir = tempfile::tempdir().unwrap();
    write_stats(&images, &masks, dir.path()).unwrap();
    let mean = read_netpbm(&dir.path().join("mean_image.ppm")).unwrap();
    assert_eq!((mean.width, mean.height, mean.channels), (32, 24, 3));
    assert_eq!(read_netpbm(&dir.path().join("mean_image.pgm")).unwrap().channels, 1);
    assert_eq!(read_netpbm(&dir.path().join("mean_mask.pgm")).unwrap().channels, 1);
    let hist = std::fs::read_to_string(dir.path().join("pixel_hist.csv")).unwrap();
    assert_eq!(hist.lines().count(), 257);
    assert_eq!(hist.lines().next(), Some("bin,count"));
    let total: u64 = hist.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 3 * 32 * 24 * 3);
    let corr = std::fs::read_to_string(dir.path().join("corr_hist.csv")).unwrap();
    let pairs: u64 = corr.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(pairs, 3);
    assert!(dir.path().join("corr_hist.svg").exists());
}
