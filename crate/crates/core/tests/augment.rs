mod support;

use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wsshm::augment::{apply_geo, apply_photo, sample_geo, LabelMap, PhotoJitter};
use wsshm::labels::{AlphaMatte, BoundaryMask, RgbImage, SegMask};

#[test]
fn crop_sides_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (lo, hi) = (512usize, 768usize);
    let draws = 10_000;
    let mut counts = vec![0usize; hi - lo + 1];
    let mut flips = 0;
    for _ in 0..draws {
        let t = sample_geo(&mut rng, (1000, 900), (lo, hi), (0.75, 1.25), 0.5);
        counts[t.crop_size - lo] += 1;
        flips += usize::from(t.hflip);
    }
    let k = counts.len() as f64;
    let expect = draws as f64 / k;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    // chi-square with k-1 degrees of freedom: mean k-1, sd sqrt(2(k-1))
    let sd = (2.0 * (k - 1.0)).sqrt();
    assert!((chi2 - (k - 1.0)).abs() <= 3.0 * sd, "chi2 {chi2} for {k} bins");
    let p_sd = (draws as f64 * 0.25).sqrt();
    assert!((flips as f64 - draws as f64 / 2.0).abs() <= 3.0 * p_sd, "{flips} flips");
}

#[test]
fn crop_window_fits_the_scaled_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..2000 {
        let t = sample_geo(&mut rng, (200, 150), (64, 96), (0.75, 1.25), 0.5);
        let (sh, sw) = ((200.0 * t.scale).round() as usize, (150.0 * t.scale).round() as usize);
        assert!(t.crop_origin.0 + t.crop_size <= sw.max(t.crop_size));
        assert!(t.crop_origin.1 + t.crop_size <= sh.max(t.crop_size));
    }
}

#[test]
fn brightness_on_grey_is_exact() {
    let img = RgbImage::filled(4, 4, [0.5; 3]);
    let j = PhotoJitter {
        brightness: 0.1,
        ..PhotoJitter::default()
    };
    assert!(apply_photo(&j, &img).values().iter().all(|v| (v - 0.6).abs() < 1e-12));
    assert_eq!(apply_photo(&PhotoJitter::default(), &img), img);
}

fn case() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<bool>, u64)> {
    (4usize..40, 4usize..40).prop_flat_map(|(h, w)| (Just(h), Just(w), vec(0.0..=1.0f64, 3 * h * w), vec(any::<bool>(), h * w), any::<u64>()))
}

proptest! {
    #![proptest_config(support::proptest_config(64))]

    #[test]
    fn weak_and_strong_views_stay_aligned((h, w, px, bits, seed) in case()) {
        let img = RgbImage::new(h, w, px.clone()).unwrap();
        let seg = SegMask::new(h, w, bits.iter().map(|&b| u8::from(b)).collect()).unwrap();
        let bnd = BoundaryMask::new(h, w, bits.iter().map(|&b| u8::from(!b)).collect()).unwrap();
        // the first channel doubles as a matte, so any misalignment shows up
        let probe = AlphaMatte::new(h, w, px[..h * w].to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = sample_geo(&mut rng, (h, w), (8, 24), (0.75, 1.25), 0.5);
        let labels = [LabelMap::Seg(seg), LabelMap::Boundary(bnd), LabelMap::Matte(probe)];
        let (weak, out) = apply_geo(&t, &img, &labels).unwrap();
        prop_assert_eq!(weak.dims(), (t.crop_size, t.crop_size));
        match &out[..] {
            [LabelMap::Seg(s), LabelMap::Boundary(b), LabelMap::Matte(m)] => {
                prop_assert!(s.values().iter().all(|&v| v <= 1));
                prop_assert!(b.values().iter().all(|&v| v <= 1));
                prop_assert!(s.values().iter().zip(b.values()).all(|(x, y)| x + y == 1));
                for (a, b) in m.values().iter().zip(weak.channel(0)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
            _ => prop_assert!(false, "labels changed kind"),
        }
        let j = PhotoJitter { brightness: 0.2, ..PhotoJitter::default() };
        let strong = apply_photo(&j, &weak);
        prop_assert_eq!(strong.dims(), weak.dims());
        for (s, w) in strong.values().iter().zip(weak.values()) {
            prop_assert!((s - (w + 0.2).min(1.0)).abs() < 1e-12);
        }
        // replay from the same seed gives the same views
        let mut again = ChaCha8Rng::seed_from_u64(seed);
        let t2 = sample_geo(&mut again, (h, w), (8, 24), (0.75, 1.25), 0.5);
        prop_assert_eq!(t, t2);
        prop_assert_eq!(apply_geo(&t2, &img, &labels).unwrap().0, weak);
    }
}
