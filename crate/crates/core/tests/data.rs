use std::path::{Path, PathBuf};

use dsrnet::data::{
    bicubic_resize, degrade, keys_kernel, load_png, make_pairs, read_manifest, rgb_to_y, save_png, write_manifest,
    Boundary, Image, ManifestRow, PatchSampler, ResizeOptions, YRange,
};
use dsrnet::Rng;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
    let mut rng = Rng::new(seed);
    Image::from_fn(w, h, c, |_, _, _| (rng.below(256) as f64) / 255.0)
}

#[test]
fn png_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    for (w, h, c) in [(8, 8, 3), (1, 1, 3), (5, 3, 1)] {
        let img = random_image(w, h, c, 1);
        let path = dir.path().join(format!("{w}x{h}x{c}.png"));
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back, img);
    }
    assert!(load_png(dir.path().join("missing.png")).is_err());
    let junk = dir.path().join("junk.png");
    std::fs::write(&junk, b"not a png at all").unwrap();
    assert!(load_png(&junk).is_err());
}

#[test]
fn studio_luma_values() {
    let px = |v: f64| Image::from_fn(1, 1, 3, |_, _, _| v);
    let y = |v: f64| rgb_to_y(&px(v), YRange::Studio).unwrap().get(0, 0, 0);
    assert!((y(1.0) - 235.0 / 255.0).abs() < 1e-12);
    assert!((y(0.0) - 16.0 / 255.0).abs() < 1e-12);
    assert!((y(0.5) - 125.5 / 255.0).abs() < 1e-12);
    assert!((rgb_to_y(&px(1.0), YRange::Full).unwrap().get(0, 0, 0) - 1.0).abs() < 1e-12);
    assert!(rgb_to_y(&Image::new(2, 2, 2), YRange::Studio).is_err());
}

#[test]
fn constant_image_stays_constant() {
    let img = Image::from_fn(13, 9, 3, |c, _, _| 0.2 + 0.3 * c as f64);
    for (w, h) in [(6, 4), (26, 18), (5, 17), (1, 1)] {
        let out = bicubic_resize(&img, w, h, ResizeOptions::default()).unwrap();
        for c in 0..3 {
            for &v in out.plane(c) {
                assert!((v - (0.2 + 0.3 * c as f64)).abs() < 1e-9);
            }
        }
    }
    assert!(bicubic_resize(&img, 0, 4, ResizeOptions::default()).is_err());
}

#[test]
fn keys_kernel_definition() {
    assert_eq!(keys_kernel(0.0), 1.0);
    assert_eq!(keys_kernel(1.0), 0.0);
    assert_eq!(keys_kernel(2.0), 0.0);
}

/// Brute-force 2-D resampler: every output pixel sums over the whole input
/// with the product kernel evaluated in continuous coordinates, then
/// normalizes; out-of-range taps are clamped to the edge.
fn reference_resize(img: &Image, ow: usize, oh: usize) -> Image {
    let axis = |n_in: usize, n_out: usize, i: usize| -> Vec<(usize, f64)> {
        let scale = n_out as f64 / n_in as f64;
        let k = scale.min(1.0);
        let center = (i as f64 + 0.5) / scale - 0.5;
        let mut acc = vec![0.0; n_in];
        let reach = (2.0 / k).ceil() as i64 + 2;
        for t in (center.floor() as i64 - reach)..=(center.floor() as i64 + reach) {
            let w = k * keys_kernel(k * (center - t as f64));
            acc[t.clamp(0, n_in as i64 - 1) as usize] += w;
        }
        let s: f64 = acc.iter().sum();
        acc.into_iter().enumerate().map(|(j, w)| (j, w / s)).collect()
    };
    Image::from_fn(ow, oh, img.channels(), |c, y, x| {
        let wy = axis(img.height(), oh, y);
        let wx = axis(img.width(), ow, x);
        let mut v = 0.0;
        for &(iy, ay) in &wy {
            for &(ix, ax) in &wx {
                v += ay * ax * img.get(c, iy, ix);
            }
        }
        v
    })
}

#[test]
fn ramp_downscale_matches_brute_force_reference() {
    let ramp = Image::from_fn(8, 8, 1, |_, y, x| (x + 8 * y) as f64 / 63.0);
    let got = bicubic_resize(&ramp, 4, 4, ResizeOptions::default()).unwrap();
    let want = reference_resize(&ramp, 4, 4);
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    let img = random_image(11, 7, 3, 3);
    for (w, h) in [(5, 3), (22, 14), (4, 9)] {
        let got = bicubic_resize(&img, w, h, ResizeOptions::default()).unwrap();
        let want = reference_resize(&img, w, h);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn boundary_modes_only_differ_at_the_border() {
    let img = random_image(20, 20, 1, 4);
    let clamp = bicubic_resize(&img, 10, 10, ResizeOptions::default()).unwrap();
    let sym = bicubic_resize(
        &img,
        10,
        10,
        ResizeOptions {
            antialias: true,
            boundary: Boundary::Symmetric,
        },
    )
    .unwrap();
    for y in 2..8 {
        for x in 2..8 {
            assert!((clamp.get(0, y, x) - sym.get(0, y, x)).abs() < 1e-12);
        }
    }
}

#[test]
fn natural_image_round_trip_is_sane() {
    let hr = load_png(fixtures().join("natural512/astronaut.png")).unwrap();
    for s in [2, 3, 4] {
        let (hr, lr) = degrade(&hr, s, ResizeOptions::default()).unwrap();
        let up = bicubic_resize(&lr, hr.width(), hr.height(), ResizeOptions::default())
            .unwrap()
            .quantize();
        let psnr = dsrnet::metrics::psnr_y(&up, &hr, s).unwrap();
        assert!(psnr.is_finite() && psnr > 20.0, "x{s}: {psnr}");
    }
}

fn write_dir(images: &[(&str, Image)]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for (name, img) in images {
        save_png(img, dir.path().join(name)).unwrap();
    }
    dir
}

#[test]
fn pairs_are_cropped_ordered_and_deterministic() {
    let dir = write_dir(&[
        ("b.png", random_image(101, 99, 3, 5)),
        ("a.png", random_image(40, 44, 3, 6)),
        ("c.png", random_image(12, 12, 1, 7)),
    ]);
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let pairs = make_pairs(dir.path(), 4, None).unwrap();
    let names: Vec<&str> = pairs.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names, ["a.png", "b.png", "c.png"]);
    let b = &pairs[1];
    assert_eq!((b.hr.width(), b.hr.height()), (100, 96));
    assert_eq!((b.lr.width(), b.lr.height()), (25, 24));
    assert_eq!(pairs[2].hr.channels(), 3);
    assert_eq!(make_pairs(dir.path(), 4, None).unwrap(), pairs);

    let ident = make_pairs(dir.path(), 1, None).unwrap();
    for p in &ident {
        assert_eq!(p.lr, p.hr);
    }

    let empty = tempfile::tempdir().unwrap();
    assert!(make_pairs(empty.path(), 2, None).is_err());
}

#[test]
fn lr_directory_overrides_degradation() {
    let hr = write_dir(&[("x.png", random_image(16, 12, 3, 8))]);
    let lr_img = random_image(8, 6, 3, 9);
    let lr = write_dir(&[("x.png", lr_img.clone())]);
    let pairs = make_pairs(hr.path(), 2, Some(lr.path())).unwrap();
    assert_eq!(pairs[0].lr, lr_img);
    assert_eq!(pairs[0].lr_path.as_deref(), Some(lr.path().join("x.png").as_path()));

    let bad = write_dir(&[("x.png", random_image(7, 6, 3, 9))]);
    assert!(make_pairs(hr.path(), 2, Some(bad.path())).is_err());
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        ManifestRow {
            hr_path: "hr/a.png".into(),
            lr_path: "lr/a.png".into(),
            scale: 2,
        },
        ManifestRow {
            hr_path: "hr/b, c.png".into(),
            lr_path: "lr/b, c.png".into(),
            scale: 2,
        },
    ];
    let path = dir.path().join("manifest.csv");
    write_manifest(&path, &rows).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), rows);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("hr_path,lr_path,scale"));
}

#[test]
fn patches_are_aligned() {
    let dir = write_dir(&[
        ("a.png", random_image(64, 48, 3, 10)),
        ("b.png", random_image(80, 80, 3, 11)),
    ]);
    for s in [2, 3, 4] {
        let pairs = make_pairs(dir.path(), s, None).unwrap();
        let sampler = PatchSampler::new(&pairs, 32).unwrap();
        assert_eq!(sampler.lr_patch(), 32 / s);
        let hp = sampler.hr_patch();
        assert_eq!(hp % s, 0);
        let mut rng = Rng::new(12);
        let positions = sampler.positions(8, &mut Rng::new(12));
        let (lr, hr) = sampler.sample::<f64>(8, &mut rng);
        assert_eq!(lr.shape().h, 32 / s);
        assert_eq!(hr.shape().h, hp);
        for (b, &(i, y, x)) in positions.iter().enumerate() {
            let pair = &pairs[i];
            // lr[b, c, py, px] is lr image at (y+py, x+px); hr patch starts at (s*y, s*x)
            assert_eq!(lr.at(b, 1, 2, 1), pair.lr.get(1, y + 2, x + 1));
            assert_eq!(hr.at(b, 0, s * 2, s), pair.hr.get(0, s * (y + 2), s * (x + 1)));
            assert!(s * y + hp <= pair.hr.height() && s * x + hp <= pair.hr.width());
        }
        let (lr2, hr2) = sampler.sample::<f64>(8, &mut Rng::new(12));
        assert_eq!((lr2, hr2), (lr, hr));
    }
}

#[test]
fn small_images_are_skipped() {
    let dir = write_dir(&[
        ("big.png", random_image(40, 40, 3, 13)),
        ("small.png", random_image(10, 10, 3, 14)),
    ]);
    let pairs = make_pairs(dir.path(), 2, None).unwrap();
    let sampler = PatchSampler::new(&pairs, 32).unwrap();
    assert_eq!(sampler.usable(), 1);
    assert!(PatchSampler::new(&pairs[1..], 32).is_err());
}
