use dsrnet::data::Image;
use dsrnet::metrics::{median, psnr_y, ssim_y, time_inference, EvalReport};
use dsrnet::{DsrNet, ModelConfig, Rng};

fn textured(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = Rng::new(seed);
    Image::from_fn(w, h, 3, |c, y, x| {
        let base = 0.5 + 0.3 * ((x as f64 * 0.7).sin() * (y as f64 * 0.4 + c as f64).cos());
        (base + 0.1 * (rng.uniform() - 0.5)).clamp(0.0, 1.0)
    })
}

#[test]
fn psnr_identity_and_closed_form() {
    let a = textured(20, 16, 1);
    assert_eq!(psnr_y(&a, &a, 2).unwrap(), f64::INFINITY);

    // single-channel images are already luma
    let y = Image::from_fn(12, 12, 1, |_, yy, xx| 0.3 + 0.001 * (xx + yy) as f64);
    let shifted = Image::from_fn(12, 12, 1, |_, yy, xx| y.get(0, yy, xx) + 1.0 / 255.0);
    let p = psnr_y(&shifted, &y, 0).unwrap();
    assert!((p - 10.0 * (255.0f64 * 255.0).log10()).abs() < 1e-9, "{p}");
    assert!((p - 48.13).abs() < 0.01);

    assert!(psnr_y(&a, &textured(20, 15, 1), 2).is_err());
    assert!(psnr_y(&a, &a, 8).is_err());
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let a = textured(24, 24, 2);
    let mut last = f64::INFINITY;
    for amp in [0.01, 0.02, 0.05, 0.1] {
        let mut rng = Rng::new(3);
        let noisy = Image::from_fn(24, 24, 3, |c, y, x| a.get(c, y, x) + amp * (rng.uniform() - 0.5));
        let p = psnr_y(&noisy, &a, 0).unwrap();
        assert!(p < last);
        last = p;
    }
}

/// Direct SSIM: every 11x11 window position evaluated with an explicit 2-D
/// Gaussian, on 8-bit-scaled luma.
fn reference_ssim(a: &Image, b: &Image) -> f64 {
    let luma = |img: &Image, y: usize, x: usize| {
        16.0 + 65.481 * img.get(0, y, x) + 128.553 * img.get(1, y, x) + 24.966 * img.get(2, y, x)
    };
    let mut g = [[0.0f64; 11]; 11];
    let mut sum = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = ((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5);
            *v = (-d2).exp();
            sum += *v;
        }
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=a.height() - 11 {
        for x0 in 0..=a.width() - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let w = g[i][j] / sum;
                    let (p, q) = (luma(a, y0 + i, x0 + j), luma(b, y0 + i, x0 + j));
                    ma += w * p;
                    mb += w * q;
                    saa += w * p * p;
                    sbb += w * q * q;
                    sab += w * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_properties() {
    let a = textured(30, 26, 4);
    assert!((ssim_y(&a, &a, 0).unwrap() - 1.0).abs() < 1e-12);

    let b = textured(30, 26, 5);
    let ab = ssim_y(&a, &b, 0).unwrap();
    assert!((ab - ssim_y(&b, &a, 0).unwrap()).abs() < 1e-10);
    assert!((ab - reference_ssim(&a, &b)).abs() < 1e-10);
    assert!((-1.0..=1.0).contains(&ab));

    let inv = Image::from_fn(30, 26, 3, |c, y, x| 1.0 - a.get(c, y, x));
    let s = ssim_y(&inv, &a, 0).unwrap();
    assert!(s < 0.3, "{s}");
    assert!((s - reference_ssim(&inv, &a)).abs() < 1e-10);

    assert!(ssim_y(&textured(12, 12, 1), &textured(12, 12, 2), 1).is_err());
}

#[test]
fn metrics_ignore_the_shaved_border() {
    let a = textured(32, 28, 6);
    let b = textured(32, 28, 7);
    let shave = 3;
    let mut rng = Rng::new(8);
    let b2 = Image::from_fn(32, 28, 3, |c, y, x| {
        let border = y < shave || x < shave || y >= 28 - shave || x >= 32 - shave;
        if border {
            rng.uniform()
        } else {
            b.get(c, y, x)
        }
    });
    assert_eq!(psnr_y(&a, &b, shave).unwrap(), psnr_y(&a, &b2, shave).unwrap());
    assert_eq!(ssim_y(&a, &b, shave).unwrap(), ssim_y(&a, &b2, shave).unwrap());
}

#[test]
fn report_csv_has_one_row_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = EvalReport::new(2);
    r.push("bicubic", "only.png", f64::INFINITY, 1.0);
    let path = dir.path().join("report.csv");
    r.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,image,psnr_db,ssim");
    assert_eq!(lines.iter().filter(|l| l.contains("only.png")).count(), 1);
    assert!(lines[1].contains(",inf,"));
}

#[test]
fn timing_reports_median_and_mean() {
    let cfg = ModelConfig {
        width: 4,
        ..ModelConfig::default()
    };
    let m = DsrNet::<f32>::build(cfg, &mut Rng::new(1)).unwrap();
    let t = time_inference(&m, 8, 10, 2, 0).unwrap();
    assert_eq!(t.runs, 10);
    assert!(t.median_ms > 0.0 && t.mean_ms > 0.0);
    assert!(time_inference(&m, 8, 0, 2, 0).is_err());
    assert_eq!(median(&[5.0, 1.0, 4.0, 2.0, 3.0]), 3.0);
}
