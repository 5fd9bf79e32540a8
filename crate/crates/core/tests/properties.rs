//! Property-based checks of the numerical kernels and data contracts.

use amber_afno::afno::{afno3d_forward, soft_shrink, AfnoConfig, AfnoWeights};
use amber_afno::data_io::{make_splits, read_mask, read_volume, write_mask, write_volume};
use amber_afno::loss::{hybrid_loss, one_hot};
use amber_afno::metrics::{dsc, hd95, LabelMask};
use amber_afno::ops::activation::softmax_channels;
use amber_afno::ops::conv::{conv3d, conv3d_transposed, ConvSpec};
use amber_afno::ops::norm::layer_norm;
use amber_afno::ops::upsample::upsample_trilinear;
use amber_afno::spectral::{irfft3, irfft3_adjoint, rfft3, rfft3_adjoint, FftPlan3};
use amber_afno::tensor::{ComplexTensor, Tensor};
use num_complex::Complex;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn volume(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn spectrum(shape: &[usize], seed: u64) -> ComplexTensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ComplexTensor::from_fn(shape, |_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

fn fft_shape() -> impl Strategy<Value = [usize; 5]> {
    (
        1usize..=2,
        prop::sample::select(vec![1usize, 2, 3, 4, 8]),
        prop::sample::select(vec![1usize, 2, 3, 4, 8]),
        prop::sample::select(vec![2usize, 4, 8]),
        1usize..=3,
    )
        .prop_map(|(b, d, h, w, c)| [b, d, h, w, c])
}

/// Full complex inverse DFT of the Hermitian-expanded half spectrum of one
/// `(1, D, H, Wf, 1)` volume.
fn full_inverse_dft(spec: &ComplexTensor<f64>, w: usize) -> Vec<f64> {
    let s = spec.shape();
    let (d, h, wf) = (s[1], s[2], s[3]);
    let at = |kd: usize, kh: usize, kw: usize| -> Complex<f64> {
        if kw < wf {
            spec.data()[(kd * h + kh) * wf + kw]
        } else {
            spec.data()[(((d - kd) % d) * h + (h - kh) % h) * wf + (w - kw)].conj()
        }
    };
    let tau = std::f64::consts::TAU;
    let n = (d * h * w) as f64;
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut acc = Complex::new(0.0, 0.0);
                for kd in 0..d {
                    for kh in 0..h {
                        for kw in 0..w {
                            let ph = tau
                                * ((kd * z) as f64 / d as f64 + (kh * y) as f64 / h as f64 + (kw * x) as f64 / w as f64);
                            acc += at(kd, kh, kw) * Complex::from_polar(1.0, ph);
                        }
                    }
                }
                out.push(acc.re / n);
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn fft_round_trip(shape in fft_shape(), seed in any::<u64>()) {
        let x = volume(&shape, seed);
        let back = irfft3(&rfft3(&x).unwrap(), shape[3]).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-10);
    }

    #[test]
    fn fft_linearity(shape in fft_shape(), seed in any::<u64>(), a in -3.0f64..3.0) {
        let x = volume(&shape, seed);
        let y = volume(&shape, seed ^ 1);
        let lhs = rfft3(&x.scale(a).add(&y).unwrap()).unwrap();
        let fx = rfft3(&x).unwrap();
        let fy = rfft3(&y).unwrap();
        let rhs = fx.zip_map(&fy, |p, q| p * a + q).unwrap();
        let scale = rhs.data().iter().map(|v| v.norm()).fold(1.0, f64::max);
        prop_assert!(lhs.max_abs_diff_c(&rhs).unwrap() / scale < 1e-10);
    }

    #[test]
    fn parseval(shape in fft_shape(), seed in any::<u64>()) {
        let x = volume(&shape, seed);
        let f = rfft3(&x).unwrap();
        let (w, wf) = (shape[3], shape[3] / 2 + 1);
        let c = shape[4];
        let v = (shape[1] * shape[2] * w) as f64;
        let energy: f64 = f.data().iter().enumerate().map(|(i, z)| {
            let kw = (i / c) % wf;
            let m = if kw == 0 || 2 * kw == w { 1.0 } else { 2.0 };
            m * z.norm_sqr()
        }).sum();
        let direct: f64 = x.data().iter().map(|v| v * v).sum();
        prop_assert!((energy / v - direct).abs() / direct < 1e-10);
    }

    #[test]
    fn hermitian_reconstruction(d in prop::sample::select(vec![1usize, 2, 3, 4]),
                                h in prop::sample::select(vec![1usize, 2, 3, 4]),
                                w in prop::sample::select(vec![2usize, 4]),
                                seed in any::<u64>()) {
        let x = volume(&[1, d, h, w, 1], seed);
        let f = rfft3(&x).unwrap();
        let full = full_inverse_dft(&f, w);
        let half = irfft3(&f, w).unwrap();
        for (a, b) in full.iter().zip(half.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn fft_adjoint_identities(shape in fft_shape(), seed in any::<u64>()) {
        let [b, d, h, w, c] = shape;
        let plan = FftPlan3::<f64>::new([d, h, w]).unwrap();
        let x = volume(&shape, seed);
        let yh = spectrum(&[b, d, h, w / 2 + 1, c], seed ^ 2);
        let lhs: f64 = rfft3(&x).unwrap().data().iter().zip(yh.data()).map(|(p, q)| (p.conj() * q).re).sum();
        let rhs = x.dot(&rfft3_adjoint(&plan, &yh).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));

        // irfft3 only reads Hermitian-consistent content, so probe it with
        // spectra of real volumes
        let z = rfft3(&volume(&shape, seed ^ 3)).unwrap();
        let g = volume(&shape, seed ^ 4);
        let lhs = irfft3(&z, w).unwrap().dot(&g).unwrap();
        let rhs: f64 = z.data().iter().zip(irfft3_adjoint(&plan, &g).unwrap().data()).map(|(p, q)| (p.conj() * q).re).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    #[test]
    fn zero_weight_afno_is_identity(shape in fft_shape(), k in prop::sample::select(vec![1usize, 2, 4]), seed in any::<u64>()) {
        let c = 4;
        let shape = [shape[0], shape[1], shape[2], shape[3], c];
        let cfg = AfnoConfig::new(c, k);
        let x = volume(&shape, seed);
        prop_assert_eq!(afno3d_forward(&x, &cfg, &AfnoWeights::zeros(&cfg)).unwrap(), x);
    }

    #[test]
    fn soft_shrink_never_grows(seed in any::<u64>(), lambda in 0.0f64..1.0) {
        let s = spectrum(&[1, 2, 2, 2, 3], seed);
        let out = soft_shrink(&s, lambda);
        for (a, b) in s.data().iter().zip(out.data()) {
            prop_assert!(b.re.abs() <= a.re.abs() && b.im.abs() <= a.im.abs());
            prop_assert!(b.re == 0.0 || b.re.signum() == a.re.signum());
        }
    }

    #[test]
    fn conv_shapes_follow_formula(n in 1usize..10, k in 1usize..4, s in 1usize..3, p in 0usize..2) {
        prop_assume!(n + 2 * p >= k);
        let spec = ConvSpec::cube(k, s, p, 2, 3);
        let x = volume(&[1, n, n, n, 2], 0);
        let w = volume(&spec.weight_shape(), 1);
        let y = conv3d(&x, &w, None, &spec).unwrap();
        let o = (n + 2 * p - k) / s + 1;
        prop_assert_eq!(y.shape(), &[1, o, o, o, 3]);
    }

    #[test]
    fn transposed_conv_is_the_adjoint(n in 2usize..6, k in 1usize..4, s in 1usize..3, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let spec = ConvSpec::cube(k, s, 0, 2, 3);
        let x = volume(&[1, n, n + 1, n, 2], seed);
        let w = volume(&spec.weight_shape(), seed ^ 1);
        let y = conv3d(&x, &w, None, &spec).unwrap();
        let g = volume(y.shape(), seed ^ 2);
        let adj = spec.adjoint();
        // the adjoint reads the forward kernel laid out as (K, Cout, Cin)
        let wt = Tensor::from_fn(&adj.transposed_weight_shape(), |i| w.data()[i]);
        let back = conv3d_transposed(&g, &wt, None, &adj).unwrap();
        prop_assume!(back.shape() == x.shape());
        let lhs = y.dot(&g).unwrap();
        let rhs = x.dot(&back).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn layer_norm_standardizes(seed in any::<u64>(), c in 2usize..16) {
        let x = volume(&[1, 2, 2, 2, c], seed).scale(5.0);
        let y = layer_norm(&x, &vec![1.0; c], &vec![0.0; c], 1e-12).unwrap();
        for row in y.data().chunks_exact(c) {
            let m = row.iter().sum::<f64>() / c as f64;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / c as f64;
            prop_assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), c in 1usize..6) {
        let x = volume(&[2, 2, 1, 2, c], seed).scale(30.0);
        let p = softmax_channels(&x);
        for row in p.data().chunks_exact(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn upsampling_keeps_constants(v in -5.0f64..5.0, d in 1usize..4, t in 1usize..7) {
        let x = Tensor::full(&[1, d, d + 1, 2, 2], v);
        let y = upsample_trilinear(&x, [d + t - 1, d + t, 2 + t]).unwrap();
        prop_assert!(y.data().iter().all(|&a| (a - v).abs() < 1e-12));
        prop_assert_eq!(upsample_trilinear(&x, [d, d + 1, 2]).unwrap(), x);
    }

    #[test]
    fn loss_is_bounded_below(seed in any::<u64>(), j in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = LabelMask::new([2, 2, 2], (0..8).map(|_| rng.random_range(0..j as u8)).collect(), j).unwrap();
        let g: Tensor<f64> = one_hot(&[m], j).unwrap();
        let p = softmax_channels(&volume(&[1, 2, 2, 2, j], seed).scale(4.0));
        let eps = 1e-5;
        let l = hybrid_loss(&p, &g, eps).unwrap();
        // the only negative contribution is the eps inside the logarithm
        prop_assert!(l >= -(1.0f64 + eps).ln() - 1e-12);
    }

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>(), d in 1usize..6, h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = d * h * w;
        let a: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let s = [d, h, w];
        prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&dsc(&a, &b).unwrap()));
        prop_assert_eq!(hd95(&a, &b, s, [1.0; 3]).unwrap(), hd95(&b, &a, s, [1.0; 3]).unwrap());
        if a.iter().any(|&v| v) {
            prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
            prop_assert_eq!(hd95(&a, &a, s, [1.0; 3]).unwrap(), Some(0.0));
        }
    }

    #[test]
    fn splits_partition_indices(n in 2usize..300, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let expected_train = (n as f64 * frac).round() as usize;
        prop_assume!(expected_train >= 1 && expected_train < n);
        let (tr, te) = make_splits(n, frac, seed).unwrap();
        prop_assert_eq!(tr.len(), expected_train);
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn volume_files_round_trip(seed in any::<u64>(), d in 1usize..5, h in 1usize..5, w in 1usize..5) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vol: Tensor<f32> = Tensor::from_fn(&[1, d, h, w, 1], |_| rng.random::<f32>() * 1e3 - 5e2);
        let stem = dir.path().join("v");
        write_volume(&stem, &vol, [1.0, 2.0, 0.5]).unwrap();
        let (back, header) = read_volume(&stem).unwrap();
        prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        vol.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(header.spacing, [1.0, 2.0, 0.5]);
        let mask = LabelMask::new([d, h, w], (0..d * h * w).map(|_| rng.random_range(0..3u8)).collect(), 3).unwrap();
        write_mask(&dir.path().join("m"), &mask, [1.0; 3]).unwrap();
        prop_assert_eq!(read_mask(&dir.path().join("m")).unwrap().0, mask);
    }
}
