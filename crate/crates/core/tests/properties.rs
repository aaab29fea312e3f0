use lipsde_core::dynamics::{integrate_expectation, layer_terms, NetworkTerms};
use lipsde_core::experiment::fmt_f64;
use lipsde_core::mlp::{
    per_sample_gradients, Loss, MlpSpec, MlpState, NoiseMode, PerSampleGradBatch, SupervisionNoise,
};
use lipsde_core::noise::{build_noise_model, NoiseModel};
use lipsde_core::oracle::{dense_hessian, well_gapped};
use lipsde_core::spectral::SpectralState;
use lipsde_core::tensor::{dot, gaussian_matrix, norm, svd, sym_eig, Matrix, Rng};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

/// Fixed case generation so the suite is reproducible run to run.
fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn gram_deviation(q: &Matrix) -> f64 {
    let g = q.t_matmul(q).unwrap();
    g.sub(&Matrix::identity(g.rows())).unwrap().max_abs()
}

fn random_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// `M` per-sample gradients of an `m × n` layer, stored densely.
fn dense_batch(rng: &mut Rng, m: usize, n: usize, batch: usize, scale: f64) -> PerSampleGradBatch {
    let cols = gaussian_matrix(rng, m * n, batch, scale);
    PerSampleGradBatch::dense(0, m, n, cols).unwrap()
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn svd_factors_are_orthonormal_and_reconstruct(
        rows in 1usize..=64,
        cols in 1usize..=64,
        rank_cap in 1usize..=64,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        // Products of thin factors exercise rank-deficient inputs too.
        let r = rank_cap.min(rows).min(cols);
        let a = gaussian_matrix(&mut rng, rows, r, 1.0)
            .matmul(&gaussian_matrix(&mut rng, r, cols, 1.0))
            .unwrap();
        let s = svd(&a).unwrap();
        prop_assert!(gram_deviation(&s.left) <= 1e-10);
        prop_assert!(gram_deviation(&s.right) <= 1e-10);
        let err = s.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
        prop_assert!(err <= 1e-8, "relative reconstruction error {}", err);
        prop_assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.singular_values.iter().all(|&x| x >= 0.0));
        prop_assert!(s.rank <= r);
        for i in 0..s.singular_values.len() {
            let u = s.u(i);
            let big = u.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            prop_assert!(big > 0.0 || big == 0.0 && u.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn gram_eigenvalues_are_squared_singular_values(
        batch in 2usize..=16,
        dim in 1usize..=20,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let omega = gaussian_matrix(&mut rng, batch, dim, 1.0);
        let mut gram = omega.matmul_t(&omega).unwrap();
        gram.scale(1.0 / batch as f64);
        let eig = sym_eig(&gram).unwrap();
        let s = svd(&omega.scaled(1.0 / (batch as f64).sqrt())).unwrap();
        for (i, &lambda) in eig.values.iter().enumerate() {
            let sq = s.singular_values.get(i).map_or(0.0, |x| x * x);
            prop_assert!((lambda - sq).abs() <= 1e-8, "{} vs {}", lambda, sq);
        }
    }

    #[test]
    fn seeded_streams_repeat(seed in any::<u64>(), stream in 0u64..8) {
        let mut a = Rng::derive(seed, stream);
        let mut b = Rng::derive(seed, stream);
        for _ in 0..64 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
            prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn noise_forms_are_psd_and_split_exactly(
        m in 1usize..=5,
        n in 1usize..=4,
        batch in 2usize..=16,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let nm = build_noise_model(&dense_batch(&mut rng, m, n, batch, 1.0)).unwrap();
        for _ in 0..4 {
            let x = random_vec(&mut rng, m * n);
            let q = nm.quadratic_form(&x).unwrap();
            prop_assert!(q >= 0.0);
            let diag: f64 = nm.variance_diagonal().iter().zip(&x).map(|(d, xi)| d * xi * xi).sum();
            let cov = nm.covariance_quadratic_form(&x).unwrap();
            prop_assert!((diag + cov - q).abs() <= 1e-12 * (1.0 + q.abs() + diag.abs()));
        }
    }

    #[test]
    fn omega_rows_are_centered(
        m in 1usize..=5,
        n in 1usize..=4,
        batch in 2usize..=16,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let nm = build_noise_model(&dense_batch(&mut rng, m, n, batch, 3.0)).unwrap();
        let rows = nm.omega_rows();
        let unscale = ((batch - 1) as f64).sqrt();
        for j in 0..rows.cols() {
            let s: f64 = rows.col(j).iter().sum::<f64>() * unscale;
            prop_assert!(s.abs() <= 1e-9, "column {} sums to {}", j, s);
        }
        let values = nm.gram_eigenvalues().unwrap();
        prop_assert!(values.iter().all(|&l| l >= 0.0));
        let positive = values.iter().filter(|&&l| l > 1e-10 * values[0]).count();
        prop_assert!(positive < batch);
    }

    #[test]
    fn forms_scale_quadratically(
        m in 1usize..=4,
        n in 1usize..=4,
        batch in 2usize..=12,
        c in 0.05f64..20.0,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let base = dense_batch(&mut rng, m, n, batch, 1.0);
        let scaled = PerSampleGradBatch::dense(0, m, n, base.to_dense_columns().scaled(c)).unwrap();
        let (a, b) = (build_noise_model(&base).unwrap(), build_noise_model(&scaled).unwrap());
        let x = random_vec(&mut rng, m * n);
        let y = random_vec(&mut rng, m * n);
        let qx = a.quadratic_form(&x).unwrap();
        let qy = a.quadratic_form(&y).unwrap();
        prop_assert!(rel_close(b.quadratic_form(&x).unwrap(), c * c * qx, 1e-10));
        // Cauchy-Schwarz bounds the bilinear form by the two quadratic ones.
        let bound = 1e-10 * c * c * (qx + qy + 1e-300);
        prop_assert!((b.bilinear_form(&x, &y).unwrap() - c * c * a.bilinear_form(&x, &y).unwrap()).abs() <= bound);
    }

    #[test]
    fn jacobian_has_unit_norm(rows in 1usize..=24, cols in 1usize..=24, seed in any::<u64>()) {
        let w = gaussian_matrix(&mut Rng::new(seed), rows, cols, 1.0);
        let ss = SpectralState::new(0, &w).unwrap();
        let j = ss.op_norm_jacobian().unwrap();
        prop_assert!((norm(&j) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn hessian_contraction_is_nonnegative(
        m in 1usize..=8,
        n in 1usize..=8,
        k in 1usize..=6,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let w = gaussian_matrix(&mut rng, m, n, 1.0);
        let ss = SpectralState::new(0, &w).unwrap();
        // Random PSD of rank at most k.
        let omega = gaussian_matrix(&mut rng, k, m * n, 1.0);
        let nm = NoiseModel::from_omega(0, m, n, &omega, k).unwrap();
        if let Some(h) = ss.noise_contractions(&nm).unwrap().hessian_sigma {
            prop_assert!(h >= -1e-12, "got {}", h);
        }
    }

    #[test]
    fn contractions_are_linear_in_sigma(
        m in 1usize..=4,
        n in 1usize..=4,
        alpha in 0.0f64..3.0,
        beta in 0.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let w = well_gapped(&mut rng, m, n, 0.05);
        let ss = SpectralState::new(0, &w).unwrap();
        let (o1, o2) = (gaussian_matrix(&mut rng, 3, m * n, 1.0), gaussian_matrix(&mut rng, 2, m * n, 1.0));
        let stacked = Matrix::from_fn(5, m * n, |i, j| {
            if i < 3 { alpha.sqrt() * o1[(i, j)] } else { beta.sqrt() * o2[(i - 3, j)] }
        });
        let batch = 4;
        let c = |o: &Matrix| {
            let nm = NoiseModel::from_omega(0, m, n, o, batch).unwrap();
            let c = ss.noise_contractions(&nm).unwrap();
            (c.hessian_sigma.unwrap(), c.jacobian_sigma_jacobian)
        };
        let ((h1, j1), (h2, j2), (h, j)) = (c(&o1), c(&o2), c(&stacked));
        let hs = alpha * h1 + beta * h2;
        let js = alpha * j1 + beta * j2;
        prop_assert!((h - hs).abs() <= 1e-10 * (1.0 + hs.abs()), "{} vs {}", h, hs);
        prop_assert!((j - js).abs() <= 1e-10 * (1.0 + js.abs()), "{} vs {}", j, js);
    }

    #[test]
    fn expectation_matches_closed_product(
        segments in prop::collection::vec((-2.0f64..2.0, 0.0f64..2.0, 0.0f64..1.0), 1..40),
        z0 in -3.0f64..3.0,
        eta in 1e-3f64..0.1,
    ) {
        let terms: Vec<NetworkTerms> = segments
            .iter()
            .map(|&(mu, kappa, lsq)| NetworkTerms::constant(mu, kappa, lsq))
            .collect();
        let points = integrate_expectation(&terms, z0, eta);
        let mut exponent = z0;
        for (p, &(mu, kappa, _)) in points.iter().zip(&segments) {
            exponent += (mu + kappa) * eta;
            prop_assert!(rel_close(p.e_k, exponent.exp(), 1e-12), "{} vs {}", p.e_k, exponent.exp());
        }
    }

    #[test]
    fn expectation_nondecreasing_under_nonnegative_drift(
        segments in prop::collection::vec((0.0f64..2.0, 0.0f64..2.0, 0.0f64..1.0), 1..40),
        eta in 1e-3f64..0.1,
    ) {
        let terms: Vec<NetworkTerms> = segments
            .iter()
            .map(|&(mu, kappa, lsq)| NetworkTerms::constant(mu, kappa, lsq))
            .collect();
        let points = integrate_expectation(&terms, 0.5, eta);
        prop_assert!(points[0].e_k >= 0.5f64.exp());
        prop_assert!(points.windows(2).all(|w| w[1].e_k >= w[0].e_k));
    }

    #[test]
    fn floats_round_trip(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
    }
}

proptest! {
    #![proptest_config(config(24))]

    // Roughly 0.2% of random draws put a cubic/quartic cancellation inside
    // the step range and fit a lower slope; the fixed seed keeps the case
    // set stable.
    #[test]
    fn second_order_taylor_residual_is_cubic(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let w = well_gapped(&mut rng, 5, 4, 0.2);
        let delta = gaussian_matrix(&mut rng, 5, 4, 1.0);
        let ss = SpectralState::new(0, &w).unwrap();
        let j = ss.directional_derivative(&delta).unwrap();
        let h = dense_hessian(&w).unwrap();
        let d = delta.as_slice();
        let quad = dot(d, &h.matvec(d).unwrap());
        let hs = [1e-2, 5e-3, 2e-3, 1e-3, 5e-4, 2e-4, 1e-4];
        let logs: Vec<(f64, f64)> = hs
            .iter()
            .map(|&hh| {
                let mut p = w.clone();
                p.axpy(hh, &delta).unwrap();
                let s = svd(&p).unwrap().sigma1();
                let r = (s - ss.sigma1() - hh * j - 0.5 * hh * hh * quad).abs();
                (hh.ln(), r.max(1e-300).ln())
            })
            .collect();
        // Least-squares slope.
        let n = logs.len() as f64;
        let (mx, my) = (logs.iter().map(|p| p.0).sum::<f64>() / n, logs.iter().map(|p| p.1).sum::<f64>() / n);
        let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        prop_assert!(slope >= 2.7, "slope {}", slope);
    }

    #[test]
    fn injected_gradient_scaling_law(rho in 0.05f64..1.0, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let spec = MlpSpec::from_widths(&[6, 8, 3]).unwrap();
        let state = MlpState::kaiming(&spec, &mut rng, 0.05);
        let x = gaussian_matrix(&mut rng, 6, 12, 1.0);
        let y: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let clean = SupervisionNoise::none();
        let mixed = SupervisionNoise { mode: NoiseMode::ZeroMix, rho, label_corruption_eps: 0.0 };
        let a = per_sample_gradients(&state, &x, &y, Loss::CrossEntropy, &clean, &mut Rng::new(0)).unwrap();
        let b = per_sample_gradients(&state, &x, &y, Loss::CrossEntropy, &mixed, &mut Rng::new(0)).unwrap();
        let (ga, gb) = (a.mean_gradients(), b.mean_gradients());
        for l in 0..spec.num_layers() {
            let ss = SpectralState::new(l, &state.weights[l]).unwrap();
            let ta = layer_terms(&ss, &build_noise_model(&a.layers[l]).unwrap(), &ga.weights[l], 0.05, None).unwrap();
            let tb = layer_terms(&ss, &build_noise_model(&b.layers[l]).unwrap(), &gb.weights[l], 0.05, None).unwrap();
            prop_assert!((tb.mu - rho.sqrt() * ta.mu).abs() <= 1e-12 * (1.0 + ta.mu.abs()));
            prop_assert!((tb.kappa - rho * ta.kappa).abs() <= 1e-12 * (1.0 + ta.kappa.abs()));
            prop_assert!((tb.lambda_sq - rho * ta.lambda_sq).abs() <= 1e-12 * (1.0 + ta.lambda_sq.abs()));
        }
    }

    #[test]
    fn single_layer_relu_net_is_homogeneous(c in 0.01f64..50.0, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let spec = MlpSpec::from_widths(&[5, 3]).unwrap();
        let w = gaussian_matrix(&mut rng, 3, 5, 1.0);
        let x = gaussian_matrix(&mut rng, 5, 7, 1.0);
        let net = |w: Matrix| MlpState::from_parts(&spec, vec![w], vec![vec![0.0; 3]], 0.1).unwrap();
        let (base, _) = net(w.clone()).forward(&x).unwrap();
        let (scaled, _) = net(w.scaled(c)).forward(&x).unwrap();
        let err = scaled.sub(&base.scaled(c)).unwrap().max_abs();
        prop_assert!(err <= 1e-12 * c * (1.0 + base.max_abs()));
    }
}
