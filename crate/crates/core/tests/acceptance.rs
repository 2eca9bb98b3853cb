//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per check; exits nonzero if any check fails.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use halfspec::codec::{self, decode_indices, encode_indices, CompressedArchive, DecompressMode};
use halfspec::condgp::{
    conditional_expectation, conditional_loglik, conditional_simulation_from_noise, marginal_loglik,
    maximize_log_kappa, FrequencyPartition,
};
use halfspec::evalmetrics::{contrast_variances, map_correlation, rmspe};
use halfspec::gridio::{pixel_area_weights, Grid, TimeCube};
use halfspec::select::SelectionConfig;
use halfspec::spde::{build_mesh, PrecisionOperator};
use halfspec::spectral::{forward_dft_all, half_len, inverse_dft_values, is_real_frequency, periodogram, SpectralField};
use halfspec::specmodel::{fit_theta_whittle, SpectralBasis};
use halfspec::synthgen::{generate, GeneratorSpec};
use halfspec::Complex64;
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn normals(rng: &mut ChaCha20Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn operator(n_lat: usize, n_lon: usize) -> Result<PrecisionOperator, Box<dyn std::error::Error>> {
    let mesh = build_mesh(&Grid::global(n_lat, n_lon, false)?)?;
    Ok(PrecisionOperator::new(&mesh)?)
}

/// Complex draw with real and imaginary parts each of covariance Q^{-1}/2.
fn complex_draw(op: &PrecisionOperator, kappa: f64, rng: &mut ChaCha20Rng) -> Result<Vec<Complex64>, Box<dyn std::error::Error>> {
    let factor = op.factor(kappa)?;
    let n = op.n();
    let re = factor.sample(&normals(rng, n, 0.5f64.sqrt()))?;
    let im = factor.sample(&normals(rng, n, 0.5f64.sqrt()))?;
    Ok(re.into_iter().zip(im).map(|(a, b)| Complex64::new(a, b)).collect())
}

fn random_partition(n: usize, n_stored: usize, rng: &mut ChaCha20Rng) -> Result<FrequencyPartition, Box<dyn std::error::Error>> {
    let mut stored = sample(rng, n, n_stored).into_vec();
    stored.sort_unstable();
    Ok(FrequencyPartition::new(n, stored)?)
}

fn dense_inverse(op: &PrecisionOperator, kappa: f64) -> Result<DMatrix<f64>, Box<dyn std::error::Error>> {
    let q = op.assemble(kappa)?.matrix.to_dense();
    Ok(q.cholesky().ok_or("Q not positive definite")?.inverse())
}

fn block(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn dft_oracle() -> Outcome {
    let grid = Grid::global(16, 32, false)?;
    let t = 64;
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let values: Vec<f32> = (0..grid.n_pixels() * t).map(|_| rng.random_range(-50.0..50.0)).collect();
    let cube = TimeCube::new(grid, t, values.clone())?;

    let start = Instant::now();
    let field = forward_dft_all(&cube);
    let back = inverse_dft_values(&field)?;
    let elapsed = start.elapsed().as_secs_f64();

    let kk = half_len(t);
    let norm = 1.0 / (t as f64).sqrt();
    let (mut err, mut scale) = (0.0f64, 0.0f64);
    for p in 0..cube.n_pixels() {
        let series = cube.series(p);
        for k in 0..kk {
            let mut direct = Complex64::new(0.0, 0.0);
            for (i, &y) in series.iter().enumerate() {
                let w = -2.0 * PI * (k * (i + 1)) as f64 / t as f64;
                direct += Complex64::from_polar(f64::from(y), w);
            }
            direct *= norm;
            err = err.max((field.get(p, k) - direct).norm());
            scale = scale.max(direct.norm());
        }
    }
    let fwd = err / scale;
    let ymax = values.iter().fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
    let inv = values.iter().zip(&back).map(|(&a, b)| (f64::from(a) - b).abs()).fold(0.0, f64::max) / ymax;
    let pass = fwd < 1e-6 && inv < 1e-6 && elapsed < 5.0;
    Ok((pass, format!("forward rel err {fwd:.2e}, round trip rel err {inv:.2e}, {elapsed:.3}s")))
}

fn conditioning_identity() -> Outcome {
    let start = Instant::now();
    let op = operator(12, 24)?;
    let n = op.n();
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    let part = random_partition(n, 50, &mut rng)?;
    let z1: Vec<Complex64> = (0..50)
        .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let mut worst = 0.0f64;
    for kappa in [1.0, 10.0, 100.0] {
        let got = conditional_expectation(&op, kappa, &part, &z1)?;
        let sigma = dense_inverse(&op, kappa)?;
        let s11 = block(&sigma, part.stored(), part.stored());
        let s21 = block(&sigma, part.unstored(), part.stored());
        let chol = s11.cholesky().ok_or("stored covariance not positive definite")?;
        let re = DVector::from_iterator(50, z1.iter().map(|c| c.re));
        let im = DVector::from_iterator(50, z1.iter().map(|c| c.im));
        let (kr, ki) = (&s21 * chol.solve(&re), &s21 * chol.solve(&im));
        let mut diff = 0.0f64;
        let mut size = 0.0f64;
        for (i, g) in got.iter().enumerate() {
            diff += (g - Complex64::new(kr[i], ki[i])).norm_sqr();
            size += kr[i] * kr[i] + ki[i] * ki[i];
        }
        worst = worst.max((diff / size).sqrt());
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok((worst < 1e-8 && elapsed < 10.0, format!("max rel err {worst:.2e}, {elapsed:.2}s")))
}

fn simulation_law() -> Outcome {
    let start = Instant::now();
    let op = operator(12, 24)?;
    let n = op.n();
    let kappa = 5.0;
    let mut rng = ChaCha20Rng::seed_from_u64(31);
    let m = 80;
    let part = random_partition(n, n - m, &mut rng)?;
    let factor = op.plan(part.unstored())?.factor(&op, kappa)?;
    let zero = vec![Complex64::new(0.0, 0.0); m];
    let draws = 20_000;
    let mut cre = DMatrix::<f64>::zeros(m, m);
    let mut cim = DMatrix::<f64>::zeros(m, m);
    let h = 0.5f64.sqrt();
    for _ in 0..draws {
        let e = conditional_simulation_from_noise(&factor, &zero, &normals(&mut rng, m, h), &normals(&mut rng, m, h))?;
        let re = DVector::from_iterator(m, e.iter().map(|c| c.re));
        let im = DVector::from_iterator(m, e.iter().map(|c| c.im));
        // E[e e^H] = E[re reᵀ + im imᵀ] + i E[im reᵀ − re imᵀ]
        cre += &re * re.transpose() + &im * im.transpose();
        cim += &im * re.transpose() - &re * im.transpose();
    }
    cre /= draws as f64;
    cim /= draws as f64;
    let q22 = block(&op.assemble(kappa)?.matrix.to_dense(), part.unstored(), part.unstored());
    let target = q22.cholesky().ok_or("Q22 not positive definite")?.inverse();
    let err_re = (&cre - &target).abs().max();
    let err_im = cim.abs().max();
    let err = err_re.max(err_im);
    let elapsed = start.elapsed().as_secs_f64();
    Ok((
        err < 0.05 && elapsed < 60.0,
        format!("{m} unstored, {draws} draws, max entry err {err:.4}, {elapsed:.1}s"),
    ))
}

fn gaussian_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64, Box<dyn std::error::Error>> {
    let chol = cov.clone().cholesky().ok_or("covariance not positive definite")?;
    let r = x - mean;
    let quad = r.dot(&chol.solve(&r));
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (x.len() as f64 * (2.0 * PI).ln() + logdet + quad))
}

fn likelihood_oracle() -> Outcome {
    let op = operator(12, 24)?;
    let n = op.n();
    let mut rng = ChaCha20Rng::seed_from_u64(41);
    let part = random_partition(n, 60, &mut rng)?;
    let (s, u) = (part.stored(), part.unstored());
    let m = u.len() as f64;
    let log_f: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let d: Vec<f64> = log_f.iter().map(|l| (0.5 * l).exp()).collect();
    let z_true = complex_draw(&op, 4.0, &mut rng)?;
    let real_z: Vec<Complex64> = z_true.iter().map(|c| Complex64::new(c.re * 2f64.sqrt(), 0.0)).collect();

    // Dense conditional law of Y2 | Y1 with Y = diag(√f) Z, Z ~ N(0, Σ).
    let dense_conditional = |kappa: f64, y: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>), Box<dyn std::error::Error>> {
        let sigma = dense_inverse(&op, kappa)?;
        let sy = DMatrix::from_fn(n, n, |i, j| d[i] * sigma[(i, j)] * d[j]);
        let c11 = block(&sy, s, s).cholesky().ok_or("Σ11 not positive definite")?;
        let s21 = block(&sy, u, s);
        let y1 = DVector::from_iterator(s.len(), s.iter().map(|&i| y[i]));
        let y2 = DVector::from_iterator(u.len(), u.iter().map(|&i| y[i]));
        let mean = &s21 * c11.solve(&y1);
        let cov = block(&sy, u, u) - &s21 * c11.solve(&s21.transpose());
        Ok((mean, cov, y2))
    };

    let kappas = [0.5, 2.0, 5.0, 20.0, 80.0];
    let mut real_offsets = Vec::new();
    let mut complex_offsets = Vec::new();
    for &kappa in &kappas {
        // real coefficients: exact Gaussian density
        let y = DVector::from_iterator(n, (0..n).map(|i| d[i] * real_z[i].re));
        let (mean, cov, y2) = dense_conditional(kappa, &y)?;
        let dense = gaussian_logpdf(&y2, &mean, &cov)?;
        real_offsets.push(conditional_loglik(&op, kappa, &part, &real_z, &log_f)? - dense);

        // complex coefficients: circular normal with covariance Σ22|1
        let yr = DVector::from_iterator(n, (0..n).map(|i| d[i] * z_true[i].re));
        let yi = DVector::from_iterator(n, (0..n).map(|i| d[i] * z_true[i].im));
        let (mr, cov, y2r) = dense_conditional(kappa, &yr)?;
        let (mi, _, y2i) = dense_conditional(kappa, &yi)?;
        let chol = cov.cholesky().ok_or("conditional covariance not positive definite")?;
        let (rr, ri) = (y2r - mr, y2i - mi);
        let quad = rr.dot(&chol.solve(&rr)) + ri.dot(&chol.solve(&ri));
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_cn = -m * PI.ln() - logdet - quad;
        complex_offsets.push(conditional_loglik(&op, kappa, &part, &z_true, &log_f)? - 0.5 * log_cn);
    }
    let spread = |v: &[f64]| v.iter().map(|x| (x - v[0]).abs()).fold(0.0, f64::max);
    let (sr, sc) = (spread(&real_offsets), spread(&complex_offsets));
    // the offsets are the dropped normalizing constants
    let er = (real_offsets[0] - 0.5 * m * (2.0 * PI).ln()).abs();
    let ec = (complex_offsets[0] - 0.5 * m * PI.ln()).abs();
    let pass = sr < 1e-6 && sc < 1e-6;
    Ok((
        pass,
        format!("offset spread real {sr:.2e} complex {sc:.2e} over {} kappas; offset vs constant {er:.1e}/{ec:.1e}", kappas.len()),
    ))
}

fn whittle_recovery() -> Outcome {
    let t = 365;
    let kk = half_len(t);
    let n_pixels = 100;
    let u: [Vec<f64>; 3] = std::array::from_fn(|j| {
        (0..kk).map(|k| ((j + 1) as f64 * PI * k as f64 / (kk - 1) as f64).cos()).collect()
    });
    let u0: Vec<f64> = (0..kk).map(|k| 0.5 * (2.0 * PI * k as f64 / t as f64).cos()).collect();
    let basis = SpectralBasis { u0, u };
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let truth: Vec<[f64; 3]> = (0..n_pixels)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
        .collect();
    // coefficients with the target density, then to series and back
    let mut field = SpectralField::zeros(n_pixels, t);
    for (p, th) in truth.iter().enumerate() {
        for k in 0..kk {
            let sd = basis.log_density(th, k).exp().sqrt();
            let c = if is_real_frequency(k, t) {
                Complex64::new(sd * rng.sample::<f64, _>(StandardNormal), 0.0)
            } else {
                let h = sd * 0.5f64.sqrt();
                Complex64::new(h * rng.sample::<f64, _>(StandardNormal), h * rng.sample::<f64, _>(StandardNormal))
            };
            field.set(p, k, c);
        }
    }
    let series = inverse_dft_values(&field)?;
    let cube = TimeCube::new(
        Grid::global(10, 10, false)?,
        t,
        series.iter().map(|&v| v as f32).collect(),
    )?;
    let pg = periodogram(&forward_dft_all(&cube));
    let mut abs_err = [0.0f64; 3];
    let mut max_grad = 0.0f64;
    for (p, th) in truth.iter().enumerate() {
        let fit = fit_theta_whittle(&pg[p * kk..(p + 1) * kk], &basis, t)?;
        max_grad = max_grad.max(fit.grad_norm);
        for j in 0..3 {
            abs_err[j] += (fit.theta[j] - th[j]).abs() / n_pixels as f64;
        }
    }
    let pass = abs_err.iter().all(|&e| e < 0.1) && max_grad < 1e-8;
    Ok((
        pass,
        format!(
            "mean |error| per component [{:.3}, {:.3}, {:.3}], max gradient norm {max_grad:.1e}",
            abs_err[0], abs_err[1], abs_err[2]
        ),
    ))
}

fn kappa_recovery() -> Outcome {
    let op = operator(19, 36)?;
    let n = op.n();
    let truth = 10.0;
    let mut rng = ChaCha20Rng::seed_from_u64(61);
    let fields: Vec<Vec<Complex64>> = (0..4).map(|_| complex_draw(&op, truth, &mut rng)).collect::<Result<_, _>>()?;
    let log_f = vec![0.0; n];
    let marginal = maximize_log_kappa(1.0, |kappa| {
        fields.iter().map(|z| marginal_loglik(&op, kappa, z, &log_f)).sum()
    })?;
    let parts: Vec<FrequencyPartition> = (0..fields.len())
        .map(|_| random_partition(n, (0.3 * n as f64).round() as usize, &mut rng))
        .collect::<Result<_, _>>()?;
    let conditional = maximize_log_kappa(1.0, |kappa| {
        fields
            .iter()
            .zip(&parts)
            .map(|(z, part)| conditional_loglik(&op, kappa, part, z, &log_f))
            .sum()
    })?;
    let (rm, rc) = (marginal.kappa / truth - 1.0, conditional.kappa / truth - 1.0);
    let pass = rm.abs() <= 0.2 && rc.abs() <= 0.3;
    Ok((
        pass,
        format!(
            "marginal {:.3} ({:+.1}%), conditional {:.3} ({:+.1}%)",
            marginal.kappa,
            100.0 * rm,
            conditional.kappa,
            100.0 * rc
        ),
    ))
}

fn variance_normalization() -> Outcome {
    let op = operator(36, 72)?;
    let n = op.n();
    let factor = op.factor(30.0)?;
    // diagonal of Q^{-1}, one column at a time
    let mut total = 0.0;
    let mut e = vec![0.0; n];
    for i in 0..n {
        e[i] = 1.0;
        total += factor.solve(&e)?[i];
        e[i] = 0.0;
    }
    let mean = total / n as f64;
    Ok(((0.8..=1.2).contains(&mean), format!("{n} vertices, mean marginal variance {mean:.4}")))
}

fn saturation() -> Outcome {
    let cube = generate(&GeneratorSpec::new(16, 32, 64, 2))?;
    let archive = match codec::compress(&cube, &SelectionConfig::sequential(1.05), 0) {
        Ok(a) => a,
        Err(e) => return Ok((false, format!("compression failed: {e}"))),
    };
    let capacity = archive.header.capacity();
    let value_bytes: usize = 4 * cube.n_pixels() * cube.n_time();
    let out = codec::decompress(&archive, DecompressMode::Mean, 0)?;
    let err = cube.values().iter().zip(out.values()).map(|(a, b)| f64::from((a - b).abs())).fold(0.0, f64::max);
    let rel = err / cube.data_range();
    Ok((
        rel < 1e-3,
        format!(
            "max abs err {rel:.2e} of range; stored {} of {} pairs; capacity {capacity} B vs {value_bytes} B of values alone",
            archive.n_pairs(),
            cube.n_pixels() * half_len(cube.n_time())
        ),
    ))
}

struct Ladder {
    cube: TimeCube,
    archives: Vec<(f64, CompressedArchive)>,
}

fn ladder() -> Result<Ladder, Box<dyn std::error::Error>> {
    let cube = generate(&GeneratorSpec::new(32, 64, 128, 1))?;
    let mut archives = Vec::new();
    for ratio in [20.0, 10.0, 5.0] {
        let start = Instant::now();
        let archive = codec::compress(&cube, &SelectionConfig::sequential(ratio), 0)?;
        println!("  compressed at {ratio}:1 in {:.1}s", start.elapsed().as_secs_f64());
        archives.push((ratio, archive));
    }
    Ok(Ladder { cube, archives })
}

fn budget_bound(l: &Ladder) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (ratio, archive) in &l.archives {
        let bytes = archive.to_bytes()?.len();
        let cap = (4 * l.cube.n_pixels() * l.cube.n_time()) as f64 / ratio;
        let report = codec::inspect(archive)?;
        pass &= bytes <= cap.floor() as usize && report.total_bytes == bytes;
        parts.push(format!("{ratio}:1 {bytes}/{} B {:.2} bits/pair", cap.floor(), report.bits_per_pair));
    }
    Ok((pass, parts.join("; ")))
}

fn monotone_fidelity(l: &Ladder) -> Outcome {
    let w = pixel_area_weights(l.cube.grid());
    let mut values = Vec::new();
    for (_, archive) in &l.archives {
        let out = codec::decompress(archive, DecompressMode::Mean, 0)?;
        values.push(rmspe(&l.cube, &out, &w, None)?.all);
    }
    let pass = values.windows(2).all(|p| p[1] < p[0]);
    Ok((pass, format!("RMSPE 20:1 {:.4}, 10:1 {:.4}, 5:1 {:.4}", values[0], values[1], values[2])))
}

fn contrast_fidelity(l: &Ladder) -> Outcome {
    let archive = &l.archives.iter().find(|(r, _)| *r == 5.0).ok_or("missing 5:1 archive")?.1;
    let sim = codec::decompress(archive, DecompressMode::Simulate, 17)?;
    let a = contrast_variances(&l.cube)?.log();
    let b = contrast_variances(&sim)?.log();
    let c = [
        map_correlation(&a.north_south, &b.north_south).unwrap_or(f64::NAN),
        map_correlation(&a.east_west, &b.east_west).unwrap_or(f64::NAN),
        map_correlation(&a.temporal, &b.temporal).unwrap_or(f64::NAN),
    ];
    let pass = c.iter().all(|&r| r > 0.9);
    Ok((pass, format!("log contrast correlation NS {:.3}, EW {:.3}, temporal {:.3}", c[0], c[1], c[2])))
}

fn index_codec() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(121);
    let n = 1000;
    let t_max = 64;
    for _ in 0..10_000 {
        let count = rng.random_range(0..200);
        let mut keys = sample(&mut rng, n * t_max, count).into_vec();
        keys.sort_unstable();
        let pairs: Vec<(usize, usize)> = keys.iter().map(|&key| (key / n, key % n)).collect();
        let bytes = encode_indices(&pairs, n)?;
        if decode_indices(&bytes, pairs.len(), n)? != pairs {
            return Ok((false, "round trip mismatch".into()));
        }
    }
    let dense: Vec<(usize, usize)> = (0..4).flat_map(|k| (0..n).map(move |p| (k, p))).collect();
    let bits = 8.0 * encode_indices(&dense, n)?.len() as f64 / dense.len() as f64;
    Ok((bits <= 8.5, format!("10000 lists exact; dense run {bits:.3} bits/pair")))
}

fn determinism() -> Outcome {
    let cube = generate(&GeneratorSpec::new(8, 16, 32, 3))?;
    let config = SelectionConfig::sequential(3.0);
    let run = |threads: usize| -> Result<(Vec<u8>, Vec<f32>), String> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
        pool.install(|| {
            let archive = codec::compress(&cube, &config, 9).map_err(|e| e.to_string())?;
            let sim = codec::decompress(&archive, DecompressMode::Simulate, 4).map_err(|e| e.to_string())?;
            Ok((archive.to_bytes().map_err(|e| e.to_string())?, sim.into_values()))
        })
    };
    let a = run(1)?;
    let b = run(1)?;
    let c = run(3)?;
    let same = |x: &(Vec<u8>, Vec<f32>), y: &(Vec<u8>, Vec<f32>)| {
        x.0 == y.0 && x.1.iter().zip(&y.1).all(|(p, q)| p.to_bits() == q.to_bits()) && x.1.len() == y.1.len()
    };
    let pass = same(&a, &b) && same(&a, &c);
    Ok((pass, format!("archive {} B; repeat and 1 vs 3 threads identical: {pass}", a.0.len())))
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |name: &str, outcome: Outcome| {
        match outcome {
            Ok((true, detail)) => println!("PASS {name}: {detail}"),
            Ok((false, detail)) => {
                failures += 1;
                println!("FAIL {name}: {detail}");
            }
            Err(e) => {
                failures += 1;
                println!("FAIL {name}: error: {e}");
            }
        }
    };
    report("dft_oracle", dft_oracle());
    report("conditioning_identity", conditioning_identity());
    report("simulation_law", simulation_law());
    report("likelihood_oracle", likelihood_oracle());
    report("whittle_recovery", whittle_recovery());
    report("kappa_recovery", kappa_recovery());
    report("variance_normalization", variance_normalization());
    report("saturation_lossless", saturation());
    match ladder() {
        Ok(l) => {
            report("budget_bound", budget_bound(&l));
            report("monotone_fidelity", monotone_fidelity(&l));
            report("contrast_fidelity", contrast_fidelity(&l));
        }
        Err(e) => {
            for name in ["budget_bound", "monotone_fidelity", "contrast_fidelity"] {
                report(name, Err(format!("building archives: {e}").into()));
            }
        }
    }
    report("index_codec", index_codec());
    report("determinism", determinism());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} check(s) failed");
        ExitCode::FAILURE
    }
}
