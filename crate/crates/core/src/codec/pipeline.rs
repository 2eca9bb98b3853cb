use std::fmt;

use num_complex::Complex64;
use rayon::prelude::*;

use super::archive::{ArchiveHeader, CompressedArchive};
use crate::condgp::{conditional_expectation_with, conditional_simulation, FrequencyPartition};
use crate::gridio::{pixel_area_weights, TimeCube};
use crate::rng::{frequency_rng, realization_seed};
use crate::select::{compute_budget, run_selection, seed_grid, ByteBudget, SelectionConfig, SelectionOutcome, SelectionProblem};
use crate::spde::{build_mesh, CholeskyFactor, PrecisionOperator, SphereMesh};
use crate::spectral::{forward_dft_all, inverse_dft_all, is_real_frequency, SpectralField};
use crate::specmodel::{add_mean, fit_model, FittedSpectra, ModelConfig};
use crate::{Error, Result};

/// Bits per index pair assumed when planning a budget.
pub const PLANNING_INDEX_BITS: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecompressMode {
    Mean,
    Simulate,
}

pub fn compress(cube: &TimeCube, config: &SelectionConfig, seed: u64) -> Result<CompressedArchive> {
    Ok(compress_with_outcome(cube, config, seed, &ModelConfig::default())?.0)
}

/// Compression that also returns the selection record (trace, κ history).
pub fn compress_with_outcome(
    cube: &TimeCube,
    config: &SelectionConfig,
    seed: u64,
    model_config: &ModelConfig,
) -> Result<(CompressedArchive, SelectionOutcome)> {
    config.validate()?;
    let grid = cube.grid().clone();
    let header = ArchiveHeader {
        grid: grid.clone(),
        n_time: cube.n_time(),
        ratio: config.ratio,
        variant: config.variant,
        seed,
    };
    let budget = ByteBudget::new(header.capacity(), header.encoded_len() + header.model_len())?;

    let field = forward_dft_all(cube);
    let (model, anomalies) = fit_model(&field, &pixel_area_weights(&grid), model_config)?;
    let spectra = model.spectra();
    let mesh = build_mesh(&grid)?;
    let op = PrecisionOperator::new(&mesh)?;
    let problem = SelectionProblem::new(&mesh, &anomalies, &spectra);
    let seeds = seed_grid(&grid, config.seed_strides);
    let outcome = run_selection(&problem, &op, &mesh, config, &seeds, budget)?;

    let n = grid.n_pixels();
    let mut pairs: Vec<(u64, Complex64)> = Vec::with_capacity(outcome.n_pairs());
    for (k, verts) in outcome.stored.iter().enumerate() {
        for &v in verts {
            let p = mesh.representative_pixel(v);
            let mut c = anomalies.get(p, k);
            if is_real_frequency(k, cube.n_time()) {
                c.im = 0.0;
            }
            pairs.push(((k * n + p) as u64, c));
        }
    }
    pairs.sort_by_key(|&(key, _)| key);
    let archive = CompressedArchive {
        header,
        model,
        kappa: outcome.kappa.kappa.clone(),
        keys: pairs.iter().map(|p| p.0).collect(),
        values: pairs.iter().map(|p| p.1).collect(),
    }
    .quantized();
    let written = archive.to_bytes()?.len();
    if written != outcome.bytes_used || written > archive.header.capacity() {
        return Err(Error::BudgetInfeasible {
            needed: written as f64 / 4.0,
            available: archive.header.capacity() as f64 / 4.0,
        });
    }
    Ok((archive, outcome))
}

/// Per-frequency conditioning state shared by every reconstruction.
struct FrequencyPlan {
    part: FrequencyPartition,
    /// Scaled values on stored vertices, in partition order.
    z1: Vec<Complex64>,
    zhat: Vec<Complex64>,
    factor: Option<CholeskyFactor>,
    /// Stored pixel → value.
    stored_pixels: Vec<(usize, Complex64)>,
}

/// Archive prepared for repeated decompression: every factorization and
/// conditional mean is computed once.
pub struct Decompressor {
    archive: CompressedArchive,
    mesh: SphereMesh,
    spectra: FittedSpectra,
    plans: Vec<FrequencyPlan>,
}

impl Decompressor {
    pub fn new(archive: CompressedArchive) -> Result<Self> {
        let h = &archive.header;
        let kk = h.n_freq();
        let mesh = build_mesh(&h.grid)?;
        let op = PrecisionOperator::new(&mesh)?;
        let spectra = archive.model.spectra();
        let mut by_freq: Vec<Vec<(usize, Complex64)>> = vec![Vec::new(); kk];
        for (i, v) in archive.values.iter().enumerate() {
            let (k, p) = archive.pair(i);
            by_freq[k].push((p, *v));
        }
        let plans = by_freq
            .into_par_iter()
            .enumerate()
            .map(|(k, stored_pixels)| {
                let mut verts = Vec::with_capacity(stored_pixels.len());
                let mut z_of = vec![Complex64::new(0.0, 0.0); mesh.n_vertices()];
                for &(p, v) in &stored_pixels {
                    let vert = mesh.vertex_of_pixel()[p];
                    if mesh.representative_pixel(vert) != p {
                        return Err(Error::CorruptArchive(format!("pixel {p} at frequency {k} shares a vertex with a lower pixel")));
                    }
                    verts.push(vert);
                    z_of[vert] = v / spectra.get(p, k).sqrt();
                }
                verts.sort_unstable();
                let part = FrequencyPartition::new(mesh.n_vertices(), verts)?;
                let z1: Vec<Complex64> = part.stored().iter().map(|&s| z_of[s]).collect();
                let kappa = archive.kappa[k];
                let (zhat, factor) = if part.unstored().is_empty() {
                    (Vec::new(), None)
                } else {
                    let q = op.assemble(kappa)?.matrix;
                    let factor = op.plan(part.unstored())?.factor(&op, kappa)?;
                    let zhat = if part.stored().is_empty() {
                        vec![Complex64::new(0.0, 0.0); part.unstored().len()]
                    } else {
                        conditional_expectation_with(&q, Some(&factor), &part, &z1)?
                    };
                    (zhat, Some(factor))
                };
                Ok(FrequencyPlan {
                    part,
                    z1,
                    zhat,
                    factor,
                    stored_pixels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            archive,
            mesh,
            spectra,
            plans,
        })
    }

    pub fn archive(&self) -> &CompressedArchive {
        &self.archive
    }

    /// Conditional mean, or a conditional simulation under `seed`.
    pub fn reconstruct(&self, mode: DecompressMode, seed: u64) -> Result<TimeCube> {
        inverse_dft_all(&self.reconstruct_spectral(mode, seed)?, &self.archive.header.grid)
    }

    /// Reconstructed coefficients, mean terms included.
    pub fn reconstruct_spectral(&self, mode: DecompressMode, seed: u64) -> Result<SpectralField> {
        let h = &self.archive.header;
        let maps: Vec<Vec<Complex64>> = self
            .plans
            .par_iter()
            .enumerate()
            .map(|(k, plan)| self.frequency_map(k, plan, mode, seed))
            .collect::<Result<_>>()?;
        let mut field = SpectralField::zeros(h.n_pixels(), h.n_time);
        for (k, map) in maps.iter().enumerate() {
            for (p, &c) in map.iter().enumerate() {
                field.set(p, k, c);
            }
        }
        add_mean(&mut field, &self.archive.model.mean);
        Ok(field)
    }

    fn frequency_map(&self, k: usize, plan: &FrequencyPlan, mode: DecompressMode, seed: u64) -> Result<Vec<Complex64>> {
        let n_time = self.archive.header.n_time;
        let real = is_real_frequency(k, n_time);
        let z2 = match (mode, &plan.factor) {
            (DecompressMode::Simulate, Some(f)) => {
                let mut rng = frequency_rng(seed, k);
                conditional_simulation(f, &plan.zhat, real, &mut rng)?
            }
            _ => plan.zhat.clone(),
        };
        let part = &plan.part;
        let z_vertex = |v: usize| if part.is_stored(v) { plan.z1[part.slot(v)] } else { z2[part.slot(v)] };
        let vop = self.mesh.vertex_of_pixel();
        let mut map: Vec<Complex64> = (0..vop.len())
            .map(|p| z_vertex(vop[p]) * self.spectra.get(p, k).sqrt())
            .collect();
        for &(p, v) in &plan.stored_pixels {
            map[p] = v;
        }
        if real {
            map.iter_mut().for_each(|c| c.im = 0.0);
        }
        Ok(map)
    }
}

pub fn decompress(archive: &CompressedArchive, mode: DecompressMode, seed: u64) -> Result<TimeCube> {
    Decompressor::new(archive.clone())?.reconstruct(mode, seed)
}

/// `count` conditional simulations; realization `r` uses `realization_seed(seed, r)`.
pub fn emulate(archive: &CompressedArchive, count: usize, seed: u64) -> Result<Vec<TimeCube>> {
    let d = Decompressor::new(archive.clone())?;
    (0..count)
        .map(|r| d.reconstruct(DecompressMode::Simulate, realization_seed(seed, r)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InspectReport {
    pub n_lat: usize,
    pub n_lon: usize,
    pub n_time: usize,
    pub ratio: f64,
    pub seed: u64,
    pub total_bytes: usize,
    pub capacity_bytes: usize,
    pub header_bytes: usize,
    pub model_bytes: usize,
    pub index_bytes: usize,
    pub value_bytes: usize,
    pub n_pairs: usize,
    pub bits_per_pair: f64,
    pub planned_bits_per_pair: f64,
    /// Remaining numbers after the model, under the planning assumption.
    pub planned_remaining: f64,
    pub per_frequency: Vec<usize>,
    pub kappa: Vec<f64>,
}

pub fn inspect(archive: &CompressedArchive) -> Result<InspectReport> {
    let h = &archive.header;
    let bytes = archive.to_bytes()?;
    let index_bytes = super::index::encode_keys(&archive.keys)?.len();
    let header_bytes = h.encoded_len();
    let model_bytes = h.model_len();
    let plan = compute_budget(h.ratio, h.n_pixels(), h.n_time, PLANNING_INDEX_BITS).map(|b| b.remaining);
    let n_pairs = archive.n_pairs();
    Ok(InspectReport {
        n_lat: h.grid.n_lat(),
        n_lon: h.grid.n_lon(),
        n_time: h.n_time,
        ratio: h.ratio,
        seed: h.seed,
        total_bytes: bytes.len(),
        capacity_bytes: h.capacity(),
        header_bytes,
        model_bytes,
        index_bytes,
        value_bytes: bytes.len() - header_bytes - model_bytes - index_bytes,
        n_pairs,
        bits_per_pair: if n_pairs == 0 { 0.0 } else { 8.0 * index_bytes as f64 / n_pairs as f64 },
        planned_bits_per_pair: PLANNING_INDEX_BITS,
        planned_remaining: plan.unwrap_or(f64::NAN),
        per_frequency: archive.counts_per_frequency(),
        kappa: archive.kappa.clone(),
    })
}

impl fmt::Display for InspectReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "grid {} x {}, T = {}", self.n_lat, self.n_lon, self.n_time)?;
        writeln!(f, "ratio {}  seed {}", self.ratio, self.seed)?;
        writeln!(f, "bytes {} of {} allowed", self.total_bytes, self.capacity_bytes)?;
        writeln!(
            f,
            "  header {}  model {}  index {}  values {}",
            self.header_bytes, self.model_bytes, self.index_bytes, self.value_bytes
        )?;
        writeln!(f, "stored pairs {}", self.n_pairs)?;
        writeln!(
            f,
            "index bits/pair {:.3} (planning assumption {})",
            self.bits_per_pair, self.planned_bits_per_pair
        )?;
        writeln!(f, "planned numbers after model {:.1}", self.planned_remaining)?;
        writeln!(f, "k\tstored\tkappa")?;
        for (k, (c, kap)) in self.per_frequency.iter().zip(&self.kappa).enumerate() {
            writeln!(f, "{k}\t{c}\t{kap}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::select::Variant;
    use crate::specmodel::remove_mean;
    use crate::synthgen::{generate, GeneratorSpec};

    fn cube(seed: u64) -> TimeCube {
        generate(&GeneratorSpec::new(8, 16, 32, seed)).unwrap()
    }

    fn small_config(ratio: f64, variant: Variant) -> SelectionConfig {
        let base = match variant {
            Variant::Sequential => SelectionConfig::sequential(ratio),
            Variant::Distributed => SelectionConfig::distributed(ratio),
        };
        SelectionConfig {
            batch_size: if variant == Variant::Sequential { 10 } else { 200 },
            reestimations: 2,
            ..base
        }
    }

    #[test]
    fn archive_fits_budget_and_is_deterministic() {
        let c = cube(1);
        for variant in [Variant::Sequential, Variant::Distributed] {
            for ratio in [3.0, 5.0] {
                let cfg = small_config(ratio, variant);
                let a = compress(&c, &cfg, 7).unwrap();
                let bytes = a.to_bytes().unwrap();
                assert!(bytes.len() <= (4.0 * 128.0 * 32.0 / ratio) as usize);
                assert!(a.n_pairs() > 0);
                assert_eq!(CompressedArchive::from_bytes(&bytes).unwrap(), a);
                assert_eq!(compress(&c, &cfg, 7).unwrap().to_bytes().unwrap(), bytes);
                // nothing else would have fitted: the slack is below one real coefficient
                let slack = a.header.capacity() - bytes.len();
                assert!(slack < 4 + 3 || a.n_pairs() == 128 * 17, "slack {slack}");
            }
        }
    }

    #[test]
    fn stored_coefficients_are_reinserted_verbatim() {
        let c = cube(2);
        let a = compress(&c, &small_config(4.0, Variant::Sequential), 0).unwrap();
        let d = Decompressor::new(a.clone()).unwrap();
        let mut mean_field = d.reconstruct_spectral(DecompressMode::Mean, 0).unwrap();
        let sim_field = d.reconstruct_spectral(DecompressMode::Simulate, 11).unwrap();
        remove_mean(&mut mean_field, &a.model.mean);
        let mut sim = sim_field.clone();
        remove_mean(&mut sim, &a.model.mean);
        for i in 0..a.n_pairs() {
            let (k, p) = a.pair(i);
            if k >= 2 {
                assert_eq!(mean_field.get(p, k), a.values[i]);
                assert_eq!(sim.get(p, k), a.values[i]);
            } else {
                // the mean terms are added and removed again here
                assert!((mean_field.get(p, k) - a.values[i]).norm() < 1e-9);
                assert!((sim.get(p, k) - a.values[i]).norm() < 1e-9);
            }
        }
        // the low-resolution seed grid is present at k = 0 and 1
        let counts = a.counts_per_frequency();
        assert!(counts[0] >= 32 && counts[1] >= 32);
    }

    #[test]
    fn saturated_archive_is_lossless_up_to_single_precision() {
        let c = cube(3);
        let a = compress(&c, &small_config(0.5, Variant::Distributed), 0).unwrap();
        assert_eq!(a.n_pairs(), 128 * 17);
        let rec = decompress(&a, DecompressMode::Mean, 0).unwrap();
        let err = c.values().iter().zip(rec.values()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(f64::from(err) < 1e-3 * c.data_range(), "max error {err}");
        // every frequency fully stored: simulations coincide with the mean
        let s1 = decompress(&a, DecompressMode::Simulate, 1).unwrap();
        assert_eq!(s1.values(), rec.values());
    }

    #[test]
    fn simulations_vary_with_seed_and_agree_where_fully_stored() {
        let c = cube(4);
        let a = compress(&c, &small_config(3.0, Variant::Distributed), 0).unwrap();
        let d = Decompressor::new(a.clone()).unwrap();
        let x = d.reconstruct_spectral(DecompressMode::Simulate, 1).unwrap();
        let y = d.reconstruct_spectral(DecompressMode::Simulate, 2).unwrap();
        assert_ne!(x, y);
        let counts = a.counts_per_frequency();
        for (k, &cnt) in counts.iter().enumerate() {
            if cnt == 128 {
                assert_eq!(x.frequency_map(k), y.frequency_map(k));
            }
        }
        let e = emulate(&a, 2, 9).unwrap();
        assert_eq!(e[0], decompress(&a, DecompressMode::Simulate, realization_seed(9, 0)).unwrap());
        assert_ne!(e[0], e[1]);
        assert_eq!(
            decompress(&a, DecompressMode::Mean, 1).unwrap(),
            decompress(&a, DecompressMode::Mean, 2).unwrap()
        );
    }

    #[test]
    fn inspect_reports_the_layout() {
        let a = compress(&cube(5), &small_config(5.0, Variant::Sequential), 0).unwrap();
        let r = inspect(&a).unwrap();
        assert_eq!(r.total_bytes, r.header_bytes + r.model_bytes + r.index_bytes + r.value_bytes);
        assert!(r.total_bytes <= r.capacity_bytes);
        assert_eq!(r.per_frequency.iter().sum::<usize>(), r.n_pairs);
        assert!(r.bits_per_pair >= 8.0);
        let text = r.to_string();
        assert!(text.contains("index bits/pair"));
    }

    #[test]
    fn ratio_too_aggressive_is_rejected() {
        let err = compress(&cube(6), &small_config(100.0, Variant::Sequential), 0).unwrap_err();
        assert!(matches!(err, Error::BudgetInfeasible { .. }));
    }
}
