//! The aggregate latent-alignment report: how closely encoder-inverted
//! codes track the generator's own code distribution.
//!
//! Sampling is split into two phases so the result is bitwise identical for
//! any worker count: every latent draw happens sequentially up front, then
//! fixed-size chunks are pushed through the networks (optionally on several
//! threads) and merged back in chunk order.

use serde::{Deserialize, Serialize};

use crate::models::ModelBundle;
use crate::numerics::{Rng, Tensor};

use super::gaussian::{fit_gaussian, frechet_distance_sq};
use super::mmd::{median_heuristic_bandwidth, mmd_sq_unbiased};
use super::pca::{outlier_filter, overlap_fraction, pca_project, Projection2D};
use super::MetricsError;

/// Knobs for [`alignment_report`]. `..Default::default()` gives the
/// standard evaluation configuration.
#[derive(Debug, Clone)]
pub struct ReportOptions {
    /// Number of prior codes to evaluate. Must be at least 100.
    pub n_samples: usize,
    /// Rows per forward-pass chunk.
    pub chunk: usize,
    /// Worker threads; the result does not depend on this value.
    pub threads: usize,
    /// Per-set cap for the MMD estimate (quadratic in set size, so the
    /// full 100k evaluation is subsampled with a fixed stride).
    pub mmd_subsample: usize,
}

impl Default for ReportOptions {
    fn default() -> ReportOptions {
        ReportOptions { n_samples: 100_000, chunk: 512, threads: 1, mmd_subsample: 2000 }
    }
}

/// Summary statistics comparing inverted codes against prior codes.
/// Field order here fixes the JSON key order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub n_samples: usize,
    /// Mean squared error between G(w) and G(E(G(w))) over all pixels.
    pub mse_reconstruction: f64,
    /// Squared Fréchet distance between Gaussian fits of inverted and
    /// prior codes.
    pub fd_latent: f64,
    /// Unbiased squared MMD between (subsampled) inverted and prior codes.
    pub mmd_sq_latent: f64,
    pub mmd_bandwidth: f64,
    pub mmd_subsample: usize,
    /// Share of inverted codes inside the 99th-percentile radius of the
    /// prior codes, in the 2-D PCA projection.
    pub overlap: f64,
    /// Inverted codes whose projected coordinates exceed 10x the prior
    /// projection scale.
    pub n_outliers: usize,
    pub outlier_fraction: f64,
    pub reference_scale: f64,
}

impl AlignmentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<AlignmentReport, MetricsError> {
        serde_json::from_str(text)
            .map_err(|e| MetricsError::BadInput(format!("report parse: {e}")))
    }
}

struct ChunkOut {
    w_ref: Tensor,
    w_inv: Tensor,
    sse: f64,
}

fn process_chunk(bundle: &ModelBundle, z_chunk: &Tensor) -> Result<ChunkOut, MetricsError> {
    let w_ref = bundle.map_latent(z_chunk)?;
    let x = bundle.generate(&w_ref)?;
    let w_inv = bundle.encode(&x)?;
    let x_rec = bundle.generate(&w_inv)?;
    let sse = x.sub(&x_rec)?.l2_norm_squared();
    Ok(ChunkOut { w_ref, w_inv, sse })
}

/// Draw `opts.n_samples` prior codes w = FC(z), invert their renderings
/// through the encoder, and compare the two code sets.
///
/// All randomness comes from `rng` in a single sequential pass, so the
/// report depends only on the RNG state and the bundle, never on chunking
/// or thread count.
pub fn alignment_report(
    bundle: &ModelBundle,
    rng: &mut Rng,
    opts: &ReportOptions,
) -> Result<(AlignmentReport, Projection2D), MetricsError> {
    let n = opts.n_samples;
    if n < 100 {
        return Err(MetricsError::TooFewSamples { needed: 100, got: n });
    }
    let ld = bundle.latent_dim();
    let image_dim = bundle.image_dim();
    let chunk = opts.chunk.max(1);
    let z_all = Tensor::from_vec(&[n, ld], rng.gaussian_vec(n * ld))
        .map_err(|e| MetricsError::BadInput(e.to_string()))?;

    let n_chunks = n.div_ceil(chunk);
    let threads = opts.threads.max(1).min(n_chunks);
    let mut outs: Vec<Option<Result<ChunkOut, MetricsError>>> =
        (0..n_chunks).map(|_| None).collect();
    if threads == 1 {
        for (c, slot) in outs.iter_mut().enumerate() {
            let lo = c * chunk;
            let hi = ((c + 1) * chunk).min(n);
            let res = z_all
                .slice_rows(lo, hi)
                .map_err(|e| MetricsError::BadInput(e.to_string()))
                .and_then(|zc| process_chunk(bundle, &zc));
            *slot = Some(res);
        }
    } else {
        let z_ref = &z_all;
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    s.spawn(move || {
                        let mut local = Vec::new();
                        let mut c = t;
                        while c < n_chunks {
                            let lo = c * chunk;
                            let hi = ((c + 1) * chunk).min(n);
                            let res = z_ref
                                .slice_rows(lo, hi)
                                .map_err(|e| MetricsError::BadInput(e.to_string()))
                                .and_then(|zc| process_chunk(bundle, &zc));
                            local.push((c, res));
                            c += threads;
                        }
                        local
                    })
                })
                .collect();
            for h in handles {
                for (c, res) in h.join().expect("report worker panicked") {
                    outs[c] = Some(res);
                }
            }
        });
    }

    // Merge strictly in chunk order so sums and concatenations are
    // identical no matter which worker produced each chunk.
    let mut wref_data = Vec::with_capacity(n * ld);
    let mut winv_data = Vec::with_capacity(n * ld);
    let mut sse_total = 0.0;
    for slot in outs {
        let out = slot.expect("every chunk processed")?;
        wref_data.extend_from_slice(out.w_ref.data());
        winv_data.extend_from_slice(out.w_inv.data());
        sse_total += out.sse;
    }
    let w_ref = Tensor::from_vec(&[n, ld], wref_data)
        .map_err(|e| MetricsError::BadInput(e.to_string()))?;
    let w_inv = Tensor::from_vec(&[n, ld], winv_data)
        .map_err(|e| MetricsError::BadInput(e.to_string()))?;
    let mse_reconstruction = sse_total / (n * image_dim) as f64;

    let g_ref = fit_gaussian(&w_ref)?;
    let g_inv = fit_gaussian(&w_inv)?;
    let fd_latent = frechet_distance_sq(&g_inv, &g_ref)?;

    let projection = pca_project(&w_ref, &w_inv)?;
    let (_, n_outliers) = outlier_filter(&projection);
    let overlap = overlap_fraction(&projection)?;

    let k = opts.mmd_subsample.min(n).max(2);
    let idx = strided_indices(n, k);
    let sub_ref = w_ref.gather_rows(&idx).map_err(|e| MetricsError::BadInput(e.to_string()))?;
    let sub_inv = w_inv.gather_rows(&idx).map_err(|e| MetricsError::BadInput(e.to_string()))?;
    let mmd_bandwidth = median_heuristic_bandwidth(&sub_ref, &sub_inv)?;
    let mmd_sq_latent = mmd_sq_unbiased(&sub_inv, &sub_ref, mmd_bandwidth)?;

    let report = AlignmentReport {
        n_samples: n,
        mse_reconstruction,
        fd_latent,
        mmd_sq_latent,
        mmd_bandwidth,
        mmd_subsample: k,
        overlap,
        n_outliers,
        outlier_fraction: n_outliers as f64 / n as f64,
        reference_scale: projection.reference_scale,
    };
    Ok((report, projection))
}

/// `k` distinct indices spread evenly across `0..n` (requires k <= n).
fn strided_indices(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| i * n / k).collect()
}

/// CSV rendering of a projection: header `x,y,set`, reference rows first.
pub fn projection_csv(proj: &Projection2D) -> String {
    let mut out = String::from("x,y,set\n");
    for p in &proj.reference {
        out.push_str(&format!("{},{},reference\n", p[0], p[1]));
    }
    for p in &proj.query {
        out.push_str(&format!("{},{},query\n", p[0], p[1]));
    }
    out
}

/// Self-contained SVG scatter of a projection. With `filter_outliers` set,
/// query points beyond the outlier threshold are dropped before plotting;
/// either way, sets larger than `max_points_per_set` are thinned with a
/// fixed stride so the plot stays a reasonable size. The caption reports
/// the counts.
pub fn projection_svg(proj: &Projection2D, max_points_per_set: usize, filter_outliers: bool) -> String {
    const SIZE: f64 = 720.0;
    const MARGIN: f64 = 48.0;
    let (kept_query, dropped) = if filter_outliers {
        outlier_filter(proj)
    } else {
        (proj.query.clone(), 0)
    };
    let thin = |pts: &[[f64; 2]]| -> Vec<[f64; 2]> {
        if pts.len() <= max_points_per_set || max_points_per_set == 0 {
            pts.to_vec()
        } else {
            strided_indices(pts.len(), max_points_per_set)
                .into_iter()
                .map(|i| pts[i])
                .collect()
        }
    };
    let ref_pts = thin(&proj.reference);
    let query_pts = thin(&kept_query);
    let mut limit = 0.0_f64;
    for p in ref_pts.iter().chain(query_pts.iter()) {
        limit = limit.max(p[0].abs()).max(p[1].abs());
    }
    if limit <= 0.0 {
        limit = 1.0;
    }
    limit *= 1.05;
    let scale = (SIZE / 2.0 - MARGIN) / limit;
    let to_px = |p: [f64; 2]| -> (f64, f64) {
        (SIZE / 2.0 + p[0] * scale, SIZE / 2.0 - p[1] * scale)
    };
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SIZE} {SIZE}\" \
         width=\"{SIZE}\" height=\"{SIZE}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{SIZE}\" height=\"{SIZE}\" fill=\"white\"/>\n"
    ));
    // Axes through the projection origin (the reference mean).
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{c}\" x2=\"{e}\" y2=\"{c}\" stroke=\"#cccccc\"/>\n",
        m = MARGIN,
        e = SIZE - MARGIN,
        c = SIZE / 2.0
    ));
    svg.push_str(&format!(
        "<line x1=\"{c}\" y1=\"{m}\" x2=\"{c}\" y2=\"{e}\" stroke=\"#cccccc\"/>\n",
        m = MARGIN,
        e = SIZE - MARGIN,
        c = SIZE / 2.0
    ));
    for p in &ref_pts {
        let (x, y) = to_px(*p);
        svg.push_str(&format!(
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2\" fill=\"#4477aa\" fill-opacity=\"0.45\"/>\n"
        ));
    }
    for p in &query_pts {
        let (x, y) = to_px(*p);
        svg.push_str(&format!(
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2\" fill=\"#cc6677\" fill-opacity=\"0.45\"/>\n"
        ));
    }
    let filter_note = if filter_outliers {
        format!("{dropped} outliers dropped")
    } else {
        "outlier filter off".to_string()
    };
    svg.push_str(&format!(
        "<text x=\"{MARGIN}\" y=\"28\" font-family=\"sans-serif\" font-size=\"14\">\
         prior codes: {} shown of {} (blue) / inverted codes: {} shown of {} (red), \
         {filter_note}</text>\n",
        ref_pts.len(),
        proj.reference.len(),
        query_pts.len(),
        proj.query.len(),
    ));
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, FrozenFlags, Mlp, MlpSpec, ModelBundle};

    /// A bundle whose encoder inverts the generator exactly: FC is the
    /// 8x8 identity, G embeds codes into the first 8 pixels, and E reads
    /// them back. All maps are linear with identity activations.
    fn exact_inverse_bundle() -> ModelBundle {
        let ld = 8;
        let id = 256;
        let mut fc = Mlp::zeros(MlpSpec::new(&[ld, ld], Activation::Identity, Activation::Identity));
        let mut eye = vec![0.0; ld * ld];
        for i in 0..ld {
            eye[i * ld + i] = 1.0;
        }
        fc.weights[0] = Tensor::from_vec(&[ld, ld], eye).unwrap();

        let mut generator =
            Mlp::zeros(MlpSpec::new(&[ld, id], Activation::Identity, Activation::Identity));
        let mut embed = vec![0.0; ld * id];
        for i in 0..ld {
            embed[i * id + i] = 1.0;
        }
        generator.weights[0] = Tensor::from_vec(&[ld, id], embed).unwrap();

        let mut encoder =
            Mlp::zeros(MlpSpec::new(&[id, ld], Activation::Identity, Activation::Identity));
        let mut read = vec![0.0; id * ld];
        for i in 0..ld {
            read[i * ld + i] = 1.0;
        }
        encoder.weights[0] = Tensor::from_vec(&[id, ld], read).unwrap();

        ModelBundle {
            fc,
            generator,
            encoder,
            critic_d: Mlp::zeros(MlpSpec::new(&[id, 1], Activation::Identity, Activation::Identity)),
            critic_dw: Mlp::zeros(MlpSpec::new(&[ld, 1], Activation::Identity, Activation::Identity)),
            frozen: FrozenFlags {
                fc: true,
                generator: true,
                encoder: false,
                critic_d: false,
                critic_dw: false,
            },
        }
    }

    #[test]
    fn exact_inverse_encoder_scores_perfectly() {
        let bundle = exact_inverse_bundle();
        let mut rng = Rng::from_seed(5);
        let opts = ReportOptions { n_samples: 2000, ..Default::default() };
        let (report, proj) = alignment_report(&bundle, &mut rng, &opts).unwrap();
        assert_eq!(report.mse_reconstruction, 0.0);
        assert!(report.fd_latent < 1e-6, "fd {}", report.fd_latent);
        assert!(report.overlap > 0.98, "overlap {}", report.overlap);
        assert_eq!(report.n_outliers, 0);
        assert!(report.mmd_sq_latent.abs() < 0.01, "mmd {}", report.mmd_sq_latent);
        // Inverted codes coincide with prior codes in the projection too.
        for (a, b) in proj.reference.iter().zip(proj.query.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn collapsed_encoder_matches_closed_form_distance() {
        // With E == 0 the inverted set is a point mass at the origin, so
        // FD^2 = |mean_ref|^2 + tr(cov_ref) exactly (on the fitted moments).
        let mut init_rng = Rng::from_seed(303);
        let mut bundle = ModelBundle::init(&mut init_rng, 8, 256);
        bundle.encoder = Mlp::zeros(bundle.encoder.spec.clone());

        let mut rng = Rng::from_seed(11);
        let probe = Rng::from_state(rng.state());
        let opts = ReportOptions { n_samples: 2000, ..Default::default() };
        let (report, _) = alignment_report(&bundle, &mut rng, &opts).unwrap();

        // Recompute the reference moments with an identically seeded RNG.
        let mut probe = probe;
        let z = Tensor::from_vec(&[2000, 8], probe.gaussian_vec(2000 * 8)).unwrap();
        let w_ref = bundle.map_latent(&z).unwrap();
        let g = crate::metrics::fit_gaussian(&w_ref).unwrap();
        let want: f64 = g.mean.iter().map(|m| m * m).sum::<f64>()
            + (0..8).map(|i| g.cov[i * 8 + i]).sum::<f64>();
        assert!(
            (report.fd_latent - want).abs() <= 0.05 * want.abs(),
            "fd {} vs closed form {want}",
            report.fd_latent
        );
        assert!(report.mse_reconstruction > 0.0);
    }

    #[test]
    fn report_is_invariant_to_thread_count() {
        let mut init_rng = Rng::from_seed(77);
        let bundle = ModelBundle::init(&mut init_rng, 8, 256);
        // 517 samples: exercises a ragged final chunk.
        let run = |threads: usize| {
            let mut rng = Rng::from_seed(99);
            let opts = ReportOptions {
                n_samples: 517,
                chunk: 128,
                threads,
                mmd_subsample: 200,
            };
            alignment_report(&bundle, &mut rng, &opts).unwrap()
        };
        let (r1, p1) = run(1);
        let (r4, p4) = run(4);
        assert_eq!(r1.mse_reconstruction.to_bits(), r4.mse_reconstruction.to_bits());
        assert_eq!(r1.fd_latent.to_bits(), r4.fd_latent.to_bits());
        assert_eq!(r1.mmd_sq_latent.to_bits(), r4.mmd_sq_latent.to_bits());
        assert_eq!(r1.mmd_bandwidth.to_bits(), r4.mmd_bandwidth.to_bits());
        assert_eq!(r1.overlap.to_bits(), r4.overlap.to_bits());
        assert_eq!(r1.n_outliers, r4.n_outliers);
        assert_eq!(r1.reference_scale.to_bits(), r4.reference_scale.to_bits());
        assert_eq!(p1.reference, p4.reference);
        assert_eq!(p1.query, p4.query);
    }

    #[test]
    fn report_rejects_tiny_sample_counts() {
        let mut init_rng = Rng::from_seed(1);
        let bundle = ModelBundle::init(&mut init_rng, 8, 256);
        let mut rng = Rng::from_seed(2);
        let opts = ReportOptions { n_samples: 99, ..Default::default() };
        assert!(matches!(
            alignment_report(&bundle, &mut rng, &opts).unwrap_err(),
            MetricsError::TooFewSamples { needed: 100, got: 99 }
        ));
    }

    #[test]
    fn report_json_keys_keep_declaration_order() {
        let report = AlignmentReport {
            n_samples: 100,
            mse_reconstruction: 0.5,
            fd_latent: 1.0,
            mmd_sq_latent: 0.1,
            mmd_bandwidth: 2.0,
            mmd_subsample: 100,
            overlap: 0.9,
            n_outliers: 3,
            outlier_fraction: 0.03,
            reference_scale: 4.0,
        };
        let json = report.to_json();
        let keys = [
            "n_samples",
            "mse_reconstruction",
            "fd_latent",
            "mmd_sq_latent",
            "mmd_bandwidth",
            "mmd_subsample",
            "overlap",
            "n_outliers",
            "outlier_fraction",
            "reference_scale",
        ];
        let mut last = 0;
        for key in keys {
            let pos = json.find(&format!("\"{key}\"")).unwrap_or_else(|| panic!("missing {key}"));
            assert!(pos > last || last == 0, "key {key} out of order");
            last = pos;
        }
        let round = AlignmentReport::from_json(&json).unwrap();
        assert_eq!(round.n_samples, 100);
        assert_eq!(round.fd_latent.to_bits(), report.fd_latent.to_bits());
    }

    #[test]
    fn csv_and_svg_render_the_projection() {
        let proj = Projection2D {
            basis: [vec![1.0, 0.0], vec![0.0, 1.0]],
            mean: vec![0.0, 0.0],
            reference: vec![[1.0, 2.0], [-1.0, 0.5], [0.25, -0.75]],
            query: vec![[0.5, 0.5], [100.0, 0.0]],
            reference_scale: 2.0,
        };
        let csv = projection_csv(&proj);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x,y,set");
        assert_eq!(lines.len(), 1 + 3 + 2);
        assert_eq!(lines[1], "1,2,reference");
        assert_eq!(lines[4], "0.5,0.5,query");

        let svg = projection_svg(&proj, 1000, true);
        assert!(svg.starts_with("<svg"));
        // 3 reference + 1 kept query point (the 100.0 one is beyond 10x).
        assert_eq!(svg.matches("<circle").count(), 4);
        assert!(svg.contains("1 outliers dropped"));

        let unfiltered = projection_svg(&proj, 1000, false);
        assert_eq!(unfiltered.matches("<circle").count(), 5);
        assert!(unfiltered.contains("outlier filter off"));
    }

    #[test]
    fn svg_thins_oversized_sets_deterministically() {
        let reference: Vec<[f64; 2]> = (0..500).map(|i| [i as f64 * 0.01, 0.0]).collect();
        let proj = Projection2D {
            basis: [vec![1.0, 0.0], vec![0.0, 1.0]],
            mean: vec![0.0, 0.0],
            reference,
            query: vec![[0.0, 0.0]; 10],
            reference_scale: 5.0,
        };
        let a = projection_svg(&proj, 100, true);
        let b = projection_svg(&proj, 100, true);
        assert_eq!(a, b);
        assert_eq!(a.matches("<circle").count(), 110);
        assert!(a.contains("100 shown of 500"));
    }
}
