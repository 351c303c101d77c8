//! Representation similarity analysis for the two encoder streams.
//!
//! The question this module answers is: how much do the layers inside one
//! stream repeat each other's representation? A stream whose stages all
//! encode nearly the same thing is redundant, and redundancy is what lets a
//! localized perturbation die out before the fusion head, because later
//! stages can reconstruct what an earlier stage lost.
//!
//! The measurement is centered kernel alignment (CKA). For activation
//! matrices `X` (m samples by p features) and `Z` (m by q) we form kernel
//! Gram matrices, center them, and compare:
//!
//! ```text
//! HSIC(K, L) = trace(K H L H) / (m - 1)^2      H = I - (1/m) 11^T
//! CKA(X, Z)  = HSIC(Kx, Kz) / sqrt(HSIC(Kx, Kx) * HSIC(Kz, Kz))
//! ```
//!
//! Both a linear kernel and an RBF kernel are supported; agreement between
//! the two is itself a useful sanity check. All similarity arithmetic runs
//! in `f64` regardless of the `f32` activations, because the centering step
//! cancels large terms and single precision loses too much there.
//!
//! The layers compared are the stage outputs of one stream, flattened to one
//! row per sample. Projection outputs and the fused trunk are deliberately
//! not included: the claim under test concerns redundancy inside a stream's
//! own encoder, and mixing in post-fusion activations would blur exactly the
//! comparison the heatmap is for.

use std::fmt;
use std::str::FromStr;

use crate::dataset::{ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::model::FusionNet;

/// Fewest samples an activation matrix may hold. Below this the centered
/// Gram matrices are too small to say anything about alignment.
pub const MIN_SAMPLES: usize = 4;

/// Which encoder stream an activation matrix was read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Rgb,
    Depth,
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stream::Rgb => write!(f, "rgb"),
            Stream::Depth => write!(f, "depth"),
        }
    }
}

impl FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stream> {
        match s {
            "rgb" => Ok(Stream::Rgb),
            "depth" => Ok(Stream::Depth),
            other => Err(Error::InvalidArgument(format!(
                "unknown stream {other:?}; expected rgb or depth"
            ))),
        }
    }
}

/// Kernel used to build Gram matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    /// `k(a, b) = <a, b>`.
    Linear,
    /// `k(a, b) = exp(-|a - b|^2 / (2 sigma^2))` with `sigma` tied to the
    /// median pairwise distance of the activation rows.
    Rbf,
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::Linear => write!(f, "linear"),
            Kernel::Rbf => write!(f, "rbf"),
        }
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Kernel> {
        match s {
            "linear" => Ok(Kernel::Linear),
            "rbf" => Ok(Kernel::Rbf),
            other => Err(Error::InvalidArgument(format!(
                "unknown kernel {other:?}; expected linear or rbf"
            ))),
        }
    }
}

/// Default fraction of the median pairwise distance used as the RBF
/// bandwidth.
pub const DEFAULT_SIGMA_FRACTION: f64 = 0.5;

/// Activations of one layer over a batch of samples, one flattened row per
/// sample. Rows are stored in `f64` because everything downstream is.
#[derive(Clone, Debug)]
pub struct ActivationMatrix {
    layer: String,
    stream: Stream,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ActivationMatrix {
    /// Wrap a row-major `rows x cols` buffer. Requires at least
    /// [`MIN_SAMPLES`] rows, at least one feature column, and finite
    /// entries.
    pub fn new(
        layer: impl Into<String>,
        stream: Stream,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    ) -> Result<ActivationMatrix> {
        let layer = layer.into();
        if rows < MIN_SAMPLES {
            return Err(Error::InvalidArgument(format!(
                "activation matrix for layer {layer} has {rows} rows; similarity \
                 estimates need at least {MIN_SAMPLES} samples"
            )));
        }
        if cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "activation matrix for layer {layer} has no feature columns"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::BadShape {
                op: "activation matrix",
                detail: format!(
                    "layer {layer} declares {rows}x{cols} = {} entries but holds {}",
                    rows * cols,
                    data.len()
                ),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("activations of layer {layer}"),
            });
        }
        Ok(ActivationMatrix {
            layer,
            stream,
            rows,
            cols,
            data,
        })
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// One sample's flattened activation vector.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// A symmetric kernel Gram matrix over one batch of samples.
#[derive(Clone, Debug)]
pub struct Gram {
    n: usize,
    data: Vec<f64>,
}

impl Gram {
    /// Wrap a raw row-major `n x n` buffer. The buffer must be finite and
    /// exactly symmetric; [`gram`] always produces such buffers, and hand
    /// built ones should mirror each entry rather than recompute it.
    pub fn from_raw(n: usize, data: Vec<f64>) -> Result<Gram> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "a Gram matrix needs at least one sample".into(),
            ));
        }
        if data.len() != n * n {
            return Err(Error::BadShape {
                op: "gram",
                detail: format!("expected {n}x{n} = {} entries, got {}", n * n, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "gram matrix entries".into(),
            });
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if data[i * n + j] != data[j * n + i] {
                    return Err(Error::InvalidArgument(format!(
                        "gram matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Gram { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// Build the kernel Gram matrix of an activation matrix.
///
/// For [`Kernel::Rbf`] the bandwidth is `sigma_fraction` times the median
/// pairwise Euclidean distance between rows, taken over all m(m-1)/2
/// unordered pairs; with an even count the lower of the two middle values is
/// used. If that median is zero the rows are indistinguishable and the
/// kernel is degenerate, which is reported as an error rather than patched
/// over.
pub fn gram(x: &ActivationMatrix, kernel: Kernel, sigma_fraction: f64) -> Result<Gram> {
    let m = x.rows;
    let mut data = vec![0.0f64; m * m];
    match kernel {
        Kernel::Linear => {
            for i in 0..m {
                for j in i..m {
                    let dot: f64 = x
                        .row(i)
                        .iter()
                        .zip(x.row(j))
                        .map(|(a, b)| a * b)
                        .sum();
                    data[i * m + j] = dot;
                    data[j * m + i] = dot;
                }
            }
        }
        Kernel::Rbf => {
            if !sigma_fraction.is_finite() || sigma_fraction <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "rbf sigma fraction must be finite and positive, got {sigma_fraction}"
                )));
            }
            let mut sq = vec![0.0f64; m * m];
            let mut dists = Vec::with_capacity(m * (m - 1) / 2);
            for i in 0..m {
                for j in (i + 1)..m {
                    let d2: f64 = x
                        .row(i)
                        .iter()
                        .zip(x.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    sq[i * m + j] = d2;
                    sq[j * m + i] = d2;
                    dists.push(d2.sqrt());
                }
            }
            dists.sort_unstable_by(f64::total_cmp);
            let median = dists[(dists.len() - 1) / 2];
            if median == 0.0 {
                return Err(Error::Numerical(format!(
                    "rbf bandwidth for layer {} ({} stream) is zero; the rows are \
                     pairwise identical under the median heuristic",
                    x.layer, x.stream
                )));
            }
            let sigma = sigma_fraction * median;
            let denom = 2.0 * sigma * sigma;
            for i in 0..m {
                data[i * m + i] = 1.0;
                for j in (i + 1)..m {
                    let k = (-sq[i * m + j] / denom).exp();
                    data[i * m + j] = k;
                    data[j * m + i] = k;
                }
            }
        }
    }
    Gram::from_raw(m, data)
}

/// Double-centered copy of a symmetric Gram matrix:
/// `C_ij = K_ij - rowmean_i - rowmean_j + totalmean`.
fn centered(g: &Gram) -> Vec<f64> {
    let n = g.n;
    let mut row_mean = vec![0.0f64; n];
    for i in 0..n {
        let mut acc = 0.0f64;
        for j in 0..n {
            acc += g.at(i, j);
        }
        row_mean[i] = acc / n as f64;
    }
    let total: f64 = row_mean.iter().sum::<f64>() / n as f64;
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = g.at(i, j) - row_mean[i] - row_mean[j] + total;
        }
    }
    out
}

/// Biased empirical HSIC of two Gram matrices over the same samples,
/// `trace(Kx H Kz H) / (n - 1)^2`.
///
/// Computed as the Frobenius inner product of the double-centered Grams,
/// which equals the trace form because the centering matrix is idempotent.
pub fn hsic(kx: &Gram, kz: &Gram) -> Result<f64> {
    if kx.n != kz.n {
        return Err(Error::ShapeMismatch {
            op: "hsic",
            left: vec![kx.n, kx.n],
            right: vec![kz.n, kz.n],
        });
    }
    if kx.n < 2 {
        return Err(Error::InvalidArgument(format!(
            "hsic needs at least two samples, got {}",
            kx.n
        )));
    }
    let cx = centered(kx);
    let cz = centered(kz);
    let dot: f64 = cx.iter().zip(&cz).map(|(a, b)| a * b).sum();
    let denom = (kx.n - 1) as f64;
    Ok(dot / (denom * denom))
}

/// Centered kernel alignment between two activation matrices over the same
/// samples. Returns a value in [0, 1] up to rounding; no clamping is
/// applied, so a result a hair outside that range is reported as computed.
pub fn cka(
    x: &ActivationMatrix,
    z: &ActivationMatrix,
    kernel: Kernel,
    sigma_fraction: f64,
) -> Result<f64> {
    if x.rows != z.rows {
        return Err(Error::ShapeMismatch {
            op: "cka",
            left: vec![x.rows, x.cols],
            right: vec![z.rows, z.cols],
        });
    }
    let kx = gram(x, kernel, sigma_fraction)?;
    let kz = gram(z, kernel, sigma_fraction)?;
    let hxz = hsic(&kx, &kz)?;
    let hxx = hsic(&kx, &kx)?;
    let hzz = hsic(&kz, &kz)?;
    if hxx <= 0.0 {
        return Err(Error::Numerical(format!(
            "layer {} has constant activations across the batch; its \
             self-similarity vanishes and cka is undefined",
            x.layer
        )));
    }
    if hzz <= 0.0 {
        return Err(Error::Numerical(format!(
            "layer {} has constant activations across the batch; its \
             self-similarity vanishes and cka is undefined",
            z.layer
        )));
    }
    Ok(hxz / (hxx * hzz).sqrt())
}

/// Read one stream's stage activations over a whole dataset, one activation
/// matrix per stage, rows in dataset order. Each row is the stage's output
/// volume flattened.
pub fn collect_activations(
    net: &FusionNet,
    stream: Stream,
    data: &Dataset,
    stats: &ChannelStats,
) -> Result<Vec<ActivationMatrix>> {
    let consumed = match stream {
        Stream::Rgb => net.variant.uses_rgb(),
        Stream::Depth => net.variant.uses_depth(),
    };
    if !consumed {
        return Err(Error::InvalidArgument(format!(
            "a {} network never computes {stream} activations",
            net.variant
        )));
    }
    if data.len() < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "activation collection needs at least {MIN_SAMPLES} samples; the \
             split holds {}",
            data.len()
        )));
    }
    let stages = net.arch.stage_channels.len();
    let mut per_stage: Vec<Vec<f64>> = vec![Vec::new(); stages];
    for sample in &data.samples {
        let (x_rgb, x_depth) = sample.preprocess(stats)?;
        let record = net.forward(&x_rgb, &x_depth)?;
        let volumes = match stream {
            Stream::Rgb => &record.rgb_stages,
            Stream::Depth => &record.depth_stages,
        };
        for (s, vol) in volumes.iter().enumerate() {
            per_stage[s].extend(vol.data().iter().map(|&v| v as f64));
        }
    }
    per_stage
        .into_iter()
        .enumerate()
        .map(|(s, flat)| {
            let cols = flat.len() / data.len();
            ActivationMatrix::new(format!("stage{}", s + 1), stream, data.len(), cols, flat)
        })
        .collect()
}

/// Pairwise CKA between every stage of one stream.
#[derive(Clone, Debug)]
pub struct SimilarityHeatmap {
    layers: Vec<String>,
    kernel: Kernel,
    samples: usize,
    /// Row-major `layers.len() x layers.len()` CKA values.
    values: Vec<f64>,
}

impl SimilarityHeatmap {
    pub fn size(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[String] {
        &self.layers
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    /// How many samples the underlying activation matrices held.
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.layers.len() + j]
    }
}

/// Compute the pairwise CKA heatmap of one stream's stage activations.
///
/// Every cell, the diagonal included, is computed from the data rather than
/// assumed, so a diagonal entry within rounding of 1.0 is evidence the
/// arithmetic is healthy and not a hardcoded identity.
pub fn heatmap(
    net: &FusionNet,
    stream: Stream,
    data: &Dataset,
    stats: &ChannelStats,
    kernel: Kernel,
    sigma_fraction: f64,
) -> Result<SimilarityHeatmap> {
    let acts = collect_activations(net, stream, data, stats)?;
    let grams = acts
        .iter()
        .map(|a| gram(a, kernel, sigma_fraction))
        .collect::<Result<Vec<_>>>()?;
    let mut self_h = Vec::with_capacity(grams.len());
    for (a, g) in acts.iter().zip(&grams) {
        let h = hsic(g, g)?;
        if h <= 0.0 {
            return Err(Error::Numerical(format!(
                "layer {} has constant activations across the batch; its \
                 self-similarity vanishes and cka is undefined",
                a.layer()
            )));
        }
        self_h.push(h);
    }
    let m = grams.len();
    let mut values = vec![0.0f64; m * m];
    for i in 0..m {
        for j in i..m {
            let v = hsic(&grams[i], &grams[j])? / (self_h[i] * self_h[j]).sqrt();
            values[i * m + j] = v;
            values[j * m + i] = v;
        }
    }
    Ok(SimilarityHeatmap {
        layers: acts.iter().map(|a| a.layer().to_string()).collect(),
        kernel,
        samples: data.len(),
        values,
    })
}

/// Mean off-diagonal CKA of a heatmap: one number summarizing how much the
/// stream's stages repeat each other.
pub fn redundancy_score(hm: &SimilarityHeatmap) -> Result<f64> {
    let m = hm.size();
    if m < 2 {
        return Err(Error::InvalidArgument(
            "redundancy is undefined for a single layer; the heatmap is 1x1".into(),
        ));
    }
    let mut acc = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                acc += hm.at(i, j);
            }
        }
    }
    Ok(acc / (m * (m - 1)) as f64)
}

/// Render a heatmap as CSV with header `layer_i,layer_j,cka`, one row per
/// cell in row-major order. Values use the shortest decimal form that
/// round-trips, so equal inputs produce byte-identical output.
pub fn heatmap_csv(hm: &SimilarityHeatmap) -> String {
    let mut out = String::from("layer_i,layer_j,cka\n");
    let m = hm.size();
    for i in 0..m {
        for j in 0..m {
            out.push_str(&format!("{},{},{}\n", hm.layers[i], hm.layers[j], hm.at(i, j)));
        }
    }
    out
}

/// Pearson correlation of two equal-length series, in `f64`. Errors if
/// either series is constant, because the correlation is then undefined.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "pearson needs equal-length series, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs at least two points, got {}",
            a.len()
        )));
    }
    if !a.iter().chain(b).all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "pearson inputs".into(),
        });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0f64;
    let mut va = 0.0f64;
    let mut vb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Numerical(
            "pearson correlation is undefined when either series is constant".into(),
        ));
    }
    Ok(cov / (va * vb).sqrt())
}
