//! Motion-space evaluation: reconstruction error, distribution distance,
//! cluster-entropy diversity, temporal variance, responsiveness
//! correlation and a lip/audio synchrony proxy.

pub mod frechet;
pub mod kmeans;
pub mod oracle;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::datamodel::{AudioFeatureSeq, MotionLatentCodec, MotionSeq, MotionSplit, SpatialLatent, decode_latent};
use crate::error::{Error, Result};
use crate::math;

pub use frechet::frechet_distance;
pub use kmeans::{KMeans, KMeansConfig};

/// Per-split mean squared error, averaged over time and dims.
pub fn motion_mse(gen: &MotionSeq, gt: &MotionSeq) -> Result<(f64, f64)> {
    if gen.frames() != gt.frames() {
        return Err(Error::Invalid(format!("length mismatch: {} vs {}", gen.frames(), gt.frames())));
    }
    let split = |r: Range<usize>| {
        let mut s = 0.0;
        for t in 0..gen.frames() {
            let (a, b) = (gen.data().row(t), gt.data().row(t));
            for d in r.clone() {
                s += (a[d] - b[d]) * (a[d] - b[d]);
            }
        }
        s / (gen.frames() * r.len()) as f64
    };
    Ok((split(MotionSplit::Expression.range()), split(MotionSplit::Pose.range())))
}

/// Frames of `split` pooled across sequences, row-major.
pub fn pooled_frames(set: &[MotionSeq], split: MotionSplit) -> Vec<f64> {
    let r = split.range();
    let mut out = Vec::new();
    for m in set {
        for t in 0..m.frames() {
            out.extend_from_slice(&m.data().row(t)[r.clone()]);
        }
    }
    out
}

/// Frechet distance between pooled generated and reference frames.
pub fn fd(gen: &[MotionSeq], gt: &[MotionSeq], split: MotionSplit) -> Result<f64> {
    let dim = split.range().len();
    frechet_distance(&pooled_frames(gen, split), &pooled_frames(gt, split), dim)
}

/// Shannon entropy in bits of a histogram.
pub fn entropy_bits(hist: &[usize]) -> f64 {
    let n: usize = hist.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &c in hist {
        if c > 0 {
            let p = c as f64 / n as f64;
            h -= p * math::log2(p);
        }
    }
    h.max(0.0)
}

/// Fits clusters on the reference frames and returns the entropy of the
/// generated frames' assignments with the fitted model.
pub fn sid(gen: &[MotionSeq], gt: &[MotionSeq], split: MotionSplit, cfg: &KMeansConfig) -> Result<(f64, KMeans)> {
    let dim = split.range().len();
    let model = kmeans::fit(&pooled_frames(gt, split), dim, cfg)?;
    let hist = model.histogram(&pooled_frames(gen, split));
    Ok((entropy_bits(&hist), model))
}

/// Unbiased temporal variance per dim, averaged over dims.
pub fn sequence_variance(m: &MotionSeq, dims: Range<usize>) -> Result<f64> {
    let t = m.frames();
    if t < 2 {
        return Err(Error::Invalid(format!("variance needs 2 frames, got {t}")));
    }
    let mut total = 0.0;
    for d in dims.clone() {
        let x = m.channel(d);
        let mu = math::mean(&x);
        total += x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (t - 1) as f64;
    }
    Ok(total / dims.len() as f64)
}

/// Mean over sequences of [`sequence_variance`].
pub fn temporal_variance(set: &[MotionSeq], dims: Range<usize>) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Invalid(String::from("empty sequence set")));
    }
    let mut s = 0.0;
    for m in set {
        s += sequence_variance(m, dims.clone())?;
    }
    Ok(s / set.len() as f64)
}

/// How per-dim correlations are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PccAggregation {
    /// Correlate each dim separately, then average.
    #[default]
    PerDim,
    /// Correlate the dim-averaged signals.
    DimAveraged,
}

impl PccAggregation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per-dim" => Ok(Self::PerDim),
            "dim-averaged" => Ok(Self::DimAveraged),
            _ => Err(Error::Unknown { kind: "pcc aggregation", name: s.into() }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rpcc {
    pub value: f64,
    pub pcc_gt: f64,
    pub pcc_gen: f64,
    /// Dims left out because one of the three signals was constant.
    pub skipped: usize,
}

/// `|pcc(gt, user) - pcc(gen, user)|` over `dims`.
pub fn rpcc_with(gen: &MotionSeq, gt: &MotionSeq, user: &MotionSeq, dims: Range<usize>, agg: PccAggregation) -> Result<Rpcc> {
    if gen.frames() != gt.frames() || gt.frames() != user.frames() {
        return Err(Error::Invalid(format!(
            "length mismatch: gen {}, gt {}, user {}",
            gen.frames(),
            gt.frames(),
            user.frames()
        )));
    }
    match agg {
        PccAggregation::PerDim => {
            let (mut sg, mut sa, mut used) = (0.0, 0.0, 0);
            for d in dims.clone() {
                let u = user.channel(d);
                let (Some(a), Some(b)) = (math::pearson(&gt.channel(d), &u), math::pearson(&gen.channel(d), &u)) else {
                    continue;
                };
                sg += a;
                sa += b;
                used += 1;
            }
            if used == 0 {
                return Err(Error::Invalid(String::from("every dim has zero temporal variance")));
            }
            let (pcc_gt, pcc_gen) = (sg / used as f64, sa / used as f64);
            Ok(Rpcc { value: (pcc_gt - pcc_gen).abs(), pcc_gt, pcc_gen, skipped: dims.len() - used })
        }
        PccAggregation::DimAveraged => {
            let avg = |m: &MotionSeq| -> Vec<f64> {
                (0..m.frames()).map(|t| math::mean(&m.data().row(t)[dims.clone()])).collect()
            };
            let u = avg(user);
            match (math::pearson(&avg(gt), &u), math::pearson(&avg(gen), &u)) {
                (Some(a), Some(b)) => Ok(Rpcc { value: (a - b).abs(), pcc_gt: a, pcc_gen: b, skipped: 0 }),
                _ => Err(Error::Invalid(String::from("dim-averaged signal has zero temporal variance"))),
            }
        }
    }
}

/// Per-dim rPCC over the expression dims.
pub fn rpcc(gen: &MotionSeq, gt: &MotionSeq, user: &MotionSeq) -> Result<f64> {
    Ok(rpcc_with(gen, gt, user, MotionSplit::Expression.range(), PccAggregation::PerDim)?.value)
}

/// Minimum speaking frames for the synchrony proxy.
pub const MIN_SPEAKING_FRAMES: usize = 4;

/// Correlation over speaking frames between the jaw channel of decoded
/// motion and the per-frame audio energy.
pub fn lipsync_from_motion(motion: &MotionSeq, energy: &[f64], speaking: &[bool]) -> Result<f64> {
    if energy.len() != motion.frames() || speaking.len() != motion.frames() {
        return Err(Error::Invalid(format!(
            "{} motion frames, {} energy values, {} speaking flags",
            motion.frames(),
            energy.len(),
            speaking.len()
        )));
    }
    let idx: Vec<usize> = (0..speaking.len()).filter(|&i| speaking[i]).collect();
    if idx.len() < MIN_SPEAKING_FRAMES {
        return Err(Error::Invalid(format!("{} speaking frames, need {MIN_SPEAKING_FRAMES}", idx.len())));
    }
    let lip = motion.channel(0);
    let a: Vec<f64> = idx.iter().map(|&i| lip[i]).collect();
    let e: Vec<f64> = idx.iter().map(|&i| energy[i]).collect();
    math::pearson(&a, &e).ok_or_else(|| Error::Invalid(String::from("lip channel or audio energy is constant over speaking frames")))
}

/// [`lipsync_from_motion`] on a decoded latent clip, using the RMS of each
/// frame's centre audio slot as the energy.
pub fn lipsync_proxy(
    latent: &SpatialLatent,
    audio: &AudioFeatureSeq,
    codec: &MotionLatentCodec,
    speaking: &[bool],
) -> Result<f64> {
    let motion = decode_latent(latent, codec)?;
    lipsync_from_motion(&motion, &audio.center_rms(), speaking)
}

/// Inputs for one evaluated clip.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub gen: MotionSeq,
    pub gt: MotionSeq,
    pub user: MotionSeq,
    /// Audio energy and speaking flags, when synchrony is evaluated.
    pub lip: Option<(Vec<f64>, Vec<bool>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub k_exp: usize,
    pub k_pose: usize,
    pub kmeans_seed: u64,
    pub restarts: usize,
    pub iterations: usize,
    pub aggregation: PccAggregation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k_exp: 15, k_pose: 9, kmeans_seed: 0x5eed, restarts: 20, iterations: 300, aggregation: PccAggregation::PerDim }
    }
}

impl EvalConfig {
    pub fn kmeans(&self, k: usize) -> KMeansConfig {
        KMeansConfig { k, restarts: self.restarts, iterations: self.iterations, seed: self.kmeans_seed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMetrics {
    pub id: String,
    pub mse_exp: f64,
    pub mse_pose: f64,
    pub var: f64,
    pub rpcc: Option<f64>,
    pub lipsync_pcc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub fd_exp: f64,
    pub fd_pose: f64,
    pub sid_exp: f64,
    pub sid_pose: f64,
    /// `sid_exp + sid_pose`.
    pub sid_sum: f64,
    pub var_exp: f64,
    pub var_pose: f64,
    /// Temporal variance over all motion dims.
    pub var_mean: f64,
    pub mse_exp: f64,
    pub mse_pose: f64,
    /// Mean over clips where it is defined.
    pub rpcc: f64,
    pub lipsync_pcc: Option<f64>,
    pub rank_warning: bool,
    pub sequences: Vec<SequenceMetrics>,
}

impl MetricReport {
    /// Scalar fields by name, in a fixed order.
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        let mut v = alloc::vec![
            ("fd_exp", self.fd_exp),
            ("fd_pose", self.fd_pose),
            ("sid_exp", self.sid_exp),
            ("sid_pose", self.sid_pose),
            ("sid_sum", self.sid_sum),
            ("var_exp", self.var_exp),
            ("var_pose", self.var_pose),
            ("var_mean", self.var_mean),
            ("mse_exp", self.mse_exp),
            ("mse_pose", self.mse_pose),
            ("rpcc", self.rpcc),
        ];
        v.push(("lipsync_pcc", self.lipsync_pcc.unwrap_or(f64::NAN)));
        v
    }
}

/// Full metric suite over a set of clips.
pub fn evaluate(items: &[EvalItem], cfg: &EvalConfig) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::Invalid(String::from("nothing to evaluate")));
    }
    let gen: Vec<MotionSeq> = items.iter().map(|i| i.gen.clone()).collect();
    let gt: Vec<MotionSeq> = items.iter().map(|i| i.gt.clone()).collect();
    let mut sequences = Vec::with_capacity(items.len());
    let (mut rp, mut rp_n, mut lip, mut lip_n) = (0.0, 0, 0.0, 0);
    for it in items {
        let (mse_exp, mse_pose) = motion_mse(&it.gen, &it.gt)?;
        let r = rpcc_with(&it.gen, &it.gt, &it.user, MotionSplit::Expression.range(), cfg.aggregation).ok().map(|r| r.value);
        if let Some(v) = r {
            rp += v;
            rp_n += 1;
        }
        let l = match &it.lip {
            Some((e, s)) => lipsync_from_motion(&it.gen, e, s).ok(),
            None => None,
        };
        if let Some(v) = l {
            lip += v;
            lip_n += 1;
        }
        sequences.push(SequenceMetrics {
            id: it.id.clone(),
            mse_exp,
            mse_pose,
            var: sequence_variance(&it.gen, MotionSplit::All.range())?,
            rpcc: r,
            lipsync_pcc: l,
        });
    }
    if rp_n == 0 {
        return Err(Error::Invalid(String::from("rPCC undefined for every clip")));
    }
    let n = items.len() as f64;
    let frames: usize = gen.iter().map(|m| m.frames()).sum();
    let (sid_exp, _) = sid(&gen, &gt, MotionSplit::Expression, &cfg.kmeans(cfg.k_exp))?;
    let (sid_pose, _) = sid(&gen, &gt, MotionSplit::Pose, &cfg.kmeans(cfg.k_pose))?;
    Ok(MetricReport {
        fd_exp: fd(&gen, &gt, MotionSplit::Expression)?,
        fd_pose: fd(&gen, &gt, MotionSplit::Pose)?,
        sid_exp,
        sid_pose,
        sid_sum: sid_exp + sid_pose,
        var_exp: temporal_variance(&gen, MotionSplit::Expression.range())?,
        var_pose: temporal_variance(&gen, MotionSplit::Pose.range())?,
        var_mean: temporal_variance(&gen, MotionSplit::All.range())?,
        mse_exp: sequences.iter().map(|s| s.mse_exp).sum::<f64>() / n,
        mse_pose: sequences.iter().map(|s| s.mse_pose).sum::<f64>() / n,
        rpcc: rp / rp_n as f64,
        lipsync_pcc: (lip_n > 0).then(|| lip / lip_n as f64),
        rank_warning: frechet::rank_deficient(frames, MotionSplit::Expression.range().len()),
        sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn seq(t: usize, f: impl Fn(usize, usize) -> f64) -> MotionSeq {
        MotionSeq::new(Tensor::from_fn(&[t, 56], |i| f(i / 56, i % 56))).unwrap()
    }

    #[test]
    fn mse_constant_offset() {
        let gt = seq(5, |t, d| (t * d) as f64 * 0.1);
        let gen = seq(5, |t, d| (t * d) as f64 * 0.1 + if d < 50 { 0.3 } else { 0.0 });
        let (e, p) = motion_mse(&gen, &gt).unwrap();
        assert!((e - 0.09).abs() < 1e-12);
        assert_eq!(p, 0.0);
        assert_eq!(motion_mse(&gt, &gt).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn entropy_endpoints() {
        assert_eq!(entropy_bits(&[0, 12, 0]), 0.0);
        assert!((entropy_bits(&[3; 15]) - math::log2(15.0)).abs() < 1e-12);
    }

    #[test]
    fn rpcc_bounds() {
        let user = seq(20, |t, d| math::sin(t as f64 * 0.7 + d as f64));
        let neg = seq(20, |t, d| -math::sin(t as f64 * 0.7 + d as f64));
        assert_eq!(rpcc(&user, &user, &user).unwrap(), 0.0);
        assert!((rpcc(&neg, &user, &user).unwrap() - 2.0).abs() < 1e-12);
        let flat = seq(20, |_, _| 1.0);
        assert!(rpcc(&flat, &flat, &user).is_err());
    }

    #[test]
    fn lipsync_exact_envelope() {
        let env: Vec<f64> = (0..10).map(|t| math::sin(t as f64) + 2.0).collect();
        let m = seq(10, |t, d| if d == 0 { env[t] } else { 0.0 });
        let speak = alloc::vec![true; 10];
        assert!((lipsync_from_motion(&m, &env, &speak).unwrap() - 1.0).abs() < 1e-12);
        let flat = seq(10, |_, _| 0.5);
        assert!(lipsync_from_motion(&flat, &env, &speak).is_err());
        let mut few = alloc::vec![false; 10];
        few[..3].fill(true);
        assert!(lipsync_from_motion(&m, &env, &few).is_err());
    }

    #[test]
    fn kmeans_rejects_too_few_distinct() {
        let pts = alloc::vec![1.0, 1.0, 1.0, 2.0];
        assert!(kmeans::fit(&pts, 1, &KMeansConfig::new(3)).is_err());
        assert!(kmeans::fit(&pts, 1, &KMeansConfig::new(2)).is_ok());
    }
}
