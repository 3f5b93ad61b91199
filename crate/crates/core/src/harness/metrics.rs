use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seqio::{ChannelMap, Corpus, ExpressionSequence, Split};

pub const BLINK_THRESHOLD: f32 = 0.5;

/// Metric analogs for one generated clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sample: usize,
    pub lip_dist: f64,
    pub au_std: f64,
    pub blink_rate: f64,
    pub emo_sim: f64,
    pub weight: f64,
    pub seed: u64,
}

impl MetricReport {
    pub const NAMES: [&'static str; 4] = ["lip_dist", "au_std", "blink_rate", "emo_sim"];

    pub fn values(&self) -> [f64; 4] {
        [self.lip_dist, self.au_std, self.blink_rate, self.emo_sim]
    }
}

/// Mean over frames of the L2 distance across lip channels.
pub fn metric_lip_dist(gen: &ExpressionSequence, reference: &Array2<f32>) -> Result<f64> {
    if gen.frames.dim() != reference.dim() {
        return Err(Error::invalid(format!(
            "generated clip {:?} and reference {:?} are not aligned",
            gen.frames.dim(),
            reference.dim()
        )));
    }
    let lip = &gen.channel_map.lip;
    let total: f64 = (0..gen.len())
        .map(|t| {
            lip.iter()
                .map(|&c| (gen.frames[[t, c]] as f64 - reference[[t, c]] as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / gen.len() as f64)
}

/// Mean over upper-face channels of the population std over frames.
pub fn metric_au_std(gen: &ExpressionSequence) -> f64 {
    let t = gen.len() as f64;
    let ch = &gen.channel_map.upper_face;
    if ch.is_empty() || gen.len() < 2 {
        return 0.0;
    }
    ch.iter()
        .map(|&c| {
            let col = gen.frames.column(c);
            let mean = col.iter().map(|v| *v as f64).sum::<f64>() / t;
            (col.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / t).sqrt()
        })
        .sum::<f64>()
        / ch.len() as f64
}

/// Rising edges above 0.5 on the blink channel per second. A clip that
/// opens mid-blink counts that blink.
pub fn metric_blink_rate(gen: &ExpressionSequence) -> f64 {
    let col = gen.frames.column(gen.channel_map.blink_index());
    let mut events = 0usize;
    let mut prev = false;
    for v in col.iter() {
        let high = *v > BLINK_THRESHOLD;
        if high && !prev {
            events += 1;
        }
        prev = high;
    }
    events as f64 / gen.duration_secs()
}

/// Held-out emotion probe: nearest class centroid over the temporal means of
/// the upper-face channels, centred on the mean of the centroids. Fit on
/// ground-truth clips only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionProbe {
    pub upper_face: Vec<usize>,
    pub center: Vec<f64>,
    /// One centred centroid per class.
    pub centroids: Vec<Vec<f64>>,
}

impl EmotionProbe {
    pub fn fit(corpus: &Corpus, split: Split) -> Result<Self> {
        let idx = corpus.split_indices(split);
        let k = corpus.manifest.classes();
        let upper = corpus.manifest.channel_map.upper_face.clone();
        let mut sums = vec![vec![0.0; upper.len()]; k];
        let mut counts = vec![0usize; k];
        for &i in &idx {
            let c = corpus.class_of(i);
            let m = temporal_means(&corpus.samples[i].motion.frames, &upper);
            for (s, v) in sums[c].iter_mut().zip(m) {
                *s += v;
            }
            counts[c] += 1;
        }
        if counts.contains(&0) {
            return Err(Error::invalid("probe needs every class present in the fitting split"));
        }
        let raw: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, n)| s.iter().map(|v| v / *n as f64).collect())
            .collect();
        let center: Vec<f64> = (0..upper.len())
            .map(|j| raw.iter().map(|c| c[j]).sum::<f64>() / k as f64)
            .collect();
        let centroids = raw
            .iter()
            .map(|c| c.iter().zip(&center).map(|(a, b)| a - b).collect())
            .collect();
        Ok(Self {
            upper_face: upper,
            center,
            centroids,
        })
    }

    pub fn classes(&self) -> usize {
        self.centroids.len()
    }

    /// Centred temporal-mean embedding of a clip.
    pub fn embed(&self, frames: &Array2<f32>) -> Vec<f64> {
        temporal_means(frames, &self.upper_face)
            .into_iter()
            .zip(&self.center)
            .map(|(a, b)| a - b)
            .collect()
    }

    pub fn classify(&self, frames: &Array2<f32>) -> usize {
        let e = self.embed(frames);
        let mut best = (f64::INFINITY, 0);
        for (k, c) in self.centroids.iter().enumerate() {
            let d: f64 = e.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    /// SHA-256 over the probe's parameters, comparable with checkpoint tensor hashes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.centroids {
            for v in c {
                h.update(v.to_le_bytes());
            }
        }
        for v in &self.center {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn temporal_means(frames: &Array2<f32>, cols: &[usize]) -> Vec<f64> {
    let t = frames.nrows().max(1) as f64;
    cols.iter()
        .map(|&c| frames.column(c).iter().map(|v| *v as f64).sum::<f64>() / t)
        .collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (d / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Cosine between the probe embedding of `gen` and the centroid of `target_class`.
pub fn metric_emo_sim(gen: &ExpressionSequence, target_class: usize, probe: Option<&EmotionProbe>) -> Result<f64> {
    let probe = probe.ok_or_else(|| Error::Config("emotion similarity needs a fitted probe".into()))?;
    let centroid = probe
        .centroids
        .get(target_class)
        .ok_or_else(|| Error::invalid(format!("class {target_class} unknown to the probe")))?;
    if gen.channel_map.upper_face != probe.upper_face {
        return Err(Error::invalid("clip channel layout differs from the probe's"));
    }
    Ok(cos(&probe.embed(&gen.frames), centroid))
}

/// Ground-truth lip floor: `metric_lip_dist` of each clip against its own content part.
pub fn lip_noise_floor(corpus: &Corpus, indices: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in indices {
        let gt = corpus.manifest.ground_truth(i)?;
        total += metric_lip_dist(&corpus.samples[i].motion, &gt.content_part)?;
    }
    Ok(total / indices.len().max(1) as f64)
}

pub(crate) fn sequence_like(frames: Array2<f32>, map: &ChannelMap, fps: f64, subject: &str, class: Option<usize>) -> Result<ExpressionSequence> {
    ExpressionSequence::new(frames, fps, map.clone(), subject.to_string(), class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, rng_from};
    use crate::seqio::CorpusConfig;

    fn seq(frames: Array2<f32>, map: ChannelMap) -> ExpressionSequence {
        ExpressionSequence::new(frames, 25.0, map, "S00", None).unwrap()
    }

    fn corpus() -> Corpus {
        Corpus::generate(&CorpusConfig {
            seed: 2,
            classes: 4,
            samples: 160,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn lip_dist_examples() {
        let c = corpus();
        let idx = c.split_indices(Split::Test);
        let sigma = c.manifest.config.noise_sigma;
        for &i in &idx[..5] {
            let gt = c.manifest.ground_truth(i).unwrap();
            let own = metric_lip_dist(&c.samples[i].motion, &gt.content_part).unwrap();
            assert!(own <= 5.0 * sigma * (c.manifest.channel_map.lip.len() as f64).sqrt());
            // zeros → mean L2 norm of the lip rows
            let zeros = seq(Array2::zeros(gt.content_part.dim()), c.manifest.channel_map.clone());
            let expect: f64 = (0..gt.content_part.nrows())
                .map(|t| {
                    c.manifest.channel_map.lip.iter().map(|&ch| (gt.content_part[[t, ch]] as f64).powi(2)).sum::<f64>().sqrt()
                })
                .sum::<f64>()
                / gt.content_part.nrows() as f64;
            assert!((metric_lip_dist(&zeros, &gt.content_part).unwrap() - expect).abs() < 1e-9);
            // reversing time breaks alignment
            let mut rev = c.samples[i].motion.clone();
            rev.frames.invert_axis(ndarray::Axis(0));
            assert!(metric_lip_dist(&rev, &gt.content_part).unwrap() > own);
        }
        let short = seq(Array2::zeros((3, 53)), ChannelMap::flame_default());
        assert!(metric_lip_dist(&short, &Array2::zeros((4, 53))).is_err());
    }

    #[test]
    fn au_std_examples() {
        let map = ChannelMap::flame_default();
        assert_eq!(metric_au_std(&seq(Array2::from_elem((64, 53), 0.3), map.clone())), 0.0);
        let mut rng = rng_from(3);
        let mut total = 0.0;
        for _ in 0..20 {
            let f = Array2::from_shape_vec((64, 53), normal_vec(&mut rng, 64 * 53, 1.0)).unwrap();
            total += metric_au_std(&seq(f, map.clone()));
        }
        assert!((total / 20.0 - 1.0).abs() < 0.05);

        let c = corpus();
        for &i in c.split_indices(Split::Train).iter().take(8) {
            let style = &c.manifest.class_styles[c.class_of(i)];
            let sigma = c.manifest.config.noise_sigma;
            let expect: f64 = style
                .amplitude
                .iter()
                .map(|a| ((*a as f64).powi(2) / 2.0 + sigma * sigma).sqrt())
                .sum::<f64>()
                / style.amplitude.len() as f64;
            assert!((metric_au_std(&c.samples[i].motion) - expect).abs() < 0.01);
        }
    }

    #[test]
    fn blink_examples() {
        let map = ChannelMap::flame_default();
        let b = map.blink_index();
        assert_eq!(metric_blink_rate(&seq(Array2::zeros((250, 53)), map.clone())), 0.0);
        let mut f = Array2::zeros((250, 53));
        for start in [10, 100, 200] {
            for t in start..start + 5 {
                f[[t, b]] = 1.0;
            }
        }
        assert!((metric_blink_rate(&seq(f, map)) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn probe_calibration() {
        let c = corpus();
        let probe = EmotionProbe::fit(&c, Split::Train).unwrap();
        for &i in &c.split_indices(Split::Test) {
            let k = c.class_of(i);
            let m = &c.samples[i].motion;
            assert!(metric_emo_sim(m, k, Some(&probe)).unwrap() >= 0.98);
            for j in (0..probe.classes()).filter(|j| *j != k) {
                assert!(metric_emo_sim(m, j, Some(&probe)).unwrap() <= 0.5);
            }
            assert_eq!(probe.classify(&m.frames), k);
        }
        assert!(matches!(metric_emo_sim(&c.samples[0].motion, 0, None), Err(Error::Config(_))));
    }
}
