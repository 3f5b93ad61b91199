//! Metrics on oracle clips: ground truth scores near the noise floor and
//! high on the emotion probe, an all-zero clip does not.
//!
//! cargo run --release --example metrics

use emodiff::harness::{metric_au_std, metric_blink_rate, metric_emo_sim, metric_lip_dist, EmotionProbe};
use emodiff::seqio::{Corpus, CorpusConfig, ExpressionSequence, Split};

fn main() -> emodiff::Result<()> {
    let corpus = Corpus::generate(&CorpusConfig {
        samples: 128,
        ..CorpusConfig::default()
    })?;
    let probe = EmotionProbe::fit(&corpus, Split::Train)?;
    let i = corpus.split_indices(Split::Test)[0];
    let clip = &corpus.samples[i].motion;
    let class = clip.emotion_class.unwrap();
    let reference = corpus.manifest.ground_truth(i)?.content_part;

    let mut zeros: ExpressionSequence = clip.clone();
    zeros.frames.fill(0.0);
    for (name, seq) in [("ground truth", clip), ("zeros", &zeros)] {
        println!(
            "{name:>12}: lip_dist {:.4}, au_std {:.4}, blink {:.2}/s, emo_sim {:.3}",
            metric_lip_dist(seq, &reference)?,
            metric_au_std(seq),
            metric_blink_rate(seq),
            metric_emo_sim(seq, class, Some(&probe))?
        );
    }
    Ok(())
}
