//! Train a small denoiser end to end and sample with classifier-free
//! guidance at a few weights. Takes a minute or two. Emotion responds to the
//! guidance weight already; lip accuracy needs the far longer acceptance
//! schedule.
//!
//! cargo run --release --example diffusion

use emodiff::binding::{train_binding, BindingTrainConfig, Modality};
use emodiff::harness::{evaluate_clips, evaluation_clips, summarize, train_diffusion, EmotionProbe, ModelSize, TrainConfig};
use emodiff::losses::{train_sync_expert, SyncConfig};
use emodiff::seqio::{Corpus, CorpusConfig, Split};

fn main() -> emodiff::Result<()> {
    let corpus = Corpus::generate(&CorpusConfig {
        samples: 128,
        ..CorpusConfig::default()
    })?;
    let (bank, _) = train_binding(&corpus, &BindingTrainConfig { epochs: 10, ..Default::default() })?;
    let (expert, _) = train_sync_expert(&corpus, &SyncConfig { epochs: 5, ..Default::default() })?;

    let cfg = TrainConfig {
        epochs: 60,
        lr: 2e-3,
        cosine_decay: true,
        batch_size: 8,
        model: ModelSize {
            blocks: 2,
            width: 64,
            heads: 4,
            ffn: 128,
        },
        ..TrainConfig::default()
    };
    let (model, log) = train_diffusion(&corpus, &bank, &expert, &cfg, None)?;
    let (start, end) = log.start_end(10);
    println!("loss {start:.4} -> {end:.4} over {} iterations", log.total.len());

    let probe = EmotionProbe::fit(&corpus, Split::Train)?;
    let clips = evaluation_clips(&corpus, 4);
    for weight in [0.5, 2.0] {
        let s = summarize(&evaluate_clips(&corpus, &bank, &model, &probe, Modality::L, &clips, weight, 3)?);
        println!(
            "s={weight}: lip_dist {:.3}, au_std {:.4}, emo_sim {:.3}",
            s.lip_dist, s.au_std, s.emo_sim
        );
    }
    Ok(())
}
