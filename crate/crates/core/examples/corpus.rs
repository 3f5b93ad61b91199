//! Generate a small synthetic corpus on disk, reload it, and check the
//! frame decomposition against the stored ground truth.
//!
//! cargo run --release --example corpus

use emodiff::harness::{lip_noise_floor, metric_blink_rate};
use emodiff::seqio::{generate_corpus, Corpus, CorpusConfig, Split, MANIFEST_FILE};

fn main() -> emodiff::Result<()> {
    let dir = std::env::temp_dir().join("emodiff-example-corpus");
    let config = CorpusConfig {
        samples: 128,
        ..CorpusConfig::default()
    };
    let manifest = generate_corpus(&config, &dir)?;
    println!(
        "{} clips, {} channels at {} fps, written to {}",
        manifest.samples.len(),
        config.channels(),
        config.fps,
        dir.display()
    );

    let corpus = Corpus::load(dir.join(MANIFEST_FILE))?;
    let clip = &corpus.samples[0];
    let gt = corpus.manifest.ground_truth(0)?;
    let clean = &gt.content_part + &gt.style_part + &gt.blink_part;
    let worst = (&clip.motion.frames - &clean).iter().fold(0.0f32, |m, v| m.max(v.abs()));
    println!("clip 0: class {:?}, max |frames - parts| = {worst:.4}", clip.motion.emotion_class);

    let blinks: f64 = corpus.samples.iter().map(|s| metric_blink_rate(&s.motion)).sum::<f64>() / corpus.samples.len() as f64;
    println!("mean blink rate {blinks:.3} events/s");
    let test = corpus.split_indices(Split::Test);
    println!("lip noise floor on {} test clips: {:.4}", test.len(), lip_noise_floor(&corpus, &test)?);
    Ok(())
}
