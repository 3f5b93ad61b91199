//! Train the lip-sync expert and report matched vs shifted window scores.
//!
//! cargo run --release --example sync_expert

use emodiff::losses::{evaluate_sync, train_sync_expert, SyncConfig};
use emodiff::seqio::{Corpus, CorpusConfig, Split};

fn main() -> emodiff::Result<()> {
    let corpus = Corpus::generate(&CorpusConfig {
        samples: 128,
        ..CorpusConfig::default()
    })?;
    let cfg = SyncConfig {
        epochs: 10,
        ..SyncConfig::default()
    };
    let (expert, log) = train_sync_expert(&corpus, &cfg)?;
    println!("contrastive loss per epoch: {:?}", log.epoch_loss);
    let eval = evaluate_sync(&expert, &corpus, Split::Test)?;
    println!(
        "test: matched cos {:.3}, shifted cos {:.3}, threshold {:.3}, accuracy {:.3}",
        eval.matched_mean, eval.shifted_mean, eval.threshold, eval.accuracy
    );
    Ok(())
}
