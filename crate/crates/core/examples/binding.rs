//! Train the multimodal emotion binding and print cross-modal retrieval.
//!
//! cargo run --release --example binding

use emodiff::binding::{evaluate_retrieval, train_binding, BindingTrainConfig, Modality};
use emodiff::seqio::{Corpus, CorpusConfig, Split};

fn main() -> emodiff::Result<()> {
    let corpus = Corpus::generate(&CorpusConfig {
        samples: 256,
        ..CorpusConfig::default()
    })?;
    let cfg = BindingTrainConfig {
        epochs: 15,
        ..BindingTrainConfig::default()
    };
    let (bank, log) = train_binding(&corpus, &cfg)?;
    println!("alignment loss per epoch: {:?}", log.epoch_loss);

    let table = evaluate_retrieval(&bank, &corpus, Split::Test)?;
    println!("top-1 emotion retrieval on the test split (rows query, columns gallery):");
    for q in Modality::ALL {
        let row: Vec<String> = Modality::ALL.iter().map(|g| format!("{:.2}", table.get(q, *g))).collect();
        println!("  {}: {}", q.name(), row.join("  "));
    }
    Ok(())
}
