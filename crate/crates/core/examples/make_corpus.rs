//! Writes a small random corpus for trying the command-line tool.
//!
//! ```text
//! cargo run --example make_corpus -- corpus 4
//! ```

use perfdiff::synthetic::{write_corpus, CorpusOptions};

fn main() -> perfdiff::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "corpus".into());
    let pieces = args.next().and_then(|n| n.parse().ok()).unwrap_or(2);
    let manifest = write_corpus(
        dir.as_ref(),
        &CorpusOptions {
            pieces,
            ..Default::default()
        },
    )?;
    println!("{}", manifest.display());
    Ok(())
}
