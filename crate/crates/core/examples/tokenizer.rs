//! Byte-pair tokenizer: training, round trips and persistence.

mod common;

use deltalogit::tokenizer::Tokenizer;
use deltalogit::Result;

fn main() -> Result<()> {
    let toy = common::toy("mixed")?;
    let tok = &toy.tok;
    println!("vocabulary {} tokens, {} merges, checksum {}", tok.vocab_size(), tok.merges().len(), tok.checksum());
    for text in ["Q: color of sky", "R: 4 7 1", "the cat is here"] {
        let ids = tok.encode(text);
        let pieces: Vec<&str> = ids.iter().map(|&i| tok.vocab().token(i).unwrap_or("?")).collect();
        println!("{text:?} -> {ids:?} {pieces:?} -> {:?}", tok.decode(&ids)?);
    }
    let enc = tok.encode_with_stats("zebra!");
    println!("unseen characters: {} unknown of {} tokens", enc.unknown, enc.ids.len());

    let dir = std::env::temp_dir().join("deltalogit-tokenizer-example");
    std::fs::create_dir_all(&dir).ok();
    let path = dir.join("tok.json");
    tok.save(&path)?;
    let back = Tokenizer::load(&path)?;
    println!("reloaded checksum matches: {}", back.checksum() == tok.checksum());
    Ok(())
}
