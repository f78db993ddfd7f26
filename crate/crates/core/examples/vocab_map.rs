//! Aligning two tokenizers and mapping base logits into the value vocabulary.

mod common;

use deltalogit::tokenizer::Tokenizer;
use deltalogit::vocab_map::{edit_distance, overlap_ratio, Sparsify, VocabMap};
use deltalogit::Result;

fn main() -> Result<()> {
    let toy = common::toy("mixed")?;
    let texts: Vec<String> = toy.train.iter().map(|d| format!("{} {}", d.prompt, d.response)).collect();
    let other = Tokenizer::train_bpe(&toy.plain[1000..], 100, 7)?;
    println!("edit distance kitten/sitting = {}", edit_distance("kitten", "sitting"));

    for sp in [Sparsify::MinWeight(0.05), Sparsify::TopK(1)] {
        let map = VocabMap::build(&other, &toy.tok, &texts, sp)?;
        println!(
            "{sp:?}: {}x{}, {} entries, {} unobserved, overlap {:.3}",
            map.rows(),
            map.cols(),
            map.nnz(),
            map.unobserved().len(),
            overlap_ratio(&map, &other, &toy.tok, &texts)
        );
    }
    let map = VocabMap::build(&other, &toy.tok, &texts, Sparsify::default())?;
    for line in map.to_text(Some(&other), Some(&toy.tok)).lines().take(12) {
        println!("  {line}");
    }

    let mut z = vec![0.0f32; map.rows()];
    let id = other.encode("sky")[0];
    z[id as usize] = 5.0;
    let mapped = map.map_logits(&z)?;
    let best = deltalogit::compose::argmax(&mapped);
    println!(
        "logit spike on {:?} lands on {:?}",
        other.vocab().token(id).unwrap_or("?"),
        toy.tok.vocab().token(best).unwrap_or("?")
    );
    let same = VocabMap::build(&toy.tok, &toy.tok, &texts, Sparsify::default())?;
    println!("identical tokenizers overlap {:.3}", overlap_ratio(&same, &toy.tok, &toy.tok, &texts));
    Ok(())
}
