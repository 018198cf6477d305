// Train the byte-level BPE and build the prompt and target streams the
// decoder sees.

use longrep::corpus::{generate_corpus, GeneratorConfig, SplitSizes};
use longrep::pipeline::train_vocabulary;
use longrep::tokenizer::{assemble_prompt, assemble_target, split_sections, StreamMode, TokenStream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = GeneratorConfig { patients: SplitSizes { train: 80, validation: 0, test: 0 }, image_side: 16, ..Default::default() };
    let corpus = generate_corpus(&cfg)?;
    let vocab = train_vocabulary(&corpus, 320)?;
    println!("vocabulary: {} ids ({} merges)", vocab.size(), vocab.merges().len());

    let patient = corpus.train.iter().find(|p| p.studies.len() > 1).expect("a patient with two studies");
    let (prev, cur) = (&patient.studies[0], &patient.studies[1]);
    let ids = vocab.encode(&cur.findings);
    println!("{} bytes of findings -> {} tokens", cur.findings.len(), ids.len());
    assert_eq!(vocab.decode(&ids)?, cur.findings);

    let prompt = assemble_prompt(Some(&prev.findings), Some(&prev.impression), &vocab, 512)?;
    let target = assemble_target(&cur.findings, &cur.impression, &vocab, 512, StreamMode::Training)?;
    let stream = TokenStream::join(&prompt, &target);
    println!("prompt {} tokens, target {} tokens", prompt.len(), target.len());
    let sections: Vec<String> = stream.section_ids.iter().map(|s| s.to_string()).collect();
    println!("section ids: {}", sections.join(""));

    let first_visit = assemble_prompt(None, None, &vocab, 512)?;
    let names: Vec<&str> = first_visit.token_ids.iter().filter_map(|&t| vocab.specials().name(t)).collect();
    println!("prompt without a previous study: {}", names.join(" "));

    // Drop the trailing [EOS] and recover the two sections.
    let generated = &target.token_ids[..target.len() - 1];
    let report = split_sections(generated, &vocab);
    assert_eq!(report.findings, cur.findings);
    println!("recovered impression: {} (missing [SEP]: {})", report.impression, report.flags.missing_sep);
    Ok(())
}
