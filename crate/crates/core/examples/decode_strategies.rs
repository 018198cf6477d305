// Greedy, beam and top-k decoding with the KV-cached inference model.

use longrep::corpus::{generate_corpus, GeneratorConfig, SplitSizes};
use longrep::decoding::{generate_report, DecodeConfig};
use longrep::model::{encode_images, init_model, prepare_images, InferenceModel, ModelConfig};
use longrep::pipeline::train_vocabulary;
use longrep::tokenizer::{assemble_prompt, split_sections};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = generate_corpus(&GeneratorConfig { patients: SplitSizes { train: 20, validation: 0, test: 0 }, image_side: 24, ..Default::default() })?;
    let vocab = train_vocabulary(&corpus, 280)?;
    let cfg = ModelConfig { d_model: 16, layers: 1, heads: 2, ff_width: 32, vocab_size: vocab.size(), image_side: 16, patch_size: 8, encoder_width: 12, ..Default::default() };
    // Untrained weights: the text is noise, but the decoders' contracts hold.
    let state = init_model(&cfg)?;
    let model = InferenceModel::new(&state);
    let study = &corpus.train[0].studies[0];
    let enc = encode_images(&prepare_images(&study.images, cfg.image_side, false, 0), &state)?;
    let prompt = assemble_prompt(None, None, &vocab, 32)?;

    let cap = 24;
    let greedy = generate_report(&model, &enc, &prompt, vocab.specials(), &DecodeConfig { max_new_tokens: cap, ..DecodeConfig::greedy() })?;
    let beam1 = generate_report(&model, &enc, &prompt, vocab.specials(), &DecodeConfig { max_new_tokens: cap, ..DecodeConfig::beam(1) })?;
    assert_eq!(greedy.ids, beam1.ids);
    let beam4 = generate_report(&model, &enc, &prompt, vocab.specials(), &DecodeConfig { max_new_tokens: cap, ..DecodeConfig::beam(4) })?;
    println!("greedy log p {:.3}, beam-4 log p {:.3}", greedy.log_prob, beam4.log_prob);

    let sample = |seed| generate_report(&model, &enc, &prompt, vocab.specials(), &DecodeConfig { max_new_tokens: cap, ..DecodeConfig::top_k(50, seed) });
    assert_eq!(sample(3)?.ids, sample(3)?.ids);
    for seed in 0..3 {
        let out = sample(seed)?;
        let r = split_sections(&out.ids, &vocab);
        println!("top-k seed {seed}: {} tokens, finished {}, missing [SEP] {}", out.ids.len(), out.finished, r.flags.missing_sep);
    }
    Ok(())
}
